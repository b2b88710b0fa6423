#pragma once
#include <cstdint>
#include <vector>

#include "dmf/tensor.hpp"

namespace dmf {

// Define-by-run reverse-mode tape. Operations execute eagerly; when any input
// needs a gradient the op is recorded and backward() replays the records in
// reverse. A tape can be consumed by backward() exactly once. All loops run in
// a fixed order, so gradients are bit-reproducible run to run.
template <typename T>
class Tape {
 public:
  using Id = std::int32_t;
  static constexpr Id kNone = -1;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // graph inputs
  Id leaf(Tensor<T> t);               // requires_grad taken from the tensor
  Id constant(Tensor<T> t);           // never differentiated

  // primitives
  Id add(Id a, Id b);                 // equal shapes, or b's shape a suffix of a's
  Id scale(Id a, T c);
  Id matmul(Id a, Id b);              // [..., m, k] x [k, n] -> [..., m, n]
  Id layer_norm(Id x, Id gamma, Id beta, T eps);
  Id softmax(Id x);                   // over the last dim
  Id gelu(Id x);
  Id embedding(const IntTensor& ids, Id table);   // [table rows, d]; out ids.shape + [d]
  // fused masked scaled-dot-product attention; q,k,v: (B,H,S,Dh),
  // key_bias: (B,S) additive logits (0 for live keys, -1e9 for masked ones)
  Id attention(Id q, Id k, Id v, const Tensor<T>& key_bias);
  Id split_heads(Id x, int heads);    // (B,S,H*D) -> (B,H,S,D)
  Id merge_heads(Id x);               // (B,H,S,D) -> (B,S,H*D)
  Id concat_last(Id a, Id b);         // equal leading dims, concat channels
  Id stop_gradient(Id x);             // identical values, no gradient path
  Id reshape(Id x, std::vector<std::int64_t> new_shape);
  // mean of (pred-target)^2 over mask=1 positions times channels; mask: pred
  // shape minus the channel dim
  Id masked_mse(Id pred, Id target, const Tensor<T>& mask);
  // weighted mean of -log softmax(logits)[target]; logits (N,C), weights N
  Id cross_entropy(Id logits, const IntTensor& targets, const std::vector<T>& weights);
  Id masked_mean_pool(Id x, const Tensor<T>& mask);   // (B,S,D) -> (B,D)

  void backward(Id loss);             // loss must be a scalar node
  bool consumed() const { return consumed_; }

  const Tensor<T>& value(Id id) const { return nodes_[std::size_t(id)].value; }
  // gradient d(loss)/d(node); zeros if the node did not participate
  const std::vector<T>& grad(Id id);
  bool requires_grad(Id id) const { return nodes_[std::size_t(id)].needs; }
  std::size_t node_count() const { return nodes_.size(); }

 private:
  enum class Op : std::uint8_t {
    None, Add, Scale, Matmul, LayerNorm, Softmax, Gelu, Embedding, Attention,
    SplitHeads, MergeHeads, ConcatLast, Reshape, MaskedMse, CrossEntropy, MaskedMeanPool
  };

  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    bool needs = false;
    bool grad_live = false;
    Op op = Op::None;
    Id in0 = kNone, in1 = kNone, in2 = kNone;
    T cval = T(0);
    std::vector<T> aux;          // op-specific saved values (probs, stats, ...)
    std::vector<std::int32_t> iaux;
    std::vector<std::int64_t> daux;
    Tensor<T> caux;              // op-specific constant (masks, targets as weights)
  };

  Id push(Node n);
  std::vector<T>& grad_buf(Id id);
  void backprop_node(Node& n);

  std::vector<Node> nodes_;
  std::vector<T> zero_scratch_;
  bool consumed_ = false;
};

extern template class Tape<float>;
extern template class Tape<double>;

} // namespace dmf
