#pragma once

#include <cstdint>
#include <type_traits>
#include <vector>

#include "dmf/corpus.hpp"
#include "dmf/param_store.hpp"
#include "dmf/tape.hpp"
#include "dmf/tensor.hpp"

namespace dmf {

// Binds every parameter of a store onto a tape. Float bindings share the
// parameter buffers (no copies); other element types get cast copies, which
// lets tests run a model at double precision against finite differences.
// After backward(), grads() hands the optimizer one gradient vector per
// parameter in store order.
template <typename T>
class BindingT {
 public:
  enum class Mode { Train, Inference, InferenceEma };

  BindingT(Tape<T>& tape, ParamStore& store, Mode mode) : tape_(tape), store_(store) {
    ids_.reserve(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
      const Tensor<float>& src = (mode == Mode::InferenceEma) ? store.at(i).ema : store.at(i).value;
      Tensor<T> t;
      if constexpr (std::is_same_v<T, float>) {
        t = src;
      } else {
        t = Tensor<T>(src.shape);
        for (std::int64_t j = 0; j < src.numel(); ++j) t.ptr()[j] = T(src.ptr()[j]);
      }
      t.requires_grad = (mode == Mode::Train);
      ids_.push_back(tape_.leaf(std::move(t)));
    }
  }

  typename Tape<T>::Id operator()(const std::string& path) const {
    return ids_[store_.index(path)];
  }

  std::vector<const std::vector<T>*> grads() const {
    std::vector<const std::vector<T>*> out;
    out.reserve(ids_.size());
    for (auto id : ids_) out.push_back(&tape_.grad(id));
    return out;
  }

 private:
  Tape<T>& tape_;
  ParamStore& store_;
  std::vector<typename Tape<T>::Id> ids_;
};

using TapeBinding = BindingT<float>;

struct TokenBatch {
  IntTensor tokens;      // (B, S) padded with kPadId
  Tensor<float> mask;    // (B, S) 1 on semantic positions, 0 on padding
};

// Pads every sequence to pad_to columns; pad_to == 0 fits the longest sequence.
TokenBatch make_batch(const std::vector<std::vector<std::int32_t>>& seqs, int pad_to);
TokenBatch make_batch(const Corpus& corpus, const std::vector<std::int64_t>& idx, int pad_to);

// Attention key bias: 0 where mask=1, -1e9 where mask=0.
Tensor<float> key_bias_from_mask(const Tensor<float>& mask);

} // namespace dmf
