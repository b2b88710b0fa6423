#include "dmf/tape.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "dmf/kernels/kernels.hpp"

namespace dmf {

namespace {

template <typename T>
void transpose(const T* x, T* xt, std::int64_t r, std::int64_t c) {
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) xt[j * r + i] = x[i * c + j];
}

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument("tape: " + msg); }

} // namespace

template <typename T>
typename Tape<T>::Id Tape<T>::push(Node n) {
  nodes_.push_back(std::move(n));
  return Id(nodes_.size() - 1);
}

template <typename T>
std::vector<T>& Tape<T>::grad_buf(Id id) {
  Node& n = nodes_[std::size_t(id)];
  if (!n.grad_live) {
    n.grad.assign(std::size_t(n.value.numel()), T(0));
    n.grad_live = true;
  }
  return n.grad;
}

template <typename T>
const std::vector<T>& Tape<T>::grad(Id id) {
  return grad_buf(id);
}

template <typename T>
typename Tape<T>::Id Tape<T>::leaf(Tensor<T> t) {
  Node n;
  n.needs = t.requires_grad;
  n.value = std::move(t);
  return push(std::move(n));
}

template <typename T>
typename Tape<T>::Id Tape<T>::constant(Tensor<T> t) {
  Node n;
  t.requires_grad = false;
  n.value = std::move(t);
  return push(std::move(n));
}

template <typename T>
typename Tape<T>::Id Tape<T>::add(Id a, Id b) {
  const Tensor<T>& va = nodes_[std::size_t(a)].value;
  const Tensor<T>& vb = nodes_[std::size_t(b)].value;
  const std::int64_t na = va.numel(), nb = vb.numel();
  bool suffix = va.shape == vb.shape;
  if (!suffix) {
    // b must match a trailing slice of a's shape (broadcast over leading dims)
    if (vb.rank() > va.rank() || nb == 0 || na % nb != 0) fail("add: incompatible shapes " +
        shape_str(va.shape) + " vs " + shape_str(vb.shape));
    for (int i = 0; i < vb.rank(); ++i)
      if (vb.shape[std::size_t(vb.rank() - 1 - i)] != va.shape[std::size_t(va.rank() - 1 - i)])
        fail("add: shape " + shape_str(vb.shape) + " is not a suffix of " + shape_str(va.shape));
  }
  Node n;
  n.op = Op::Add;
  n.in0 = a;
  n.in1 = b;
  n.needs = nodes_[std::size_t(a)].needs || nodes_[std::size_t(b)].needs;
  n.value = Tensor<T>(va.shape);
  T* y = n.value.ptr();
  const T* pa = va.ptr();
  const T* pb = vb.ptr();
  for (std::int64_t i = 0; i < na; ++i) y[i] = pa[i] + pb[i % nb];
  return push(std::move(n));
}

template <typename T>
typename Tape<T>::Id Tape<T>::scale(Id a, T c) {
  const Tensor<T>& va = nodes_[std::size_t(a)].value;
  Node n;
  n.op = Op::Scale;
  n.in0 = a;
  n.cval = c;
  n.needs = nodes_[std::size_t(a)].needs;
  n.value = Tensor<T>(va.shape);
  const T* x = va.ptr();
  T* y = n.value.ptr();
  for (std::int64_t i = 0; i < va.numel(); ++i) y[i] = c * x[i];
  return push(std::move(n));
}

template <typename T>
typename Tape<T>::Id Tape<T>::matmul(Id a, Id b) {
  const Tensor<T>& va = nodes_[std::size_t(a)].value;
  const Tensor<T>& vb = nodes_[std::size_t(b)].value;
  if (va.rank() < 2 || vb.rank() != 2) fail("matmul: need [...,m,k] x [k,n]");
  const std::int64_t k = va.last_dim(), n = vb.shape[1];
  if (vb.shape[0] != k) fail("matmul: inner dims " + shape_str(va.shape) + " x " + shape_str(vb.shape));
  const std::int64_t m = va.numel() / k;
  Node nd;
  nd.op = Op::Matmul;
  nd.in0 = a;
  nd.in1 = b;
  nd.needs = nodes_[std::size_t(a)].needs || nodes_[std::size_t(b)].needs;
  std::vector<std::int64_t> out_shape(va.shape.begin(), va.shape.end() - 1);
  out_shape.push_back(n);
  nd.value = Tensor<T>(std::move(out_shape));
  kern::gemm(va.ptr(), vb.ptr(), nd.value.ptr(), int(m), int(k), int(n), false);
  return push(std::move(nd));
}

template <typename T>
typename Tape<T>::Id Tape<T>::layer_norm(Id x, Id gamma, Id beta, T eps) {
  const Tensor<T>& vx = nodes_[std::size_t(x)].value;
  const Tensor<T>& vg = nodes_[std::size_t(gamma)].value;
  const Tensor<T>& vbta = nodes_[std::size_t(beta)].value;
  const std::int64_t c = vx.last_dim();
  if (vg.numel() != c || vbta.numel() != c) fail("layer_norm: gamma/beta must have last-dim size");
  const std::int64_t r = vx.rows();
  Node n;
  n.op = Op::LayerNorm;
  n.in0 = x;
  n.in1 = gamma;
  n.in2 = beta;
  n.cval = eps;
  n.needs = nodes_[std::size_t(x)].needs || nodes_[std::size_t(gamma)].needs ||
               nodes_[std::size_t(beta)].needs;
  n.value = Tensor<T>(vx.shape);
  n.aux.resize(std::size_t(2 * r));
  kern::layernorm_rows(vx.ptr(), n.value.ptr(), n.aux.data(), n.aux.data() + r, vg.ptr(),
                       vbta.ptr(), int(r), int(c), eps);
  return push(std::move(n));
}

template <typename T>
typename Tape<T>::Id Tape<T>::softmax(Id x) {
  const Tensor<T>& vx = nodes_[std::size_t(x)].value;
  Node n;
  n.op = Op::Softmax;
  n.in0 = x;
  n.needs = nodes_[std::size_t(x)].needs;
  n.value = vx.clone();
  n.value.requires_grad = false;
  kern::softmax_rows(n.value.ptr(), int(vx.rows()), int(vx.last_dim()));
  return push(std::move(n));
}

template <typename T>
typename Tape<T>::Id Tape<T>::gelu(Id x) {
  const Tensor<T>& vx = nodes_[std::size_t(x)].value;
  Node n;
  n.op = Op::Gelu;
  n.in0 = x;
  n.needs = nodes_[std::size_t(x)].needs;
  n.value = Tensor<T>(vx.shape);
  kern::gelu(vx.ptr(), n.value.ptr(), std::size_t(vx.numel()));
  return push(std::move(n));
}

template <typename T>
typename Tape<T>::Id Tape<T>::embedding(const IntTensor& ids, Id table) {
  const Tensor<T>& vt = nodes_[std::size_t(table)].value;
  if (vt.rank() != 2) fail("embedding: table must be 2-d");
  const std::int64_t rows = vt.shape[0], d = vt.shape[1];
  Node n;
  n.op = Op::Embedding;
  n.in0 = table;
  n.needs = nodes_[std::size_t(table)].needs;
  n.iaux.assign(ids.values.begin(), ids.values.end());
  std::vector<std::int64_t> out_shape = ids.shape;
  out_shape.push_back(d);
  n.value = Tensor<T>(std::move(out_shape));
  T* y = n.value.ptr();
  for (std::int64_t i = 0; i < ids.numel(); ++i) {
    const std::int32_t id = ids.values[std::size_t(i)];
    if (id < 0 || id >= rows) fail("embedding: id out of range");
    std::memcpy(y + i * d, vt.ptr() + std::int64_t(id) * d, std::size_t(d) * sizeof(T));
  }
  return push(std::move(n));
}

template <typename T>
typename Tape<T>::Id Tape<T>::attention(Id q, Id k, Id v, const Tensor<T>& key_bias) {
  const Tensor<T>& vq = nodes_[std::size_t(q)].value;
  const Tensor<T>& vk = nodes_[std::size_t(k)].value;
  const Tensor<T>& vv = nodes_[std::size_t(v)].value;
  if (vq.rank() != 4 || !vq.same_shape(vk) || !vq.same_shape(vv))
    fail("attention: q,k,v must share shape (B,H,S,Dh)");
  const std::int64_t B = vq.shape[0], H = vq.shape[1], S = vq.shape[2], Dh = vq.shape[3];
  if (key_bias.shape != std::vector<std::int64_t>{B, S}) fail("attention: key_bias must be (B,S)");
  const T scl = T(1) / std::sqrt(T(Dh));
  Node n;
  n.op = Op::Attention;
  n.in0 = q;
  n.in1 = k;
  n.in2 = v;
  n.needs = nodes_[std::size_t(q)].needs || nodes_[std::size_t(k)].needs ||
               nodes_[std::size_t(v)].needs;
  n.cval = scl;
  n.caux = key_bias;
  n.value = Tensor<T>(vq.shape);
  if (n.needs) n.aux.resize(std::size_t(B * H * S * S));
  std::vector<T> kt(std::size_t(Dh * S));
  std::vector<T> scores(std::size_t(S * S));
  for (std::int64_t b = 0; b < B; ++b) {
    const T* bias = key_bias.ptr() + b * S;
    for (std::int64_t h = 0; h < H; ++h) {
      const std::int64_t off = ((b * H) + h) * S * Dh;
      transpose(vk.ptr() + off, kt.data(), S, Dh);
      kern::gemm(vq.ptr() + off, kt.data(), scores.data(), int(S), int(Dh), int(S), false);
      for (std::int64_t i = 0; i < S; ++i)
        for (std::int64_t j = 0; j < S; ++j) scores[std::size_t(i * S + j)] =
            scores[std::size_t(i * S + j)] * scl + bias[j];
      kern::softmax_rows(scores.data(), int(S), int(S));
      if (n.needs)
        std::memcpy(n.aux.data() + ((b * H) + h) * S * S, scores.data(),
                    std::size_t(S * S) * sizeof(T));
      kern::gemm(scores.data(), vv.ptr() + off, n.value.ptr() + off, int(S), int(S), int(Dh), false);
    }
  }
  return push(std::move(n));
}

template <typename T>
typename Tape<T>::Id Tape<T>::split_heads(Id x, int heads) {
  const Tensor<T>& vx = nodes_[std::size_t(x)].value;
  if (vx.rank() != 3) fail("split_heads: need (B,S,H*D)");
  const std::int64_t B = vx.shape[0], S = vx.shape[1], HD = vx.shape[2];
  if (HD % heads != 0) fail("split_heads: channel dim not divisible by heads");
  const std::int64_t H = heads, D = HD / heads;
  Node n;
  n.op = Op::SplitHeads;
  n.in0 = x;
  n.needs = nodes_[std::size_t(x)].needs;
  n.iaux = {std::int32_t(heads)};
  n.value = Tensor<T>({B, H, S, D});
  const T* xp = vx.ptr();
  T* y = n.value.ptr();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t s = 0; s < S; ++s)
      for (std::int64_t h = 0; h < H; ++h)
        std::memcpy(y + (((b * H) + h) * S + s) * D, xp + ((b * S) + s) * HD + h * D,
                    std::size_t(D) * sizeof(T));
  return push(std::move(n));
}

template <typename T>
typename Tape<T>::Id Tape<T>::merge_heads(Id x) {
  const Tensor<T>& vx = nodes_[std::size_t(x)].value;
  if (vx.rank() != 4) fail("merge_heads: need (B,H,S,D)");
  const std::int64_t B = vx.shape[0], H = vx.shape[1], S = vx.shape[2], D = vx.shape[3];
  Node n;
  n.op = Op::MergeHeads;
  n.in0 = x;
  n.needs = nodes_[std::size_t(x)].needs;
  n.value = Tensor<T>({B, S, H * D});
  const T* xp = vx.ptr();
  T* y = n.value.ptr();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t s = 0; s < S; ++s)
        std::memcpy(y + ((b * S) + s) * (H * D) + h * D, xp + (((b * H) + h) * S + s) * D,
                    std::size_t(D) * sizeof(T));
  return push(std::move(n));
}

template <typename T>
typename Tape<T>::Id Tape<T>::concat_last(Id a, Id b) {
  const Tensor<T>& va = nodes_[std::size_t(a)].value;
  const Tensor<T>& vb = nodes_[std::size_t(b)].value;
  if (va.rank() != vb.rank() || va.rank() < 1) fail("concat_last: rank mismatch");
  for (int i = 0; i + 1 < va.rank(); ++i)
    if (va.shape[std::size_t(i)] != vb.shape[std::size_t(i)]) fail("concat_last: leading dims differ");
  const std::int64_t da = va.last_dim(), db = vb.last_dim(), rows = va.rows();
  Node n;
  n.op = Op::ConcatLast;
  n.in0 = a;
  n.in1 = b;
  n.needs = nodes_[std::size_t(a)].needs || nodes_[std::size_t(b)].needs;
  std::vector<std::int64_t> shape = va.shape;
  shape.back() = da + db;
  n.value = Tensor<T>(std::move(shape));
  T* y = n.value.ptr();
  for (std::int64_t r = 0; r < rows; ++r) {
    std::memcpy(y + r * (da + db), va.ptr() + r * da, std::size_t(da) * sizeof(T));
    std::memcpy(y + r * (da + db) + da, vb.ptr() + r * db, std::size_t(db) * sizeof(T));
  }
  return push(std::move(n));
}

template <typename T>
typename Tape<T>::Id Tape<T>::stop_gradient(Id x) {
  Node n;                             // shares the input buffer: bit-exact forward
  n.value.shape = nodes_[std::size_t(x)].value.shape;
  n.value.data = nodes_[std::size_t(x)].value.data;
  n.needs = false;
  return push(std::move(n));
}

template <typename T>
typename Tape<T>::Id Tape<T>::reshape(Id x, std::vector<std::int64_t> new_shape) {
  const Tensor<T>& vx = nodes_[std::size_t(x)].value;
  if (Tensor<T>::count(new_shape) != vx.numel()) fail("reshape: element count mismatch");
  Node n;
  n.op = Op::Reshape;
  n.in0 = x;
  n.needs = nodes_[std::size_t(x)].needs;
  n.value.shape = std::move(new_shape);
  n.value.data = vx.data;
  return push(std::move(n));
}

template <typename T>
typename Tape<T>::Id Tape<T>::masked_mse(Id pred, Id target, const Tensor<T>& mask) {
  const Tensor<T>& vp = nodes_[std::size_t(pred)].value;
  const Tensor<T>& vt = nodes_[std::size_t(target)].value;
  if (!vp.same_shape(vt)) fail("masked_mse: pred/target shapes differ");
  const std::int64_t d = vp.last_dim(), rows = vp.rows();
  if (mask.numel() != rows) fail("masked_mse: mask must cover pred rows");
  double msum = 0;
  for (std::int64_t r = 0; r < rows; ++r) msum += double(mask.at(r));
  if (msum <= 0) fail("masked_mse: mask selects nothing");
  const double denom = msum * double(d);
  double acc = 0;
  const T* p = vp.ptr();
  const T* t = vt.ptr();
  for (std::int64_t r = 0; r < rows; ++r) {
    if (mask.at(r) == T(0)) continue;
    const T m = mask.at(r);
    double rowacc = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double diff = double(p[r * d + j]) - double(t[r * d + j]);
      rowacc += diff * diff;
    }
    acc += double(m) * rowacc;
  }
  Node n;
  n.op = Op::MaskedMse;
  n.in0 = pred;
  n.in1 = target;
  n.needs = nodes_[std::size_t(pred)].needs || nodes_[std::size_t(target)].needs;
  n.caux = mask;
  n.aux = {T(denom)};
  n.value = Tensor<T>::scalar(T(acc / denom));
  return push(std::move(n));
}

template <typename T>
typename Tape<T>::Id Tape<T>::cross_entropy(Id logits, const IntTensor& targets,
                                            const std::vector<T>& weights) {
  const Tensor<T>& vl = nodes_[std::size_t(logits)].value;
  if (vl.rank() != 2) fail("cross_entropy: logits must be (N,C)");
  const std::int64_t N = vl.shape[0], C = vl.shape[1];
  if (targets.numel() != N || std::int64_t(weights.size()) != N)
    fail("cross_entropy: targets/weights must have N entries");
  double wsum = 0;
  for (T w : weights) wsum += double(w);
  if (wsum <= 0) fail("cross_entropy: weights select nothing");
  Node n;
  n.op = Op::CrossEntropy;
  n.in0 = logits;
  n.needs = nodes_[std::size_t(logits)].needs;
  n.iaux.assign(targets.values.begin(), targets.values.end());
  n.caux = Tensor<T>({N}, std::vector<T>(weights));
  if (n.needs) n.aux.resize(std::size_t(N * C));   // probabilities for backward
  double loss = 0;
  const T* lp = vl.ptr();
  for (std::int64_t i = 0; i < N; ++i) {
    const std::int32_t tgt = targets.values[std::size_t(i)];
    if (tgt < 0 || tgt >= C) fail("cross_entropy: target out of range");
    double mx = -1e300;
    for (std::int64_t j = 0; j < C; ++j) mx = std::max(mx, double(lp[i * C + j]));
    double se = 0;
    for (std::int64_t j = 0; j < C; ++j) se += std::exp(double(lp[i * C + j]) - mx);
    const double lse = mx + std::log(se);
    loss += double(weights[std::size_t(i)]) * (lse - double(lp[i * C + tgt]));
    if (n.needs)
      for (std::int64_t j = 0; j < C; ++j)
        n.aux[std::size_t(i * C + j)] = T(std::exp(double(lp[i * C + j]) - lse));
  }
  n.value = Tensor<T>::scalar(T(loss / wsum));
  n.cval = T(wsum);
  return push(std::move(n));
}

template <typename T>
typename Tape<T>::Id Tape<T>::masked_mean_pool(Id x, const Tensor<T>& mask) {
  const Tensor<T>& vx = nodes_[std::size_t(x)].value;
  if (vx.rank() != 3) fail("masked_mean_pool: need (B,S,D)");
  const std::int64_t B = vx.shape[0], S = vx.shape[1], D = vx.shape[2];
  if (mask.shape != std::vector<std::int64_t>{B, S}) fail("masked_mean_pool: mask must be (B,S)");
  Node n;
  n.op = Op::MaskedMeanPool;
  n.in0 = x;
  n.needs = nodes_[std::size_t(x)].needs;
  n.caux = mask;
  n.aux.resize(std::size_t(B));
  n.value = Tensor<T>({B, D});
  const T* xp = vx.ptr();
  T* y = n.value.ptr();
  for (std::int64_t b = 0; b < B; ++b) {
    double cnt = 0;
    for (std::int64_t s = 0; s < S; ++s) cnt += double(mask.at(b * S + s));
    if (cnt <= 0) fail("masked_mean_pool: empty mask row");
    n.aux[std::size_t(b)] = T(cnt);
    for (std::int64_t d = 0; d < D; ++d) {
      double acc = 0;
      for (std::int64_t s = 0; s < S; ++s)
        acc += double(mask.at(b * S + s)) * double(xp[((b * S) + s) * D + d]);
      y[b * D + d] = T(acc / cnt);
    }
  }
  return push(std::move(n));
}

template <typename T>
void Tape<T>::backward(Id loss) {
  if (consumed_) throw std::logic_error("tape: backward called twice (tape already consumed)");
  consumed_ = true;
  Node& ln = nodes_[std::size_t(loss)];
  if (ln.value.numel() != 1) fail("backward: loss must be scalar");
  grad_buf(loss)[0] = T(1);
  for (std::int64_t i = loss; i >= 0; --i) {
    Node& n = nodes_[std::size_t(i)];
    if (!n.grad_live || !n.needs || n.op == Op::None) continue;
    backprop_node(n);
  }
}

template <typename T>
void Tape<T>::backprop_node(Node& n) {
  const std::vector<T>& gy = n.grad;
  auto in_requires = [&](Id id) { return id != kNone && nodes_[std::size_t(id)].needs; };
  switch (n.op) {
    case Op::Add: {
      if (in_requires(n.in0)) {
        std::vector<T>& ga = grad_buf(n.in0);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
      }
      if (in_requires(n.in1)) {
        std::vector<T>& gb = grad_buf(n.in1);
        const std::size_t nb = gb.size();
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i % nb] += gy[i];
      }
      break;
    }
    case Op::Scale: {
      if (in_requires(n.in0)) {
        std::vector<T>& ga = grad_buf(n.in0);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] = std::fma(n.cval, gy[i], ga[i]);
      }
      break;
    }
    case Op::Matmul: {
      const Tensor<T>& va = nodes_[std::size_t(n.in0)].value;
      const Tensor<T>& vb = nodes_[std::size_t(n.in1)].value;
      const std::int64_t k = va.last_dim(), nn = vb.shape[1], m = va.numel() / k;
      if (in_requires(n.in0)) {
        std::vector<T> bt(std::size_t(k * nn));
        transpose(vb.ptr(), bt.data(), k, nn);
        kern::gemm(gy.data(), bt.data(), grad_buf(n.in0).data(), int(m), int(nn), int(k), true);
      }
      if (in_requires(n.in1)) {
        std::vector<T> at(std::size_t(m * k));
        transpose(va.ptr(), at.data(), m, k);
        kern::gemm(at.data(), gy.data(), grad_buf(n.in1).data(), int(k), int(m), int(nn), true);
      }
      break;
    }
    case Op::LayerNorm: {
      const Tensor<T>& vx = nodes_[std::size_t(n.in0)].value;
      const Tensor<T>& vg = nodes_[std::size_t(n.in1)].value;
      const std::int64_t c = vx.last_dim(), r = vx.rows();
      const T* mean = n.aux.data();
      const T* rstd = n.aux.data() + r;
      const T* x = vx.ptr();
      const T* gam = vg.ptr();
      std::vector<T>* gx = in_requires(n.in0) ? &grad_buf(n.in0) : nullptr;
      std::vector<T>* gg = in_requires(n.in1) ? &grad_buf(n.in1) : nullptr;
      std::vector<T>* gb = in_requires(n.in2) ? &grad_buf(n.in2) : nullptr;
      for (std::int64_t i = 0; i < r; ++i) {
        const T mu = mean[i], rs = rstd[i];
        double m1 = 0, m2 = 0;
        for (std::int64_t j = 0; j < c; ++j) {
          const T xh = (x[i * c + j] - mu) * rs;
          const T gyj = gy[std::size_t(i * c + j)];
          if (gg) (*gg)[std::size_t(j)] += gyj * xh;
          if (gb) (*gb)[std::size_t(j)] += gyj;
          const double gh = double(gyj) * double(gam[j]);
          m1 += gh;
          m2 += gh * double(xh);
        }
        if (gx) {
          m1 /= double(c);
          m2 /= double(c);
          for (std::int64_t j = 0; j < c; ++j) {
            const T xh = (x[i * c + j] - mu) * rs;
            const double gh = double(gy[std::size_t(i * c + j)]) * double(gam[j]);
            (*gx)[std::size_t(i * c + j)] += T(double(rs) * (gh - m1 - double(xh) * m2));
          }
        }
      }
      break;
    }
    case Op::Softmax: {
      if (!in_requires(n.in0)) break;
      const std::int64_t c = n.value.last_dim(), r = n.value.rows();
      const T* p = n.value.ptr();
      std::vector<T>& gx = grad_buf(n.in0);
      for (std::int64_t i = 0; i < r; ++i) {
        double dot = 0;
        for (std::int64_t j = 0; j < c; ++j)
          dot += double(p[i * c + j]) * double(gy[std::size_t(i * c + j)]);
        for (std::int64_t j = 0; j < c; ++j)
          gx[std::size_t(i * c + j)] +=
              p[i * c + j] * T(double(gy[std::size_t(i * c + j)]) - dot);
      }
      break;
    }
    case Op::Gelu: {
      if (!in_requires(n.in0)) break;
      const Tensor<T>& vx = nodes_[std::size_t(n.in0)].value;
      kern::gelu_grad(vx.ptr(), gy.data(), grad_buf(n.in0).data(), std::size_t(vx.numel()));
      break;
    }
    case Op::Embedding: {
      if (!in_requires(n.in0)) break;
      const Tensor<T>& vt = nodes_[std::size_t(n.in0)].value;
      const std::int64_t d = vt.shape[1];
      std::vector<T>& gt = grad_buf(n.in0);
      for (std::size_t i = 0; i < n.iaux.size(); ++i) {
        const std::int64_t row = n.iaux[i];
        for (std::int64_t j = 0; j < d; ++j)
          gt[std::size_t(row * d + j)] += gy[i * std::size_t(d) + std::size_t(j)];
      }
      break;
    }
    case Op::Attention: {
      const Tensor<T>& vq = nodes_[std::size_t(n.in0)].value;
      const Tensor<T>& vk = nodes_[std::size_t(n.in1)].value;
      const Tensor<T>& vv = nodes_[std::size_t(n.in2)].value;
      const std::int64_t B = vq.shape[0], H = vq.shape[1], S = vq.shape[2], Dh = vq.shape[3];
      const T scl = n.cval;
      std::vector<T>* gq = in_requires(n.in0) ? &grad_buf(n.in0) : nullptr;
      std::vector<T>* gk = in_requires(n.in1) ? &grad_buf(n.in1) : nullptr;
      std::vector<T>* gv = in_requires(n.in2) ? &grad_buf(n.in2) : nullptr;
      std::vector<T> scratch_t(std::size_t(S) * std::size_t(std::max(S, Dh)));
      std::vector<T> dp(std::size_t(S * S));
      for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t h = 0; h < H; ++h) {
          const std::int64_t off = ((b * H) + h) * S * Dh;
          const T* P = n.aux.data() + ((b * H) + h) * S * S;
          const T* dout = gy.data() + off;
          if (gv) {
            transpose(P, scratch_t.data(), S, S);
            kern::gemm(scratch_t.data(), dout, gv->data() + off, int(S), int(S), int(Dh), true);
          }
          // dP = dOut * V^T
          transpose(vv.ptr() + off, scratch_t.data(), S, Dh);
          kern::gemm(dout, scratch_t.data(), dp.data(), int(S), int(Dh), int(S), false);
          // softmax backward + scale folded in
          for (std::int64_t i = 0; i < S; ++i) {
            double dot = 0;
            for (std::int64_t j = 0; j < S; ++j)
              dot += double(P[i * S + j]) * double(dp[std::size_t(i * S + j)]);
            for (std::int64_t j = 0; j < S; ++j)
              dp[std::size_t(i * S + j)] =
                  P[i * S + j] * T(double(dp[std::size_t(i * S + j)]) - dot) * scl;
          }
          if (gq) kern::gemm(dp.data(), vk.ptr() + off, gq->data() + off, int(S), int(S), int(Dh), true);
          if (gk) {
            transpose(dp.data(), scratch_t.data(), S, S);
            kern::gemm(scratch_t.data(), vq.ptr() + off, gk->data() + off, int(S), int(S), int(Dh), true);
          }
        }
      }
      break;
    }
    case Op::SplitHeads: {
      if (!in_requires(n.in0)) break;
      const std::int64_t B = n.value.shape[0], H = n.value.shape[1], S = n.value.shape[2],
                         D = n.value.shape[3];
      std::vector<T>& gx = grad_buf(n.in0);
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t s = 0; s < S; ++s)
          for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t d = 0; d < D; ++d)
              gx[std::size_t(((b * S) + s) * (H * D) + h * D + d)] +=
                  gy[std::size_t((((b * H) + h) * S + s) * D + d)];
      break;
    }
    case Op::MergeHeads: {
      if (!in_requires(n.in0)) break;
      const std::int64_t B = n.value.shape[0], S = n.value.shape[1], HD = n.value.shape[2];
      const Tensor<T>& vx = nodes_[std::size_t(n.in0)].value;
      const std::int64_t H = vx.shape[1], D = vx.shape[3];
      std::vector<T>& gx = grad_buf(n.in0);
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t h = 0; h < H; ++h)
          for (std::int64_t s = 0; s < S; ++s)
            for (std::int64_t d = 0; d < D; ++d)
              gx[std::size_t((((b * H) + h) * S + s) * D + d)] +=
                  gy[std::size_t(((b * S) + s) * HD + h * D + d)];
      break;
    }
    case Op::ConcatLast: {
      const Tensor<T>& va = nodes_[std::size_t(n.in0)].value;
      const Tensor<T>& vb = nodes_[std::size_t(n.in1)].value;
      const std::int64_t da = va.last_dim(), db = vb.last_dim(), rows = va.rows();
      if (in_requires(n.in0)) {
        std::vector<T>& ga = grad_buf(n.in0);
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t j = 0; j < da; ++j)
            ga[std::size_t(r * da + j)] += gy[std::size_t(r * (da + db) + j)];
      }
      if (in_requires(n.in1)) {
        std::vector<T>& gb = grad_buf(n.in1);
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t j = 0; j < db; ++j)
            gb[std::size_t(r * db + j)] += gy[std::size_t(r * (da + db) + da + j)];
      }
      break;
    }
    case Op::Reshape: {
      if (!in_requires(n.in0)) break;
      std::vector<T>& gx = grad_buf(n.in0);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
      break;
    }
    case Op::MaskedMse: {
      const Tensor<T>& vp = nodes_[std::size_t(n.in0)].value;
      const Tensor<T>& vt = nodes_[std::size_t(n.in1)].value;
      const std::int64_t d = vp.last_dim(), rows = vp.rows();
      const double denom = double(n.aux[0]);
      const double coef = 2.0 * double(gy[0]) / denom;
      const T* p = vp.ptr();
      const T* t = vt.ptr();
      std::vector<T>* gp = in_requires(n.in0) ? &grad_buf(n.in0) : nullptr;
      std::vector<T>* gt = in_requires(n.in1) ? &grad_buf(n.in1) : nullptr;
      for (std::int64_t r = 0; r < rows; ++r) {
        const T m = n.caux.at(r);
        if (m == T(0)) continue;
        for (std::int64_t j = 0; j < d; ++j) {
          const T g = T(coef * double(m) * (double(p[r * d + j]) - double(t[r * d + j])));
          if (gp) (*gp)[std::size_t(r * d + j)] += g;
          if (gt) (*gt)[std::size_t(r * d + j)] -= g;
        }
      }
      break;
    }
    case Op::CrossEntropy: {
      if (!in_requires(n.in0)) break;
      const Tensor<T>& vl = nodes_[std::size_t(n.in0)].value;
      const std::int64_t N = vl.shape[0], C = vl.shape[1];
      const double coef = double(gy[0]) / double(n.cval);
      std::vector<T>& gl = grad_buf(n.in0);
      for (std::int64_t i = 0; i < N; ++i) {
        const double w = double(n.caux.at(i));
        if (w == 0) continue;
        const std::int32_t tgt = n.iaux[std::size_t(i)];
        for (std::int64_t j = 0; j < C; ++j) {
          const double pj = double(n.aux[std::size_t(i * C + j)]);
          const double delta = (j == tgt) ? 1.0 : 0.0;
          gl[std::size_t(i * C + j)] += T(coef * w * (pj - delta));
        }
      }
      break;
    }
    case Op::MaskedMeanPool: {
      if (!in_requires(n.in0)) break;
      const Tensor<T>& vx = nodes_[std::size_t(n.in0)].value;
      const std::int64_t B = vx.shape[0], S = vx.shape[1], D = vx.shape[2];
      std::vector<T>& gx = grad_buf(n.in0);
      for (std::int64_t b = 0; b < B; ++b) {
        const T cnt = n.aux[std::size_t(b)];
        for (std::int64_t s = 0; s < S; ++s) {
          const T m = n.caux.at(b * S + s);
          if (m == T(0)) continue;
          for (std::int64_t d = 0; d < D; ++d)
            gx[std::size_t(((b * S) + s) * D + d)] += gy[std::size_t(b * D + d)] * m / cnt;
        }
      }
      break;
    }
    case Op::None:
      break;
  }
}

template class Tape<float>;
template class Tape<double>;

} // namespace dmf
