#include "dmf/denoiser.hpp"

#include <cmath>
#include <stdexcept>

namespace dmf {

namespace {

std::string block_path(int i, const std::string& leaf) {
  return "dn/b" + std::to_string(i) + "/" + leaf;
}

} // namespace

void validate(const DenoiserConfig& cfg) {
  if (cfg.hidden < 1 || cfg.n_heads < 1 || cfg.hidden % cfg.n_heads != 0)
    throw std::invalid_argument("denoiser: hidden must be divisible by n_heads");
  if (cfg.n_layers < 2 || cfg.n_layers % 2 != 0)
    throw std::invalid_argument("denoiser: n_layers must be even (skip pairing)");
  if (cfg.d_enc < 1 || cfg.max_len < 1 || cfg.n_labels < 0)
    throw std::invalid_argument("denoiser: bad d_enc/max_len/n_labels");
}

void init_denoiser_params(ParamStore& store, const DenoiserConfig& cfg, Rng& rng) {
  validate(cfg);
  const std::int64_t h = cfg.hidden, d = cfg.d_enc, m = 4 * h;
  const auto ones = [&](const std::string& path) {
    Tensor<float>& t = store.create(path, {h});
    std::fill(t.ptr(), t.ptr() + t.numel(), 1.0f);
  };

  init_xavier_uniform(store.create("dn/in/w", {d, h}), rng);
  store.create("dn/in/b", {h});
  init_normal(store.create("dn/pos", {cfg.max_len, h}), rng, 0.02f);
  init_xavier_uniform(store.create("dn/time/w1", {h, h}), rng);
  store.create("dn/time/b1", {h});
  init_xavier_uniform(store.create("dn/time/w2", {h, h}), rng);
  store.create("dn/time/b2", {h});
  if (cfg.n_labels > 0)
    init_normal(store.create("dn/label/emb", {cfg.n_labels + 1, h}), rng, 0.02f);

  for (int i = 0; i < cfg.n_layers; ++i) {
    auto L = [&](const std::string& leaf) { return block_path(i, leaf); };
    init_xavier_uniform(store.create(L("time/w"), {h, h}), rng);
    store.create(L("time/b"), {h});
    init_xavier_uniform(store.create(L("sc/w"), {d, h}), rng);
    store.create(L("sc/b"), {h});
    if (cfg.n_labels > 0) {
      init_xavier_uniform(store.create(L("label/w"), {h, h}), rng);
      store.create(L("label/b"), {h});
    }
    if (i >= cfg.n_layers / 2) {
      init_xavier_uniform(store.create(L("skip/w"), {2 * h, h}), rng);
      store.create(L("skip/b"), {h});
    }
    ones(L("ln1/g"));
    store.create(L("ln1/b"), {h});
    for (const char* w : {"attn/wq", "attn/wk", "attn/wv", "attn/wo"})
      init_xavier_uniform(store.create(L(w), {h, h}), rng);
    for (const char* b : {"attn/bq", "attn/bk", "attn/bv", "attn/bo"}) store.create(L(b), {h});
    ones(L("ln2/g"));
    store.create(L("ln2/b"), {h});
    init_xavier_uniform(store.create(L("mlp/w1"), {h, m}), rng);
    store.create(L("mlp/b1"), {m});
    init_xavier_uniform(store.create(L("mlp/w2"), {m, h}), rng);
    store.create(L("mlp/b2"), {h});
  }
  init_xavier_uniform(store.create("dn/out/w", {h, d}), rng);
  store.create("dn/out/b", {d});
  store.sync_ema();
}

std::int64_t denoiser_param_count(const DenoiserConfig& cfg) {
  const std::int64_t h = cfg.hidden, d = cfg.d_enc, m = 4 * h, L = cfg.n_layers;
  std::int64_t n = 0;
  n += d * h + h;                               // input projection
  n += std::int64_t(cfg.max_len) * h;           // positions
  n += 2 * (h * h + h);                         // time MLP
  if (cfg.n_labels > 0) n += std::int64_t(cfg.n_labels + 1) * h;
  std::int64_t per_block = (h * h + h)          // time injection
                           + (d * h + h)        // self-condition injection
                           + 2 * h              // ln1
                           + 4 * (h * h + h)    // attention
                           + 2 * h              // ln2
                           + (h * m + m) + (m * h + h);   // mlp
  if (cfg.n_labels > 0) per_block += h * h + h;
  n += L * per_block;
  n += (L / 2) * (2 * h * h + h);               // skip merges on the deep half
  n += h * d + d;                               // output projection
  return n;
}

std::vector<double> time_basis(double t, int hidden) {
  // sin/cos pairs over geometric frequencies; t in [0,1] is spread by 1000 so
  // the fastest pair resolves ~1e-3 differences in t
  std::vector<double> out(static_cast<std::size_t>(hidden));
  const int half = hidden / 2;
  for (int k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * double(k) / double(half));
    const double x = 1000.0 * t * freq;
    out[std::size_t(2 * k)] = std::sin(x);
    out[std::size_t(2 * k + 1)] = std::cos(x);
  }
  if (hidden % 2 == 1) out[std::size_t(hidden - 1)] = t;
  return out;
}

template <typename T>
typename Tape<T>::Id denoiser_forward(Tape<T>& tp, const BindingT<T>& p, const DenoiserConfig& cfg,
                                      typename Tape<T>::Id z_t, const std::vector<double>& t,
                                      typename Tape<T>::Id sc, const Tensor<float>& mask,
                                      const std::vector<std::int32_t>& labels,
                                      typename Tape<T>::Id extra) {
  validate(cfg);
  using Id = typename Tape<T>::Id;
  const Tensor<T>& zv = tp.value(z_t);
  if (zv.rank() != 3 || zv.shape[2] != cfg.d_enc)
    throw std::invalid_argument("denoiser: z_t must be (B,S,d_enc)");
  const std::int64_t B = zv.shape[0], S = zv.shape[1];
  if (S > cfg.max_len) throw std::invalid_argument("denoiser: sequence longer than max_len");
  if (std::int64_t(t.size()) != B) throw std::invalid_argument("denoiser: one t per item");
  if (!tp.value(sc).same_shape(zv)) throw std::invalid_argument("denoiser: sc/z_t shape mismatch");
  if (!labels.empty() && std::int64_t(labels.size()) != B)
    throw std::invalid_argument("denoiser: one label per item");
  for (double ti : t)
    if (ti < 0.0 || ti > 1.0) throw std::invalid_argument("denoiser: t outside [0,1]");

  if (extra != Tape<T>::kNone) {
    const Tensor<T>& ev = tp.value(extra);
    if (ev.shape != std::vector<std::int64_t>{B, S, cfg.hidden})
      throw std::invalid_argument("denoiser: extra stream must be (B,S,hidden)");
  }

  // per-item sinusoidal time rows, repeated across positions as a constant
  Tensor<T> basis({B, S, cfg.hidden});
  for (std::int64_t b = 0; b < B; ++b) {
    const std::vector<double> row = time_basis(t[std::size_t(b)], cfg.hidden);
    for (std::int64_t s = 0; s < S; ++s)
      for (int j = 0; j < cfg.hidden; ++j)
        basis.ptr()[(b * S + s) * cfg.hidden + j] = T(row[std::size_t(j)]);
  }
  Id tb = tp.constant(std::move(basis));
  Id te = tp.add(tp.matmul(tp.gelu(tp.add(tp.matmul(tb, p("dn/time/w1")), p("dn/time/b1"))),
                           p("dn/time/w2")),
                 p("dn/time/b2"));

  // label stream: skipped entirely when every item is "none" (bit-exactness)
  bool any_label = false;
  for (std::int32_t l : labels) {
    if (l < 0 || l > cfg.n_labels) throw std::invalid_argument("denoiser: unknown label id");
    any_label |= (l != 0);
  }
  Id lab = Tape<T>::kNone;
  if (any_label) {
    IntTensor ids({B, S}, std::vector<std::int32_t>(std::size_t(B * S)));
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t s = 0; s < S; ++s)
        ids.values[std::size_t(b * S + s)] = labels[std::size_t(b)];
    lab = tp.embedding(ids, p("dn/label/emb"));
  }

  IntTensor pos_ids({B, S}, std::vector<std::int32_t>(std::size_t(B * S)));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t s = 0; s < S; ++s) pos_ids.values[std::size_t(b * S + s)] = std::int32_t(s);

  Id x = tp.add(tp.add(tp.matmul(z_t, p("dn/in/w")), p("dn/in/b")),
                tp.embedding(pos_ids, p("dn/pos")));
  if (!cfg.time_layers) x = tp.add(x, te);   // ablation: admix time once at the input

  const Tensor<float> bias_f = key_bias_from_mask(mask);
  Tensor<T> bias(bias_f.shape);
  for (std::int64_t j = 0; j < bias_f.numel(); ++j) bias.ptr()[j] = T(bias_f.ptr()[j]);
  std::vector<Id> shallow;
  shallow.reserve(std::size_t(cfg.n_layers / 2));
  for (int i = 0; i < cfg.n_layers; ++i) {
    auto L = [&](const std::string& leaf) { return p(block_path(i, leaf)); };
    if (cfg.skips && i >= cfg.n_layers / 2) {
      Id shl = shallow[std::size_t(cfg.n_layers - 1 - i)];
      x = tp.add(tp.matmul(tp.concat_last(x, shl), L("skip/w")), L("skip/b"));
    }
    if (cfg.time_layers) x = tp.add(x, tp.add(tp.matmul(te, L("time/w")), L("time/b")));
    x = tp.add(x, tp.add(tp.matmul(sc, L("sc/w")), L("sc/b")));
    if (any_label) x = tp.add(x, tp.add(tp.matmul(lab, L("label/w")), L("label/b")));
    if (extra != Tape<T>::kNone) x = tp.add(x, extra);

    Id h = tp.layer_norm(x, L("ln1/g"), L("ln1/b"), 1e-5f);
    Id q = tp.add(tp.matmul(h, L("attn/wq")), L("attn/bq"));
    Id k = tp.add(tp.matmul(h, L("attn/wk")), L("attn/bk"));
    Id v = tp.add(tp.matmul(h, L("attn/wv")), L("attn/bv"));
    Id att = tp.attention(tp.split_heads(q, cfg.n_heads), tp.split_heads(k, cfg.n_heads),
                          tp.split_heads(v, cfg.n_heads), bias);
    x = tp.add(x, tp.add(tp.matmul(tp.merge_heads(att), L("attn/wo")), L("attn/bo")));
    Id h2 = tp.layer_norm(x, L("ln2/g"), L("ln2/b"), 1e-5f);
    Id f = tp.gelu(tp.add(tp.matmul(h2, L("mlp/w1")), L("mlp/b1")));
    x = tp.add(x, tp.add(tp.matmul(f, L("mlp/w2")), L("mlp/b2")));
    if (i < cfg.n_layers / 2) shallow.push_back(x);
  }
  return tp.add(tp.matmul(x, p("dn/out/w")), p("dn/out/b"));
}

template Tape<float>::Id denoiser_forward<float>(Tape<float>&, const BindingT<float>&,
                                                 const DenoiserConfig&, Tape<float>::Id,
                                                 const std::vector<double>&, Tape<float>::Id,
                                                 const Tensor<float>&,
                                                 const std::vector<std::int32_t>&, Tape<float>::Id);
template Tape<double>::Id denoiser_forward<double>(Tape<double>&, const BindingT<double>&,
                                                   const DenoiserConfig&, Tape<double>::Id,
                                                   const std::vector<double>&, Tape<double>::Id,
                                                   const Tensor<float>&,
                                                   const std::vector<std::int32_t>&,
                                                   Tape<double>::Id);

Tensor<float> denoise_apply(ParamStore& store, const DenoiserConfig& cfg, const Tensor<float>& z_t,
                            const std::vector<double>& t, const Tensor<float>& sc,
                            const Tensor<float>& mask, const std::vector<std::int32_t>& labels,
                            bool use_ema, const Tensor<float>* extra) {
  Tape<float> tp;
  TapeBinding bind(tp, store,
                   use_ema ? TapeBinding::Mode::InferenceEma : TapeBinding::Mode::Inference);
  Tape<float>::Id ex = extra ? tp.constant(extra->clone()) : Tape<float>::kNone;
  Tape<float>::Id out = denoiser_forward(tp, bind, cfg, tp.constant(z_t.clone()), t,
                                         tp.constant(sc.clone()), mask, labels, ex);
  return tp.value(out).clone();
}

} // namespace dmf
