#include "dmf/infill.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dmf/alphabet.hpp"

namespace dmf {
namespace {

std::string ad_block(int i, const std::string& leaf) {
  return "ad/b" + std::to_string(i) + "/" + leaf;
}

}  // namespace

void validate(const AdapterConfig& cfg) {
  if (cfg.hidden < 1 || cfg.n_heads < 1 || cfg.hidden % cfg.n_heads != 0)
    throw std::invalid_argument("adapter: hidden must be divisible by n_heads");
  if (cfg.n_layers < 1 || cfg.d_enc < 1 || cfg.max_len < 1)
    throw std::invalid_argument("adapter: bad layers/d_enc/max_len");
}

void init_adapter_params(ParamStore& store, const AdapterConfig& cfg, Rng& rng) {
  validate(cfg);
  const std::int64_t h = cfg.hidden, m = 4 * h;
  const auto ones = [&](const std::string& path) {
    Tensor<float>& t = store.create(path, {h});
    std::fill(t.ptr(), t.ptr() + t.numel(), 1.0f);
  };
  init_xavier_uniform(store.create("ad/in/w", {cfg.d_enc + 1, h}), rng);
  store.create("ad/in/b", {h});
  init_normal(store.create("ad/pos", {cfg.max_len, h}), rng, 0.02f);
  for (int i = 0; i < cfg.n_layers; ++i) {
    auto L = [&](const std::string& leaf) { return ad_block(i, leaf); };
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
  store.sync_ema();
}

Tape<float>::Id adapter_forward(Tape<float>& tp, const TapeBinding& p, const AdapterConfig& cfg,
                                Tape<float>::Id cond, const Tensor<float>& mask) {
  validate(cfg);
  using Id = Tape<float>::Id;
  const Tensor<float>& cv = tp.value(cond);
  if (cv.rank() != 3 || cv.shape[2] != cfg.d_enc + 1)
    throw std::invalid_argument("adapter: cond must be (B,S,d_enc+1)");
  const std::int64_t B = cv.shape[0], S = cv.shape[1];
  if (S > cfg.max_len) throw std::invalid_argument("adapter: sequence longer than max_len");

  IntTensor pos_ids({B, S}, std::vector<std::int32_t>(std::size_t(B * S)));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t s = 0; s < S; ++s) pos_ids.values[std::size_t(b * S + s)] = std::int32_t(s);
  Id x = tp.add(tp.add(tp.matmul(cond, p("ad/in/w")), p("ad/in/b")),
                tp.embedding(pos_ids, p("ad/pos")));
  const Tensor<float> bias = key_bias_from_mask(mask);
  for (int i = 0; i < cfg.n_layers; ++i) {
    auto L = [&](const std::string& leaf) { return p(ad_block(i, leaf)); };
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
  }
  return x;
}

Tensor<float> adapter_apply(ParamStore& store, const AdapterConfig& cfg,
                            const Tensor<float>& cond, const Tensor<float>& mask) {
  Tape<float> tp;
  TapeBinding bind(tp, store, TapeBinding::Mode::Inference);
  auto out = adapter_forward(tp, bind, cfg, tp.constant(cond.clone()), mask);
  return tp.value(out).clone();
}

Tensor<float> infill_condition(Codec& codec, const std::vector<std::int32_t>& tokens,
                               std::int64_t span_begin, std::int64_t span_end) {
  const std::int64_t len = std::int64_t(tokens.size());
  if (span_begin < 0 || span_begin >= span_end || span_end > len)
    throw std::invalid_argument("infill: bad span");
  std::vector<std::int32_t> masked = tokens;
  for (std::int64_t i = span_begin; i < span_end; ++i) masked[std::size_t(i)] = kMaskId;
  auto [tok, mask] = make_batch({masked}, 0);
  Tensor<float> states = encode_normalized(codec, tok, mask);
  const std::int64_t S = states.dim(1), d = states.dim(2);
  Tensor<float> cond({1, S, d + 1});
  for (std::int64_t s = 0; s < S; ++s) {
    std::copy(states.ptr() + s * d, states.ptr() + (s + 1) * d, cond.ptr() + s * (d + 1));
    cond.ptr()[s * (d + 1) + d] = (s >= span_begin && s < span_end) ? 1.0f : 0.0f;
  }
  return cond;
}

double train_adapter(ParamStore& adapter_store, ParamStore& dn_store, const DenoiserConfig& dcfg,
                     const AdapterConfig& acfg, Codec& codec, const Corpus& corpus,
                     const NoiseSchedule& sched, const AdapterTrainConfig& tc, std::uint64_t seed) {
  if (acfg.hidden != dcfg.hidden || acfg.d_enc != dcfg.d_enc)
    throw std::invalid_argument("adapter: width mismatch with the denoiser");
  if (tc.min_span <= 0.0 || tc.max_span >= 1.0 || tc.min_span > tc.max_span)
    throw std::invalid_argument("adapter: span fractions must satisfy 0 < min <= max < 1");
  Rng rng(child_seed(seed, streams::kTrain));
  AdamConfig ac;
  ac.lr = tc.lr;
  ac.warmup_steps = tc.warmup;
  ac.clip_norm = tc.clip_norm;
  ac.ema_decay = tc.ema_decay;
  Optimizer opt(adapter_store, ac);

  const std::int64_t n = std::int64_t(corpus.train.size());
  double tail_sum = 0;
  std::int64_t tail_n = 0;
  for (std::int64_t step = 0; step < tc.steps; ++step) {
    // draw items and spans, then encode originals and masked variants
    std::vector<std::int64_t> idx(static_cast<std::size_t>(tc.batch));
    for (auto& id : idx) id = corpus.train[rng.uniform_u64(std::uint64_t(n))];
    std::vector<std::vector<std::int32_t>> originals, masked;
    std::vector<std::pair<std::int64_t, std::int64_t>> spans;
    for (std::int64_t id : idx) {
      const auto& seq = corpus.sequences[std::size_t(id)];
      const std::int64_t len = std::int64_t(seq.size());
      std::int64_t lo = std::max<std::int64_t>(1, std::int64_t(tc.min_span * double(len)));
      std::int64_t hi = std::min<std::int64_t>(len - 1, std::int64_t(tc.max_span * double(len)));
      hi = std::max(lo, hi);
      const std::int64_t w = lo + std::int64_t(rng.uniform_u64(std::uint64_t(hi - lo + 1)));
      const std::int64_t b = std::int64_t(rng.uniform_u64(std::uint64_t(len - w + 1)));
      originals.push_back(seq);
      masked.push_back(seq);
      for (std::int64_t j = b; j < b + w; ++j) masked.back()[std::size_t(j)] = kMaskId;
      spans.emplace_back(b, b + w);
    }
    auto [tok, mask] = make_batch(originals, 0);
    Tensor<float> z0 = encode_normalized(codec, tok, mask);
    auto [mtok, mmask] = make_batch(masked, 0);
    Tensor<float> ctx = encode_normalized(codec, mtok, mmask);
    const std::int64_t B = z0.dim(0), S = z0.dim(1), d = z0.dim(2);
    Tensor<float> cond({B, S, d + 1});
    for (std::int64_t i = 0; i < B; ++i)
      for (std::int64_t s = 0; s < S; ++s) {
        std::copy(ctx.ptr() + (i * S + s) * d, ctx.ptr() + (i * S + s + 1) * d,
                  cond.ptr() + (i * S + s) * (d + 1));
        cond.ptr()[(i * S + s) * (d + 1) + d] =
            (s >= spans[std::size_t(i)].first && s < spans[std::size_t(i)].second) ? 1.0f : 0.0f;
      }

    std::vector<double> t(static_cast<std::size_t>(B));
    for (double& ti : t) ti = rng.uniform();
    Tensor<float> eps({B, S, d});
    for (std::int64_t j = 0; j < B * S * d; ++j) eps.ptr()[j] = float(rng.normal());
    Tensor<float> zt = forward_diffuse(z0, t, eps, sched);

    Tape<float> tp;
    TapeBinding dn_bind(tp, dn_store, TapeBinding::Mode::Inference);
    TapeBinding ad_bind(tp, adapter_store, TapeBinding::Mode::Train);
    auto stream = adapter_forward(tp, ad_bind, acfg, tp.constant(std::move(cond)), mask);
    auto pred = denoiser_forward<float>(tp, dn_bind, dcfg, tp.constant(std::move(zt)), t,
                                        tp.constant(Tensor<float>({B, S, d})), mask, {}, stream);
    auto loss = tp.masked_mse(pred, tp.constant(std::move(z0)), mask);
    const double lv = double(tp.value(loss).at(0));
    tp.backward(loss);
    opt.step(ad_bind.grads());
    if (step >= tc.steps - 10) {
      tail_sum += lv;
      ++tail_n;
    }
  }
  return tail_sum / double(tail_n);
}

std::vector<std::int32_t> infill_span(ParamStore& dn_store, const DenoiserConfig& dcfg,
                                      ParamStore& adapter_store, const AdapterConfig& acfg,
                                      Codec& codec, const NoiseSchedule& sched,
                                      const std::vector<std::int32_t>& tokens,
                                      std::int64_t span_begin, std::int64_t span_end,
                                      std::int64_t T, std::uint64_t seed) {
  const std::int64_t len = std::int64_t(tokens.size());
  if (span_begin < 0 || span_begin >= span_end || span_end > len)
    throw std::invalid_argument("infill: bad span");
  if (span_begin == 0 && span_end == len)
    throw std::invalid_argument("infill: span must leave some context");

  auto [tok, mask] = make_batch({tokens}, 0);
  Tensor<float> z0_true = encode_normalized(codec, tok, mask);
  Tensor<float> cond = infill_condition(codec, tokens, span_begin, span_end);
  Tensor<float> stream = adapter_apply(adapter_store, acfg, cond, mask);
  const std::int64_t d = z0_true.dim(2);

  BatchDenoise f = [&](const Tensor<float>& z, const std::vector<double>& t,
                       const Tensor<float>& sc) {
    Tensor<float> zhat = denoise_apply(dn_store, dcfg, z, t, sc, mask, {}, true, &stream);
    // hard conditioning: context rows always carry the encoded original
    for (std::int64_t s = 0; s < len; ++s) {
      if (s >= span_begin && s < span_end) continue;
      std::copy(z0_true.ptr() + s * d, z0_true.ptr() + (s + 1) * d, zhat.ptr() + s * d);
    }
    return zhat;
  };
  Rng rng(child_seed(seed, streams::kSample));
  Tensor<float> latents = sample_latents(f, sched, T, rng, len, d);
  return decode_normalized(codec, latents);
}

}  // namespace dmf
