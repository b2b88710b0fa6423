#include "dmf/encoder.hpp"

#include <algorithm>
#include <stdexcept>

#include "dmf/alphabet.hpp"

namespace dmf {

static std::string layer_path(int i, const std::string& leaf) {
  return "enc/l" + std::to_string(i) + "/" + leaf;
}

void init_encoder_params(ParamStore& store, const EncoderConfig& cfg, Rng& rng) {
  if (cfg.d_enc % cfg.n_heads != 0)
    throw std::invalid_argument("encoder: d_enc must be divisible by n_heads");
  if (cfg.transformer && cfg.d_enc < 2)
    throw std::invalid_argument("encoder: transformer mode needs d_enc >= 2");
  const std::int64_t d = cfg.d_enc, m = std::int64_t(cfg.mlp_mult) * d;
  init_normal(store.create("enc/emb", {kAlphabetSize, d}), rng, 0.02f);
  init_normal(store.create("enc/pos", {cfg.max_len, d}), rng, 0.02f);
  if (cfg.transformer) {
    // identity half of the output: wide-separated per-token rows keep every
    // input token linearly recoverable regardless of how strongly the
    // contextual half specializes (the width budget is too small for both to
    // coexist in a shared subspace)
    init_normal(store.create("enc/id_emb", {kAlphabetSize, d / 2}), rng, 1.0f);
    init_xavier_uniform(store.create("enc/ctx/w", {d, d - d / 2}), rng);
    store.create("enc/ctx/b", {d - d / 2});
  }
  for (int i = 0; i < cfg.n_layers; ++i) {
    auto ones = [&](const std::string& p) {
      Tensor<float>& t = store.create(p, {d});
      std::fill(t.ptr(), t.ptr() + t.numel(), 1.0f);
    };
    ones(layer_path(i, "ln1/g"));
    store.create(layer_path(i, "ln1/b"), {d});
    for (const char* w : {"attn/wq", "attn/wk", "attn/wv", "attn/wo"})
      init_xavier_uniform(store.create(layer_path(i, w), {d, d}), rng);
    for (const char* b : {"attn/bq", "attn/bk", "attn/bv", "attn/bo"})
      store.create(layer_path(i, b), {d});
    ones(layer_path(i, "ln2/g"));
    store.create(layer_path(i, "ln2/b"), {d});
    init_xavier_uniform(store.create(layer_path(i, "mlp/w1"), {d, m}), rng);
    store.create(layer_path(i, "mlp/b1"), {m});
    init_xavier_uniform(store.create(layer_path(i, "mlp/w2"), {m, d}), rng);
    store.create(layer_path(i, "mlp/b2"), {d});
  }
  init_xavier_uniform(store.create("enc/mlm/w", {d, kNumAmino}), rng);
  store.create("enc/mlm/b", {kNumAmino});
  store.sync_ema();
}

static IntTensor position_ids(std::int64_t B, std::int64_t S) {
  IntTensor ids({B, S}, std::vector<std::int32_t>(std::size_t(B * S)));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t s = 0; s < S; ++s) ids.values[std::size_t(b * S + s)] = std::int32_t(s);
  return ids;
}

Tape<float>::Id encoder_forward(Tape<float>& tp, const TapeBinding& p, const EncoderConfig& cfg,
                                const IntTensor& tokens, const Tensor<float>& mask) {
  if (tokens.shape.size() != 2) throw std::invalid_argument("encoder: tokens must be (B,S)");
  const std::int64_t B = tokens.shape[0], S = tokens.shape[1];
  if (S > cfg.max_len) throw std::invalid_argument("encoder: sequence longer than max_len");
  using Id = Tape<float>::Id;

  Id x = tp.embedding(tokens, p("enc/emb"));
  if (!cfg.transformer) return x;   // embedding-only: strictly position-local

  x = tp.add(x, tp.embedding(position_ids(B, S), p("enc/pos")));
  const Tensor<float> bias = key_bias_from_mask(mask);
  for (int i = 0; i < cfg.n_layers; ++i) {
    auto L = [&](const std::string& leaf) { return p(layer_path(i, leaf)); };
    Id h = tp.layer_norm(x, L("ln1/g"), L("ln1/b"), 1e-5f);
    Id q = tp.add(tp.matmul(h, L("attn/wq")), L("attn/bq"));
    Id k = tp.add(tp.matmul(h, L("attn/wk")), L("attn/bk"));
    Id v = tp.add(tp.matmul(h, L("attn/wv")), L("attn/bv"));
    Id att = tp.attention(tp.split_heads(q, cfg.n_heads), tp.split_heads(k, cfg.n_heads),
                          tp.split_heads(v, cfg.n_heads), bias);
    Id o = tp.add(tp.matmul(tp.merge_heads(att), L("attn/wo")), L("attn/bo"));
    x = tp.add(x, o);
    Id h2 = tp.layer_norm(x, L("ln2/g"), L("ln2/b"), 1e-5f);
    Id f = tp.gelu(tp.add(tp.matmul(h2, L("mlp/w1")), L("mlp/b1")));
    Id f2 = tp.add(tp.matmul(f, L("mlp/w2")), L("mlp/b2"));
    x = tp.add(x, f2);
  }
  // output: [token-identity channels ; projected contextual channels]
  Id ident = tp.embedding(tokens, p("enc/id_emb"));
  Id ctx = tp.add(tp.matmul(x, p("enc/ctx/w")), p("enc/ctx/b"));
  return tp.concat_last(ident, ctx);
}

Tape<float>::Id encoder_mlm_logits(Tape<float>& tp, const TapeBinding& p, Tape<float>::Id states) {
  const auto& sh = tp.value(states).shape;
  Tape<float>::Id flat = tp.reshape(states, {sh[0] * sh[1], sh[2]});
  return tp.add(tp.matmul(flat, p("enc/mlm/w")), p("enc/mlm/b"));
}

namespace {

struct MaskedBatch {
  IntTensor inputs;                 // tokens with kMaskId at chosen positions
  IntTensor targets;                // flat (B*S), clamped to [0,20) at weight-0 slots
  std::vector<float> weights;       // flat (B*S), 1 at masked semantic positions
  std::int64_t n_masked = 0;
};

// Training uses the usual 80/10/10 corruption mix (mask / random / keep); the
// keep arm is what teaches states to carry their own clean token identity,
// which the sequence decoder later relies on. Evaluation corrupts with the
// mask token only, so the reported number is pure masked-token reconstruction.
MaskedBatch apply_mlm_mask(const TokenBatch& tb, double mask_frac, Rng& rng, bool train_mix) {
  const std::int64_t n = tb.tokens.numel();
  MaskedBatch mb;
  mb.inputs = tb.tokens;
  mb.targets = IntTensor(tb.tokens.shape, tb.tokens.values);
  mb.targets.shape = {n};
  mb.weights.assign(std::size_t(n), 0.0f);
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int32_t tok = tb.tokens.values[std::size_t(i)];
    if (tok >= kNumAmino) {                  // padding: never a target
      mb.targets.values[std::size_t(i)] = 0;
      continue;
    }
    if (rng.uniform() < mask_frac) {
      const double arm = train_mix ? rng.uniform() : 0.0;
      if (arm < 0.8)
        mb.inputs.values[std::size_t(i)] = kMaskId;
      else if (arm < 0.9)
        mb.inputs.values[std::size_t(i)] = std::int32_t(rng.uniform_u64(kNumAmino));
      mb.weights[std::size_t(i)] = 1.0f;
      ++mb.n_masked;
    }
  }
  return mb;
}

std::vector<std::vector<std::int32_t>> gather(const Corpus& c, const std::vector<std::int64_t>& idx,
                                              std::size_t lo, std::size_t hi) {
  std::vector<std::vector<std::int32_t>> out;
  for (std::size_t i = lo; i < hi; ++i) out.push_back(c.sequences[std::size_t(idx[i])]);
  return out;
}

} // namespace

float pretrain_encoder(ParamStore& store, const EncoderConfig& cfg, const Corpus& corpus,
                       const EncoderPretrainConfig& pt, std::uint64_t seed) {
  if (!cfg.transformer)
    throw std::invalid_argument("pretraining applies to the transformer encoder only");
  Rng rng(child_seed(seed, streams::kTrain));
  AdamConfig acfg;
  acfg.lr = pt.lr;
  acfg.warmup_steps = pt.warmup;
  Optimizer opt(store, acfg);
  float last_loss = 0.0f;
  for (std::int64_t step = 0; step < pt.steps; ++step) {
    // cosine decay to zero over the run (warmup scaling happens in the optimizer)
    opt.set_lr(pt.lr * 0.5 * (1.0 + std::cos(M_PI * double(step) / double(pt.steps))));
    std::vector<std::vector<std::int32_t>> seqs;
    int longest = 1;
    for (std::int64_t b = 0; b < pt.batch; ++b) {
      const auto& s =
          corpus.sequences[std::size_t(corpus.train[rng.uniform_u64(corpus.train.size())])];
      longest = std::max(longest, int(s.size()));
      seqs.push_back(s);
    }
    TokenBatch tb = make_batch(seqs, longest);
    MaskedBatch mb = apply_mlm_mask(tb, pt.mask_frac, rng, /*train_mix=*/true);
    if (mb.n_masked == 0) continue;
    Tape<float> tp;
    TapeBinding bind(tp, store, TapeBinding::Mode::Train);
    auto states = encoder_forward(tp, bind, cfg, mb.inputs, tb.mask);
    auto logits = encoder_mlm_logits(tp, bind, states);
    auto loss = tp.cross_entropy(logits, mb.targets, mb.weights);
    last_loss = tp.value(loss).at(0);
    tp.backward(loss);
    opt.step(bind.grads());
  }
  return last_loss;
}

double mlm_accuracy(ParamStore& store, const EncoderConfig& cfg, const Corpus& corpus,
                    const std::vector<std::int64_t>& split, double mask_frac, int passes,
                    std::uint64_t seed) {
  Rng rng(child_seed(seed, streams::kEval));
  std::int64_t correct = 0, total = 0;
  for (int pass = 0; pass < passes; ++pass) {
    for (std::size_t lo = 0; lo < split.size(); lo += 64) {
      const std::size_t hi = std::min(split.size(), lo + 64);
      auto seqs = gather(corpus, split, lo, hi);
      int longest = 1;
      for (const auto& s : seqs) longest = std::max(longest, int(s.size()));
      TokenBatch tb = make_batch(seqs, longest);
      MaskedBatch mb = apply_mlm_mask(tb, mask_frac, rng, /*train_mix=*/false);
      if (mb.n_masked == 0) continue;
      Tape<float> tp;
      TapeBinding bind(tp, store, TapeBinding::Mode::Inference);
      auto logits = encoder_mlm_logits(tp, bind, encoder_forward(tp, bind, cfg, mb.inputs, tb.mask));
      const Tensor<float>& lg = tp.value(logits);
      for (std::int64_t i = 0; i < mb.targets.numel(); ++i) {
        if (mb.weights[std::size_t(i)] == 0.0f) continue;
        std::int32_t best = 0;
        for (std::int32_t c = 1; c < kNumAmino; ++c)
          if (lg.at(i * kNumAmino + c) > lg.at(i * kNumAmino + best)) best = c;
        correct += (best == mb.targets.values[std::size_t(i)]) ? 1 : 0;
        ++total;
      }
    }
  }
  return total ? double(correct) / double(total) : 0.0;
}

Tensor<float> encode_batch(ParamStore& store, const EncoderConfig& cfg, const IntTensor& tokens,
                           const Tensor<float>& mask) {
  Tape<float> tp;
  TapeBinding bind(tp, store, TapeBinding::Mode::Inference);
  auto states = encoder_forward(tp, bind, cfg, tokens, mask);
  return tp.value(states).clone();
}

} // namespace dmf
