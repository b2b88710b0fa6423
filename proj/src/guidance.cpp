#include "dmf/guidance.hpp"

#include <cmath>
#include <stdexcept>

namespace dmf {
namespace {

std::string cls_block(int i, const std::string& leaf) {
  return "cls/b" + std::to_string(i) + "/" + leaf;
}

}  // namespace

void validate(const ClassifierConfig& cfg) {
  if (cfg.hidden < 1 || cfg.n_heads < 1 || cfg.hidden % cfg.n_heads != 0)
    throw std::invalid_argument("classifier: hidden must be divisible by n_heads");
  if (cfg.n_layers < 1 || cfg.d_enc < 1 || cfg.max_len < 1 || cfg.n_classes < 1)
    throw std::invalid_argument("classifier: bad layers/d_enc/max_len/n_classes");
}

void init_classifier_params(ParamStore& store, const ClassifierConfig& cfg, Rng& rng) {
  validate(cfg);
  const std::int64_t h = cfg.hidden, d = cfg.d_enc, m = 4 * h;
  const auto ones = [&](const std::string& path) {
    Tensor<float>& t = store.create(path, {h});
    std::fill(t.ptr(), t.ptr() + t.numel(), 1.0f);
  };
  init_xavier_uniform(store.create("cls/in/w", {d, h}), rng);
  store.create("cls/in/b", {h});
  init_normal(store.create("cls/pos", {cfg.max_len, h}), rng, 0.02f);
  init_xavier_uniform(store.create("cls/time/w1", {h, h}), rng);
  store.create("cls/time/b1", {h});
  init_xavier_uniform(store.create("cls/time/w2", {h, h}), rng);
  store.create("cls/time/b2", {h});
  for (int i = 0; i < cfg.n_layers; ++i) {
    auto L = [&](const std::string& leaf) { return cls_block(i, leaf); };
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
  init_xavier_uniform(store.create("cls/head/w", {h, cfg.n_classes + 1}), rng);
  store.create("cls/head/b", {cfg.n_classes + 1});
  store.sync_ema();
}

template <typename T>
typename Tape<T>::Id classifier_forward(Tape<T>& tp, const BindingT<T>& p,
                                        const ClassifierConfig& cfg, typename Tape<T>::Id z_t,
                                        const std::vector<double>& t, const Tensor<float>& mask) {
  validate(cfg);
  using Id = typename Tape<T>::Id;
  const Tensor<T>& zv = tp.value(z_t);
  if (zv.rank() != 3 || zv.shape[2] != cfg.d_enc)
    throw std::invalid_argument("classifier: z_t must be (B,S,d_enc)");
  const std::int64_t B = zv.shape[0], S = zv.shape[1];
  if (S > cfg.max_len) throw std::invalid_argument("classifier: sequence longer than max_len");
  if (std::int64_t(t.size()) != B) throw std::invalid_argument("classifier: one t per item");
  for (double ti : t)
    if (ti < 0.0 || ti > 1.0) throw std::invalid_argument("classifier: t outside [0,1]");

  Tensor<T> basis({B, S, cfg.hidden});
  for (std::int64_t b = 0; b < B; ++b) {
    const std::vector<double> row = time_basis(t[std::size_t(b)], cfg.hidden);
    for (std::int64_t s = 0; s < S; ++s)
      for (int j = 0; j < cfg.hidden; ++j)
        basis.ptr()[(b * S + s) * cfg.hidden + j] = T(row[std::size_t(j)]);
  }
  Id te = tp.add(tp.matmul(tp.gelu(tp.add(tp.matmul(tp.constant(std::move(basis)),
                                                    p("cls/time/w1")),
                                          p("cls/time/b1"))),
                           p("cls/time/w2")),
                 p("cls/time/b2"));

  IntTensor pos_ids({B, S}, std::vector<std::int32_t>(std::size_t(B * S)));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t s = 0; s < S; ++s) pos_ids.values[std::size_t(b * S + s)] = std::int32_t(s);
  Id x = tp.add(tp.add(tp.matmul(z_t, p("cls/in/w")), p("cls/in/b")),
                tp.embedding(pos_ids, p("cls/pos")));
  x = tp.add(x, te);

  const Tensor<float> bias_f = key_bias_from_mask(mask);
  Tensor<T> bias(bias_f.shape), maskT(mask.shape);
  for (std::int64_t j = 0; j < bias_f.numel(); ++j) bias.ptr()[j] = T(bias_f.ptr()[j]);
  for (std::int64_t j = 0; j < mask.numel(); ++j) maskT.ptr()[j] = T(mask.ptr()[j]);
  for (int i = 0; i < cfg.n_layers; ++i) {
    auto L = [&](const std::string& leaf) { return p(cls_block(i, leaf)); };
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
  Id pooled = tp.masked_mean_pool(x, maskT);
  return tp.add(tp.matmul(pooled, p("cls/head/w")), p("cls/head/b"));
}

template Tape<float>::Id classifier_forward<float>(Tape<float>&, const BindingT<float>&,
                                                   const ClassifierConfig&, Tape<float>::Id,
                                                   const std::vector<double>&,
                                                   const Tensor<float>&);
template Tape<double>::Id classifier_forward<double>(Tape<double>&, const BindingT<double>&,
                                                     const ClassifierConfig&, Tape<double>::Id,
                                                     const std::vector<double>&,
                                                     const Tensor<float>&);

double train_classifier(ParamStore& store, const ClassifierConfig& cfg, const LatentSet& train,
                        const NoiseSchedule& sched, const ClsTrainConfig& tc, std::uint64_t seed) {
  if (train.items.empty()) throw std::invalid_argument("classifier: empty training set");
  for (std::int32_t l : train.labels)
    if (l < 1 || l > cfg.n_classes)
      throw std::invalid_argument("classifier: every item needs a class in 1..n_classes");
  Rng rng(child_seed(seed, streams::kTrain));
  AdamConfig ac;
  ac.lr = tc.lr;
  ac.warmup_steps = tc.warmup;
  ac.clip_norm = tc.clip_norm;
  ac.ema_decay = tc.ema_decay;
  Optimizer opt(store, ac);
  const std::int64_t n = std::int64_t(train.items.size());
  double tail_sum = 0;
  std::int64_t tail_n = 0;
  for (std::int64_t step = 0; step < tc.steps; ++step) {
    std::vector<std::int64_t> ids(static_cast<std::size_t>(tc.batch));
    for (auto& id : ids) id = std::int64_t(rng.uniform_u64(std::uint64_t(n)));
    LatentBatch batch = make_latent_batch(train, ids);
    const std::int64_t b = batch.z0.dim(0), s = batch.z0.dim(1), d = batch.z0.dim(2);
    std::vector<double> t(static_cast<std::size_t>(b));
    for (double& ti : t) ti = rng.uniform();
    Tensor<float> eps({b, s, d});
    for (std::int64_t j = 0; j < b * s * d; ++j) eps.ptr()[j] = float(rng.normal());
    Tensor<float> zt = forward_diffuse(batch.z0, t, eps, sched);

    Tape<float> tp;
    TapeBinding bind(tp, store, TapeBinding::Mode::Train);
    auto logits = classifier_forward(tp, bind, cfg, tp.constant(std::move(zt)), t, batch.mask);
    IntTensor targets({b}, std::vector<std::int32_t>(batch.labels.begin(), batch.labels.end()));
    auto loss = tp.cross_entropy(logits, targets,
                                 std::vector<float>(static_cast<std::size_t>(b), 1.0f));
    const double lv = double(tp.value(loss).at(0));
    tp.backward(loss);
    opt.step(bind.grads());
    if (step >= tc.steps - 10) {
      tail_sum += lv;
      ++tail_n;
    }
  }
  return tail_sum / double(tail_n);
}

double classifier_accuracy(ParamStore& store, const ClassifierConfig& cfg, const LatentSet& set,
                           const NoiseSchedule& sched, double t, std::uint64_t seed) {
  if (set.items.empty()) throw std::invalid_argument("classifier: empty evaluation set");
  Rng rng(child_seed(seed, streams::kEval));
  const std::int64_t n = std::int64_t(set.items.size());
  std::int64_t hit = 0;
  for (std::int64_t at = 0; at < n; at += 64) {
    std::vector<std::int64_t> ids;
    for (std::int64_t i = at; i < std::min(at + 64, n); ++i) ids.push_back(i);
    LatentBatch batch = make_latent_batch(set, ids);
    const std::int64_t b = batch.z0.dim(0), s = batch.z0.dim(1), d = batch.z0.dim(2);
    std::vector<double> tv(static_cast<std::size_t>(b), t);
    Tensor<float> eps({b, s, d});
    for (std::int64_t j = 0; j < b * s * d; ++j) eps.ptr()[j] = float(rng.normal());
    Tensor<float> zt = forward_diffuse(batch.z0, tv, eps, sched);
    Tape<float> tp;
    TapeBinding bind(tp, store, TapeBinding::Mode::Inference);
    auto logits = classifier_forward(tp, bind, cfg, tp.constant(std::move(zt)), tv, batch.mask);
    const Tensor<float>& lv = tp.value(logits);
    for (std::int64_t i = 0; i < b; ++i) {
      std::int32_t best = 1;
      for (std::int32_t c = 2; c <= cfg.n_classes; ++c)
        if (lv.ptr()[i * (cfg.n_classes + 1) + c] > lv.ptr()[i * (cfg.n_classes + 1) + best])
          best = c;
      if (best == batch.labels[std::size_t(i)]) ++hit;
    }
  }
  return double(hit) / double(n);
}

Tensor<float> class_logp_grad(ParamStore& store, const ClassifierConfig& cfg,
                              const Tensor<float>& z_t, double t, std::int32_t target,
                              const Tensor<float>& mask) {
  if (target < 1 || target > cfg.n_classes)
    throw std::invalid_argument("guidance: target class must be in 1..n_classes");
  if (z_t.rank() != 3 || z_t.dim(0) != 1)
    throw std::invalid_argument("guidance: one item at a time");
  Tape<float> tp;
  TapeBinding bind(tp, store, TapeBinding::Mode::Inference);
  Tensor<float> zc = z_t.clone();
  zc.requires_grad = true;
  auto z_id = tp.leaf(std::move(zc));
  auto logits = classifier_forward(tp, bind, cfg, z_id, {t}, mask);
  // cross entropy over the single item is exactly -log p(target | z_t, t)
  auto nll = tp.cross_entropy(logits, IntTensor({1}, {target}), {1.0f});
  tp.backward(nll);
  const std::vector<float>& g = tp.grad(z_id);
  Tensor<float> out(z_t.shape);
  for (std::int64_t j = 0; j < out.numel(); ++j) out.ptr()[j] = -g[std::size_t(j)];
  return out;
}

BatchDenoise guided_denoiser(BatchDenoise base, ParamStore& cls_store,
                             const ClassifierConfig& ccfg, const NoiseSchedule& sched,
                             std::int32_t target, double lambda) {
  if (lambda == 0.0) return base;
  if (target < 1 || target > ccfg.n_classes)
    throw std::invalid_argument("guidance: target class must be in 1..n_classes");
  return [base, &cls_store, ccfg, sched, target, lambda](
             const Tensor<float>& z, const std::vector<double>& t, const Tensor<float>& sc) {
    Tensor<float> zhat = base(z, t, sc);
    const std::int64_t B = z.dim(0), S = z.dim(1), d = z.dim(2);
    Tensor<float> ones({1, S});
    for (std::int64_t j = 0; j < S; ++j) ones.ptr()[j] = 1.0f;
    for (std::int64_t i = 0; i < B; ++i) {
      Tensor<float> zi({1, S, d});
      std::copy(z.ptr() + i * S * d, z.ptr() + (i + 1) * S * d, zi.ptr());
      Tensor<float> g = class_logp_grad(cls_store, ccfg, zi, t[std::size_t(i)], target, ones);
      const double a = sched.alpha(t[std::size_t(i)]);
      const float coef = float(lambda * (1.0 - a) / std::sqrt(a));
      for (std::int64_t j = 0; j < S * d; ++j) zhat.ptr()[i * S * d + j] += coef * g.ptr()[j];
    }
    return zhat;
  };
}

}  // namespace dmf
