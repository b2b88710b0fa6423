#include "dmf/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "dmf/checkpoint.hpp"

namespace dmf {
namespace {

void check_rank3(const Tensor<float>& x, const char* what) {
  if (x.shape.size() != 3) throw std::invalid_argument(std::string(what) + ": want rank-3 (B,S,d)");
}

Tensor<float> ones_mask(std::int64_t b, std::int64_t s) {
  Tensor<float> m({b, s});
  float* p = m.ptr();
  for (std::int64_t i = 0; i < b * s; ++i) p[i] = 1.0f;
  return m;
}

Tensor<float> loss_mask(const LatentBatch& batch, bool length_masking) {
  if (length_masking) return batch.mask;
  return ones_mask(batch.z0.dim(0), batch.z0.dim(1));
}

// Mean squared error over the rows mask selects, reduced in double; matches
// the tape's masked_mse convention (denominator = selected rows * d).
double masked_mse_value(const Tensor<float>& pred, const Tensor<float>& target,
                        const Tensor<float>& mask) {
  const std::int64_t d = pred.last_dim(), rows = pred.rows();
  double msum = 0, acc = 0;
  const float* p = pred.ptr();
  const float* t = target.ptr();
  const float* m = mask.ptr();
  for (std::int64_t r = 0; r < rows; ++r) {
    if (m[r] == 0.0f) continue;
    msum += double(m[r]);
    double rowacc = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double diff = double(p[r * d + j]) - double(t[r * d + j]);
      rowacc += diff * diff;
    }
    acc += double(m[r]) * rowacc;
  }
  if (msum <= 0) throw std::invalid_argument("masked mse: mask selects nothing");
  return acc / (msum * double(d));
}

}  // namespace

Tensor<float> forward_diffuse(const Tensor<float>& z0, const std::vector<double>& t,
                              const Tensor<float>& eps, const NoiseSchedule& sched) {
  check_rank3(z0, "forward_diffuse");
  if (!z0.same_shape(eps)) throw std::invalid_argument("forward_diffuse: z0/eps shapes differ");
  const std::int64_t b = z0.dim(0), sd = z0.dim(1) * z0.dim(2);
  if (std::int64_t(t.size()) != b) throw std::invalid_argument("forward_diffuse: one t per item");
  Tensor<float> zt(z0.shape);
  const float* z = z0.ptr();
  const float* e = eps.ptr();
  float* o = zt.ptr();
  for (std::int64_t i = 0; i < b; ++i) {
    const double a = sched.alpha(t[std::size_t(i)]);
    const float ca = float(std::sqrt(a));
    const float cb = float(std::sqrt(1.0 - a));
    for (std::int64_t j = 0; j < sd; ++j) o[i * sd + j] = ca * z[i * sd + j] + cb * e[i * sd + j];
  }
  return zt;
}

LatentSet encode_split(Codec& codec, const Corpus& corpus, const std::vector<std::int64_t>& idx) {
  LatentSet out;
  out.d = codec.d_enc();
  const std::int64_t kChunk = 64;
  for (std::int64_t at = 0; at < std::int64_t(idx.size()); at += kChunk) {
    std::vector<std::int64_t> chunk(idx.begin() + at,
                                    idx.begin() + std::min<std::int64_t>(at + kChunk, idx.size()));
    auto [tokens, mask] = make_batch(corpus, chunk, 0);
    Tensor<float> states = encode_normalized(codec, tokens, mask);
    const std::int64_t s = states.dim(1), d = states.dim(2);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const std::int64_t len = std::int64_t(corpus.sequences[std::size_t(chunk[i])].size());
      Tensor<float> item({len, d});
      const float* src = states.ptr() + std::int64_t(i) * s * d;
      std::copy(src, src + len * d, item.ptr());
      out.items.push_back(std::move(item));
      out.labels.push_back(corpus.labels[std::size_t(chunk[i])]);
    }
  }
  return out;
}

LatentBatch make_latent_batch(const LatentSet& set, const std::vector<std::int64_t>& ids) {
  if (ids.empty()) throw std::invalid_argument("latent batch: empty id list");
  std::int64_t s = 0;
  for (std::int64_t id : ids) s = std::max(s, set.items[std::size_t(id)].dim(0));
  const std::int64_t b = std::int64_t(ids.size()), d = set.d;
  LatentBatch out;
  out.z0 = Tensor<float>({b, s, d});
  out.mask = Tensor<float>({b, s});
  for (std::int64_t i = 0; i < b; ++i) {
    const Tensor<float>& item = set.items[std::size_t(ids[std::size_t(i)])];
    const std::int64_t len = item.dim(0);
    std::copy(item.ptr(), item.ptr() + len * d, out.z0.ptr() + i * s * d);
    for (std::int64_t j = 0; j < len; ++j) out.mask.ptr()[i * s + j] = 1.0f;
    out.labels.push_back(set.labels[std::size_t(ids[std::size_t(i)])]);
  }
  return out;
}

double sc_loss_value(const BatchDenoise& f, const LatentBatch& batch, const std::vector<double>& t,
                     const Tensor<float>& eps, const std::vector<bool>& sc_on,
                     const NoiseSchedule& sched, bool length_masking) {
  const std::int64_t b = batch.z0.dim(0), s = batch.z0.dim(1), d = batch.z0.dim(2);
  if (std::int64_t(sc_on.size()) != b) throw std::invalid_argument("sc loss: one coin per item");
  Tensor<float> zt = forward_diffuse(batch.z0, t, eps, sched);
  Tensor<float> sc({b, s, d});
  bool any = false;
  for (bool c : sc_on) any = any || c;
  if (any) {
    Tensor<float> first = f(zt, t, sc);  // sc is still all zeros here
    for (std::int64_t i = 0; i < b; ++i) {
      if (!sc_on[std::size_t(i)]) continue;
      std::copy(first.ptr() + i * s * d, first.ptr() + (i + 1) * s * d, sc.ptr() + i * s * d);
    }
  }
  Tensor<float> pred = f(zt, t, sc);
  return masked_mse_value(pred, batch.z0, length_masking ? batch.mask : ones_mask(b, s));
}

DiffStepResult sc_train_step(ParamStore& store, Optimizer& opt, const DenoiserConfig& cfg,
                             const LatentBatch& batch, const NoiseSchedule& sched,
                             const DiffTrainConfig& tc, Rng& rng) {
  const std::int64_t b = batch.z0.dim(0), s = batch.z0.dim(1), d = batch.z0.dim(2);
  std::vector<double> t(static_cast<std::size_t>(b));
  for (double& ti : t) ti = rng.uniform();
  Tensor<float> eps({b, s, d});
  for (std::int64_t j = 0; j < b * s * d; ++j) eps.ptr()[j] = float(rng.normal());
  std::vector<bool> sc_on(static_cast<std::size_t>(b), false);
  if (tc.self_conditioning)
    for (std::int64_t i = 0; i < b; ++i) sc_on[std::size_t(i)] = rng.uniform() < tc.sc_probability;

  Tensor<float> zt = forward_diffuse(batch.z0, t, eps, sched);
  Tensor<float> sc({b, s, d});
  bool any = false;
  for (bool c : sc_on) any = any || c;
  if (any) {
    // First pass never carries gradient: run it outside the training tape and
    // feed the values back in as a constant.
    Tensor<float> first = denoise_apply(store, cfg, zt, t, sc, batch.mask, batch.labels, false);
    for (std::int64_t i = 0; i < b; ++i) {
      if (!sc_on[std::size_t(i)]) continue;
      std::copy(first.ptr() + i * s * d, first.ptr() + (i + 1) * s * d, sc.ptr() + i * s * d);
    }
  }

  Tape<float> tp;
  TapeBinding bind(tp, store, TapeBinding::Mode::Train);
  auto zt_id = tp.constant(zt);
  auto sc_id = tp.constant(sc);
  auto pred = denoiser_forward(tp, bind, cfg, zt_id, t, sc_id, batch.mask, batch.labels);
  auto target = tp.constant(batch.z0);
  auto loss = tp.masked_mse(pred, target, loss_mask(batch, tc.length_masking));
  DiffStepResult out;
  out.loss = double(tp.value(loss).at(0));
  tp.backward(loss);
  out.stats = opt.step(bind.grads());
  return out;
}

double val_denoising_loss(ParamStore& store, const DenoiserConfig& cfg, const LatentSet& val,
                          const NoiseSchedule& sched, const DiffTrainConfig& tc,
                          std::uint64_t seed, std::vector<double>* per_t,
                          std::vector<double>* grid) {
  if (val.items.empty()) throw std::invalid_argument("validation loss: empty latent set");
  Rng rng(child_seed(seed, streams::kEval));
  const std::int64_t n = std::min<std::int64_t>(tc.val_items, std::int64_t(val.items.size()));
  std::vector<std::vector<std::int64_t>> batches;
  for (std::int64_t at = 0; at < n; at += 64) {
    batches.emplace_back();
    for (std::int64_t i = at; i < std::min(at + 64, n); ++i) batches.back().push_back(i);
  }
  if (per_t) per_t->clear();
  if (grid) grid->clear();
  double total = 0;
  for (std::int64_t g = 0; g < tc.val_grid; ++g) {
    const double tg = (double(g) + 0.5) / double(tc.val_grid);
    double acc = 0, wsum = 0;
    for (const auto& ids : batches) {
      LatentBatch batch = make_latent_batch(val, ids);
      const std::int64_t b = batch.z0.dim(0), s = batch.z0.dim(1), d = batch.z0.dim(2);
      std::vector<double> t(static_cast<std::size_t>(b), tg);
      Tensor<float> eps({b, s, d});
      for (std::int64_t j = 0; j < b * s * d; ++j) eps.ptr()[j] = float(rng.normal());
      Tensor<float> zt = forward_diffuse(batch.z0, t, eps, sched);
      Tensor<float> sc({b, s, d});
      Tensor<float> pred = denoise_apply(store, cfg, zt, t, sc, batch.mask, batch.labels, false);
      const Tensor<float> m = loss_mask(batch, tc.length_masking);
      double w = 0;
      for (std::int64_t r = 0; r < b * s; ++r) w += double(m.ptr()[r]);
      w *= double(d);
      acc += masked_mse_value(pred, batch.z0, m) * w;
      wsum += w;
    }
    const double mean_g = acc / wsum;
    if (per_t) per_t->push_back(mean_g);
    if (grid) grid->push_back(tg);
    total += mean_g;
  }
  return total / double(tc.val_grid);
}

TrainResult train_denoiser(ParamStore& store, const DenoiserConfig& cfg, Codec& codec,
                           const Corpus& corpus, const NoiseSchedule& sched,
                           const DiffTrainConfig& tc, std::uint64_t seed) {
  LatentSet train_set = encode_split(codec, corpus, corpus.train);
  LatentSet val_set = encode_split(codec, corpus, corpus.val.empty() ? corpus.test : corpus.val);
  if (cfg.n_labels == 0) {
    for (auto& l : train_set.labels) l = 0;
    for (auto& l : val_set.labels) l = 0;
  }
  Rng rng(child_seed(seed, streams::kTrain));
  AdamConfig ac;
  ac.lr = tc.lr;
  ac.warmup_steps = tc.warmup;
  ac.clip_norm = tc.clip_norm;
  ac.ema_decay = tc.ema_decay;
  Optimizer opt(store, ac);

  std::ofstream csv;
  if (!tc.log_csv.empty()) {
    csv.open(tc.log_csv);
    if (!csv) throw std::runtime_error("training log: cannot open " + tc.log_csv);
    csv << "step,loss,val_loss,lr,grad_norm\n";
  }

  TrainResult res;
  res.initial_val = val_denoising_loss(store, cfg, val_set, sched, tc, seed);
  res.final_val = res.initial_val;
  const std::int64_t n = std::int64_t(train_set.items.size());
  for (std::int64_t step = 0; step < tc.max_steps; ++step) {
    std::vector<std::int64_t> ids(static_cast<std::size_t>(tc.batch));
    for (auto& id : ids) id = std::int64_t(rng.uniform_u64(std::uint64_t(n)));
    LatentBatch batch = make_latent_batch(train_set, ids);
    DiffStepResult r = sc_train_step(store, opt, cfg, batch, sched, tc, rng);
    res.loss_curve.push_back(r.loss);
    res.steps_run = step + 1;
    if (!std::isfinite(r.loss)) {
      // The optimizer rejected the update, so the stored weights are still the
      // last finite ones; persist them before giving up.
      if (!tc.checkpoint.empty()) save_checkpoint(tc.checkpoint, store);
      res.aborted = true;
      if (csv) csv << step << "," << r.loss << ",,," << "\n";
      break;
    }
    const bool eval_now = ((step + 1) % tc.val_every == 0) || step + 1 == tc.max_steps;
    std::string val_field;
    if (eval_now) {
      res.final_val = val_denoising_loss(store, cfg, val_set, sched, tc, seed);
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.6g", res.final_val);
      val_field = buf;
      if (!tc.checkpoint.empty()) save_checkpoint(tc.checkpoint, store);
    }
    if (csv) {
      char line[160];
      std::snprintf(line, sizeof line, "%lld,%.6g,%s,%.6g,%.6g\n",
                    static_cast<long long>(step), r.loss, val_field.c_str(), r.stats.lr_used,
                    r.stats.grad_norm);
      csv << line;
    }
  }
  return res;
}

Tensor<float> sample_latents(const BatchDenoise& f, const NoiseSchedule& sched, std::int64_t T,
                             Rng& rng, std::int64_t s, std::int64_t d,
                             std::vector<Tensor<float>>* trace) {
  if (T < 1) throw std::invalid_argument("sampler: need at least one step");
  if (s < 1 || d < 1) throw std::invalid_argument("sampler: bad latent shape");
  Tensor<float> z({1, s, d});
  for (std::int64_t j = 0; j < s * d; ++j) z.ptr()[j] = float(rng.normal());
  Tensor<float> sc({1, s, d});
  Tensor<float> zhat;
  if (trace) trace->clear();
  for (std::int64_t k = 0; k < T; ++k) {
    const double tk = 1.0 - double(k) / double(T);
    zhat = f(z, {tk}, sc);
    if (trace) trace->push_back(zhat.clone());
    sc = zhat;
    if (k + 1 == T) break;  // the final estimate is the sample
    const double tn = 1.0 - double(k + 1) / double(T);
    const double a = sched.alpha(tk), an = sched.alpha(tn);
    const float sa = float(std::sqrt(a)), sb = float(std::sqrt(1.0 - a));
    const float na = float(std::sqrt(an)), nb = float(std::sqrt(1.0 - an));
    Tensor<float> next({1, s, d});
    for (std::int64_t j = 0; j < s * d; ++j) {
      const float eps_hat = (z.ptr()[j] - sa * zhat.ptr()[j]) / sb;
      next.ptr()[j] = na * zhat.ptr()[j] + nb * eps_hat;
    }
    z = std::move(next);
  }
  return zhat;
}

BatchDenoise model_denoiser(ParamStore& store, const DenoiserConfig& cfg, std::int32_t label,
                            bool use_ema) {
  return [&store, cfg, label, use_ema](const Tensor<float>& zt, const std::vector<double>& t,
                                       const Tensor<float>& sc) {
    const std::int64_t b = zt.dim(0), s = zt.dim(1);
    std::vector<std::int32_t> labels(static_cast<std::size_t>(b), label);
    return denoise_apply(store, cfg, zt, t, sc, ones_mask(b, s), labels, use_ema);
  };
}

std::vector<std::vector<std::int32_t>> sample_sequences_with(const BatchDenoise& f, Codec& codec,
                                                             const NoiseSchedule& sched,
                                                             std::int64_t T, std::uint64_t seed,
                                                             std::int64_t n) {
  if (n < 1) throw std::invalid_argument("sampler: need n >= 1 sequences");
  const std::uint64_t root = child_seed(seed, streams::kSample);
  std::vector<std::vector<std::int32_t>> out;
  for (std::int64_t i = 0; i < n; ++i) {
    Rng rng(child_seed(root, std::uint64_t(i)));
    const std::int64_t len = codec.len.sample(rng);
    Tensor<float> latents = sample_latents(f, sched, T, rng, len, codec.d_enc());
    out.push_back(decode_normalized(codec, latents));
  }
  return out;
}

std::vector<std::vector<std::int32_t>> sample_sequences(ParamStore& store,
                                                        const DenoiserConfig& cfg, Codec& codec,
                                                        const NoiseSchedule& sched,
                                                        const SampleConfig& sc, std::int64_t n) {
  if (sc.label < 0 || sc.label > cfg.n_labels)
    throw std::invalid_argument("sampler: unknown label id");
  return sample_sequences_with(model_denoiser(store, cfg, sc.label, sc.use_ema), codec, sched,
                               sc.T, sc.seed, n);
}

}  // namespace dmf
