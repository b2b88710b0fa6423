#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dmf/codec.hpp"
#include "dmf/denoiser.hpp"
#include "dmf/schedule.hpp"

namespace dmf {

// z_t = sqrt(alpha(t_i)) * z0 + sqrt(1 - alpha(t_i)) * eps, one t per batch item.
// z0 and eps must share a rank-3 shape (B, S, d).
Tensor<float> forward_diffuse(const Tensor<float>& z0, const std::vector<double>& t,
                              const Tensor<float>& eps, const NoiseSchedule& sched);

// Batched x0-predictor: maps (z_t, per-item t, self-condition estimate) to a
// clean-latent estimate of the same shape. Tests inject closed-form predictors;
// production code wraps denoise_apply.
using BatchDenoise = std::function<Tensor<float>(
    const Tensor<float>& z_t, const std::vector<double>& t, const Tensor<float>& sc)>;

// Per-sequence latents for one corpus split, encoded once up front.
struct LatentSet {
  std::vector<Tensor<float>> items;   // item i has shape (len_i, d)
  std::vector<std::int32_t> labels;   // conditioning ids, 0 = none
  std::int64_t d = 0;
};

LatentSet encode_split(Codec& codec, const Corpus& corpus, const std::vector<std::int64_t>& idx);

// Pads the chosen items to the longest one; mask marks real rows.
struct LatentBatch {
  Tensor<float> z0;    // (B, S, d)
  Tensor<float> mask;  // (B, S), 1 = real position, 0 = pad
  std::vector<std::int32_t> labels;
};

LatentBatch make_latent_batch(const LatentSet& set, const std::vector<std::int64_t>& ids);

// Loss of one denoising step given pre-drawn randomness, without any autodiff.
// sc_on[i] selects whether item i sees a detached first-pass estimate (computed
// with a zero self-condition input) or an all-zeros tensor. When length_masking
// is off, pad rows count toward the mean like real ones.
double sc_loss_value(const BatchDenoise& f, const LatentBatch& batch, const std::vector<double>& t,
                     const Tensor<float>& eps, const std::vector<bool>& sc_on,
                     const NoiseSchedule& sched, bool length_masking);

struct DiffTrainConfig {
  std::int64_t max_steps = 2000;
  std::int64_t batch = 64;
  double lr = 2e-4;
  std::int64_t warmup = 200;
  double clip_norm = 2.0;
  double ema_decay = 0.999;
  double sc_probability = 0.5;
  bool self_conditioning = true;  // off: the model never sees a first-pass estimate
  bool length_masking = true;     // off: the loss also covers pad rows
  std::int64_t val_every = 250;
  std::int64_t val_items = 128;   // validation subset size per evaluation
  std::int64_t val_grid = 10;     // time grid points per evaluation
  std::string log_csv;            // per-step log, empty = no file
  std::string checkpoint;         // checkpoint path, empty = no file
};

// One optimizer update on a batch. Returns the (double-reduced) training loss
// actually backpropagated: drawing t, eps and the self-conditioning coins from
// rng, running the detached first pass where coined, and stepping opt.
struct DiffStepResult {
  double loss = 0;
  StepStats stats;
};

DiffStepResult sc_train_step(ParamStore& store, Optimizer& opt, const DenoiserConfig& cfg,
                             const LatentBatch& batch, const NoiseSchedule& sched,
                             const DiffTrainConfig& tc, Rng& rng);

// Mean denoising loss of the current weights over a fixed time grid; the noise
// draw is re-seeded from `seed` on every call so successive evaluations are
// comparable. per_t, when given, receives one mean loss per grid point.
double val_denoising_loss(ParamStore& store, const DenoiserConfig& cfg, const LatentSet& val,
                          const NoiseSchedule& sched, const DiffTrainConfig& tc,
                          std::uint64_t seed, std::vector<double>* per_t = nullptr,
                          std::vector<double>* grid = nullptr);

struct TrainResult {
  std::vector<double> loss_curve;  // one entry per completed step
  double initial_val = 0;
  double final_val = 0;
  std::int64_t steps_run = 0;
  bool aborted = false;            // non-finite loss encountered; weights kept finite
};

TrainResult train_denoiser(ParamStore& store, const DenoiserConfig& cfg, Codec& codec,
                           const Corpus& corpus, const NoiseSchedule& sched,
                           const DiffTrainConfig& tc, std::uint64_t seed);

// Deterministic refinement from pure noise on the uniform grid t_k = 1 - k/T.
// Calls f exactly T times, carrying each estimate into the next call's
// self-condition slot, and returns the final clean-latent estimate (T = 1
// therefore returns f(z, 1, ZERO)). `trace`, when given, collects every
// intermediate estimate in order.
Tensor<float> sample_latents(const BatchDenoise& f, const NoiseSchedule& sched, std::int64_t T,
                             Rng& rng, std::int64_t s, std::int64_t d,
                             std::vector<Tensor<float>>* trace = nullptr);

struct SampleConfig {
  std::int64_t T = 100;
  std::uint64_t seed = 0;
  std::int32_t label = 0;  // 0 = unconditional
  bool use_ema = true;
};

// Full pipeline: draws a length per sequence from the codec's length model,
// refines noise with the trained denoiser, and decodes back to tokens.
std::vector<std::vector<std::int32_t>> sample_sequences(ParamStore& store,
                                                        const DenoiserConfig& cfg, Codec& codec,
                                                        const NoiseSchedule& sched,
                                                        const SampleConfig& sc, std::int64_t n);

// Same pipeline with an arbitrary predictor (a guided one, for instance).
std::vector<std::vector<std::int32_t>> sample_sequences_with(const BatchDenoise& f, Codec& codec,
                                                             const NoiseSchedule& sched,
                                                             std::int64_t T, std::uint64_t seed,
                                                             std::int64_t n);

// x0-predictor bound to a parameter store (EMA or raw weights), with an
// all-ones mask of the given width and a fixed label for every item.
BatchDenoise model_denoiser(ParamStore& store, const DenoiserConfig& cfg, std::int32_t label,
                            bool use_ema);

}  // namespace dmf
