#pragma once

#include <cstdint>
#include <vector>

#include "dmf/diffusion.hpp"

namespace dmf {

// Small noise-aware sequence classifier: predicts the class of a noisy latent
// given its noise level, so its input gradient can steer the sampler.
struct ClassifierConfig {
  int n_layers = 2;
  int n_heads = 4;
  int hidden = 64;
  int max_len = 64;
  int d_enc = 32;
  int n_classes = 2;  // class ids 1..n_classes; logits also cover the unused 0
};

void validate(const ClassifierConfig& cfg);

// Creates all "cls/..." parameters.
void init_classifier_params(ParamStore& store, const ClassifierConfig& cfg, Rng& rng);

// Logits (B, n_classes+1) for noisy latents z_t at per-item times t.
// Instantiated for float and double; the latter backs gradient tests.
template <typename T>
typename Tape<T>::Id classifier_forward(Tape<T>& tp, const BindingT<T>& p,
                                        const ClassifierConfig& cfg, typename Tape<T>::Id z_t,
                                        const std::vector<double>& t, const Tensor<float>& mask);

struct ClsTrainConfig {
  std::int64_t steps = 800;
  std::int64_t batch = 64;
  double lr = 1e-3;
  std::int64_t warmup = 50;
  double clip_norm = 2.0;
  double ema_decay = 0.999;
};

// Trains on latents noised at uniform times; every item needs a class label.
// Returns the mean loss over the final ten steps.
double train_classifier(ParamStore& store, const ClassifierConfig& cfg, const LatentSet& train,
                        const NoiseSchedule& sched, const ClsTrainConfig& tc, std::uint64_t seed);

// Fraction of items whose argmax class (over 1..n_classes) is correct, with
// the latents noised to time t under the given seed.
double classifier_accuracy(ParamStore& store, const ClassifierConfig& cfg, const LatentSet& set,
                           const NoiseSchedule& sched, double t, std::uint64_t seed);

// d/dz_t of log p(target | z_t, t) for a single item, via the tape.
Tensor<float> class_logp_grad(ParamStore& store, const ClassifierConfig& cfg,
                              const Tensor<float>& z_t, double t, std::int32_t target,
                              const Tensor<float>& mask);

// Classifier-steered predictor: shifts each clean-latent estimate by
// lambda * (1-alpha)/sqrt(alpha) * d log p(target|z_t,t)/dz_t. With lambda = 0
// the base predictor is returned as-is and the classifier is never touched.
BatchDenoise guided_denoiser(BatchDenoise base, ParamStore& cls_store,
                             const ClassifierConfig& ccfg, const NoiseSchedule& sched,
                             std::int32_t target, double lambda);

}  // namespace dmf
