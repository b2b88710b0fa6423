#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dmf/model_util.hpp"
#include "dmf/param_store.hpp"
#include "dmf/tape.hpp"

namespace dmf {

// The x0-prediction transformer: per-block additive injection of time and
// self-condition streams (optionally a label stream), long skip connections
// pairing block i with block n_layers-1-i via concat+linear merges.
struct DenoiserConfig {
  int n_layers = 12;
  int n_heads = 16;
  int hidden = 320;
  int max_len = 64;
  int d_enc = 32;           // latent channel width in and out
  int n_labels = 0;         // C > 0 enables the label stream (0 = "none" id)
  bool skips = true;        // long skip connections
  bool time_layers = true;  // false: add the time embedding once at the input

  static DenoiserConfig desk() {
    DenoiserConfig c;
    c.n_layers = 6;
    c.n_heads = 4;
    c.hidden = 64;
    return c;
  }
};

void validate(const DenoiserConfig& cfg);

// Creates all "dn/..." parameters.
void init_denoiser_params(ParamStore& store, const DenoiserConfig& cfg, Rng& rng);

// Analytic parameter count for the config; guards shape drift.
std::int64_t denoiser_param_count(const DenoiserConfig& cfg);

// Sinusoidal basis row for t in [0,1], dimension `hidden`, computed in double.
std::vector<double> time_basis(double t, int hidden);

// x0 prediction. t is per item; sc is the self-condition latents (all zeros
// for the "no estimate yet" input); labels may be empty (= all none); extra,
// when given, is an externally computed (B,S,hidden) stream added at every
// block input (the infill adapter hooks in here). Instantiated for float and,
// for finite-difference testing, double.
template <typename T>
typename Tape<T>::Id denoiser_forward(Tape<T>& tp, const BindingT<T>& p, const DenoiserConfig& cfg,
                                      typename Tape<T>::Id z_t, const std::vector<double>& t,
                                      typename Tape<T>::Id sc, const Tensor<float>& mask,
                                      const std::vector<std::int32_t>& labels = {},
                                      typename Tape<T>::Id extra = Tape<T>::kNone);

// Convenience inference wrapper: plain tensors in and out.
Tensor<float> denoise_apply(ParamStore& store, const DenoiserConfig& cfg, const Tensor<float>& z_t,
                            const std::vector<double>& t, const Tensor<float>& sc,
                            const Tensor<float>& mask, const std::vector<std::int32_t>& labels = {},
                            bool use_ema = false, const Tensor<float>* extra = nullptr);

} // namespace dmf
