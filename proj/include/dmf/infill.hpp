#pragma once

#include <cstdint>
#include <vector>

#include "dmf/diffusion.hpp"

namespace dmf {

// Span-conditioning adapter: encodes the visible context of a partially masked
// sequence (latents of the masked tokens plus a marker channel) into a stream
// the frozen denoiser receives additively at every block input.
struct AdapterConfig {
  int n_layers = 3;
  int n_heads = 4;
  int hidden = 64;   // must match the denoiser it feeds
  int max_len = 64;
  int d_enc = 32;
};

void validate(const AdapterConfig& cfg);

// Creates all "ad/..." parameters (kept in their own store so the denoiser
// stays frozen while the adapter trains).
void init_adapter_params(ParamStore& store, const AdapterConfig& cfg, Rng& rng);

// cond is (B, S, d_enc+1): masked-token latents with the span marker appended.
Tape<float>::Id adapter_forward(Tape<float>& tp, const TapeBinding& p, const AdapterConfig& cfg,
                                Tape<float>::Id cond, const Tensor<float>& mask);

Tensor<float> adapter_apply(ParamStore& store, const AdapterConfig& cfg,
                            const Tensor<float>& cond, const Tensor<float>& mask);

// Encodes `tokens` with [span_begin, span_end) replaced by the mask token and
// appends the marker channel (1 inside the span).
Tensor<float> infill_condition(Codec& codec, const std::vector<std::int32_t>& tokens,
                               std::int64_t span_begin, std::int64_t span_end);

struct AdapterTrainConfig {
  std::int64_t steps = 600;
  std::int64_t batch = 16;
  double lr = 1e-3;
  std::int64_t warmup = 50;
  double clip_norm = 2.0;
  double ema_decay = 0.999;
  double min_span = 0.1;  // span length bounds as fractions of sequence length
  double max_span = 0.5;
};

// Trains the adapter against the frozen denoiser on randomly drawn spans.
// Returns the mean reconstruction loss over the final ten steps.
double train_adapter(ParamStore& adapter_store, ParamStore& dn_store, const DenoiserConfig& dcfg,
                     const AdapterConfig& acfg, Codec& codec, const Corpus& corpus,
                     const NoiseSchedule& sched, const AdapterTrainConfig& tc, std::uint64_t seed);

// Regenerates [span_begin, span_end) of `tokens`, holding the rest fixed by
// clamping their latent rows to the encoded originals at every refinement
// step. The span must leave at least one position of context on either side
// combined.
std::vector<std::int32_t> infill_span(ParamStore& dn_store, const DenoiserConfig& dcfg,
                                      ParamStore& adapter_store, const AdapterConfig& acfg,
                                      Codec& codec, const NoiseSchedule& sched,
                                      const std::vector<std::int32_t>& tokens,
                                      std::int64_t span_begin, std::int64_t span_end,
                                      std::int64_t T, std::uint64_t seed);

}  // namespace dmf
