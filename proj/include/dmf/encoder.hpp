#pragma once

#include <cstdint>
#include <string>

#include "dmf/corpus.hpp"
#include "dmf/model_util.hpp"
#include "dmf/param_store.hpp"
#include "dmf/tape.hpp"

namespace dmf {

// Toy contextual encoder standing in for a large protein language model:
// token + position embeddings, a short pre-norm transformer stack, pretrained
// by masked-token reconstruction and then frozen.
struct EncoderConfig {
  int d_enc = 32;
  int n_layers = 2;
  int n_heads = 4;
  int max_len = 64;
  int mlp_mult = 4;
  bool transformer = true;   // false: embedding-only ablation (position-local)
};

struct EncoderPretrainConfig {
  std::int64_t steps = 3000;
  std::int64_t batch = 128;
  double mask_frac = 0.15;
  double lr = 1e-3;
  std::int64_t warmup = 100;
};

// Creates all "enc/..." parameters (and the pretraining head "enc/mlm/...").
void init_encoder_params(ParamStore& store, const EncoderConfig& cfg, Rng& rng);

// Contextual states (B, S, d_enc); any S <= cfg.max_len.
Tape<float>::Id encoder_forward(Tape<float>& tp, const TapeBinding& p, const EncoderConfig& cfg,
                                const IntTensor& tokens, const Tensor<float>& mask);

// Pretraining-head logits over the 20 semantic letters, shape (B*S, 20).
Tape<float>::Id encoder_mlm_logits(Tape<float>& tp, const TapeBinding& p, Tape<float>::Id states);

// Masked-token pretraining on the train split. Returns final train loss.
float pretrain_encoder(ParamStore& store, const EncoderConfig& cfg, const Corpus& corpus,
                       const EncoderPretrainConfig& pt, std::uint64_t seed);

// Masked-token accuracy on a split, averaged over `passes` independent maskings.
double mlm_accuracy(ParamStore& store, const EncoderConfig& cfg, const Corpus& corpus,
                    const std::vector<std::int64_t>& split, double mask_frac, int passes,
                    std::uint64_t seed);

// Inference: encode a batch with frozen weights.
Tensor<float> encode_batch(ParamStore& store, const EncoderConfig& cfg, const IntTensor& tokens,
                           const Tensor<float>& mask);

} // namespace dmf
