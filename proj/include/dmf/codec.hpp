#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dmf/corpus.hpp"
#include "dmf/encoder.hpp"
#include "dmf/param_store.hpp"
#include "dmf/tensor.hpp"

namespace dmf {

// Per-channel affine map taking raw encoder latents to zero-mean/unit-variance
// coordinates (statistics over semantic, non-pad positions only).
struct Normalizer {
  std::vector<float> mean, std;
  void normalize(Tensor<float>& rows) const;     // (..., d) in place
  void denormalize(Tensor<float>& rows) const;
};

struct Decoder {
  Tensor<float> w;   // (d_enc, kAlphabetSize)
  Tensor<float> b;   // (kAlphabetSize)
};

struct LengthModel {
  std::vector<int> support;      // observed lengths, ascending
  std::vector<double> probs;     // empirical probabilities, same order
  int sample(Rng& rng) const;
};

struct FinetuneReport {
  std::vector<double> train_loss;   // one entry per epoch
  std::vector<double> val_loss;
  int best_epoch = -1;
};

// The full discrete<->continuous codec: frozen encoder + normalizer + decoder
// + empirical length model.
struct Codec {
  EncoderConfig enc_cfg;
  ParamStore enc;
  Normalizer norm;
  Decoder dec;
  LengthModel len;

  int d_enc() const { return enc_cfg.d_enc; }
};

Normalizer fit_normalizer(const Tensor<float>& states, const Tensor<float>& mask);

// Raw-latent argmax decoding over the 20 semantic letters (ties: lowest id).
std::vector<std::int32_t> decode_latents(const Decoder& dec, const Tensor<float>& latents);

Decoder make_untrained_decoder(int d_enc, Rng& rng);

FinetuneReport finetune_decoder(Decoder& dec, ParamStore& enc, const EncoderConfig& cfg,
                                const Corpus& corpus, int epochs, std::uint64_t seed);

LengthModel fit_length_model(const std::vector<std::vector<std::int32_t>>& seqs,
                             const std::vector<std::int64_t>& idx);

struct CodecBuildConfig {
  EncoderConfig enc;
  EncoderPretrainConfig pretrain;
  int decoder_epochs = 8;
  bool finetune = true;   // ablation arm: keep the untrained decoder
};

Codec build_codec(const Corpus& corpus, const CodecBuildConfig& cfg, std::uint64_t seed);

// Encode a batch and normalize it: returns (B, S, d_enc); the affine map is
// applied to every row (statistics themselves come from semantic rows only).
Tensor<float> encode_normalized(Codec& codec, const IntTensor& tokens, const Tensor<float>& mask);

// Round-trip helper: denormalize then decode one sequence's rows.
std::vector<std::int32_t> decode_normalized(const Codec& codec, Tensor<float> latents);

void save_codec(const std::string& dir, const Codec& codec);
Codec load_codec(const std::string& dir);

} // namespace dmf
