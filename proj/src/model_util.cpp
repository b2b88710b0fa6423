#include "dmf/model_util.hpp"

#include <algorithm>
#include <stdexcept>

#include "dmf/alphabet.hpp"

namespace dmf {

TokenBatch make_batch(const std::vector<std::vector<std::int32_t>>& seqs, int pad_to) {
  std::int64_t S = pad_to;
  if (S == 0)
    for (const auto& seq : seqs) S = std::max(S, std::int64_t(seq.size()));
  const std::int64_t B = std::int64_t(seqs.size());
  TokenBatch batch;
  batch.tokens = IntTensor({B, S}, std::vector<std::int32_t>(std::size_t(B * S), kPadId));
  batch.mask = Tensor<float>({B, S});
  for (std::int64_t b = 0; b < B; ++b) {
    const auto& seq = seqs[std::size_t(b)];
    if (std::int64_t(seq.size()) > S)
      throw std::invalid_argument("sequence longer than batch padding length");
    for (std::size_t i = 0; i < seq.size(); ++i) {
      batch.tokens.values[std::size_t(b * S) + i] = seq[i];
      batch.mask.at(b * S + std::int64_t(i)) = 1.0f;
    }
  }
  return batch;
}

TokenBatch make_batch(const Corpus& corpus, const std::vector<std::int64_t>& idx, int pad_to) {
  std::vector<std::vector<std::int32_t>> seqs;
  seqs.reserve(idx.size());
  for (std::int64_t i : idx) seqs.push_back(corpus.sequences[std::size_t(i)]);
  return make_batch(seqs, pad_to);
}

Tensor<float> key_bias_from_mask(const Tensor<float>& mask) {
  Tensor<float> bias(mask.shape);
  for (std::int64_t i = 0; i < mask.numel(); ++i)
    bias.at(i) = mask.at(i) != 0.0f ? 0.0f : -1e9f;
  return bias;
}

} // namespace dmf
