#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dmf {

// 20 canonical amino acids in alphabetical one-letter order, then the two
// non-semantic ids used internally for padding and masked-token pretraining.
inline constexpr char kAminoLetters[21] = "ACDEFGHIKLMNPQRSTVWY";
inline constexpr std::int32_t kNumAmino = 20;
inline constexpr std::int32_t kPadId = 20;
inline constexpr std::int32_t kMaskId = 21;
inline constexpr std::int32_t kAlphabetSize = 22;

inline std::int32_t amino_id(char c) {
  for (std::int32_t i = 0; i < kNumAmino; ++i)
    if (kAminoLetters[i] == c) return i;
  return -1;
}

inline char amino_letter(std::int32_t id) {
  if (id < 0 || id >= kNumAmino)
    throw std::invalid_argument("not a semantic token id: " + std::to_string(id));
  return kAminoLetters[id];
}

inline std::vector<std::int32_t> tokenize(const std::string& s) {
  std::vector<std::int32_t> out;
  out.reserve(s.size());
  for (char c : s) {
    const std::int32_t id = amino_id(c);
    if (id < 0) throw std::invalid_argument(std::string("invalid residue letter '") + c + "'");
    out.push_back(id);
  }
  return out;
}

inline std::string detokenize(const std::vector<std::int32_t>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (std::int32_t id : ids) out.push_back(amino_letter(id));   // PAD/MASK rejected here
  return out;
}

} // namespace dmf
