#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dmf/rng.hpp"

namespace dmf {

// Synthetic slot-grammar corpus. A family owns, per slot, a handful of fixed
// 8-letter motifs; a sequence picks one motif per slot independently, truncates
// to its sampled length (a partial final slot always uses motif 0, so every
// position stays predictable from context), then applies per-position
// substitution noise.
struct SynthConfig {
  std::int64_t n_train = 5000;
  std::int64_t n_val = 500;
  std::int64_t n_test = 1000;
  std::uint64_t seed = 1;
  int families = 1;          // 2 -> disjoint motif sets, labels 1 and 2
  int slots = 8;
  int slot_len = 8;
  int variants = 4;          // motifs per slot per family
  double noise = 0.1;        // substitution probability, uniform over 20 letters
  int min_len = 16;
  int max_len = 64;
};

struct Corpus {
  std::vector<std::vector<std::int32_t>> sequences;
  std::vector<int> labels;                    // 0 = none; else family id (1-based)
  std::vector<std::int64_t> train, val, test; // disjoint index sets covering all
  std::string source;
  SynthConfig synth;                          // generator settings (when synthetic)

  std::int64_t size() const { return std::int64_t(sequences.size()); }
  std::vector<std::int64_t> lengths() const;
  int max_length() const;
};

// Family motif tables, exposed so tests can oracle-check generated content.
struct FamilyGrammar {
  // motif[slot][variant] = slot_len token ids
  std::vector<std::vector<std::vector<std::int32_t>>> motifs;
};

Corpus make_corpus(const SynthConfig& cfg);
std::vector<FamilyGrammar> grammar_for(const SynthConfig& cfg);

// Directory layout: train.fasta / val.fasta / test.fasta + manifest.json.
void save_corpus(const std::string& dir, const Corpus& corpus);
Corpus load_corpus(const std::string& dir);

} // namespace dmf
