#pragma once

#include <string>
#include <vector>

namespace dmf {

struct FastaRecord {
  std::string id;     // header line without '>' (may contain key=value tags)
  std::string seq;    // uppercase one-letter residues
};

// Strict reader: '>' headers, sequence lines of valid residue letters only.
// Malformed input throws std::runtime_error naming the 1-based line number.
std::vector<FastaRecord> read_fasta(const std::string& path);

// Writer wraps sequence lines at 80 columns.
void write_fasta(const std::string& path, const std::vector<FastaRecord>& records);

} // namespace dmf
