#include "dmf/fasta.hpp"

#include <fstream>
#include <stdexcept>

#include "dmf/alphabet.hpp"

namespace dmf {

namespace {
[[noreturn]] void bad_line(const std::string& path, std::size_t line, const std::string& what) {
  throw std::runtime_error(path + ":" + std::to_string(line) + ": " + what);
}
} // namespace

std::vector<FastaRecord> read_fasta(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open FASTA file: " + path);
  std::vector<FastaRecord> records;
  std::string line;
  std::size_t lineno = 0;
  bool have_record = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '>') {
      if (have_record && records.back().seq.empty())
        bad_line(path, lineno, "record '" + records.back().id + "' has no sequence");
      records.push_back({line.substr(1), ""});
      have_record = true;
      continue;
    }
    if (!have_record) bad_line(path, lineno, "sequence data before any '>' header");
    for (char c : line)
      if (amino_id(c) < 0)
        bad_line(path, lineno, std::string("invalid residue letter '") + c + "'");
    records.back().seq += line;
  }
  if (have_record && records.back().seq.empty())
    bad_line(path, lineno, "record '" + records.back().id + "' has no sequence");
  return records;
}

void write_fasta(const std::string& path, const std::vector<FastaRecord>& records) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  for (const FastaRecord& r : records) {
    os << '>' << r.id << '\n';
    for (std::size_t i = 0; i < r.seq.size(); i += 80)
      os << r.seq.substr(i, 80) << '\n';
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

} // namespace dmf
