#include "dmf/corpus.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

#include "dmf/alphabet.hpp"
#include "dmf/fasta.hpp"

namespace dmf {

namespace {

void validate(const SynthConfig& c) {
  if (c.n_train < 1 || c.n_val < 0 || c.n_test < 0)
    throw std::invalid_argument("corpus: need at least one training sequence");
  if (c.families != 1 && c.families != 2)
    throw std::invalid_argument("corpus: families must be 1 or 2");
  if (c.slots < 1 || c.slot_len < 1 || c.variants < 1 || c.variants > kNumAmino)
    throw std::invalid_argument("corpus: need 1 <= variants <= alphabet and positive slot dims");
  if (c.min_len < 2 || c.max_len < c.min_len || c.max_len > c.slots * c.slot_len)
    throw std::invalid_argument("corpus: need 2 <= min_len <= max_len <= slots*slot_len");
  if (c.noise < 0.0 || c.noise >= 1.0)
    throw std::invalid_argument("corpus: noise must be in [0,1)");
}

} // namespace

std::vector<std::int64_t> Corpus::lengths() const {
  std::vector<std::int64_t> out;
  out.reserve(sequences.size());
  for (const auto& s : sequences) out.push_back(std::int64_t(s.size()));
  return out;
}

int Corpus::max_length() const {
  std::size_t m = 0;
  for (const auto& s : sequences) m = std::max(m, s.size());
  return int(m);
}

std::vector<FamilyGrammar> grammar_for(const SynthConfig& cfg) {
  validate(cfg);
  Rng rng(child_seed(child_seed(cfg.seed, streams::kCorpus), 1));
  std::vector<FamilyGrammar> fams(std::size_t(cfg.families));
  for (auto& fam : fams) {
    fam.motifs.assign(std::size_t(cfg.slots), {});
    for (int j = 0; j < cfg.slots; ++j) {
      auto& slot = fam.motifs[std::size_t(j)];
      while (slot.empty()) {
        // variants carry distinct letters at every position, so any clean
        // in-slot residue identifies the chosen variant outright
        std::vector<std::vector<std::int32_t>> ms(
            std::size_t(cfg.variants), std::vector<std::int32_t>(std::size_t(cfg.slot_len)));
        for (int k = 0; k < cfg.slot_len; ++k) {
          std::vector<std::int32_t> pool(static_cast<std::size_t>(kNumAmino));
          for (std::int32_t t = 0; t < kNumAmino; ++t) pool[std::size_t(t)] = t;
          for (int v = 0; v < cfg.variants; ++v) {
            const auto pick = v + std::int64_t(rng.uniform_u64(std::uint64_t(kNumAmino - v)));
            std::swap(pool[std::size_t(v)], pool[std::size_t(pick)]);
            ms[std::size_t(v)][std::size_t(k)] = pool[std::size_t(v)];
          }
        }
        bool ok = true;   // no motif may repeat anywhere across families
        for (const auto& other : fams)
          for (const auto& oslot : other.motifs)
            for (const auto& om : oslot)
              for (const auto& m : ms)
                if (om == m) ok = false;
        if (ok) slot = std::move(ms);
      }
    }
  }
  return fams;
}

Corpus make_corpus(const SynthConfig& cfg) {
  validate(cfg);
  const std::vector<FamilyGrammar> fams = grammar_for(cfg);
  Rng rng(child_seed(child_seed(cfg.seed, streams::kCorpus), 2));

  Corpus corpus;
  corpus.source = "slot-grammar-v1";
  corpus.synth = cfg;
  const std::int64_t total = cfg.n_train + cfg.n_val + cfg.n_test;
  corpus.sequences.reserve(std::size_t(total));
  corpus.labels.reserve(std::size_t(total));
  for (std::int64_t i = 0; i < total; ++i) {
    const int fam = (cfg.families == 2) ? int(i % 2) : 0;
    const auto& motifs = fams[std::size_t(fam)].motifs;
    const std::int64_t s =
        cfg.min_len + std::int64_t(rng.uniform_u64(std::uint64_t(cfg.max_len - cfg.min_len + 1)));
    std::vector<std::int32_t> seq;
    seq.reserve(std::size_t(s));
    const std::int64_t full = s / cfg.slot_len, rem = s % cfg.slot_len;
    for (std::int64_t j = 0; j < full; ++j) {
      const auto v = rng.uniform_u64(std::uint64_t(cfg.variants));
      const auto& m = motifs[std::size_t(j)][std::size_t(v)];
      seq.insert(seq.end(), m.begin(), m.end());
    }
    if (rem > 0) {
      const auto& m = motifs[std::size_t(full)][0];
      seq.insert(seq.end(), m.begin(), m.begin() + rem);
    }
    for (auto& t : seq)
      if (rng.uniform() < cfg.noise) t = std::int32_t(rng.uniform_u64(kNumAmino));
    corpus.sequences.push_back(std::move(seq));
    corpus.labels.push_back(cfg.families == 2 ? fam + 1 : 0);
  }
  for (std::int64_t i = 0; i < cfg.n_train; ++i) corpus.train.push_back(i);
  for (std::int64_t i = 0; i < cfg.n_val; ++i) corpus.val.push_back(cfg.n_train + i);
  for (std::int64_t i = 0; i < cfg.n_test; ++i) corpus.test.push_back(cfg.n_train + cfg.n_val + i);
  return corpus;
}

namespace {

std::vector<FastaRecord> split_records(const Corpus& c, const std::vector<std::int64_t>& idx,
                                       const std::string& tag) {
  std::vector<FastaRecord> recs;
  recs.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%05zu", tag.c_str(), i);
    std::string id = buf;
    if (c.labels[std::size_t(idx[i])] != 0)
      id += " fam=" + std::to_string(c.labels[std::size_t(idx[i])]);
    recs.push_back({id, detokenize(c.sequences[std::size_t(idx[i])])});
  }
  return recs;
}

} // namespace

void save_corpus(const std::string& dir, const Corpus& corpus) {
  std::filesystem::create_directories(dir);
  write_fasta(dir + "/train.fasta", split_records(corpus, corpus.train, "train"));
  write_fasta(dir + "/val.fasta", split_records(corpus, corpus.val, "val"));
  write_fasta(dir + "/test.fasta", split_records(corpus, corpus.test, "test"));

  std::map<std::string, std::int64_t> hist;
  for (const auto& s : corpus.sequences) ++hist[std::to_string(s.size())];
  nlohmann::json j;
  j["source"] = corpus.source;
  j["seed"] = corpus.synth.seed;
  j["split_sizes"] = {{"train", corpus.train.size()},
                      {"val", corpus.val.size()},
                      {"test", corpus.test.size()}};
  j["length_histogram"] = hist;
  j["generator"] = {{"families", corpus.synth.families}, {"slots", corpus.synth.slots},
                    {"slot_len", corpus.synth.slot_len}, {"variants", corpus.synth.variants},
                    {"noise", corpus.synth.noise},       {"min_len", corpus.synth.min_len},
                    {"max_len", corpus.synth.max_len}};
  std::ofstream os(dir + "/manifest.json");
  if (!os) throw std::runtime_error("cannot write corpus manifest in " + dir);
  os << j.dump(2) << "\n";
}

Corpus load_corpus(const std::string& dir) {
  std::ifstream is(dir + "/manifest.json");
  if (!is) throw std::runtime_error("missing corpus manifest: " + dir + "/manifest.json");
  nlohmann::json j = nlohmann::json::parse(is);

  Corpus corpus;
  corpus.source = j.at("source").get<std::string>();
  corpus.synth.seed = j.at("seed").get<std::uint64_t>();
  const auto& g = j.at("generator");
  corpus.synth.families = g.at("families").get<int>();
  corpus.synth.slots = g.at("slots").get<int>();
  corpus.synth.slot_len = g.at("slot_len").get<int>();
  corpus.synth.variants = g.at("variants").get<int>();
  corpus.synth.noise = g.at("noise").get<double>();
  corpus.synth.min_len = g.at("min_len").get<int>();
  corpus.synth.max_len = g.at("max_len").get<int>();

  auto load_split = [&](const std::string& name, std::vector<std::int64_t>& idx) {
    for (const FastaRecord& r : read_fasta(dir + "/" + name + ".fasta")) {
      idx.push_back(corpus.size());
      corpus.sequences.push_back(tokenize(r.seq));
      int label = 0;
      const auto pos = r.id.find("fam=");
      if (pos != std::string::npos) label = std::stoi(r.id.substr(pos + 4));
      corpus.labels.push_back(label);
    }
  };
  load_split("train", corpus.train);
  load_split("val", corpus.val);
  load_split("test", corpus.test);
  corpus.synth.n_train = std::int64_t(corpus.train.size());
  corpus.synth.n_val = std::int64_t(corpus.val.size());
  corpus.synth.n_test = std::int64_t(corpus.test.size());
  return corpus;
}

} // namespace dmf
