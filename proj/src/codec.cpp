#include "dmf/codec.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

#include "dmf/alphabet.hpp"
#include "dmf/checkpoint.hpp"
#include "dmf/model_util.hpp"
#include "dmf/tape.hpp"

namespace dmf {

namespace {

// Streaming per-channel moments over semantic positions.
struct ChannelStats {
  std::vector<double> sum, sumsq;
  double count = 0;
  explicit ChannelStats(int d) : sum(std::size_t(d), 0.0), sumsq(std::size_t(d), 0.0) {}

  void add(const Tensor<float>& states, const Tensor<float>& mask) {
    const std::int64_t d = states.last_dim(), rows = states.rows();
    if (mask.numel() != rows) throw std::invalid_argument("normalizer: mask/states mismatch");
    for (std::int64_t r = 0; r < rows; ++r) {
      if (mask.at(r) == 0.0f) continue;
      count += 1.0;
      for (std::int64_t c = 0; c < d; ++c) {
        const double x = double(states.at(r * d + c));
        sum[std::size_t(c)] += x;
        sumsq[std::size_t(c)] += x * x;
      }
    }
  }

  Normalizer finalize() const {
    if (count <= 0) throw std::invalid_argument("normalizer: no semantic positions");
    Normalizer n;
    const int d = int(sum.size());
    n.mean.resize(std::size_t(d));
    n.std.resize(std::size_t(d));
    for (int c = 0; c < d; ++c) {
      const double m = sum[std::size_t(c)] / count;
      const double var = sumsq[std::size_t(c)] / count - m * m;
      if (!(var > 1e-12))
        throw std::runtime_error("normalizer: zero-variance channel " + std::to_string(c));
      n.mean[std::size_t(c)] = float(m);
      n.std[std::size_t(c)] = float(std::sqrt(var));
    }
    return n;
  }
};

} // namespace

void Normalizer::normalize(Tensor<float>& rows) const {
  const std::int64_t d = rows.last_dim(), n = rows.rows();
  if (std::size_t(d) != mean.size()) throw std::invalid_argument("normalizer: channel mismatch");
  for (std::int64_t r = 0; r < n; ++r)
    for (std::int64_t c = 0; c < d; ++c)
      rows.at(r * d + c) = (rows.at(r * d + c) - mean[std::size_t(c)]) / std[std::size_t(c)];
}

void Normalizer::denormalize(Tensor<float>& rows) const {
  const std::int64_t d = rows.last_dim(), n = rows.rows();
  if (std::size_t(d) != mean.size()) throw std::invalid_argument("normalizer: channel mismatch");
  for (std::int64_t r = 0; r < n; ++r)
    for (std::int64_t c = 0; c < d; ++c)
      rows.at(r * d + c) = rows.at(r * d + c) * std[std::size_t(c)] + mean[std::size_t(c)];
}

Normalizer fit_normalizer(const Tensor<float>& states, const Tensor<float>& mask) {
  ChannelStats cs(int(states.last_dim()));
  cs.add(states, mask);
  return cs.finalize();
}

std::vector<std::int32_t> decode_latents(const Decoder& dec, const Tensor<float>& latents) {
  const std::int64_t d = dec.w.shape[0];
  if (latents.last_dim() != d) throw std::invalid_argument("decoder: channel mismatch");
  const std::int64_t rows = latents.rows();
  std::vector<std::int32_t> out(static_cast<std::size_t>(rows));
  std::vector<float> logits(static_cast<std::size_t>(kAlphabetSize));
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t j = 0; j < kAlphabetSize; ++j) {
      float acc = dec.b.at(j);
      for (std::int64_t c = 0; c < d; ++c)
        acc = std::fma(latents.at(r * d + c), dec.w.at(c * kAlphabetSize + j), acc);
      logits[std::size_t(j)] = acc;
    }
    std::int32_t best = 0;   // ties resolve to the lowest semantic id
    for (std::int32_t j = 1; j < kNumAmino; ++j)
      if (logits[std::size_t(j)] > logits[std::size_t(best)]) best = j;
    out[std::size_t(r)] = best;
  }
  return out;
}

Decoder make_untrained_decoder(int d_enc, Rng& rng) {
  Decoder dec;
  dec.w = Tensor<float>({d_enc, kAlphabetSize});
  dec.b = Tensor<float>({kAlphabetSize});
  init_xavier_uniform(dec.w, rng);
  return dec;
}

namespace {

// Frozen-encoder latents of a split, concatenated over semantic rows.
void collect_rows(ParamStore& enc, const EncoderConfig& cfg, const Corpus& corpus,
                  const std::vector<std::int64_t>& idx, std::vector<float>& rows,
                  std::vector<std::int32_t>& targets) {
  for (std::size_t lo = 0; lo < idx.size(); lo += 64) {
    const std::size_t hi = std::min(idx.size(), lo + 64);
    std::vector<std::vector<std::int32_t>> seqs;
    int longest = 1;
    for (std::size_t i = lo; i < hi; ++i) {
      seqs.push_back(corpus.sequences[std::size_t(idx[i])]);
      longest = std::max(longest, int(seqs.back().size()));
    }
    TokenBatch tb = make_batch(seqs, longest);
    Tensor<float> states = encode_batch(enc, cfg, tb.tokens, tb.mask);
    const std::int64_t d = states.last_dim();
    for (std::int64_t r = 0; r < states.rows(); ++r) {
      if (tb.mask.at(r) == 0.0f) continue;
      for (std::int64_t c = 0; c < d; ++c) rows.push_back(states.at(r * d + c));
      targets.push_back(tb.tokens.values[std::size_t(r)]);
    }
  }
}

double dataset_ce(const Decoder& dec, const std::vector<float>& rows,
                  const std::vector<std::int32_t>& targets, std::int64_t d) {
  Tape<float> tp;
  Tensor<float> x({std::int64_t(targets.size()), d}, std::vector<float>(rows));
  auto logits = tp.add(tp.matmul(tp.constant(std::move(x)), tp.constant(dec.w.clone())),
                       tp.constant(dec.b.clone()));
  IntTensor t({std::int64_t(targets.size())}, std::vector<std::int32_t>(targets));
  std::vector<float> w(targets.size(), 1.0f);
  return double(tp.value(tp.cross_entropy(logits, t, w)).at(0));
}

} // namespace

FinetuneReport finetune_decoder(Decoder& dec, ParamStore& enc, const EncoderConfig& cfg,
                                const Corpus& corpus, int epochs, std::uint64_t seed) {
  std::vector<float> train_rows, val_rows;
  std::vector<std::int32_t> train_t, val_t;
  collect_rows(enc, cfg, corpus, corpus.train, train_rows, train_t);
  collect_rows(enc, cfg, corpus, corpus.val.empty() ? corpus.test : corpus.val, val_rows, val_t);
  if (train_t.empty() || val_t.empty())
    throw std::invalid_argument("decoder finetuning needs train and validation splits");
  const std::int64_t d = cfg.d_enc;

  ParamStore ps;
  std::copy(dec.w.ptr(), dec.w.ptr() + dec.w.numel(), ps.create("dec/w", dec.w.shape).ptr());
  std::copy(dec.b.ptr(), dec.b.ptr() + dec.b.numel(), ps.create("dec/b", dec.b.shape).ptr());
  ps.sync_ema();
  AdamConfig acfg;
  acfg.lr = 1e-2;
  Optimizer opt(ps, acfg);
  Rng rng(child_seed(seed, streams::kCodec));

  FinetuneReport report;
  Decoder best = {dec.w.clone(), dec.b.clone()};
  double best_val = 1e300;
  const std::int64_t n = std::int64_t(train_t.size()), batch = 8192;
  for (int e = 0; e < epochs; ++e) {
    for (std::int64_t lo = 0; lo < n; lo += batch) {
      const std::int64_t hi = std::min(n, lo + batch);
      Tensor<float> x({hi - lo, d},
                      std::vector<float>(train_rows.begin() + lo * d, train_rows.begin() + hi * d));
      IntTensor t({hi - lo},
                  std::vector<std::int32_t>(train_t.begin() + lo, train_t.begin() + hi));
      std::vector<float> w(std::size_t(hi - lo), 1.0f);
      Tape<float> tp;
      TapeBinding bind(tp, ps, TapeBinding::Mode::Train);
      auto logits = tp.add(tp.matmul(tp.constant(std::move(x)), bind("dec/w")), bind("dec/b"));
      auto loss = tp.cross_entropy(logits, t, w);
      if (!std::isfinite(tp.value(loss).at(0)))
        throw std::runtime_error("decoder finetuning diverged: loss=" +
                                 std::to_string(tp.value(loss).at(0)) + " at epoch " +
                                 std::to_string(e));
      tp.backward(loss);
      opt.step(bind.grads());
    }
    Decoder cur = {ps.value("dec/w").clone(), ps.value("dec/b").clone()};
    const double tr = dataset_ce(cur, train_rows, train_t, d);
    const double va = dataset_ce(cur, val_rows, val_t, d);
    report.train_loss.push_back(tr);
    report.val_loss.push_back(va);
    if (va < best_val) {
      best_val = va;
      best = {cur.w.clone(), cur.b.clone()};
      report.best_epoch = e;
    }
  }
  dec = {best.w.clone(), best.b.clone()};
  return report;
}

int LengthModel::sample(Rng& rng) const {
  const double u = rng.uniform();
  double acc = 0;
  for (std::size_t i = 0; i < support.size(); ++i) {
    acc += probs[i];
    if (u < acc) return support[i];
  }
  return support.back();
}

LengthModel fit_length_model(const std::vector<std::vector<std::int32_t>>& seqs,
                             const std::vector<std::int64_t>& idx) {
  if (idx.empty()) throw std::invalid_argument("length model: empty corpus");
  std::map<int, std::int64_t> counts;
  for (std::int64_t i : idx) ++counts[int(seqs[std::size_t(i)].size())];
  LengthModel lm;
  for (const auto& [len, c] : counts) {
    lm.support.push_back(len);
    lm.probs.push_back(double(c) / double(idx.size()));
  }
  return lm;
}

Codec build_codec(const Corpus& corpus, const CodecBuildConfig& cfg, std::uint64_t seed) {
  const std::uint64_t codec_seed = child_seed(seed, streams::kCodec);
  Codec codec;
  codec.enc_cfg = cfg.enc;
  codec.enc_cfg.max_len = std::max(cfg.enc.max_len, corpus.max_length());
  Rng init_rng(child_seed(codec_seed, 1));
  init_encoder_params(codec.enc, codec.enc_cfg, init_rng);
  if (codec.enc_cfg.transformer)
    pretrain_encoder(codec.enc, codec.enc_cfg, corpus, cfg.pretrain, codec_seed);

  ChannelStats cs(codec.enc_cfg.d_enc);
  for (std::size_t lo = 0; lo < corpus.train.size(); lo += 64) {
    const std::size_t hi = std::min(corpus.train.size(), lo + 64);
    std::vector<std::vector<std::int32_t>> seqs;
    int longest = 1;
    for (std::size_t i = lo; i < hi; ++i) {
      seqs.push_back(corpus.sequences[std::size_t(corpus.train[i])]);
      longest = std::max(longest, int(seqs.back().size()));
    }
    TokenBatch tb = make_batch(seqs, longest);
    cs.add(encode_batch(codec.enc, codec.enc_cfg, tb.tokens, tb.mask), tb.mask);
  }
  codec.norm = cs.finalize();

  Rng dec_rng(child_seed(codec_seed, 2));
  codec.dec = make_untrained_decoder(codec.enc_cfg.d_enc, dec_rng);
  if (cfg.finetune)
    finetune_decoder(codec.dec, codec.enc, codec.enc_cfg, corpus, cfg.decoder_epochs, codec_seed);

  codec.len = fit_length_model(corpus.sequences, corpus.train);
  return codec;
}

Tensor<float> encode_normalized(Codec& codec, const IntTensor& tokens, const Tensor<float>& mask) {
  Tensor<float> states = encode_batch(codec.enc, codec.enc_cfg, tokens, mask);
  codec.norm.normalize(states);
  return states;
}

std::vector<std::int32_t> decode_normalized(const Codec& codec, Tensor<float> latents) {
  codec.norm.denormalize(latents);
  return decode_latents(codec.dec, latents);
}

void save_codec(const std::string& dir, const Codec& codec) {
  std::filesystem::create_directories(dir);
  NamedTensors items;
  for (std::size_t i = 0; i < codec.enc.size(); ++i)
    items.emplace_back(codec.enc.at(i).path, codec.enc.at(i).value);
  items.emplace_back("dec/w", codec.dec.w);
  items.emplace_back("dec/b", codec.dec.b);
  const auto vec = [](const std::vector<float>& v) {
    return Tensor<float>({std::int64_t(v.size())}, std::vector<float>(v));
  };
  items.emplace_back("norm/mean", vec(codec.norm.mean));
  items.emplace_back("norm/std", vec(codec.norm.std));
  Tensor<float> support({std::int64_t(codec.len.support.size())});
  Tensor<float> probs({std::int64_t(codec.len.probs.size())});
  for (std::size_t i = 0; i < codec.len.support.size(); ++i) {
    support.at(std::int64_t(i)) = float(codec.len.support[i]);
    probs.at(std::int64_t(i)) = float(codec.len.probs[i]);
  }
  items.emplace_back("len/support", std::move(support));
  items.emplace_back("len/probs", std::move(probs));
  write_tensor_file(dir + "/codec.bin", items);

  nlohmann::json j;
  j["encoder"] = {{"d_enc", codec.enc_cfg.d_enc},       {"n_layers", codec.enc_cfg.n_layers},
                  {"n_heads", codec.enc_cfg.n_heads},   {"max_len", codec.enc_cfg.max_len},
                  {"mlp_mult", codec.enc_cfg.mlp_mult}, {"transformer", codec.enc_cfg.transformer}};
  std::ofstream os(dir + "/codec.json");
  if (!os) throw std::runtime_error("cannot write codec config in " + dir);
  os << j.dump(2) << "\n";
}

Codec load_codec(const std::string& dir) {
  std::ifstream is(dir + "/codec.json");
  if (!is) throw std::runtime_error("missing codec config: " + dir + "/codec.json");
  nlohmann::json j = nlohmann::json::parse(is);
  Codec codec;
  const auto& e = j.at("encoder");
  codec.enc_cfg.d_enc = e.at("d_enc").get<int>();
  codec.enc_cfg.n_layers = e.at("n_layers").get<int>();
  codec.enc_cfg.n_heads = e.at("n_heads").get<int>();
  codec.enc_cfg.max_len = e.at("max_len").get<int>();
  codec.enc_cfg.mlp_mult = e.at("mlp_mult").get<int>();
  codec.enc_cfg.transformer = e.at("transformer").get<bool>();

  NamedTensors items = read_tensor_file(dir + "/codec.bin");
  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& [name, t] : items) by_name[name] = &t;
  const auto want = [&](const std::string& name) -> const Tensor<float>& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("codec file missing tensor: " + name);
    return *it->second;
  };

  Rng dummy(0);
  init_encoder_params(codec.enc, codec.enc_cfg, dummy);
  for (std::size_t i = 0; i < codec.enc.size(); ++i) {
    ParamStore::Entry& en = codec.enc.at(i);
    const Tensor<float>& src = want(en.path);
    if (src.shape != en.value.shape)
      throw CheckpointError("codec tensor shape mismatch for " + en.path);
    std::copy(src.ptr(), src.ptr() + src.numel(), en.value.ptr());
  }
  codec.enc.sync_ema();
  codec.dec.w = want("dec/w").clone();
  codec.dec.b = want("dec/b").clone();
  const Tensor<float>& mean = want("norm/mean");
  const Tensor<float>& stdv = want("norm/std");
  codec.norm.mean.assign(mean.ptr(), mean.ptr() + mean.numel());
  codec.norm.std.assign(stdv.ptr(), stdv.ptr() + stdv.numel());
  const Tensor<float>& support = want("len/support");
  const Tensor<float>& probs = want("len/probs");
  for (std::int64_t i = 0; i < support.numel(); ++i) {
    codec.len.support.push_back(int(support.at(i)));
    codec.len.probs.push_back(double(probs.at(i)));
  }
  return codec;
}

} // namespace dmf
