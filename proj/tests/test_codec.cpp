#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "dmf/alphabet.hpp"
#include "dmf/codec.hpp"
#include "dmf/corpus.hpp"
#include "dmf/model_util.hpp"

using namespace dmf;

namespace {

std::string temp_dir(const std::string& tag) {
  auto p = std::filesystem::temp_directory_path() / ("dmf_test_" + tag);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

const Corpus& toy_corpus() {
  static const Corpus c = [] {
    SynthConfig cfg;
    cfg.seed = 11;
    return make_corpus(cfg);
  }();
  return c;
}

// One pretrained codec shared by the expensive checks below.
Codec& toy_codec() {
  static Codec c = build_codec(toy_corpus(), CodecBuildConfig{}, 7);
  return c;
}

// Per-token round-trip accuracy of a raw-latent decoder over a split.
double round_trip_accuracy(Codec& codec, const Decoder& dec,
                           const std::vector<std::int64_t>& split) {
  const Corpus& corpus = toy_corpus();
  std::int64_t hits = 0, total = 0;
  for (std::size_t lo = 0; lo < split.size(); lo += 64) {
    const std::size_t hi = std::min(split.size(), lo + 64);
    std::vector<std::vector<std::int32_t>> seqs;
    int longest = 1;
    for (std::size_t i = lo; i < hi; ++i) {
      seqs.push_back(corpus.sequences[std::size_t(split[i])]);
      longest = std::max(longest, int(seqs.back().size()));
    }
    TokenBatch tb = make_batch(seqs, longest);
    Tensor<float> raw = encode_batch(codec.enc, codec.enc_cfg, tb.tokens, tb.mask);
    std::vector<std::int32_t> pred = decode_latents(dec, raw);
    for (std::int64_t r = 0; r < std::int64_t(pred.size()); ++r) {
      if (tb.mask.at(r) == 0.0f) continue;
      ++total;
      if (pred[std::size_t(r)] == tb.tokens.values[std::size_t(r)]) ++hits;
    }
  }
  return double(hits) / double(total);
}

} // namespace

TEST_CASE("normalizer: moments match a hand computation and pads are excluded") {
  // two rows semantic, one pad row with huge values
  Tensor<float> states({3, 2}, {1.0f, 10.0f, 3.0f, 30.0f, 1000.0f, -500.0f});
  Tensor<float> mask({3}, {1.0f, 1.0f, 0.0f});
  Normalizer n = fit_normalizer(states, mask);
  CHECK(n.mean[0] == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(n.mean[1] == doctest::Approx(20.0).epsilon(1e-6));
  CHECK(n.std[0] == doctest::Approx(1.0).epsilon(1e-6));    // population std
  CHECK(n.std[1] == doctest::Approx(10.0).epsilon(1e-6));

  // regression for the mask bug: counting pads must change the statistics
  Tensor<float> all({3}, {1.0f, 1.0f, 1.0f});
  Normalizer wrong = fit_normalizer(states, all);
  CHECK(wrong.mean[0] != doctest::Approx(n.mean[0]).epsilon(1e-9));
}

TEST_CASE("normalizer: zero-variance channel error names the channel") {
  Tensor<float> states({2, 3}, {1.0f, 5.0f, 7.0f, 2.0f, 5.0f, 9.0f});
  Tensor<float> mask({2}, {1.0f, 1.0f});
  CHECK_THROWS_WITH_AS(fit_normalizer(states, mask), doctest::Contains("channel 1"),
                       std::runtime_error);
}

TEST_CASE("normalizer: normalize/denormalize is the identity within 1e-6") {
  Rng rng(5);
  Tensor<float> states({40, 8});
  for (std::int64_t i = 0; i < states.numel(); ++i)
    states.at(i) = float(3.0 * rng.normal() + 0.5);
  Tensor<float> mask({40});
  for (std::int64_t i = 0; i < 40; ++i) mask.at(i) = (i % 5 == 0) ? 0.0f : 1.0f;

  Normalizer n = fit_normalizer(states, mask);
  Tensor<float> z = states.clone();
  n.normalize(z);
  n.denormalize(z);
  for (std::int64_t i = 0; i < z.numel(); ++i)
    CHECK(std::abs(z.at(i) - states.at(i)) <= 1e-6f * std::max(1.0f, std::abs(states.at(i))));

  Tensor<float> bad({2, 4});
  CHECK_THROWS_AS(n.normalize(bad), std::invalid_argument);
  CHECK_THROWS_AS(fit_normalizer(states, Tensor<float>({40}, std::vector<float>(40, 0.0f))),
                  std::invalid_argument);
}

TEST_CASE("decoder: all-zero latents yield the argmax of the bias") {
  Rng rng(3);
  Decoder dec = make_untrained_decoder(16, rng);
  dec.b.at(7) = 5.0f;
  Tensor<float> z({4, 16});   // zeros
  for (auto id : decode_latents(dec, z)) CHECK(id == 7);

  // tie on the bias: lowest id wins
  Decoder tie = make_untrained_decoder(16, rng);
  tie.b.at(4) = 2.0f;
  tie.b.at(9) = 2.0f;
  for (auto id : decode_latents(tie, Tensor<float>({2, 16}))) CHECK(id == 4);

  // non-semantic ids never win even with a larger bias
  Decoder pad = make_untrained_decoder(16, rng);
  pad.b.at(kPadId) = 10.0f;
  pad.b.at(2) = 1.0f;
  for (auto id : decode_latents(pad, Tensor<float>({2, 16}))) CHECK(id == 2);
}

TEST_CASE("decoder: permuting latent rows permutes the output tokens") {
  Rng rng(9);
  Decoder dec = make_untrained_decoder(8, rng);
  Tensor<float> z({5, 8});
  for (std::int64_t i = 0; i < z.numel(); ++i) z.at(i) = float(rng.normal());
  auto base = decode_latents(dec, z);

  Tensor<float> swapped = z.clone();
  for (std::int64_t c = 0; c < 8; ++c)
    std::swap(swapped.at(1 * 8 + c), swapped.at(3 * 8 + c));
  auto perm = decode_latents(dec, swapped);
  CHECK(perm[0] == base[0]);
  CHECK(perm[1] == base[3]);
  CHECK(perm[3] == base[1]);
  CHECK(perm[2] == base[2]);
  CHECK(perm[4] == base[4]);

  CHECK_THROWS_AS(decode_latents(dec, Tensor<float>({2, 9})), std::invalid_argument);
}

TEST_CASE("batching: pads fill with PAD id and the mask marks semantic slots") {
  TokenBatch tb = make_batch({{1, 2, 3}, {4}}, 5);
  REQUIRE(tb.tokens.shape == std::vector<std::int64_t>{2, 5});
  CHECK(tb.tokens.values == std::vector<std::int32_t>{1, 2, 3, kPadId, kPadId,
                                                      4, kPadId, kPadId, kPadId, kPadId});
  CHECK(tb.mask.at(0) == 1.0f);
  CHECK(tb.mask.at(2) == 1.0f);
  CHECK(tb.mask.at(3) == 0.0f);
  CHECK(tb.mask.at(5) == 1.0f);
  CHECK(tb.mask.at(6) == 0.0f);
  CHECK_THROWS_AS(make_batch({{1, 2, 3}}, 2), std::invalid_argument);
}

TEST_CASE("encoder: embedding-only mode is position-local") {
  EncoderConfig cfg;
  cfg.transformer = false;
  ParamStore store;
  Rng rng(21);
  init_encoder_params(store, cfg, rng);

  TokenBatch tb = make_batch({{3, 3, 7, 3}}, 4);
  Tensor<float> s = encode_batch(store, cfg, tb.tokens, tb.mask);
  const std::int64_t d = cfg.d_enc;
  for (std::int64_t c = 0; c < d; ++c) {
    CHECK(s.at(0 * d + c) == s.at(1 * d + c));   // repeated token: identical rows
    CHECK(s.at(1 * d + c) == s.at(3 * d + c));
  }

  TokenBatch tb2 = make_batch({{3, 3, 8, 3}}, 4);   // change token 2 only
  Tensor<float> s2 = encode_batch(store, cfg, tb2.tokens, tb2.mask);
  bool row2_changed = false;
  for (std::int64_t c = 0; c < d; ++c) {
    CHECK(s2.at(0 * d + c) == s.at(0 * d + c));
    CHECK(s2.at(1 * d + c) == s.at(1 * d + c));
    CHECK(s2.at(3 * d + c) == s.at(3 * d + c));
    row2_changed |= (s2.at(2 * d + c) != s.at(2 * d + c));
  }
  CHECK(row2_changed);
}

TEST_CASE("encoder: transformer states ignore pad extension bit-exactly") {
  EncoderConfig cfg;
  ParamStore store;
  Rng rng(22);
  init_encoder_params(store, cfg, rng);

  std::vector<std::vector<std::int32_t>> seqs = {{1, 2, 3, 4, 5, 6, 7, 8},
                                                 {9, 10, 11, 12, 13}};
  TokenBatch a = make_batch(seqs, 10);
  TokenBatch b = make_batch(seqs, 24);
  Tensor<float> sa = encode_batch(store, cfg, a.tokens, a.mask);
  Tensor<float> sb = encode_batch(store, cfg, b.tokens, b.mask);
  const std::int64_t d = cfg.d_enc;
  for (std::size_t r = 0; r < seqs.size(); ++r)
    for (std::size_t i = 0; i < seqs[r].size(); ++i)
      for (std::int64_t c = 0; c < d; ++c)
        CHECK(sa.at((std::int64_t(r) * 10 + std::int64_t(i)) * d + c) ==
              sb.at((std::int64_t(r) * 24 + std::int64_t(i)) * d + c));

  // out-of-range token ids are rejected
  IntTensor bad({1, 2}, {0, kAlphabetSize});
  Tensor<float> mask({1, 2}, {1.0f, 1.0f});
  CHECK_THROWS(encode_batch(store, cfg, bad, mask));
}

TEST_CASE("decoder: one-hot embeddings are linearly separable to near-zero loss") {
  SynthConfig scfg;
  scfg.n_train = 60;
  scfg.n_val = 12;
  scfg.n_test = 0;
  scfg.seed = 3;
  Corpus corpus = make_corpus(scfg);

  EncoderConfig cfg;
  cfg.transformer = false;
  cfg.d_enc = kAlphabetSize;
  cfg.n_heads = 2;
  ParamStore store;
  Rng rng(4);
  init_encoder_params(store, cfg, rng);
  Tensor<float>& emb = store.value("enc/emb");
  for (std::int64_t r = 0; r < kAlphabetSize; ++r)
    for (std::int64_t c = 0; c < kAlphabetSize; ++c)
      emb.at(r * kAlphabetSize + c) = (r == c) ? 1.0f : 0.0f;

  Rng drng(5);
  Decoder dec = make_untrained_decoder(cfg.d_enc, drng);
  FinetuneReport rep = finetune_decoder(dec, store, cfg, corpus, 800, 17);
  CHECK(rep.train_loss.back() < 0.1);
  CHECK(rep.best_epoch >= 0);
}

TEST_CASE("decoder: finetuning diverges loudly on non-finite latents") {
  SynthConfig scfg;
  scfg.n_train = 8;
  scfg.n_val = 4;
  scfg.n_test = 0;
  Corpus corpus = make_corpus(scfg);

  EncoderConfig cfg;
  cfg.transformer = false;
  ParamStore store;
  Rng rng(6);
  init_encoder_params(store, cfg, rng);
  store.value("enc/emb").at(0) = std::numeric_limits<float>::quiet_NaN();

  Rng drng(7);
  Decoder dec = make_untrained_decoder(cfg.d_enc, drng);
  CHECK_THROWS_AS(finetune_decoder(dec, store, cfg, corpus, 2, 17), std::runtime_error);
}

// ---- expensive checks sharing one pretrained codec ----

TEST_CASE("codec: masked-token accuracy on held-out data exceeds 90%") {
  Codec& codec = toy_codec();
  const double acc = mlm_accuracy(codec.enc, codec.enc_cfg, toy_corpus(), toy_corpus().val,
                                  0.15, 10, 1234);
  MESSAGE("held-out masked-token accuracy: ", acc);
  CHECK(acc > 0.90);
}

TEST_CASE("codec: normalized training latents have ~(0,1) channel moments") {
  Codec& codec = toy_codec();
  const Corpus& corpus = toy_corpus();
  const int d = codec.d_enc();
  std::vector<double> sum(std::size_t(d), 0.0), sumsq(std::size_t(d), 0.0);
  double count = 0;
  for (std::size_t lo = 0; lo < corpus.train.size(); lo += 64) {
    const std::size_t hi = std::min(corpus.train.size(), lo + 64);
    std::vector<std::vector<std::int32_t>> seqs;
    int longest = 1;
    for (std::size_t i = lo; i < hi; ++i) {
      seqs.push_back(corpus.sequences[std::size_t(corpus.train[i])]);
      longest = std::max(longest, int(seqs.back().size()));
    }
    TokenBatch tb = make_batch(seqs, longest);
    Tensor<float> z = encode_normalized(codec, tb.tokens, tb.mask);
    for (std::int64_t r = 0; r < z.rows(); ++r) {
      if (tb.mask.at(r) == 0.0f) continue;
      count += 1.0;
      for (int c = 0; c < d; ++c) {
        const double x = double(z.at(r * d + c));
        sum[std::size_t(c)] += x;
        sumsq[std::size_t(c)] += x * x;
      }
    }
  }
  for (int c = 0; c < d; ++c) {
    const double m = sum[std::size_t(c)] / count;
    const double s = std::sqrt(sumsq[std::size_t(c)] / count - m * m);
    CHECK(std::abs(m) < 1e-3);
    CHECK(std::abs(s - 1.0) < 1e-2);
  }
}

TEST_CASE("codec: decode(encode(y)) recovers >= 99% of tokens on held-out data") {
  Codec& codec = toy_codec();
  const Corpus& corpus = toy_corpus();

  std::int64_t hits = 0, total = 0;
  for (std::size_t lo = 0; lo < corpus.test.size(); lo += 64) {
    const std::size_t hi = std::min(corpus.test.size(), lo + 64);
    std::vector<std::vector<std::int32_t>> seqs;
    int longest = 1;
    for (std::size_t i = lo; i < hi; ++i) {
      seqs.push_back(corpus.sequences[std::size_t(corpus.test[i])]);
      longest = std::max(longest, int(seqs.back().size()));
    }
    TokenBatch tb = make_batch(seqs, longest);
    Tensor<float> z = encode_normalized(codec, tb.tokens, tb.mask);
    std::vector<std::int32_t> pred = decode_normalized(codec, z);
    for (std::int64_t r = 0; r < std::int64_t(pred.size()); ++r) {
      if (tb.mask.at(r) == 0.0f) continue;
      ++total;
      if (pred[std::size_t(r)] == tb.tokens.values[std::size_t(r)]) ++hits;
    }
  }
  const double acc = double(hits) / double(total);
  MESSAGE("round-trip accuracy: ", acc);
  CHECK(acc >= 0.99);
}

TEST_CASE("codec: fine-tuned decoder strictly beats an untrained one") {
  Codec& codec = toy_codec();
  Rng rng(41);
  Decoder untrained = make_untrained_decoder(codec.d_enc(), rng);
  const double trained = round_trip_accuracy(codec, codec.dec, toy_corpus().test);
  const double fresh = round_trip_accuracy(codec, untrained, toy_corpus().test);
  MESSAGE("trained: ", trained, "  untrained: ", fresh);
  CHECK(trained > fresh);
}

TEST_CASE("codec: finetuning report tracks train/val loss sanely") {
  Codec& codec = toy_codec();
  Rng rng(43);
  Decoder dec = make_untrained_decoder(codec.d_enc(), rng);
  FinetuneReport rep = finetune_decoder(dec, codec.enc, codec.enc_cfg, toy_corpus(), 6, 29);
  REQUIRE(rep.train_loss.size() == 6);
  REQUIRE(rep.val_loss.size() == 6);

  // train loss decreases monotonically within noise
  double best_so_far = rep.train_loss[0];
  for (double l : rep.train_loss) {
    CHECK(l <= best_so_far * 1.02 + 1e-6);
    best_so_far = std::min(best_so_far, l);
  }
  // best epoch is the validation argmin
  const auto it = std::min_element(rep.val_loss.begin(), rep.val_loss.end());
  CHECK(rep.best_epoch == int(it - rep.val_loss.begin()));
  // validation stays within 10% of train at the chosen epoch
  const double tr = rep.train_loss[std::size_t(rep.best_epoch)];
  const double va = rep.val_loss[std::size_t(rep.best_epoch)];
  CHECK(va <= tr * 1.10 + 1e-6);
}

TEST_CASE("codec: save/load round-trips the whole bundle bit-for-bit") {
  Codec& codec = toy_codec();
  const std::string dir = temp_dir("codec_io");
  save_codec(dir, codec);
  Codec back = load_codec(dir);

  CHECK(back.enc_cfg.d_enc == codec.enc_cfg.d_enc);
  CHECK(back.enc_cfg.max_len == codec.enc_cfg.max_len);
  CHECK(back.norm.mean == codec.norm.mean);
  CHECK(back.norm.std == codec.norm.std);
  CHECK(back.len.support == codec.len.support);
  REQUIRE(back.len.probs.size() == codec.len.probs.size());
  for (std::size_t i = 0; i < back.len.probs.size(); ++i)
    CHECK(back.len.probs[i] == doctest::Approx(codec.len.probs[i]).epsilon(1e-6));
  for (std::int64_t i = 0; i < codec.dec.w.numel(); ++i)
    CHECK(back.dec.w.at(i) == codec.dec.w.at(i));

  // identical latents from the reloaded encoder
  TokenBatch tb = make_batch({toy_corpus().sequences[std::size_t(toy_corpus().val[0])]}, 64);
  Tensor<float> a = encode_normalized(codec, tb.tokens, tb.mask);
  Tensor<float> b = encode_normalized(back, tb.tokens, tb.mask);
  for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == b.at(i));

  CHECK_THROWS_AS(load_codec(dir + "/nope"), std::runtime_error);
}
