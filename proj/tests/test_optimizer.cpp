#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "dmf/checkpoint.hpp"
#include "dmf/param_store.hpp"
#include "dmf/rng.hpp"

using namespace dmf;

namespace {

std::vector<const std::vector<float>*> grad_list(const std::vector<std::vector<float>>& gs) {
  std::vector<const std::vector<float>*> out;
  for (const auto& g : gs) out.push_back(&g);
  return out;
}

} // namespace

TEST_CASE("param store: ordering, lookup, duplicate rejection") {
  ParamStore ps;
  ps.create("b/w", {2, 3});
  ps.create("a/w", {4});
  CHECK(ps.size() == 2);
  CHECK(ps.at(0).path == "b/w");      // creation order, not lexicographic
  CHECK(ps.at(1).path == "a/w");
  CHECK(ps.total_elements() == 10);
  CHECK(ps.value("a/w").numel() == 4);
  CHECK(ps.has("b/w"));
  CHECK_FALSE(ps.has("c/w"));
  CHECK_THROWS_AS(ps.create("a/w", {1}), std::invalid_argument);
  CHECK_THROWS_AS(ps.entry("nope"), std::out_of_range);
  CHECK(ps.value("b/w").requires_grad);
}

TEST_CASE("initializers: moments and bounds") {
  Rng rng(child_seed(21, 1));
  Tensor<float> t({64, 64});
  init_normal(t, rng, 0.02f);
  double mean = 0, var = 0;
  for (std::int64_t i = 0; i < t.numel(); ++i) mean += t.at(i);
  mean /= double(t.numel());
  for (std::int64_t i = 0; i < t.numel(); ++i) var += (t.at(i) - mean) * (t.at(i) - mean);
  var /= double(t.numel());
  CHECK(std::abs(mean) < 2e-3);
  CHECK(std::sqrt(var) == doctest::Approx(0.02).epsilon(0.05));

  Tensor<float> x({48, 96});
  init_xavier_uniform(x, rng);
  const float bound = std::sqrt(6.0f / (48 + 96));
  float mx = 0;
  for (std::int64_t i = 0; i < x.numel(); ++i) mx = std::max(mx, std::abs(x.at(i)));
  CHECK(mx <= bound);
  CHECK(mx > 0.8f * bound);   // actually fills the range

  Tensor<float> one_d({7});
  CHECK_THROWS_AS(init_xavier_uniform(one_d, rng), std::invalid_argument);
}

TEST_CASE("adam: first-step update matches closed form") {
  ParamStore ps;
  ps.create("p", {2});
  ps.value("p").at(0) = 1.0f;
  ps.value("p").at(1) = -2.0f;
  ps.sync_ema();
  AdamConfig cfg;
  cfg.lr = 0.1;
  cfg.clip_norm = 0;          // disabled
  cfg.ema_decay = 0.5;
  Optimizer opt(ps, cfg);

  std::vector<std::vector<float>> gs = {{0.3f, -0.7f}};
  StepStats st = opt.step(grad_list(gs));
  CHECK(st.applied);
  CHECK(st.grad_norm == doctest::Approx(std::sqrt(0.3 * 0.3 + 0.7 * 0.7)).epsilon(1e-6));
  CHECK(st.lr_used == 0.1);

  // After bias correction the first step is lr * g/(|g| + eps) regardless of g's size.
  for (int j = 0; j < 2; ++j) {
    const double g = double(gs[0][std::size_t(j)]);
    const double mhat = g;                       // m = (1-b1) g, corrected by (1-b1)
    const double vhat = g * g;
    const double want = (j == 0 ? 1.0 : -2.0) - 0.1 * mhat / (std::sqrt(vhat) + cfg.eps);
    CHECK(ps.value("p").at(j) == doctest::Approx(want).epsilon(1e-6));
    const double ema = 0.5 * (j == 0 ? 1.0 : -2.0) + 0.5 * double(ps.value("p").at(j));
    CHECK(ps.entry("p").ema.at(j) == doctest::Approx(ema).epsilon(1e-6));
  }
  CHECK(opt.steps_applied() == 1);
}

TEST_CASE("clipping: norm-4 gradients behave exactly like pre-halved gradients") {
  auto make_store = [] {
    ParamStore ps;
    Tensor<float>& p = ps.create("p", {2});
    p.at(0) = 0.25f;
    p.at(1) = -1.5f;
    ps.sync_ema();
    return ps;
  };
  AdamConfig clipped;
  clipped.clip_norm = 2.0;
  AdamConfig unclipped;
  unclipped.clip_norm = 0;

  const float a = 3.0f, b = std::sqrt(7.0f);   // global norm sqrt(9+7) = 4
  ParamStore s1 = make_store();
  Optimizer o1(s1, clipped);
  std::vector<std::vector<float>> g1 = {{a, b}};
  StepStats st = o1.step(grad_list(g1));
  CHECK(st.grad_norm == doctest::Approx(4.0).epsilon(1e-6));

  ParamStore s2 = make_store();
  Optimizer o2(s2, unclipped);
  std::vector<std::vector<float>> g2 = {{a / 2, b / 2}};   // exact halving in fp
  o2.step(grad_list(g2));

  CHECK(s1.value("p").at(0) == s2.value("p").at(0));   // bit-identical trajectories
  CHECK(s1.value("p").at(1) == s2.value("p").at(1));

  // Norms at or below the threshold are untouched.
  ParamStore s3 = make_store();
  ParamStore s4 = make_store();
  Optimizer o3(s3, clipped), o4(s4, unclipped);
  std::vector<std::vector<float>> small = {{0.6f, -0.8f}};   // norm 1 < 2
  o3.step(grad_list(small));
  o4.step(grad_list(small));
  CHECK(s3.value("p").at(0) == s4.value("p").at(0));
  CHECK(s3.value("p").at(1) == s4.value("p").at(1));
}

TEST_CASE("warmup: linear ramp hits lr/2 at the midpoint and 1x after") {
  ParamStore ps;
  ps.create("p", {1});
  ps.sync_ema();
  AdamConfig cfg;
  cfg.lr = 4e-4;
  cfg.warmup_steps = 5000;
  cfg.clip_norm = 0;
  Optimizer opt(ps, cfg);
  std::vector<std::vector<float>> g = {{1e-6f}};
  StepStats st{};
  for (int i = 0; i < 2500; ++i) st = opt.step(grad_list(g));
  CHECK(st.lr_used == 0.5 * cfg.lr);           // step 2500 of 5000: exactly half
  for (int i = 0; i < 2500; ++i) st = opt.step(grad_list(g));
  CHECK(st.lr_used == cfg.lr);                 // step 5000: full rate
  st = opt.step(grad_list(g));
  CHECK(st.lr_used == cfg.lr);                 // and it stays there
}

TEST_CASE("non-finite gradients reject the step without touching state") {
  ParamStore ps;
  ps.create("p", {3});
  ps.value("p").at(0) = 1.0f;
  ps.value("p").at(1) = 2.0f;
  ps.value("p").at(2) = 3.0f;
  ps.sync_ema();
  Optimizer opt(ps, AdamConfig{});

  for (float bad : {std::numeric_limits<float>::quiet_NaN(),
                    std::numeric_limits<float>::infinity()}) {
    std::vector<std::vector<float>> g = {{0.1f, bad, 0.1f}};
    StepStats st = opt.step(grad_list(g));
    CHECK_FALSE(st.applied);
    CHECK(ps.value("p").at(0) == 1.0f);
    CHECK(ps.value("p").at(1) == 2.0f);
    CHECK(ps.value("p").at(2) == 3.0f);
    CHECK(ps.entry("p").m[1] == 0.0f);
  }
  CHECK(opt.steps_rejected() == 2);
  CHECK(opt.steps_applied() == 0);

  std::vector<std::vector<float>> ok = {{0.1f, 0.1f, 0.1f}};
  StepStats st = opt.step(grad_list(ok));
  CHECK(st.applied);
  CHECK(opt.steps_applied() == 1);   // rejected attempts never advance the clock
}

TEST_CASE("ema decay: one applied step matches the recurrence") {
  ParamStore ps;
  ps.create("p", {1});
  ps.value("p").at(0) = 2.0f;
  ps.sync_ema();
  AdamConfig cfg;
  cfg.lr = 0.1;               // big enough step that the EMA moves well past float ulp
  cfg.ema_decay = 0.999;
  cfg.clip_norm = 0;
  Optimizer opt(ps, cfg);
  std::vector<std::vector<float>> g = {{0.5f}};
  opt.step(grad_list(g));
  const double pnew = double(ps.value("p").at(0));
  const double want = 0.999 * 2.0 + 0.001 * pnew;
  CHECK(double(ps.entry("p").ema.at(0)) == doctest::Approx(want).epsilon(1e-6));
  CHECK(ps.entry("p").ema.at(0) != ps.value("p").at(0));
}

TEST_CASE("checkpoint: round trip restores values and EMA bitwise") {
  Rng rng(child_seed(21, 2));
  ParamStore ps;
  init_normal(ps.create("enc/w", {4, 6}), rng, 0.3f);
  init_normal(ps.create("dec/b", {6}), rng, 0.3f);
  ps.sync_ema();
  init_normal(ps.entry("dec/b").ema, rng, 0.1f);   // distinct EMA content

  const std::string path = "ckpt_test_roundtrip.bin";
  save_checkpoint(path, ps);

  ParamStore ps2;
  ps2.create("enc/w", {4, 6});
  ps2.create("dec/b", {6});
  load_checkpoint(path, ps2);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    for (std::int64_t j = 0; j < ps.at(i).value.numel(); ++j) {
      CHECK(ps2.at(i).value.at(j) == ps.at(i).value.at(j));
      CHECK(ps2.at(i).ema.at(j) == ps.at(i).ema.at(j));
    }
  }
  std::remove(path.c_str());
}

TEST_CASE("checkpoint: version, magic, and missing-param errors") {
  ParamStore ps;
  ps.create("w", {2});
  ps.sync_ema();
  const std::string path = "ckpt_test_errors.bin";
  save_checkpoint(path, ps);

  SUBCASE("wrong version") {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(4);
    const std::uint32_t bogus = 9999;
    f.write(reinterpret_cast<const char*>(&bogus), 4);
    f.close();
    ParamStore ps2;
    ps2.create("w", {2});
    CHECK_THROWS_AS(load_checkpoint(path, ps2), CheckpointVersionError);
  }
  SUBCASE("wrong magic") {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(0);
    f.write("XXXX", 4);
    f.close();
    ParamStore ps2;
    ps2.create("w", {2});
    CHECK_THROWS_AS(load_checkpoint(path, ps2), CheckpointError);
  }
  SUBCASE("missing file") {
    ParamStore ps2;
    ps2.create("w", {2});
    CHECK_THROWS_AS(load_checkpoint("no_such_file.bin", ps2), CheckpointError);
  }
  SUBCASE("store wants a param the file lacks") {
    ParamStore ps2;
    ps2.create("w", {2});
    ps2.create("extra", {1});
    CHECK_THROWS_AS(load_checkpoint(path, ps2), CheckpointError);
  }
  SUBCASE("shape mismatch") {
    ParamStore ps2;
    ps2.create("w", {3});
    CHECK_THROWS_AS(load_checkpoint(path, ps2), CheckpointError);
  }
  std::remove(path.c_str());
}

TEST_CASE("optimizer rejects malformed gradient lists") {
  ParamStore ps;
  ps.create("p", {2});
  ps.sync_ema();
  Optimizer opt(ps, AdamConfig{});
  std::vector<std::vector<float>> too_few = {};
  CHECK_THROWS_AS(opt.step(grad_list(too_few)), std::invalid_argument);
  std::vector<std::vector<float>> wrong_size = {{1.0f}};
  CHECK_THROWS_AS(opt.step(grad_list(wrong_size)), std::invalid_argument);
}
