#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "dmf/rng.hpp"
#include "dmf/tape.hpp"
#include "dmf/tensor.hpp"

using namespace dmf;

namespace {

using Id = Tape<double>::Id;
using Builder = std::function<Id(Tape<double>&, const std::vector<Id>&)>;

Tensor<double> randn(Rng& rng, std::vector<std::int64_t> shape, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t.at(i) = scale * rng.normal();
  t.requires_grad = true;
  return t;
}

std::vector<double> rand_weights(Rng& rng, std::int64_t n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (auto& v : w) v = rng.normal();
  return w;
}

// Reduce any tensor to a scalar with a fixed random linear functional so every
// output element contributes to the checked gradient.
Id dot_reduce(Tape<double>& tp, Id x, const std::vector<double>& w) {
  const std::int64_t n = tp.value(x).numel();
  Id flat = tp.reshape(x, {1, n});
  Id wid = tp.constant(Tensor<double>({n, 1}, std::vector<double>(w)));
  return tp.reshape(tp.matmul(flat, wid), {1});
}

double eval_loss(const std::vector<Tensor<double>>& leaves, const Builder& build) {
  Tape<double> tp;
  std::vector<Id> ids;
  for (const auto& l : leaves) {
    Tensor<double> c = l.clone();
    c.requires_grad = false;
    ids.push_back(tp.leaf(std::move(c)));
  }
  return tp.value(build(tp, ids)).at(0);
}

// Central-difference oracle: every element of every leaf.
void check_gradients(std::vector<Tensor<double>> leaves, const Builder& build,
                     double rel_tol = 1e-5, double abs_tol = 1e-7) {
  Tape<double> tp;
  std::vector<Id> ids;
  for (const auto& l : leaves) {
    Tensor<double> c = l.clone();
    c.requires_grad = true;
    ids.push_back(tp.leaf(std::move(c)));
  }
  Id loss = build(tp, ids);
  REQUIRE(tp.value(loss).numel() == 1);
  tp.backward(loss);

  for (std::size_t li = 0; li < leaves.size(); ++li) {
    const std::vector<double>& g = tp.grad(ids[li]);
    for (std::int64_t j = 0; j < leaves[li].numel(); ++j) {
      const double x0 = leaves[li].at(j);
      const double h = 1e-5 * std::max(1.0, std::abs(x0));
      leaves[li].at(j) = x0 + h;
      const double fp = eval_loss(leaves, build);
      leaves[li].at(j) = x0 - h;
      const double fm = eval_loss(leaves, build);
      leaves[li].at(j) = x0;
      const double fd = (fp - fm) / (2 * h);
      const double a = g[std::size_t(j)];
      const double err = std::abs(a - fd);
      const double bound = abs_tol + rel_tol * std::max(std::abs(a), std::abs(fd));
      CHECK_MESSAGE(err <= bound, "leaf ", li, " elem ", j, ": analytic ", a, " vs fd ", fd);
    }
  }
}

} // namespace

TEST_CASE("add: equal shapes and suffix broadcast") {
  Rng rng(child_seed(11, 1));
  auto w = rand_weights(rng, 24);
  SUBCASE("equal") {
    check_gradients({randn(rng, {2, 3, 4}), randn(rng, {2, 3, 4})},
                    [&](Tape<double>& tp, const std::vector<Id>& in) {
                      return dot_reduce(tp, tp.add(in[0], in[1]), w);
                    });
  }
  SUBCASE("suffix (4)") {
    check_gradients({randn(rng, {2, 3, 4}), randn(rng, {4})},
                    [&](Tape<double>& tp, const std::vector<Id>& in) {
                      return dot_reduce(tp, tp.add(in[0], in[1]), w);
                    });
  }
  SUBCASE("suffix (3,4)") {
    check_gradients({randn(rng, {2, 3, 4}), randn(rng, {3, 4})},
                    [&](Tape<double>& tp, const std::vector<Id>& in) {
                      return dot_reduce(tp, tp.add(in[0], in[1]), w);
                    });
  }
  SUBCASE("shape mismatch throws") {
    Tape<double> tp;
    Id a = tp.leaf(randn(rng, {2, 3}));
    Id b = tp.leaf(randn(rng, {2}));
    CHECK_THROWS_AS((void)tp.add(a, b), std::invalid_argument);
  }
}

TEST_CASE("scale") {
  Rng rng(child_seed(11, 2));
  auto w = rand_weights(rng, 12);
  check_gradients({randn(rng, {3, 4})}, [&](Tape<double>& tp, const std::vector<Id>& in) {
    return dot_reduce(tp, tp.scale(in[0], -2.5), w);
  });
}

TEST_CASE("matmul: rank-2 and batched rank-3") {
  Rng rng(child_seed(11, 3));
  SUBCASE("rank-2") {
    auto w = rand_weights(rng, 3 * 5);
    check_gradients({randn(rng, {3, 4}), randn(rng, {4, 5})},
                    [&](Tape<double>& tp, const std::vector<Id>& in) {
                      return dot_reduce(tp, tp.matmul(in[0], in[1]), w);
                    });
  }
  SUBCASE("rank-3") {
    auto w = rand_weights(rng, 2 * 3 * 5);
    check_gradients({randn(rng, {2, 3, 4}), randn(rng, {4, 5})},
                    [&](Tape<double>& tp, const std::vector<Id>& in) {
                      return dot_reduce(tp, tp.matmul(in[0], in[1]), w);
                    });
  }
  SUBCASE("inner mismatch throws") {
    Tape<double> tp;
    Id a = tp.leaf(randn(rng, {3, 4}));
    Id b = tp.leaf(randn(rng, {5, 6}));
    CHECK_THROWS_AS((void)tp.matmul(a, b), std::invalid_argument);
  }
}

TEST_CASE("layer_norm: x, gamma, beta") {
  Rng rng(child_seed(11, 4));
  auto w = rand_weights(rng, 2 * 3 * 5);
  Tensor<double> gamma = randn(rng, {5}, 0.5);
  for (std::int64_t i = 0; i < 5; ++i) gamma.at(i) += 1.0;
  check_gradients({randn(rng, {2, 3, 5}), gamma, randn(rng, {5}, 0.3)},
                  [&](Tape<double>& tp, const std::vector<Id>& in) {
                    return dot_reduce(tp, tp.layer_norm(in[0], in[1], in[2], 1e-5), w);
                  });
}

TEST_CASE("softmax: rows sum to one, gradient matches") {
  Rng rng(child_seed(11, 5));
  Tensor<double> x = randn(rng, {3, 6}, 2.0);
  {
    Tape<double> tp;
    Id s = tp.softmax(tp.leaf(x.clone()));
    for (std::int64_t r = 0; r < 3; ++r) {
      double sum = 0;
      for (std::int64_t c = 0; c < 6; ++c) sum += tp.value(s).at(r * 6 + c);
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  auto w = rand_weights(rng, 18);
  check_gradients({x}, [&](Tape<double>& tp, const std::vector<Id>& in) {
    return dot_reduce(tp, tp.softmax(in[0]), w);
  });
}

TEST_CASE("gelu") {
  Rng rng(child_seed(11, 6));
  auto w = rand_weights(rng, 16);
  check_gradients({randn(rng, {4, 4}, 1.5)}, [&](Tape<double>& tp, const std::vector<Id>& in) {
    return dot_reduce(tp, tp.gelu(in[0]), w);
  });
}

TEST_CASE("embedding: gather forward, scatter-add backward with repeats") {
  Rng rng(child_seed(11, 7));
  IntTensor ids({2, 3}, {0, 2, 2, 1, 0, 3});
  auto w = rand_weights(rng, 2 * 3 * 4);
  check_gradients({randn(rng, {5, 4})}, [&](Tape<double>& tp, const std::vector<Id>& in) {
    return dot_reduce(tp, tp.embedding(ids, in[0]), w);
  });
  Tape<double> tp;
  Id table = tp.leaf(randn(rng, {5, 4}));
  CHECK_THROWS_AS((void)tp.embedding(IntTensor({1}, {5}), table), std::invalid_argument);
  CHECK_THROWS_AS((void)tp.embedding(IntTensor({1}, {-1}), table), std::invalid_argument);
}

TEST_CASE("attention: brute-force forward oracle, gradients, key masking") {
  Rng rng(child_seed(11, 8));
  const std::int64_t B = 2, H = 2, S = 3, Dh = 4;
  Tensor<double> q = randn(rng, {B, H, S, Dh});
  Tensor<double> k = randn(rng, {B, H, S, Dh});
  Tensor<double> v = randn(rng, {B, H, S, Dh});
  Tensor<double> bias({B, S});
  bias.at(1 * S + 2) = -1e9;   // batch 1, key 2 masked

  SUBCASE("forward matches naive double implementation") {
    Tape<double> tp;
    Id out = tp.attention(tp.leaf(q.clone()), tp.leaf(k.clone()), tp.leaf(v.clone()), bias);
    const double scl = 1.0 / std::sqrt(double(Dh));
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t i = 0; i < S; ++i) {
          std::vector<double> sc(S);
          double mx = -1e300;
          for (std::int64_t j = 0; j < S; ++j) {
            double d = 0;
            for (std::int64_t e = 0; e < Dh; ++e)
              d += q.at((((b * H + h) * S) + i) * Dh + e) * k.at((((b * H + h) * S) + j) * Dh + e);
            sc[std::size_t(j)] = d * scl + bias.at(b * S + j);
            mx = std::max(mx, sc[std::size_t(j)]);
          }
          double den = 0;
          for (auto& s : sc) { s = std::exp(s - mx); den += s; }
          for (std::int64_t e = 0; e < Dh; ++e) {
            double o = 0;
            for (std::int64_t j = 0; j < S; ++j)
              o += sc[std::size_t(j)] / den * v.at((((b * H + h) * S) + j) * Dh + e);
            CHECK(tp.value(out).at((((b * H + h) * S) + i) * Dh + e) ==
                  doctest::Approx(o).epsilon(1e-12));
          }
        }
  }

  SUBCASE("finite differences over q, k, v") {
    auto w = rand_weights(rng, B * H * S * Dh);
    check_gradients({q, k, v}, [&](Tape<double>& tp, const std::vector<Id>& in) {
      return dot_reduce(tp, tp.attention(in[0], in[1], in[2], bias), w);
    });
  }

  SUBCASE("masked keys: values there are invisible and get zero gradient") {
    auto w = rand_weights(rng, B * H * S * Dh);
    auto run = [&](const Tensor<double>& vv) {
      Tape<double> tp;
      Id vid = tp.leaf(vv.clone());
      Id loss = dot_reduce(
          tp, tp.attention(tp.constant(q.clone()), tp.constant(k.clone()), vid, bias), w);
      tp.backward(loss);
      return std::make_pair(tp.value(loss).at(0), tp.grad(vid));
    };
    auto [l0, g0] = run(v);
    Tensor<double> v2 = v.clone();
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t e = 0; e < Dh; ++e) v2.at((((1 * H + h) * S) + 2) * Dh + e) += 123.0;
    auto [l1, g1] = run(v2);
    CHECK(l0 == l1);   // bit-identical: masked keys contribute exactly zero
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t e = 0; e < Dh; ++e) {
        CHECK(g0[std::size_t((((1 * H + h) * S) + 2) * Dh + e)] == 0.0);
        CHECK(g1[std::size_t((((1 * H + h) * S) + 2) * Dh + e)] == 0.0);
      }
  }
}

TEST_CASE("split/merge heads: round trip and gradients") {
  Rng rng(child_seed(11, 9));
  Tensor<double> x = randn(rng, {2, 3, 8});
  {
    Tape<double> tp;
    Id xid = tp.leaf(x.clone());
    Id rt = tp.merge_heads(tp.split_heads(xid, 4));
    CHECK(tp.value(rt).shape == x.shape);
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(tp.value(rt).at(i) == x.at(i));
  }
  auto w = rand_weights(rng, 2 * 3 * 8);
  check_gradients({x}, [&](Tape<double>& tp, const std::vector<Id>& in) {
    return dot_reduce(tp, tp.merge_heads(tp.gelu(tp.split_heads(in[0], 2))), w);
  });
}

TEST_CASE("concat_last") {
  Rng rng(child_seed(11, 10));
  auto w = rand_weights(rng, 2 * 3 * 9);
  check_gradients({randn(rng, {2, 3, 4}), randn(rng, {2, 3, 5})},
                  [&](Tape<double>& tp, const std::vector<Id>& in) {
                    return dot_reduce(tp, tp.concat_last(in[0], in[1]), w);
                  });
}

TEST_CASE("reshape shares the buffer and passes gradients through") {
  Rng rng(child_seed(11, 11));
  Tensor<double> x = randn(rng, {2, 6});
  Tape<double> tp;
  Id xid = tp.leaf(x.clone());
  Id r = tp.reshape(xid, {3, 4});
  CHECK(tp.value(r).ptr() == tp.value(xid).ptr());
  CHECK_THROWS_AS((void)tp.reshape(xid, {5, 5}), std::invalid_argument);
  auto w = rand_weights(rng, 12);
  check_gradients({x}, [&](Tape<double>& t, const std::vector<Id>& in) {
    return dot_reduce(t, t.gelu(t.reshape(in[0], {4, 3})), w);
  });
}

TEST_CASE("stop_gradient: bit-exact forward, no gradient path") {
  Rng rng(child_seed(11, 12));
  Tensor<double> x = randn(rng, {3, 3});
  Tape<double> tp;
  Id xid = tp.leaf(x.clone());
  Id sg = tp.stop_gradient(xid);
  CHECK(tp.value(sg).ptr() == tp.value(xid).ptr());   // shared buffer: identical bits
  CHECK_FALSE(tp.requires_grad(sg));

  // loss = dot(2x + sg(3 * 2x)); d/dx must be 2w, not 8w.
  auto w = rand_weights(rng, 9);
  Id y = tp.scale(xid, 2.0);
  Id z = tp.add(y, tp.stop_gradient(tp.scale(y, 3.0)));
  Id loss = dot_reduce(tp, z, w);
  tp.backward(loss);
  const auto& g = tp.grad(xid);
  for (std::size_t i = 0; i < 9; ++i)
    CHECK(g[i] == doctest::Approx(2.0 * w[i]).epsilon(1e-12));
}

TEST_CASE("masked_mse: manual value, gradients, exact mask invariance") {
  Rng rng(child_seed(11, 13));
  const std::int64_t B = 2, S = 3, D = 4;
  Tensor<double> pred = randn(rng, {B, S, D});
  Tensor<double> tgt = randn(rng, {B, S, D});
  Tensor<double> mask({B, S}, {1, 1, 0, 1, 0, 1});

  double manual = 0, msum = 0;
  for (std::int64_t r = 0; r < B * S; ++r) {
    msum += mask.at(r);
    if (mask.at(r) == 0) continue;
    for (std::int64_t d = 0; d < D; ++d) {
      const double diff = pred.at(r * D + d) - tgt.at(r * D + d);
      manual += diff * diff;
    }
  }
  manual /= msum * double(D);

  Tape<double> tp;
  Id p = tp.leaf(pred.clone());
  Id t = tp.constant(tgt.clone());
  Id loss = tp.masked_mse(p, t, mask);
  CHECK(tp.value(loss).at(0) == doctest::Approx(manual).epsilon(1e-14));
  tp.backward(loss);
  for (std::int64_t r = 0; r < B * S; ++r)
    if (mask.at(r) == 0)
      for (std::int64_t d = 0; d < D; ++d) CHECK(tp.grad(p)[std::size_t(r * D + d)] == 0.0);

  // Perturbing a masked row cannot change the loss in any bit.
  Tensor<double> pred2 = pred.clone();
  for (std::int64_t d = 0; d < D; ++d) pred2.at(2 * D + d) = 1e6;
  Tape<double> tp2;
  Id loss2 = tp2.masked_mse(tp2.leaf(pred2), tp2.constant(tgt.clone()), mask);
  CHECK(tp2.value(loss2).at(0) == tp.value(loss).at(0));

  check_gradients({pred, tgt}, [&](Tape<double>& t2, const std::vector<Id>& in) {
    return t2.masked_mse(in[0], in[1], mask);
  });
}

TEST_CASE("cross_entropy: manual value, gradients, zero-weight invariance") {
  Rng rng(child_seed(11, 14));
  const std::int64_t N = 4, C = 5;
  Tensor<double> logits = randn(rng, {N, C}, 2.0);
  IntTensor targets({N}, {2, 0, 4, 1});
  std::vector<double> weights = {1.0, 0.5, 0.0, 2.0};

  double manual = 0, wsum = 0;
  for (std::int64_t i = 0; i < N; ++i) {
    wsum += weights[std::size_t(i)];
    double mx = -1e300;
    for (std::int64_t j = 0; j < C; ++j) mx = std::max(mx, logits.at(i * C + j));
    double se = 0;
    for (std::int64_t j = 0; j < C; ++j) se += std::exp(logits.at(i * C + j) - mx);
    manual += weights[std::size_t(i)] *
              (mx + std::log(se) - logits.at(i * C + targets.values[std::size_t(i)]));
  }
  manual /= wsum;

  Tape<double> tp;
  Id l = tp.leaf(logits.clone());
  Id loss = tp.cross_entropy(l, targets, weights);
  CHECK(tp.value(loss).at(0) == doctest::Approx(manual).epsilon(1e-13));
  tp.backward(loss);
  for (std::int64_t j = 0; j < C; ++j) CHECK(tp.grad(l)[std::size_t(2 * C + j)] == 0.0);

  // Zero-weight rows are exactly invisible.
  Tensor<double> logits2 = logits.clone();
  for (std::int64_t j = 0; j < C; ++j) logits2.at(2 * C + j) += 37.0;
  Tape<double> tp2;
  Id loss2 = tp2.cross_entropy(tp2.leaf(logits2), targets, weights);
  CHECK(tp2.value(loss2).at(0) == tp.value(loss).at(0));

  check_gradients({logits}, [&](Tape<double>& t2, const std::vector<Id>& in) {
    return t2.cross_entropy(in[0], targets, weights);
  });
}

TEST_CASE("masked_mean_pool: manual value and gradients") {
  Rng rng(child_seed(11, 15));
  const std::int64_t B = 2, S = 4, D = 3;
  Tensor<double> x = randn(rng, {B, S, D});
  Tensor<double> mask({B, S}, {1, 1, 1, 0, 1, 0, 0, 0});

  Tape<double> tp;
  Id xid = tp.leaf(x.clone());
  Id pooled = tp.masked_mean_pool(xid, mask);
  for (std::int64_t d = 0; d < D; ++d) {
    const double want0 = (x.at(0 * D + d) + x.at(1 * D + d) + x.at(2 * D + d)) / 3.0;
    CHECK(tp.value(pooled).at(d) == doctest::Approx(want0).epsilon(1e-14));
    CHECK(tp.value(pooled).at(D + d) == doctest::Approx(x.at(4 * D + d)).epsilon(1e-14));
  }

  auto w = rand_weights(rng, B * D);
  check_gradients({x}, [&](Tape<double>& t2, const std::vector<Id>& in) {
    return dot_reduce(t2, t2.masked_mean_pool(in[0], mask), w);
  });

  Tensor<double> empty_mask({B, S});
  Tape<double> tp3;
  Id x3 = tp3.leaf(x.clone());
  CHECK_THROWS_AS((void)tp3.masked_mean_pool(x3, empty_mask), std::invalid_argument);
}

TEST_CASE("tape bookkeeping: consumed once, unused leaves get exact zeros") {
  Rng rng(child_seed(11, 16));
  Tape<double> tp;
  Id used = tp.leaf(randn(rng, {2, 2}));
  Id unused = tp.leaf(randn(rng, {3}));
  Id loss = tp.masked_mse(used, tp.constant(Tensor<double>({2, 2})),
                          Tensor<double>({2}, {1, 1}));
  tp.backward(loss);
  CHECK_THROWS_AS(tp.backward(loss), std::logic_error);
  for (double g : tp.grad(unused)) CHECK(g == 0.0);
  Tape<double> tp2;
  Id ns = tp2.leaf(randn(rng, {2, 2}));
  CHECK_THROWS_AS(tp2.backward(ns), std::invalid_argument);
}

TEST_CASE("reused intermediate accumulates both branch gradients") {
  Rng rng(child_seed(11, 17));
  auto w = rand_weights(rng, 3 * 3);
  check_gradients({randn(rng, {3, 4}), randn(rng, {4, 3})},
                  [&](Tape<double>& tp, const std::vector<Id>& in) {
                    Id y = tp.matmul(in[0], in[1]);
                    Id z = tp.add(tp.gelu(y), tp.scale(y, 0.5));
                    return dot_reduce(tp, z, w);
                  });
}

TEST_CASE("scaling the loss scales every gradient linearly") {
  Rng rng(child_seed(11, 18));
  Tensor<double> x = randn(rng, {2, 3, 4});
  Tensor<double> tgt = randn(rng, {2, 3, 4});
  Tensor<double> mask({2, 3}, {1, 1, 1, 1, 1, 1});
  auto grads_for = [&](double s) {
    Tape<double> tp;
    Id xid = tp.leaf(x.clone());
    Id loss = tp.scale(tp.masked_mse(tp.gelu(xid), tp.constant(tgt.clone()), mask), s);
    tp.backward(loss);
    return tp.grad(xid);
  };
  auto g1 = grads_for(1.0), g2 = grads_for(2.0);
  for (std::size_t i = 0; i < g1.size(); ++i)
    CHECK(g2[i] == doctest::Approx(2.0 * g1[i]).epsilon(1e-12));
}

TEST_CASE("float tape tracks the double tape on a composite network") {
  Rng rng(child_seed(11, 19));
  const std::int64_t B = 2, S = 4, D = 8, H = 2;
  IntTensor ids({B, S}, {1, 4, 2, 0, 3, 3, 1, 5});
  Tensor<double> table_d = randn(rng, {6, D}, 0.5);
  Tensor<double> wq_d = randn(rng, {D, D}, 0.3);
  Tensor<double> gamma_d({D});
  Tensor<double> beta_d({D});
  for (std::int64_t i = 0; i < D; ++i) gamma_d.at(i) = 1.0;
  Tensor<double> bias({B, S});
  Tensor<double> tgt_d = randn(rng, {B, S, D});
  Tensor<double> mask({B, S}, {1, 1, 1, 1, 1, 1, 1, 0});

  auto cast = [](const Tensor<double>& t) {
    Tensor<float> out(t.shape);
    for (std::int64_t i = 0; i < t.numel(); ++i) out.at(i) = float(t.at(i));
    return out;
  };

  double loss_d;
  {
    Tape<double> tp;
    Id x = tp.embedding(ids, tp.leaf(table_d.clone()));
    Id nrm = tp.layer_norm(x, tp.leaf(gamma_d.clone()), tp.leaf(beta_d.clone()), 1e-5);
    Id qkv = tp.matmul(nrm, tp.leaf(wq_d.clone()));
    Id heads = tp.split_heads(qkv, int(H));
    Id att = tp.merge_heads(tp.attention(heads, heads, heads, bias));
    Id act = tp.gelu(att);
    Id loss = tp.masked_mse(act, tp.constant(tgt_d.clone()), mask);
    loss_d = tp.value(loss).at(0);
  }
  float loss_f;
  {
    Tape<float> tp;
    auto fid = [&](const Tensor<double>& t) { return tp.leaf(cast(t)); };
    auto x = tp.embedding(ids, fid(table_d));
    auto nrm = tp.layer_norm(x, fid(gamma_d), fid(beta_d), 1e-5f);
    auto qkv = tp.matmul(nrm, fid(wq_d));
    auto heads = tp.split_heads(qkv, int(H));
    auto att = tp.merge_heads(tp.attention(heads, heads, heads, cast(bias)));
    auto act = tp.gelu(att);
    auto loss = tp.masked_mse(act, tp.constant(cast(tgt_d)), cast(mask));
    loss_f = tp.value(loss).at(0);
  }
  CHECK(double(loss_f) == doctest::Approx(loss_d).epsilon(1e-4));
}
