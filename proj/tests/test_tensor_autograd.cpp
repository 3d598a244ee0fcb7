#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "kgseq/adam.hpp"
#include "kgseq/autograd.hpp"
#include "kgseq/tensor.hpp"
#include "test_helpers.hpp"

using namespace kgseq;
using namespace kgseq::nn;
using kgseq::testing::random_tensor;

using Tape64 = Tape<double>;
using Var = Tape64::Var;

namespace {

// Central finite differences against the analytic gradient of a scalar
// function of several input tensors. Relative error bound 1e-4 at 64-bit.
void gradcheck(const std::vector<Tensor<double>>& inputs,
               const std::function<Var(Tape64&, const std::vector<Var>&)>& f,
               double h = 1e-5, double tol = 1e-4) {
  Tape64 tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t, true));
  Var loss = f(tape, vars);
  REQUIRE(tape.value(loss).numel() == 1);
  tape.backward(loss);

  auto eval = [&](const std::vector<Tensor<double>>& xs) {
    Tape64 t2;
    std::vector<Var> vs;
    for (const auto& x : xs) vs.push_back(t2.leaf(x, false));
    return t2.value(f(t2, vs)).data[0];
  };

  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    const Tensor<double>& analytic = tape.grad(vars[ti]);
    for (size_t i = 0; i < inputs[ti].numel(); ++i) {
      auto plus = inputs;
      auto minus = inputs;
      plus[ti].data[i] += h;
      minus[ti].data[i] -= h;
      const double fd = (eval(plus) - eval(minus)) / (2 * h);
      const double an = analytic.data.empty() ? 0.0 : analytic.data[i];
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
      INFO("input ", ti, " element ", i, " fd=", fd, " analytic=", an);
      CHECK(std::abs(fd - an) / denom < tol);
    }
  }
}

// Projects a rank-2 output to a scalar through fixed random weights so
// asymmetric gradient errors cannot cancel.
Var project(Tape64& tape, Var out, std::uint64_t seed) {
  const auto& v = tape.value(out);
  Rng rng(seed);
  Tensor<double> w({v.cols(), 1});
  for (auto& x : w.data) x = rng.normal();
  return tape.mean_all(tape.matmul(out, tape.leaf(w, false)));
}

}  // namespace

TEST_CASE("matmul matches the naive triple-loop oracle") {
  Rng rng(1);
  auto a = random_tensor<double>({2, 3}, rng);
  auto b = random_tensor<double>({3, 2}, rng);
  Tape64 tape;
  auto c = tape.matmul(tape.leaf(a), tape.leaf(b));
  const auto& cv = tape.value(c);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      double want = 0;
      for (int k = 0; k < 3; ++k) want += a.at(i, k) * b.at(k, j);
      CHECK(std::abs(cv.at(i, j) - want) < 1e-12);
    }
  }
}

TEST_CASE("matmul shape errors name both shapes") {
  Tape64 tape;
  auto a = tape.leaf(Tensor<double>({2, 3}));
  auto b = tape.leaf(Tensor<double>({2, 2}));
  CHECK_THROWS_WITH_AS(tape.matmul(a, b), doctest::Contains("[2,3]"), ShapeError);
  CHECK_THROWS_WITH_AS(tape.matmul(a, b), doctest::Contains("[2,2]"), ShapeError);
}

TEST_CASE("softmax on uniform logits of width 4") {
  Tape64 tape;
  auto s = tape.softmax_rows(tape.leaf(Tensor<double>({2, 4}, 0.7)));
  for (size_t i = 0; i < 8; ++i) CHECK(tape.value(s).data[i] == doctest::Approx(0.25).epsilon(1e-9));
}

TEST_CASE("softmax rows sum to one on random logits") {
  Rng rng(7);
  Tape64 tape;
  auto x = random_tensor<double>({5, 9}, rng, 3.0);
  auto s = tape.softmax_rows(tape.leaf(x));
  for (int i = 0; i < 5; ++i) {
    double sum = 0;
    for (int j = 0; j < 9; ++j) sum += tape.value(s).at(i, j);
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
}

TEST_CASE("cross entropy at certainty is zero") {
  Tape64 tape;
  Tensor<double> logits({1, 4});
  logits.at(0, 2) = 50.0;  // p[target] == 1 up to rounding
  auto ce = tape.cross_entropy(tape.leaf(logits), {2});
  CHECK(tape.value(ce).data[0] == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("cross entropy gradient is p minus onehot") {
  Rng rng(3);
  auto logits = random_tensor<double>({3, 6}, rng, 2.0);
  Tape64 tape;
  auto lv = tape.leaf(logits, true);
  auto ce = tape.cross_entropy(lv, {4, 0, 5});
  tape.backward(tape.mean_all(ce));
  const auto& g = tape.grad(lv);
  for (int i = 0; i < 3; ++i) {
    std::vector<double> p(6);
    softmax_row(logits.row_ptr(i), p.data(), 6);
    const int target = std::vector<int>{4, 0, 5}[static_cast<size_t>(i)];
    for (int j = 0; j < 6; ++j) {
      const double want = (p[static_cast<size_t>(j)] - (j == target ? 1.0 : 0.0)) / 3.0;
      CHECK(g.at(i, j) == doctest::Approx(want).epsilon(1e-9));
    }
  }
}

TEST_CASE("d(x*y)/dx = y for scalars") {
  Tape64 tape;
  Tensor<double> x({1, 1});
  x.data[0] = 3.0;
  Tensor<double> y({1, 1});
  y.data[0] = -1.5;
  auto xv = tape.leaf(x, true);
  auto yv = tape.leaf(y, true);
  auto prod = tape.mean_all(tape.matmul(xv, yv));
  tape.backward(prod);
  CHECK(tape.grad(xv).data[0] == doctest::Approx(-1.5));
  CHECK(tape.grad(yv).data[0] == doctest::Approx(3.0));
}

TEST_CASE("layer_norm output statistics") {
  Rng rng(11);
  Tape64 tape;
  auto x = random_tensor<double>({6, 16}, rng, 2.5);
  auto y = tape.layer_norm(tape.leaf(x), tape.leaf(Tensor<double>({16}, 1.0)),
                           tape.leaf(Tensor<double>({16}, 0.0)));
  for (int i = 0; i < 6; ++i) {
    double mu = 0, var = 0;
    for (int j = 0; j < 16; ++j) mu += tape.value(y).at(i, j);
    mu /= 16;
    for (int j = 0; j < 16; ++j) {
      const double d = tape.value(y).at(i, j) - mu;
      var += d * d;
    }
    var /= 16;
    CHECK(std::abs(mu) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("finite differences: matmul and matmul_nt") {
  Rng rng(21);
  gradcheck({random_tensor<double>({3, 4}, rng), random_tensor<double>({4, 2}, rng)},
            [](Tape64& t, const std::vector<Var>& v) {
              return project(t, t.matmul(v[0], v[1]), 5);
            });
  gradcheck({random_tensor<double>({3, 4}, rng), random_tensor<double>({2, 4}, rng)},
            [](Tape64& t, const std::vector<Var>& v) {
              return project(t, t.matmul_nt(v[0], v[1]), 6);
            });
}

TEST_CASE("finite differences: add, scale, relu") {
  Rng rng(22);
  gradcheck({random_tensor<double>({4, 5}, rng), random_tensor<double>({4, 5}, rng)},
            [](Tape64& t, const std::vector<Var>& v) {
              return project(t, t.add(v[0], v[1]), 7);
            });
  gradcheck({random_tensor<double>({4, 5}, rng)}, [](Tape64& t, const std::vector<Var>& v) {
    return project(t, t.scale(v[0], -2.25), 8);
  });
  // keep values away from the relu kink so FD stays valid
  auto x = random_tensor<double>({4, 6}, rng);
  for (auto& v : x.data) v += (v >= 0 ? 0.5 : -0.5);
  gradcheck({x}, [](Tape64& t, const std::vector<Var>& v) {
    return project(t, t.relu(v[0]), 9);
  });
}

TEST_CASE("finite differences: softmax and layer_norm") {
  Rng rng(23);
  gradcheck({random_tensor<double>({3, 7}, rng, 2.0)},
            [](Tape64& t, const std::vector<Var>& v) {
              return project(t, t.softmax_rows(v[0]), 10);
            });
  gradcheck({random_tensor<double>({3, 8}, rng, 1.5), random_tensor<double>({8}, rng),
             random_tensor<double>({8}, rng)},
            [](Tape64& t, const std::vector<Var>& v) {
              return project(t, t.layer_norm(v[0], v[1], v[2]), 11);
            });
}

TEST_CASE("finite differences: embedding, concat, slice") {
  Rng rng(24);
  gradcheck({random_tensor<double>({5, 4}, rng)}, [](Tape64& t, const std::vector<Var>& v) {
    return project(t, t.embedding_rows(v[0], {1, 3, 3, 0}), 12);  // repeated id: fan-out
  });
  gradcheck({random_tensor<double>({3, 2}, rng), random_tensor<double>({3, 4}, rng)},
            [](Tape64& t, const std::vector<Var>& v) {
              return project(t, t.concat_cols({v[0], v[1]}), 13);
            });
  gradcheck({random_tensor<double>({3, 8}, rng)}, [](Tape64& t, const std::vector<Var>& v) {
    return project(t, t.slice_cols(v[0], 2, 6), 14);
  });
}

TEST_CASE("finite differences: cross_entropy, mean_all, rel_bias") {
  Rng rng(25);
  gradcheck({random_tensor<double>({4, 6}, rng, 2.0)},
            [](Tape64& t, const std::vector<Var>& v) {
              return t.mean_all(t.cross_entropy(v[0], {0, 5, 2, 2}));
            });
  gradcheck({random_tensor<double>({3, 5}, rng)}, [](Tape64& t, const std::vector<Var>& v) {
    return t.mean_all(v[0]);
  });
  gradcheck({random_tensor<double>({2, 8}, rng)}, [](Tape64& t, const std::vector<Var>& v) {
    auto causal = t.rel_bias(v[0], 1, 5, 5, true, 16);
    auto bidir = t.rel_bias(v[0], 0, 4, 4, false, 16);
    return t.add(t.mean_all(causal), t.mean_all(bidir));
  });
}

TEST_CASE("finite differences: composite expression with fan-out") {
  Rng rng(26);
  gradcheck({random_tensor<double>({3, 4}, rng), random_tensor<double>({4, 4}, rng)},
            [](Tape64& t, const std::vector<Var>& v) {
              auto h = t.relu(t.matmul(v[0], v[1]));
              auto s = t.softmax_rows(t.matmul_nt(h, h));  // h used twice
              return project(t, t.matmul(s, h), 15);      // and a third time
            });
}

TEST_CASE("dropout masks forward and backward consistently") {
  Rng rng(31);
  auto x = random_tensor<double>({8, 8}, rng);
  Tape64 tape;
  auto xv = tape.leaf(x, true);
  Rng drop_rng(5);
  auto y = tape.dropout(xv, 0.4, drop_rng);
  tape.backward(tape.mean_all(y));
  const auto& yv = tape.value(y);
  const auto& g = tape.grad(xv);
  int zeros = 0;
  for (size_t i = 0; i < yv.numel(); ++i) {
    if (yv.data[i] == 0.0 && x.data[i] != 0.0) {
      ++zeros;
      CHECK(g.data[i] == 0.0);
    } else {
      CHECK(yv.data[i] == doctest::Approx(x.data[i] / 0.6));
      CHECK(g.data[i] == doctest::Approx(1.0 / (64 * 0.6)));
    }
  }
  CHECK(zeros > 5);  // rate 0.4 over 64 elements
  // rate 0 is the identity
  Tape64 t2;
  auto x2 = t2.leaf(x, true);
  CHECK(t2.dropout(x2, 0.0, drop_rng).id == x2.id);
}

TEST_CASE("gradient accumulation is linear: backward(f+g) = backward(f)+backward(g)") {
  Rng rng(41);
  auto w = random_tensor<double>({4, 4}, rng);
  auto x = random_tensor<double>({2, 4}, rng);
  auto run = [&](int which) {
    Tape64 t;
    auto wv = t.leaf(w, true);
    auto xv = t.leaf(x, false);
    auto f = project(t, t.matmul(xv, wv), 1);
    auto g = t.mean_all(t.relu(t.matmul(xv, wv)));
    Var loss = which == 0 ? f : which == 1 ? g : t.add(f, g);
    t.backward(loss);
    return t.grad(wv);
  };
  auto gf = run(0), gg = run(1), gsum = run(2);
  for (size_t i = 0; i < gf.numel(); ++i)
    CHECK(gsum.data[i] == doctest::Approx(gf.data[i] + gg.data[i]).epsilon(1e-12));
}

TEST_CASE("backward requires a scalar") {
  Tape64 tape;
  auto x = tape.leaf(Tensor<double>({2, 2}, 1.0), true);
  CHECK_THROWS_AS(tape.backward(x), DomainError);
}

TEST_CASE("nan trap raises on non-finite op output when enabled") {
  g_nan_trap = true;
  Tape64 tape;
  auto x = tape.leaf(Tensor<double>({1, 2}, 1e308));
  CHECK_THROWS_AS(tape.add(x, x), NumericError);
  g_nan_trap = false;
  Tape64 t2;
  auto y = t2.leaf(Tensor<double>({1, 2}, 1e308));
  CHECK_NOTHROW(t2.add(y, y));
}

TEST_CASE("adam: zero gradient from zero moments leaves parameters unchanged") {
  Tensor<double> p({3}, 1.25);
  AdamMoments<double> mom;
  mom.init_like({&p});
  Tensor<double> g({3}, 0.0);
  adam_step<double>({&p}, {&g}, mom, 0.1);
  for (double v : p.data) CHECK(v == 1.25);
  CHECK(mom.t == 1);
}

TEST_CASE("adam: hand-computed first step with unit gradient") {
  Tensor<double> p({1}, 0.0);
  AdamMoments<double> mom;
  mom.init_like({&p});
  Tensor<double> g({1}, 1.0);
  const double lr = 0.01;
  adam_step<double>({&p}, {&g}, mom, lr);
  // mhat = 1, vhat = 1 after bias correction: update = -lr / (1 + eps)
  CHECK(p.data[0] == doctest::Approx(-lr / (1.0 + 1e-8)).epsilon(1e-12));
  CHECK(mom.m[0].data[0] == doctest::Approx(0.1));
  CHECK(mom.v[0].data[0] == doctest::Approx(0.001));
}

TEST_CASE("adam: non-finite gradient names the step") {
  Tensor<double> p({1}, 0.0);
  AdamMoments<double> mom;
  mom.init_like({&p});
  Tensor<double> g({1}, std::numeric_limits<double>::quiet_NaN());
  CHECK_THROWS_WITH_AS(adam_step<double>({&p}, {&g}, mom, 0.1), doctest::Contains("step 1"),
                       NumericError);
}

TEST_CASE("warmup schedule peaks at t = warmup") {
  CHECK(warmup_lr(0.003, 100, 100) == doctest::Approx(0.003));
  CHECK(warmup_lr(0.003, 50, 100) == doctest::Approx(0.0015));
  CHECK(warmup_lr(0.003, 400, 100) == doctest::Approx(0.003 * std::sqrt(100.0 / 400.0)));
  CHECK(warmup_lr(0.003, 1, 100) == doctest::Approx(0.003 / 100));
}
