// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "bmrnn/cells.hpp"
#include "bmrnn/error.hpp"
#include "fd_oracle.hpp"
#include "preservation.hpp"

using namespace bmrnn;
using bmrnn::testing::central_difference;
using bmrnn::testing::rel_err;

namespace {

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

GRUParams scalar_base() {
  GRUParams p = GRUParams::zeros(1, 1);
  p.update_in(0, 0) = p.reset_in(0, 0) = p.cand_in(0, 0) = 1.0;
  return p;
}

SGRUParams random_sgru(std::size_t in, std::size_t hid, SeededRng& rng, double scale = 0.9) {
  SGRUParams p = SGRUParams::zeros(in, hid);
  for_each_tensor(p, [&](std::string_view, auto& t) {
    for (double& v : t.values()) v = rng.uniform(-scale, scale);
  });
  return p;
}

Vector random_vec(std::size_t n, SeededRng& rng) {
  Vector v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = rng.uniform(-1, 1);
  return v;
}

}  // namespace

TEST_CASE("gru_forward with zero params") {
  const GRUParams p = GRUParams::zeros(2, 3);
  auto t = gru_forward(p, Vector{1, -1}, Vector(3));
  CHECK(t.hidden == Vector(3));
  CHECK(t.update == Vector(3, 0.5));
  CHECK(t.reset == Vector(3, 0.5));
  CHECK(t.candidate == Vector(3));

  t = gru_forward(p, Vector{1, -1}, Vector{2, -4, 6});
  CHECK(t.hidden == Vector{1, -2, 3});
}

TEST_CASE("gru_forward scalar hand computation") {
  // Straight-line oracle, written independently of the cell code.
  const double z = sig(1.0), r = sig(1.0), c = std::tanh(1.0);
  const double expected = z * c + (1 - z) * 0.5;
  CHECK(z == doctest::Approx(0.731059).epsilon(1e-6));
  CHECK(c == doctest::Approx(0.761594).epsilon(1e-6));
  CHECK(expected == doctest::Approx(0.691241).epsilon(1e-6));

  const auto t = gru_forward(scalar_base(), Vector{1}, Vector{0.5});
  CHECK(t.update[0] == doctest::Approx(z).epsilon(1e-15));
  CHECK(t.reset[0] == doctest::Approx(r).epsilon(1e-15));
  CHECK(t.candidate[0] == doctest::Approx(c).epsilon(1e-15));
  CHECK(std::abs(t.hidden[0] - 0.691241) < 1e-6);
}

TEST_CASE("sgru_forward without skip reduces to GRU exactly") {
  SeededRng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = random_sgru(3, 4, rng);
    const Vector x = random_vec(3, rng), h = random_vec(4, rng);
    const auto a = sgru_forward(p, x, h, nullptr);
    const auto b = gru_forward(p.base, x, h);
    CHECK(a.hidden == b.hidden);
    CHECK(a.update == b.update);
    CHECK(a.reset == b.reset);
    CHECK(a.candidate == b.candidate);
    CHECK_FALSE(a.had_skip());
  }
}

TEST_CASE("sgru_forward zero params ignores the skip") {
  const auto p = SGRUParams::zeros(2, 2);
  const Vector hs{5, -7};
  const auto t = sgru_forward(p, Vector{1, 2}, Vector{2, 4}, &hs);
  CHECK(t.had_skip());
  CHECK(t.hidden == Vector{1, 2});
}

TEST_CASE("sgru_forward scalar hand computation") {
  SGRUParams p = SGRUParams::zeros(1, 1);
  p.base = scalar_base();
  p.skip_in(0, 0) = p.skip_rec(0, 0) = p.skip_proj(0, 0) = 1.0;

  const double s = sig(2.0);
  const double c = std::tanh(1.0 + 0.0 * 0.5 + s * 1.0);
  const double z = sig(1.0);
  const double expected = z * c + (1 - z) * 0.5;
  CHECK(s == doctest::Approx(0.880797).epsilon(1e-6));
  CHECK(c == doctest::Approx(0.954563).epsilon(1e-6));

  const Vector hs{1.0};
  const auto t = sgru_forward(p, Vector{1}, Vector{0.5}, &hs);
  REQUIRE(t.had_skip());
  CHECK((*t.skip)[0] == doctest::Approx(s).epsilon(1e-15));
  CHECK(t.hidden[0] == doctest::Approx(expected).epsilon(1e-15));
  CHECK(std::abs(t.hidden[0] - 0.832312) < 1e-6);
}

TEST_CASE("gate ranges") {
  SeededRng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const auto p = random_sgru(3, 5, rng, 3.0);
    const Vector x = random_vec(3, rng), h = random_vec(5, rng), hs = random_vec(5, rng);
    const auto t = sgru_forward(p, x, h, &hs);
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK((t.update[i] > 0 && t.update[i] < 1));
      CHECK((t.reset[i] > 0 && t.reset[i] < 1));
      CHECK(((*t.skip)[i] > 0 && (*t.skip)[i] < 1));
      CHECK((t.candidate[i] > -1 && t.candidate[i] < 1));
    }
  }
}

TEST_CASE("cell dimension errors") {
  const auto p = SGRUParams::zeros(2, 3);
  CHECK_THROWS_AS(gru_forward(p.base, Vector{1}, Vector(3)), DimensionError);
  CHECK_THROWS_AS(gru_forward(p.base, Vector{1, 2}, Vector(2)), DimensionError);
  const Vector bad(2);
  CHECK_THROWS_AS(sgru_forward(p, Vector{1, 2}, Vector(3), &bad), DimensionError);
  GRUParams broken = GRUParams::zeros(2, 3);
  broken.cand_rec = Matrix(3, 2);
  CHECK_THROWS_AS(broken.validate(), DimensionError);
}

TEST_CASE("backward with zero upstream gradient") {
  SeededRng rng(2);
  const auto p = random_sgru(2, 3, rng);
  const Vector x = random_vec(2, rng), h = random_vec(3, rng), hs = random_vec(3, rng);
  const auto t = sgru_forward(p, x, h, &hs);
  const auto g = sgru_backward(p, x, h, hs, t, Vector(3));
  CHECK(g.dparams == SGRUParams::zeros(2, 3));
  CHECK(g.dx == Vector(2));
  CHECK(g.dh_prev == Vector(3));
  CHECK(g.dh_skip == Vector(3));

  const auto tg = gru_forward(p.base, x, h);
  const auto gg = gru_backward(p.base, x, h, tg, Vector(3));
  CHECK(gg.dparams == GRUParams::zeros(2, 3));
  CHECK(gg.dx == Vector(2));
}

TEST_CASE("sgru_backward without skip equals gru_backward") {
  SeededRng rng(8);
  const auto p = random_sgru(3, 3, rng);
  const Vector x = random_vec(3, rng), h = random_vec(3, rng), dh = random_vec(3, rng);
  const auto ts = sgru_forward(p, x, h, nullptr);
  const auto tg = gru_forward(p.base, x, h);
  const auto gs = sgru_backward(p, x, h, std::nullopt, ts, dh);
  const auto gg = gru_backward(p.base, x, h, tg, dh);
  CHECK(gs.dparams.base == gg.dparams);
  CHECK(gs.dx == gg.dx);
  CHECK(gs.dh_prev == gg.dh_prev);
  CHECK(gs.dh_skip == Vector(3));
  CHECK(gs.dparams.skip_proj == Matrix(3, 3));
  CHECK(gs.dparams.skip_in == Matrix(3, 3));
}

TEST_CASE("gru_backward zero params: dh_prev against finite differences") {
  // With all params zero: z = 0.5, h~ = 0; h = 0.5 h_prev, so dh_prev = 0.5 g
  // plus the path through z, which vanishes because dz/dh_prev = W_zh = 0.
  const auto p = GRUParams::zeros(2, 2);
  const Vector x{0.3, -0.2};
  Vector h{0.4, -0.9};
  const Vector g{1.5, -2.0};
  const auto t = gru_forward(p, x, h);
  const auto grads = gru_backward(p, x, h, t, g);
  for (std::size_t i = 0; i < 2; ++i) {
    const double fd = central_difference(h.values(), i, [&] { return dot(g, gru_forward(p, x, h).hidden); });
    CHECK(grads.dh_prev[i] == doctest::Approx(fd).epsilon(1e-8));
    CHECK(grads.dh_prev[i] == doctest::Approx(0.5 * g[i]).epsilon(1e-12));
  }
}

namespace {

// Scalar objective L = g . h_t for a fixed random g.
void check_sgru_gradients(std::size_t in, std::size_t hid, bool with_skip, std::uint64_t seed,
                          double tol) {
  SeededRng rng(seed);
  SGRUParams p = random_sgru(in, hid, rng);
  Vector x = random_vec(in, rng), h = random_vec(hid, rng), hs = random_vec(hid, rng);
  const Vector g = random_vec(hid, rng);

  auto loss = [&] { return dot(g, sgru_forward(p, x, h, with_skip ? &hs : nullptr).hidden); };
  const auto trace = sgru_forward(p, x, h, with_skip ? &hs : nullptr);
  const auto grads = sgru_backward(p, x, h, with_skip ? std::optional<Vector>(hs) : std::nullopt, trace, g);

  std::vector<std::span<double>> analytic;
  SGRUParams dp = grads.dparams;
  for_each_tensor(dp, [&](std::string_view, auto& t) { analytic.push_back(t.values()); });
  std::size_t k = 0;
  for_each_tensor(p, [&](std::string_view name, auto& t) {
    auto vals = t.values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double fd = central_difference(vals, i, loss);
      INFO(name, "[", i, "] analytic ", analytic[k][i], " fd ", fd);
      CHECK(rel_err(analytic[k][i], fd) < tol);
    }
    ++k;
  });
  for (std::size_t i = 0; i < in; ++i) CHECK(rel_err(grads.dx[i], central_difference(x.values(), i, loss)) < tol);
  for (std::size_t i = 0; i < hid; ++i) {
    CHECK(rel_err(grads.dh_prev[i], central_difference(h.values(), i, loss)) < tol);
    CHECK(rel_err(grads.dh_skip[i], central_difference(hs.values(), i, loss)) < tol);
  }
}

}  // namespace

TEST_CASE("sgru_backward matches finite differences (3-dim cell with skip)") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) check_sgru_gradients(3, 3, true, seed, 1e-6);
}

TEST_CASE("gru_backward matches finite differences (scalar cell)") {
  for (std::uint64_t seed = 10; seed <= 15; ++seed) check_sgru_gradients(1, 1, false, seed, 1e-6);
}

TEST_CASE("cell gradient property: 100 random trials, hidden <= 8") {
  SeededRng pick(99);
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    const std::size_t in = 1 + pick.below(4);
    const std::size_t hid = 1 + pick.below(8);
    check_sgru_gradients(in, hid, pick.below(2) == 0, 1000 + trial, 1e-5);
  }
}

TEST_CASE("skip preserves information across a closed reset gate") {
  const auto c = bmrnn::testing::make_preservation_case(1);
  const double with = bmrnn::testing::sensitivity(c, true);
  const double without = bmrnn::testing::sensitivity(c, false);
  MESSAGE("with skip " << with << ", without " << without);
  CHECK(with > without);
  CHECK(without < 1e-3);

  int wins = 0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    const auto k = bmrnn::testing::make_preservation_case(seed);
    wins += bmrnn::testing::sensitivity(k, true) > bmrnn::testing::sensitivity(k, false);
  }
  CHECK(wins >= 45);
}
