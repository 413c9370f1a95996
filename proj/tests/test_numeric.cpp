// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "bmrnn/error.hpp"
#include "bmrnn/numeric.hpp"

using namespace bmrnn;

TEST_CASE("matvec") {
  CHECK(matvec(Matrix::identity(3), Vector{1, 2, 3}) == Vector{1, 2, 3});
  CHECK(matvec(Matrix(2, 3), Vector{1, 2, 3}) == Vector{0, 0});
  CHECK(matvec(Matrix{{1, 2}, {3, 4}}, Vector{1, 1}) == Vector{3, 7});

  try {
    matvec(Matrix(2, 3), Vector{1, 2});
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
    CHECK(msg.find("dim 2") != std::string::npos);
  }
}

TEST_CASE("matvec_transposed agrees with explicit transpose") {
  const Matrix m{{1, 2, 3}, {4, 5, 6}};
  CHECK(matvec_transposed(m, Vector{1, -1}) == Vector{-3, -3, -3});
}

TEST_CASE("elementwise ops") {
  CHECK(elementwise(ElementOp::sigmoid, Vector{0})[0] == 0.5);
  CHECK(elementwise(ElementOp::tanh, Vector{0})[0] == 0.0);
  CHECK(elementwise(ElementOp::hadamard, Vector{2, 3}, Vector{4, 5}) == Vector{8, 15});
  CHECK(elementwise(ElementOp::add, Vector{1, 2}, Vector{3, 4}) == Vector{4, 6});
  CHECK(elementwise(ElementOp::sub, Vector{1, 2}, Vector{3, 4}) == Vector{-2, -2});
  CHECK(elementwise(ElementOp::dsigmoid, Vector{0})[0] == 0.25);
  CHECK(elementwise(ElementOp::dtanh, Vector{0})[0] == 1.0);

  const double x = 0.7;
  const double s = 1.0 / (1.0 + std::exp(-x));
  CHECK(elementwise(ElementOp::dsigmoid, Vector{x})[0] == doctest::Approx(s * (1 - s)).epsilon(1e-15));
  CHECK(elementwise(ElementOp::dtanh, Vector{x})[0] ==
        doctest::Approx(1 - std::tanh(x) * std::tanh(x)).epsilon(1e-15));

  CHECK_THROWS_AS(elementwise(ElementOp::add, Vector{1}, Vector{1, 2}), DimensionError);
  CHECK_THROWS_AS(elementwise(ElementOp::hadamard, Vector{1}), DimensionError);
}

TEST_CASE("matvec distributes over addition") {
  SeededRng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix m = init_params(5, 4, rng, 3.0);
    Vector a(4), b(4);
    for (std::size_t i = 0; i < 4; ++i) {
      a[i] = rng.uniform(-5, 5);
      b[i] = rng.uniform(-5, 5);
    }
    const Vector lhs = matvec(m, a + b);
    const Vector rhs = matvec(m, a) + matvec(m, b);
    for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(lhs[i] - rhs[i]) <= 1e-12);
  }
}

TEST_CASE("sigmoid and tanh ranges") {
  SeededRng rng(3);
  for (int i = 0; i < 1000; ++i) {
    // Both saturate to exactly 0/1 in double precision beyond these ranges.
    const double x = rng.uniform(-30, 30);
    const double s = sigmoid(x);
    const double t = elementwise(ElementOp::tanh, Vector{x / 2.0})[0];
    CHECK((s > 0.0 && s < 1.0));
    CHECK((t > -1.0 && t < 1.0));
  }
}

TEST_CASE("operations do not mutate inputs") {
  const Matrix m{{1, 2}, {3, 4}};
  const Vector v{1, 1};
  const Matrix m_copy = m;
  const Vector v_copy = v;
  (void)matvec(m, v);
  (void)elementwise(ElementOp::hadamard, v, v);
  (void)sigmoid(v);
  CHECK(m == m_copy);
  CHECK(v == v_copy);
}

TEST_CASE("init_params determinism and bounds") {
  SeededRng a(7), b(7);
  CHECK(init_params(2, 2, a) == init_params(2, 2, b));

  SeededRng rng(5);
  const Matrix m = init_params(4, 100, rng);
  for (double v : m.values()) CHECK(std::abs(v) <= 0.1);

  SeededRng one(1);
  const Matrix big = init_params(50, 50, one);
  double mean = 0.0;
  for (double v : big.values()) mean += v;
  mean /= static_cast<double>(big.size());
  CHECK(std::abs(mean) <= 0.02);
  // Pinned from the generator; any change to the RNG stream shows up here.
  CHECK(mean == doctest::Approx(5.8334713223764662e-4).epsilon(1e-9));

  SeededRng r(1);
  CHECK_THROWS(init_params(2, 2, r, -1.0));
}

TEST_CASE("SeededRng reproducibility and ranges") {
  SeededRng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs |= x != c.next_u64();
  }
  CHECK(differs);

  SeededRng r(9);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    CHECK((u >= 0.0 && u < 1.0));
    CHECK(r.below(7) < 7);
  }
}

TEST_CASE("SeededRng normal moments") {
  SeededRng r(2024);
  const int n = 200000;
  double sum = 0, sq = 0;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    sum += z;
    sq += z * z;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  CHECK(std::abs(mean) < 0.01);
  CHECK(std::abs(var - 1.0) < 0.02);
}
