// SPDX-License-Identifier: Apache-2.0
#include "bmrnn/numeric.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "bmrnn/error.hpp"

namespace bmrnn {

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw DimensionError("ragged matrix initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

std::string Matrix::shape_string() const {
  std::ostringstream os;
  os << rows_ << "x" << cols_;
  return os.str();
}

Vector matvec(const Matrix& m, const Vector& v) {
  if (m.cols() != v.dim()) {
    throw DimensionError("matvec: matrix " + m.shape_string() + " vs vector of dim " +
                         std::to_string(v.dim()));
  }
  Vector out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) out[i] = dot(m.row(i), v.values());
  return out;
}

Vector matvec_transposed(const Matrix& m, const Vector& v) {
  if (m.rows() != v.dim()) {
    throw DimensionError("matvec_transposed: matrix " + m.shape_string() +
                         " vs vector of dim " + std::to_string(v.dim()));
  }
  Vector out(m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double vi = v[i];
    if (vi == 0.0) continue;
    auto row = m.row(i);
    for (std::size_t j = 0; j < m.cols(); ++j) out[j] += row[j] * vi;
  }
  return out;
}

void add_outer(Matrix& acc, const Vector& a, const Vector& b) {
  if (acc.rows() != a.dim() || acc.cols() != b.dim()) {
    throw DimensionError("add_outer: accumulator " + acc.shape_string() + " vs " +
                         std::to_string(a.dim()) + "x" + std::to_string(b.dim()));
  }
  for (std::size_t i = 0; i < a.dim(); ++i) {
    const double ai = a[i];
    if (ai == 0.0) continue;
    for (std::size_t j = 0; j < b.dim(); ++j) acc(i, j) += ai * b[j];
  }
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("dot: " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double dot(const Vector& a, const Vector& b) { return dot(a.values(), b.values()); }

double squared_norm(const Vector& v) { return dot(v, v); }

void require_same_dim(const Vector& a, const Vector& b, const char* what) {
  if (a.dim() != b.dim()) {
    throw DimensionError(std::string(what) + ": dim " + std::to_string(a.dim()) + " vs " +
                         std::to_string(b.dim()));
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

namespace {

template <class F>
Vector map(const Vector& a, F f) {
  Vector out(a.dim());
  for (std::size_t i = 0; i < a.dim(); ++i) out[i] = f(a[i]);
  return out;
}

template <class F>
Vector zip(const Vector& a, const Vector& b, const char* what, F f) {
  require_same_dim(a, b, what);
  Vector out(a.dim());
  for (std::size_t i = 0; i < a.dim(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

}  // namespace

Vector elementwise(ElementOp op, const Vector& a, const std::optional<Vector>& b) {
  auto need_b = [&]() -> const Vector& {
    if (!b) throw DimensionError("elementwise: binary op requires a second operand");
    return *b;
  };
  switch (op) {
    case ElementOp::add:
      return a + need_b();
    case ElementOp::sub:
      return a - need_b();
    case ElementOp::hadamard:
      return hadamard(a, need_b());
    case ElementOp::sigmoid:
      return sigmoid(a);
    case ElementOp::tanh:
      return tanh(a);
    case ElementOp::dsigmoid:
      return map(a, [](double x) {
        const double s = sigmoid(x);
        return s * (1.0 - s);
      });
    case ElementOp::dtanh:
      return map(a, [](double x) {
        const double t = std::tanh(x);
        return 1.0 - t * t;
      });
  }
  return a;
}

Vector operator+(const Vector& a, const Vector& b) {
  return zip(a, b, "add", [](double x, double y) { return x + y; });
}
Vector operator-(const Vector& a, const Vector& b) {
  return zip(a, b, "sub", [](double x, double y) { return x - y; });
}
Vector hadamard(const Vector& a, const Vector& b) {
  return zip(a, b, "hadamard", [](double x, double y) { return x * y; });
}
Vector operator*(double s, const Vector& v) {
  return map(v, [s](double x) { return s * x; });
}
Vector sigmoid(const Vector& v) { return map(v, [](double x) { return sigmoid(x); }); }
Vector tanh(const Vector& v) { return map(v, [](double x) { return std::tanh(x); }); }

Vector& operator+=(Vector& acc, const Vector& v) {
  require_same_dim(acc, v, "accumulate");
  for (std::size_t i = 0; i < v.dim(); ++i) acc[i] += v[i];
  return acc;
}

Matrix& operator+=(Matrix& acc, const Matrix& m) {
  if (acc.rows() != m.rows() || acc.cols() != m.cols()) {
    throw DimensionError("accumulate: " + acc.shape_string() + " vs " + m.shape_string());
  }
  auto dst = acc.values();
  auto src = m.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  return acc;
}

bool all_finite(std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// --- SeededRng -------------------------------------------------------------

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

SeededRng::SeededRng(std::uint64_t seed) : seed_(seed) {
  std::uint64_t x = seed;
  for (auto& s : s_) s = splitmix64(x);
}

std::uint64_t SeededRng::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double SeededRng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double SeededRng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double SeededRng::normal() {
  if (spare_normal_) {
    const double v = *spare_normal_;
    spare_normal_.reset();
    return v;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_normal_ = radius * std::sin(theta);
  return radius * std::cos(theta);
}

std::uint64_t SeededRng::below(std::uint64_t n) {
  if (n == 0) return 0;
  const std::uint64_t limit = max() - max() % n;
  std::uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return x % n;
}

Matrix init_params(std::size_t rows, std::size_t cols, SeededRng& rng,
                   std::optional<double> scale) {
  const double s = scale.value_or(cols == 0 ? 1.0 : 1.0 / std::sqrt(static_cast<double>(cols)));
  if (!(s > 0.0)) throw std::invalid_argument("init_params: scale must be positive");
  Matrix m(rows, cols);
  for (double& v : m.values()) v = rng.uniform(-s, s);
  return m;
}

}  // namespace bmrnn
