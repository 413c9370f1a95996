// SPDX-License-Identifier: Apache-2.0
//
// Dense vectors/matrices in 64-bit floats and a portable seeded generator.
// Everything here is a value type; operations never mutate their inputs.
#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace bmrnn {

class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t dim, double fill = 0.0) : data_(dim, fill) {}
  Vector(std::initializer_list<double> values) : data_(values) {}
  explicit Vector(std::vector<double> values) : data_(std::move(values)) {}

  std::size_t dim() const noexcept { return data_.size(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& raw() const noexcept { return data_; }

  bool operator==(const Vector&) const = default;

 private:
  std::vector<double> data_;
};

/// Row-major dense matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols_, cols_);
  }

  std::string shape_string() const;

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Linear algebra.
Vector matvec(const Matrix& m, const Vector& v);
/// m^T v, used for backpropagating through m.
Vector matvec_transposed(const Matrix& m, const Vector& v);
/// acc += a b^T
void add_outer(Matrix& acc, const Vector& a, const Vector& b);
double dot(const Vector& a, const Vector& b);
double dot(std::span<const double> a, std::span<const double> b);
double squared_norm(const Vector& v);

enum class ElementOp { add, sub, hadamard, sigmoid, tanh, dsigmoid, dtanh };

/// Unary ops ignore `b`; binary ops require it with matching dim.
Vector elementwise(ElementOp op, const Vector& a, const std::optional<Vector>& b = std::nullopt);

Vector operator+(const Vector& a, const Vector& b);
Vector operator-(const Vector& a, const Vector& b);
Vector operator*(double s, const Vector& v);
Vector hadamard(const Vector& a, const Vector& b);
Vector sigmoid(const Vector& v);
Vector tanh(const Vector& v);
Vector& operator+=(Vector& acc, const Vector& v);
Matrix& operator+=(Matrix& acc, const Matrix& m);

double sigmoid(double x);

bool all_finite(std::span<const double> values);

void require_same_dim(const Vector& a, const Vector& b, const char* what);

/// splitmix64-seeded xoshiro256** generator. Portable and bit-reproducible;
/// all derived distributions are computed here rather than via <random>
/// distributions, whose output is implementation-defined.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 bits of precision.
  double uniform();
  double uniform(double lo, double hi);
  /// Standard normal via Box-Muller (cached second draw).
  double normal();
  /// Uniform integer in [0, n) without modulo bias.
  std::uint64_t below(std::uint64_t n);

  // UniformRandomBitGenerator, so std::shuffle etc. work.
  using result_type = std::uint64_t;
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }
  result_type operator()() { return next_u64(); }

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
  std::optional<double> spare_normal_;
};

/// Uniform in [-scale, scale]; scale defaults to 1/sqrt(cols).
Matrix init_params(std::size_t rows, std::size_t cols, SeededRng& rng,
                   std::optional<double> scale = std::nullopt);

}  // namespace bmrnn
