// SPDX-License-Identifier: Apache-2.0
//
// Unsupervised storyline detection: inner-product similarity between photo
// features, affinity-propagation clustering, and chaining same-cluster
// photos along time into skip pairs. Indices are 0-based throughout.
#pragma once

#include <cstddef>
#include <optional>
#include <utility>
#include <vector>

#include "bmrnn/numeric.hpp"

namespace bmrnn {

struct SimilarityMatrix {
  Matrix s;  // symmetric n x n
  std::size_t n() const noexcept { return s.rows(); }
};

/// s[i][j] = fc_i . fc_j. With `l2_normalize`, features are scaled to unit
/// norm first (cosine similarity); off by default.
SimilarityMatrix similarity(const std::vector<Vector>& features, bool l2_normalize = false);

/// Median of the off-diagonal entries; the default AP preference.
double median_off_diagonal(const SimilarityMatrix& sim);

struct APConfig {
  double damping = 0.9;
  std::optional<double> preference;  // nullopt: median of off-diagonal similarities
  std::size_t max_iter = 200;
  std::size_t convergence_window = 50;
};

struct ClusterAssignment {
  std::vector<std::size_t> exemplar_of;
  /// Each cluster's members in increasing index order; clusters ordered by
  /// their smallest member.
  std::vector<std::vector<std::size_t>> clusters;
  bool converged = true;
  std::size_t iterations = 0;

  std::size_t n() const noexcept { return exemplar_of.size(); }
  std::vector<std::size_t> exemplars() const;

  /// Assignment from explicit clusters. Each cluster's exemplar is its first
  /// member. Throws DataError unless the clusters partition 0..n-1.
  static ClusterAssignment from_clusters(std::size_t n,
                                         std::vector<std::vector<std::size_t>> clusters);
};

ClusterAssignment affinity_propagation(const SimilarityMatrix& sim, const APConfig& cfg = {});

/// Sum over points of s(i, exemplar(i)), with s(k, k) = preference.
double net_similarity(const SimilarityMatrix& sim, double preference,
                      const std::vector<std::size_t>& exemplar_of);

/// Ordered skip pairs (ancestor, descendant). A forward matrix has
/// ancestor < descendant; its transpose (used by the backward pass) has
/// ancestor > descendant. Each index is the ancestor of at most one pair and
/// the descendant of at most one pair.
class SkipMatrix {
 public:
  using Pair = std::pair<std::size_t, std::size_t>;

  SkipMatrix() = default;
  explicit SkipMatrix(std::size_t n) : n_(n), ancestor_of_(n), descendant_of_(n) {}

  /// Validates every structural invariant; throws DataError on violation.
  static SkipMatrix from_pairs(std::size_t n, std::vector<Pair> pairs, bool reversed = false);

  std::size_t n() const noexcept { return n_; }
  bool reversed() const noexcept { return reversed_; }
  bool empty() const noexcept { return pairs_.empty(); }
  /// Sorted by ancestor.
  const std::vector<Pair>& pairs() const noexcept { return pairs_; }
  std::optional<std::size_t> ancestor_of(std::size_t t) const { return ancestor_of_.at(t); }
  std::optional<std::size_t> descendant_of(std::size_t p) const { return descendant_of_.at(p); }

  bool operator==(const SkipMatrix&) const = default;

 private:
  std::size_t n_ = 0;
  bool reversed_ = false;
  std::vector<Pair> pairs_;
  std::vector<std::optional<std::size_t>> ancestor_of_;
  std::vector<std::optional<std::size_t>> descendant_of_;
};

/// Chains each cluster's members in temporal (index) order.
SkipMatrix build_skip_matrix(const ClusterAssignment& clusters);

/// Skip table for the backward pass: (p, t) becomes (t, p).
SkipMatrix transpose_skips(const SkipMatrix& r);

struct SkipDetection {
  ClusterAssignment clusters;
  SkipMatrix skips;
};

/// similarity -> affinity propagation -> skip matrix.
SkipDetection detect_skips(const std::vector<Vector>& features, const APConfig& cfg = {},
                           bool l2_normalize = false);

}  // namespace bmrnn
