// SPDX-License-Identifier: Apache-2.0
#include "bmrnn/skip_detect.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "bmrnn/error.hpp"

namespace bmrnn {

SimilarityMatrix similarity(const std::vector<Vector>& features, bool l2_normalize) {
  if (features.size() < 2) {
    throw DimensionError("similarity: need at least 2 feature vectors, got " +
                         std::to_string(features.size()));
  }
  const std::size_t dim = features.front().dim();
  std::vector<Vector> fc = features;
  for (auto& f : fc) {
    if (f.dim() != dim) {
      throw DimensionError("similarity: feature dim " + std::to_string(f.dim()) + " vs " +
                           std::to_string(dim));
    }
    if (l2_normalize) {
      const double norm = std::sqrt(squared_norm(f));
      if (norm > 0.0) f = (1.0 / norm) * f;
    }
  }
  const std::size_t n = fc.size();
  SimilarityMatrix sim{Matrix(n, n)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      const double v = dot(fc[i], fc[j]);
      sim.s(i, j) = v;
      sim.s(j, i) = v;
    }
  }
  return sim;
}

double median_off_diagonal(const SimilarityMatrix& sim) {
  const std::size_t n = sim.n();
  std::vector<double> off;
  off.reserve(n * (n - 1));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j) off.push_back(sim.s(i, j));
    }
  }
  if (off.empty()) return 0.0;
  std::sort(off.begin(), off.end());
  const std::size_t m = off.size();
  return m % 2 == 1 ? off[m / 2] : 0.5 * (off[m / 2 - 1] + off[m / 2]);
}

std::vector<std::size_t> ClusterAssignment::exemplars() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < exemplar_of.size(); ++i) {
    if (exemplar_of[i] == i) out.push_back(i);
  }
  return out;
}

namespace {

std::vector<std::vector<std::size_t>> group_by_exemplar(
    const std::vector<std::size_t>& exemplar_of) {
  const std::size_t n = exemplar_of.size();
  std::vector<std::vector<std::size_t>> clusters;
  std::vector<std::size_t> slot(n, std::numeric_limits<std::size_t>::max());
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t e = exemplar_of[i];
    if (slot[e] == std::numeric_limits<std::size_t>::max()) {
      slot[e] = clusters.size();
      clusters.emplace_back();
    }
    clusters[slot[e]].push_back(i);
  }
  return clusters;
}

}  // namespace

ClusterAssignment ClusterAssignment::from_clusters(
    std::size_t n, std::vector<std::vector<std::size_t>> clusters) {
  ClusterAssignment out;
  out.exemplar_of.assign(n, std::numeric_limits<std::size_t>::max());
  for (auto& c : clusters) {
    if (c.empty()) throw DataError("cluster assignment: empty cluster");
    std::sort(c.begin(), c.end());
    for (std::size_t i : c) {
      if (i >= n) {
        throw DataError("cluster assignment: index " + std::to_string(i) + " out of range for " +
                        std::to_string(n) + " items");
      }
      if (out.exemplar_of[i] != std::numeric_limits<std::size_t>::max()) {
        throw DataError("cluster assignment: index " + std::to_string(i) +
                        " appears in two clusters");
      }
      out.exemplar_of[i] = c.front();
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (out.exemplar_of[i] == std::numeric_limits<std::size_t>::max()) {
      throw DataError("cluster assignment: index " + std::to_string(i) + " is unassigned");
    }
  }
  out.clusters = group_by_exemplar(out.exemplar_of);
  return out;
}

double net_similarity(const SimilarityMatrix& sim, double preference,
                      const std::vector<std::size_t>& exemplar_of) {
  double total = 0.0;
  for (std::size_t i = 0; i < exemplar_of.size(); ++i) {
    const std::size_t k = exemplar_of[i];
    total += i == k ? preference : sim.s(i, k);
  }
  return total;
}

ClusterAssignment affinity_propagation(const SimilarityMatrix& sim, const APConfig& cfg) {
  if (!(cfg.damping >= 0.5 && cfg.damping < 1.0)) {
    throw std::invalid_argument("affinity_propagation: damping must lie in [0.5, 1), got " +
                                std::to_string(cfg.damping));
  }
  const std::size_t n = sim.n();
  if (n == 0) return {};
  const double pref = cfg.preference.value_or(median_off_diagonal(sim));

  Matrix s = sim.s;
  for (std::size_t k = 0; k < n; ++k) s(k, k) = pref;

  ClusterAssignment out;
  if (n == 1) {
    out.exemplar_of = {0};
    out.clusters = {{0}};
    return out;
  }

  // All similarities and the preference equal: the messages stay symmetric
  // forever. Either everything is one cluster or every point its own.
  {
    const double first = s(0, 1);
    bool uniform = true;
    for (std::size_t i = 0; i < n && uniform; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i != j && s(i, j) != first) {
          uniform = false;
          break;
        }
      }
    }
    if (uniform && pref <= first) {
      out.exemplar_of.assign(n, 0);
      out.clusters = group_by_exemplar(out.exemplar_of);
      return out;
    }
  }

  const double lambda = cfg.damping;
  Matrix resp(n, n), avail(n, n);
  std::vector<bool> last_exemplars;
  std::size_t stable = 0;
  out.converged = false;

  std::size_t it = 0;
  for (; it < cfg.max_iter; ++it) {
    // Responsibilities.
    for (std::size_t i = 0; i < n; ++i) {
      double best = -std::numeric_limits<double>::infinity();
      double second = best;
      std::size_t best_k = 0;
      for (std::size_t k = 0; k < n; ++k) {
        const double v = avail(i, k) + s(i, k);
        if (v > best) {
          second = best;
          best = v;
          best_k = k;
        } else if (v > second) {
          second = v;
        }
      }
      for (std::size_t k = 0; k < n; ++k) {
        const double fresh = s(i, k) - (k == best_k ? second : best);
        resp(i, k) = lambda * resp(i, k) + (1.0 - lambda) * fresh;
      }
    }
    // Availabilities.
    for (std::size_t k = 0; k < n; ++k) {
      double positive_sum = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (i != k) positive_sum += std::max(0.0, resp(i, k));
      }
      for (std::size_t i = 0; i < n; ++i) {
        double fresh;
        if (i == k) {
          fresh = positive_sum;
        } else {
          fresh = std::min(0.0, resp(k, k) + positive_sum - std::max(0.0, resp(i, k)));
        }
        avail(i, k) = lambda * avail(i, k) + (1.0 - lambda) * fresh;
      }
    }

    std::vector<bool> exemplars(n);
    for (std::size_t k = 0; k < n; ++k) exemplars[k] = resp(k, k) + avail(k, k) > 0.0;
    const bool any = std::find(exemplars.begin(), exemplars.end(), true) != exemplars.end();
    if (exemplars == last_exemplars) {
      ++stable;
    } else {
      stable = 0;
      last_exemplars = std::move(exemplars);
    }
    if (any && stable + 1 >= cfg.convergence_window) {
      out.converged = true;
      ++it;
      break;
    }
  }
  out.iterations = it;

  std::vector<std::size_t> exemplars;
  for (std::size_t k = 0; k < n; ++k) {
    if (resp(k, k) + avail(k, k) > 0.0) exemplars.push_back(k);
  }
  if (exemplars.empty()) {
    // No point clears the threshold: keep the single strongest candidate.
    std::size_t best = 0;
    for (std::size_t k = 1; k < n; ++k) {
      if (resp(k, k) + avail(k, k) > resp(best, best) + avail(best, best)) best = k;
    }
    exemplars.push_back(best);
  }

  out.exemplar_of.assign(n, 0);
  std::vector<bool> is_exemplar(n, false);
  for (std::size_t k : exemplars) is_exemplar[k] = true;
  for (std::size_t i = 0; i < n; ++i) {
    if (is_exemplar[i]) {
      out.exemplar_of[i] = i;
      continue;
    }
    std::size_t best_k = exemplars.front();
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t k : exemplars) {
      const double v = avail(i, k) + s(i, k);
      if (v > best) {
        best = v;
        best_k = k;
      }
    }
    out.exemplar_of[i] = best_k;
  }
  out.clusters = group_by_exemplar(out.exemplar_of);
  return out;
}

SkipMatrix SkipMatrix::from_pairs(std::size_t n, std::vector<Pair> pairs, bool reversed) {
  SkipMatrix m(n);
  m.reversed_ = reversed;
  std::sort(pairs.begin(), pairs.end());
  for (const auto& [p, t] : pairs) {
    const std::string label = "(" + std::to_string(p) + ", " + std::to_string(t) + ")";
    if (p >= n || t >= n) {
      throw DataError("skip pair " + label + " references an index >= " + std::to_string(n));
    }
    if (reversed ? p <= t : p >= t) {
      throw DataError("skip pair " + label + " violates temporal direction");
    }
    if (m.descendant_of_[p]) throw DataError("index " + std::to_string(p) + " has two descendants");
    if (m.ancestor_of_[t]) throw DataError("index " + std::to_string(t) + " has two ancestors");
    m.descendant_of_[p] = t;
    m.ancestor_of_[t] = p;
  }
  m.pairs_ = std::move(pairs);
  return m;
}

SkipMatrix build_skip_matrix(const ClusterAssignment& clusters) {
  std::vector<SkipMatrix::Pair> pairs;
  for (const auto& c : clusters.clusters) {
    std::vector<std::size_t> members = c;
    std::sort(members.begin(), members.end());
    for (std::size_t k = 1; k < members.size(); ++k) pairs.emplace_back(members[k - 1], members[k]);
  }
  return SkipMatrix::from_pairs(clusters.n(), std::move(pairs));
}

SkipMatrix transpose_skips(const SkipMatrix& r) {
  std::vector<SkipMatrix::Pair> pairs;
  pairs.reserve(r.pairs().size());
  for (const auto& [p, t] : r.pairs()) pairs.emplace_back(t, p);
  return SkipMatrix::from_pairs(r.n(), std::move(pairs), !r.reversed());
}

SkipDetection detect_skips(const std::vector<Vector>& features, const APConfig& cfg,
                           bool l2_normalize) {
  SkipDetection out;
  if (features.size() < 2) {
    out.clusters = ClusterAssignment::from_clusters(features.size(),
                                                    features.empty() ? std::vector<std::vector<std::size_t>>{}
                                                                     : std::vector<std::vector<std::size_t>>{{0}});
    out.skips = SkipMatrix(features.size());
    return out;
  }
  out.clusters = affinity_propagation(similarity(features, l2_normalize), cfg);
  out.skips = build_skip_matrix(out.clusters);
  return out;
}

}  // namespace bmrnn
