// SPDX-License-Identifier: Apache-2.0
#include "bmrnn/objective.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "bmrnn/error.hpp"

namespace bmrnn {

SubStoryPartition SubStoryPartition::whole(std::size_t n) {
  SubStoryPartition p;
  p.groups.emplace_back(n);
  std::iota(p.groups.back().begin(), p.groups.back().end(), std::size_t{0});
  return p;
}

void SubStoryPartition::validate() const {
  std::vector<std::size_t> seen;
  for (const auto& g : groups) {
    if (g.empty()) throw DataError("partition: empty group");
    seen.insert(seen.end(), g.begin(), g.end());
  }
  std::sort(seen.begin(), seen.end());
  if (std::adjacent_find(seen.begin(), seen.end()) != seen.end()) {
    throw DataError("partition: groups overlap");
  }
}

void CompatibilityConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
  if (!(gamma > 0.0)) throw std::invalid_argument("margin gamma must be positive");
}

namespace {

void check_pair(const std::vector<Vector>& H, const std::vector<Vector>& V) {
  if (H.empty() || V.empty()) throw DimensionError("compatibility: empty sequence");
  if (H.front().dim() != V.front().dim()) {
    throw DimensionError("compatibility: H dim " + std::to_string(H.front().dim()) +
                         " vs V dim " + std::to_string(V.front().dim()));
  }
}

}  // namespace

double compatibility(const std::vector<Vector>& H, const std::vector<Vector>& V,
                     const SubStoryPartition& partition, const CompatibilityConfig& cfg) {
  check_pair(H, V);
  const std::size_t len = std::min(H.size(), V.size());

  double global = 0.0;
  for (std::size_t t = 0; t < len; ++t) global += dot(H[t], V[t]);

  double local = 0.0;
  if (cfg.alpha != 1.0) {
    for (const auto& g : partition.groups) {
      const double inv_n = 1.0 / static_cast<double>(g.size());
      double m = 0.0;
      if (cfg.local_mode == LocalTermMode::aligned) {
        for (std::size_t t : g) {
          if (t < len) m += dot(H[t], V[t]);
        }
      } else {
        for (std::size_t a : g) {
          if (a >= len) continue;
          for (std::size_t b : g) {
            if (b < len) m += dot(H[a], V[b]);
          }
        }
      }
      local += inv_n * m;
    }
  }
  return cfg.alpha * global + (1.0 - cfg.alpha) * local;
}

std::vector<Vector> compatibility_grad_h(std::size_t h_len, std::size_t h_dim,
                                         const std::vector<Vector>& V,
                                         const SubStoryPartition& partition,
                                         const CompatibilityConfig& cfg) {
  std::vector<Vector> grad(h_len, Vector(h_dim));
  const std::size_t len = std::min(h_len, V.size());
  for (std::size_t t = 0; t < len; ++t) grad[t] += cfg.alpha * V[t];
  if (cfg.alpha == 1.0) return grad;

  const double w = 1.0 - cfg.alpha;
  for (const auto& g : partition.groups) {
    const double coeff = w / static_cast<double>(g.size());
    if (cfg.local_mode == LocalTermMode::aligned) {
      for (std::size_t t : g) {
        if (t < len) grad[t] += coeff * V[t];
      }
    } else {
      Vector v_sum(h_dim);
      for (std::size_t b : g) {
        if (b < len) v_sum += V[b];
      }
      for (std::size_t a : g) {
        if (a < len) grad[a] += coeff * v_sum;
      }
    }
  }
  return grad;
}

LossResult contrastive_loss(const std::vector<Vector>& H, const std::vector<Vector>& V,
                            const SubStoryPartition& partition,
                            const std::vector<const std::vector<Vector>*>& negatives_V,
                            const std::vector<NegativeStream>& negatives_H,
                            const CompatibilityConfig& cfg) {
  check_pair(H, V);
  const std::size_t dim = H.front().dim();
  const double positive = compatibility(H, V, partition, cfg);
  const double v_weight =
      cfg.average_negatives && !negatives_V.empty() ? 1.0 / negatives_V.size() : 1.0;
  const double h_weight =
      cfg.average_negatives && !negatives_H.empty() ? 1.0 / negatives_H.size() : 1.0;

  LossResult out;
  out.dH.assign(H.size(), Vector(dim));
  double positive_coeff = 0.0;  // multiplier on dc(H,V)/dH
  bool finite = std::isfinite(positive);

  for (const auto* neg : negatives_V) {
    const double hinge = cfg.gamma - (positive - compatibility(H, *neg, partition, cfg));
    finite = finite && std::isfinite(hinge);
    if (hinge > 0.0) {
      out.loss += v_weight * hinge;
      ++out.active_hinges;
      positive_coeff -= v_weight;
      const auto g = compatibility_grad_h(H.size(), dim, *neg, partition, cfg);
      for (std::size_t t = 0; t < H.size(); ++t) out.dH[t] += v_weight * g[t];
    }
  }
  for (const auto& neg : negatives_H) {
    const double hinge = cfg.gamma - (positive - compatibility(*neg.H, V, *neg.partition, cfg));
    finite = finite && std::isfinite(hinge);
    if (hinge > 0.0) {
      out.loss += h_weight * hinge;
      ++out.active_hinges;
      positive_coeff -= h_weight;
    }
  }
  if (positive_coeff != 0.0) {
    const auto g = compatibility_grad_h(H.size(), dim, V, partition, cfg);
    for (std::size_t t = 0; t < H.size(); ++t) out.dH[t] += positive_coeff * g[t];
  }
  if (!finite) out.loss = std::numeric_limits<double>::quiet_NaN();
  return out;
}

NegativeSample sample_negatives(std::size_t num_stories, std::size_t positive, std::size_t count,
                                SeededRng& rng) {
  std::vector<std::size_t> pool;
  pool.reserve(num_stories);
  for (std::size_t i = 0; i < num_stories; ++i) {
    if (i != positive) pool.push_back(i);
  }
  NegativeSample out;
  if (pool.empty()) return out;
  out.with_replacement = pool.size() < count;

  auto draw = [&]() {
    std::vector<std::size_t> picked;
    picked.reserve(count);
    if (out.with_replacement) {
      for (std::size_t k = 0; k < count; ++k) picked.push_back(pool[rng.below(pool.size())]);
      return picked;
    }
    std::vector<std::size_t> work = pool;
    // Partial Fisher-Yates.
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t j = k + rng.below(work.size() - k);
      std::swap(work[k], work[j]);
      picked.push_back(work[k]);
    }
    return picked;
  };
  out.sentence_sources = draw();
  out.stream_sources = draw();
  return out;
}

}  // namespace bmrnn
