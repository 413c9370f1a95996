// SPDX-License-Identifier: Apache-2.0
//
// Storyline-constrained compatibility between a predicted sentence-embedding
// sequence H and a sentence sequence V, and the bidirectional contrastive
// hinge loss built on it.
//
//   c(H, V) = alpha * sum_t h_t . v_t + (1 - alpha) * sum_i m(H_i, V_i)
//
// with m the per-storyline local score. Sequences of different lengths are
// scored over their common prefix.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bmrnn/numeric.hpp"
#include "bmrnn/skip_detect.hpp"

namespace bmrnn {

/// Disjoint groups of timesteps (storylines); each group non-empty.
struct SubStoryPartition {
  std::vector<std::vector<std::size_t>> groups;

  static SubStoryPartition from_clusters(const ClusterAssignment& clusters) {
    return {clusters.clusters};
  }
  /// One group spanning 0..n-1.
  static SubStoryPartition whole(std::size_t n);
  /// Throws DataError when groups overlap or are empty.
  void validate() const;
};

enum class LocalTermMode {
  aligned,    // (1/n_i) * sum_{t in group} h_t . v_t
  all_pairs,  // (1/n_i) * sum_{h in H_i} sum_{v in V_i} h . v
};

struct CompatibilityConfig {
  double alpha = 0.5;
  double gamma = 0.2;
  std::size_t negatives_per_positive = 127;
  LocalTermMode local_mode = LocalTermMode::aligned;
  /// Divide each hinge sum by its number of negatives instead of summing.
  bool average_negatives = false;

  void validate() const;
};

struct SentenceSequence {
  std::string story_id;
  std::vector<Vector> v;

  std::size_t size() const noexcept { return v.size(); }
};

double compatibility(const std::vector<Vector>& H, const std::vector<Vector>& V,
                     const SubStoryPartition& partition, const CompatibilityConfig& cfg);
inline double compatibility(const std::vector<Vector>& H, const SentenceSequence& V,
                            const SubStoryPartition& partition, const CompatibilityConfig& cfg) {
  return compatibility(H, V.v, partition, cfg);
}

/// dc/dH; c is linear in H so this does not depend on H's values, only on
/// its length.
std::vector<Vector> compatibility_grad_h(std::size_t h_len, std::size_t h_dim,
                                         const std::vector<Vector>& V,
                                         const SubStoryPartition& partition,
                                         const CompatibilityConfig& cfg);

/// A photo-side negative: another story's predicted H with its own storyline
/// partition. Treated as a constant of the loss.
struct NegativeStream {
  const std::vector<Vector>* H = nullptr;
  const SubStoryPartition* partition = nullptr;
};

struct LossResult {
  double loss = 0.0;
  std::vector<Vector> dH;
  std::size_t active_hinges = 0;
};

/// sum_{V'} max(0, gamma - c(H,V) + c(H,V')) + sum_{H'} max(0, gamma - c(H,V) + c(H',V)),
/// and its subgradient w.r.t. H (a hinge exactly at zero contributes nothing).
LossResult contrastive_loss(const std::vector<Vector>& H, const std::vector<Vector>& V,
                            const SubStoryPartition& partition,
                            const std::vector<const std::vector<Vector>*>& negatives_V,
                            const std::vector<NegativeStream>& negatives_H,
                            const CompatibilityConfig& cfg);

struct NegativeSample {
  std::vector<std::size_t> sentence_sources;  // stories providing V'
  std::vector<std::size_t> stream_sources;    // stories providing H'
  bool with_replacement = false;              // dataset had too few stories
};

/// Uniform without replacement over stories other than `positive`; falls
/// back to sampling with replacement when fewer than `count` are available.
NegativeSample sample_negatives(std::size_t num_stories, std::size_t positive, std::size_t count,
                                SeededRng& rng);

}  // namespace bmrnn
