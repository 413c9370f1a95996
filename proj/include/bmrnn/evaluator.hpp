// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "bmrnn/network.hpp"
#include "bmrnn/objective.hpp"

namespace bmrnn {

struct RetrievalReport {
  std::map<std::size_t, double> recall_at;  // K -> percentage
  double median_rank = 0.0;
  std::vector<std::size_t> per_story_ranks;
  std::size_t pool_size = 0;
};

/// Recall@K (percent of ranks <= K) for K in `ks`, and the median rank
/// (mean of the two middle ranks for an even count).
RetrievalReport report_from_ranks(std::vector<std::size_t> ranks, std::size_t pool_size,
                                  const std::vector<std::size_t>& ks = {1, 5, 10});

/// 1-based rank of candidate `truth` when sorting by descending score; equal
/// scores are ordered by candidate id.
std::size_t rank_of(const std::vector<double>& scores, const std::vector<std::string>& ids,
                    std::size_t truth);

/// One query: a photo stream with its skip structure and storyline partition.
struct RetrievalQuery {
  const StoryStream* photos = nullptr;
  SkipMatrix skips;
  SubStoryPartition partition;
};

/// Runs the model on every query, scores every candidate sentence sequence
/// by compatibility and ranks the query's own sequence (matched by
/// story_id). Throws DataError when a ground truth is missing from the pool.
RetrievalReport evaluate(const BMRNNParams& model, const std::vector<RetrievalQuery>& queries,
                         const std::vector<const SentenceSequence*>& pool,
                         const CompatibilityConfig& ccfg);

std::string report_to_json(const RetrievalReport& r);
/// Aligned text table: Method | R@1 | R@5 | R@10 | Medr.
std::string report_to_table(const std::vector<std::pair<std::string, RetrievalReport>>& rows);

}  // namespace bmrnn
