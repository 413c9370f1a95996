// SPDX-License-Identifier: Apache-2.0
#include "bmrnn/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <json.hpp>

#include "bmrnn/error.hpp"

namespace bmrnn {

RetrievalReport report_from_ranks(std::vector<std::size_t> ranks, std::size_t pool_size,
                                  const std::vector<std::size_t>& ks) {
  RetrievalReport r;
  r.pool_size = pool_size;
  r.per_story_ranks = ranks;
  for (std::size_t k : ks) {
    const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](std::size_t x) { return x <= k; });
    r.recall_at[k] = ranks.empty() ? 0.0 : 100.0 * static_cast<double>(hits) / ranks.size();
  }
  if (!ranks.empty()) {
    std::sort(ranks.begin(), ranks.end());
    const std::size_t m = ranks.size();
    r.median_rank = m % 2 == 1 ? static_cast<double>(ranks[m / 2])
                               : 0.5 * static_cast<double>(ranks[m / 2 - 1] + ranks[m / 2]);
  }
  return r;
}

std::size_t rank_of(const std::vector<double>& scores, const std::vector<std::string>& ids,
                    std::size_t truth) {
  std::size_t rank = 1;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (i == truth) continue;
    if (scores[i] > scores[truth] || (scores[i] == scores[truth] && ids[i] < ids[truth])) ++rank;
  }
  return rank;
}

RetrievalReport evaluate(const BMRNNParams& model, const std::vector<RetrievalQuery>& queries,
                         const std::vector<const SentenceSequence*>& pool,
                         const CompatibilityConfig& ccfg) {
  std::vector<std::string> ids;
  ids.reserve(pool.size());
  for (const auto* s : pool) ids.push_back(s->story_id);

  std::vector<std::size_t> ranks;
  ranks.reserve(queries.size());
  std::vector<double> scores(pool.size());
  for (const auto& q : queries) {
    const auto truth_it = std::find(ids.begin(), ids.end(), q.photos->story_id);
    if (truth_it == ids.end()) {
      throw DataError("evaluate: ground truth for story " + q.photos->story_id +
                      " is not in the candidate pool");
    }
    const auto H = bmrnn_forward(model, q.photos->x, q.skips).merged;
    for (std::size_t c = 0; c < pool.size(); ++c) {
      scores[c] = compatibility(H, pool[c]->v, q.partition, ccfg);
      if (!std::isfinite(scores[c])) {
        throw NumericalError("evaluate: non-finite score for story " + q.photos->story_id);
      }
    }
    ranks.push_back(rank_of(scores, ids, static_cast<std::size_t>(truth_it - ids.begin())));
  }
  return report_from_ranks(std::move(ranks), pool.size());
}

std::string report_to_json(const RetrievalReport& r) {
  nlohmann::ordered_json j;
  j["recall_at_1"] = r.recall_at.count(1) ? r.recall_at.at(1) : 0.0;
  j["recall_at_5"] = r.recall_at.count(5) ? r.recall_at.at(5) : 0.0;
  j["recall_at_10"] = r.recall_at.count(10) ? r.recall_at.at(10) : 0.0;
  j["median_rank"] = r.median_rank;
  j["pool_size"] = r.pool_size;
  j["per_story_ranks"] = r.per_story_ranks;
  return j.dump(2);
}

std::string report_to_table(const std::vector<std::pair<std::string, RetrievalReport>>& rows) {
  std::size_t width = 6;
  for (const auto& [name, _] : rows) width = std::max(width, name.size());
  std::ostringstream os;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-*s  %7s  %7s  %7s  %6s\n", static_cast<int>(width), "Method",
                "R@1", "R@5", "R@10", "Medr");
  os << buf;
  for (const auto& [name, r] : rows) {
    auto at = [&](std::size_t k) { return r.recall_at.count(k) ? r.recall_at.at(k) : 0.0; };
    std::snprintf(buf, sizeof buf, "%-*s  %7.2f  %7.2f  %7.2f  %6g\n", static_cast<int>(width),
                  name.c_str(), at(1), at(5), at(10), r.median_rank);
    os << buf;
  }
  return os.str();
}

}  // namespace bmrnn
