// SPDX-License-Identifier: Apache-2.0
#include "bmrnn/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "bmrnn/error.hpp"

namespace bmrnn {

using nlohmann::json;
using nlohmann::ordered_json;

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("learning_rate must be non-negative");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be at least 1");
  if (hidden_dim == 0) throw std::invalid_argument("hidden_dim must be at least 1");
  if (!(grad_clip_norm > 0.0)) throw std::invalid_argument("grad_clip_norm must be positive");
}

std::string to_string(OptimizerKind k) {
  return k == OptimizerKind::adam ? "adam" : "sgd-momentum";
}

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd-momentum" || s == "sgd") return OptimizerKind::sgd_momentum;
  throw std::invalid_argument("unknown optimizer \"" + s + "\"");
}

namespace {

std::vector<std::span<double>> flat_views(BMRNNParams& p) {
  std::vector<std::span<double>> views;
  for_each_tensor(p, [&](const std::string&, auto& t) { views.push_back(t.values()); });
  return views;
}

BMRNNParams zeros_like(const BMRNNParams& p) {
  return BMRNNParams::zeros(p.input_dim(), p.hidden_dim(), p.output_dim());
}

}  // namespace

OptimizerState OptimizerState::zeros_like(const BMRNNParams& p) {
  return {bmrnn::zeros_like(p), bmrnn::zeros_like(p), 0};
}

double global_norm(const BMRNNParams& grads) {
  double sum = 0.0;
  for_each_tensor(grads, [&](const std::string&, const auto& t) {
    for (double v : t.values()) sum += v * v;
  });
  return std::sqrt(sum);
}

double update_step(BMRNNParams& params, BMRNNParams& grads, OptimizerState& state,
                   const TrainConfig& cfg) {
  const double norm = global_norm(grads);
  if (norm > cfg.grad_clip_norm) {
    const double scale = cfg.grad_clip_norm / norm;
    for (auto view : flat_views(grads)) {
      for (double& g : view) g *= scale;
    }
  }

  ++state.steps;
  auto p = flat_views(params);
  auto g = flat_views(grads);
  auto m = flat_views(state.first_moment);
  auto v = flat_views(state.second_moment);
  const double lr = cfg.learning_rate;

  if (cfg.optimizer == OptimizerKind::adam) {
    const double t = static_cast<double>(state.steps);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t k = 0; k < p.size(); ++k) {
      for (std::size_t i = 0; i < p[k].size(); ++i) {
        const double gi = g[k][i];
        m[k][i] = cfg.beta1 * m[k][i] + (1.0 - cfg.beta1) * gi;
        v[k][i] = cfg.beta2 * v[k][i] + (1.0 - cfg.beta2) * gi * gi;
        const double m_hat = m[k][i] / c1;
        const double v_hat = v[k][i] / c2;
        p[k][i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
      }
    }
  } else {
    for (std::size_t k = 0; k < p.size(); ++k) {
      for (std::size_t i = 0; i < p[k].size(); ++i) {
        m[k][i] = cfg.momentum * m[k][i] + g[k][i];
        p[k][i] -= lr * m[k][i];
      }
    }
  }
  return norm;
}

std::string EpochLog::to_json_line() const {
  ordered_json j;
  j["epoch"] = epoch;
  j["mean_loss"] = mean_loss;
  j["val_recall1"] = val_recall1;
  j["val_medr"] = val_medr;
  j["wall_ms"] = wall_ms;
  return j.dump();
}

std::string config_snapshot(const TrainConfig& cfg, const CompatibilityConfig& ccfg) {
  ordered_json j;
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["learning_rate"] = cfg.learning_rate;
  j["optimizer"] = to_string(cfg.optimizer);
  j["beta1"] = cfg.beta1;
  j["beta2"] = cfg.beta2;
  j["eps"] = cfg.eps;
  j["momentum"] = cfg.momentum;
  j["grad_clip_norm"] = cfg.grad_clip_norm;
  j["seed"] = cfg.seed;
  j["patience"] = cfg.patience;
  j["hidden_dim"] = cfg.hidden_dim;
  j["merge_bias"] = cfg.merge_bias;
  j["use_skips"] = cfg.use_skips;
  j["alpha"] = ccfg.alpha;
  j["gamma"] = ccfg.gamma;
  j["negatives"] = ccfg.negatives_per_positive;
  j["local_mode"] = ccfg.local_mode == LocalTermMode::aligned ? "aligned" : "all-pairs";
  j["average_negatives"] = ccfg.average_negatives;
  return j.dump();
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  save_model(path, ckpt.params);
  ordered_json side;
  side["epoch"] = ckpt.epoch;
  side["best_val_recall1"] = ckpt.best_val_recall1;
  side["config"] = ckpt.config_json.empty() ? json::object() : json::parse(ckpt.config_json);
  auto side_path = path;
  side_path += ".json";
  std::ofstream out(side_path, std::ios::trunc);
  if (!out) throw DataError("cannot open " + side_path.string() + " for writing");
  out << side.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Checkpoint ckpt;
  ckpt.params = load_model(path);
  auto side_path = path;
  side_path += ".json";
  std::ifstream in(side_path);
  if (in) {
    try {
      const json side = json::parse(in);
      ckpt.epoch = side.value("epoch", std::size_t{0});
      ckpt.best_val_recall1 = side.value("best_val_recall1", 0.0);
      if (side.contains("config")) ckpt.config_json = side["config"].dump();
    } catch (const json::exception& e) {
      throw DataError(side_path.string() + ": " + e.what());
    }
  }
  return ckpt;
}

namespace {

struct StoryOutcome {
  double loss = 0.0;
  BMRNNParams grads;
};

const SkipMatrix& skips_for(const TrainingStory& s, bool use_skips, SkipMatrix& empty) {
  if (use_skips) return s.skips;
  empty = SkipMatrix(s.photos->size());
  return empty;
}

StoryOutcome story_outcome(const BMRNNParams& params, const TrainingStory& story,
                           const std::vector<const std::vector<Vector>*>& neg_v,
                           const std::vector<NegativeStream>& neg_h,
                           const CompatibilityConfig& ccfg, bool use_skips) {
  SkipMatrix empty;
  const SkipMatrix& skips = skips_for(story, use_skips, empty);
  const auto trace = bmrnn_forward(params, story.photos->x, skips);
  const auto lr = contrastive_loss(trace.merged, story.sentences->v, story.partition, neg_v,
                                   neg_h, ccfg);
  StoryOutcome out{lr.loss, zeros_like(params)};
  if (lr.active_hinges > 0) {
    bmrnn_backward_accumulate(params, story.photos->x, skips, trace, lr.dH, out.grads);
  }
  return out;
}

template <class F>
void parallel_for(std::size_t n, std::size_t threads, F&& f) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) f(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

void accumulate(BMRNNParams& acc, BMRNNParams& g) {
  auto a = flat_views(acc);
  auto b = flat_views(g);
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
  }
}

void scale(BMRNNParams& p, double s) {
  for (auto view : flat_views(p)) {
    for (double& v : view) v *= s;
  }
}

}  // namespace

RetrievalReport evaluate_stories(const BMRNNParams& params, const std::vector<TrainingStory>& set,
                                 const CompatibilityConfig& ccfg, bool use_skips) {
  std::vector<RetrievalQuery> queries;
  std::vector<const SentenceSequence*> pool;
  for (const auto& s : set) {
    queries.push_back({s.photos, use_skips ? s.skips : SkipMatrix(s.photos->size()), s.partition});
    pool.push_back(s.sentences);
  }
  return evaluate(params, queries, pool, ccfg);
}

TrainResult train(const std::vector<TrainingStory>& train_set,
                  const std::vector<TrainingStory>& val_set, const TrainConfig& cfg,
                  const CompatibilityConfig& ccfg, const EpochCallback& on_epoch) {
  cfg.validate();
  ccfg.validate();
  if (train_set.empty()) throw DataError("train: empty training set");
  const std::size_t input_dim = train_set.front().photos->x.front().dim();
  const std::size_t output_dim = train_set.front().sentences->v.front().dim();

  SeededRng rng(cfg.seed);
  BMRNNParams params = BMRNNParams::random(input_dim, cfg.hidden_dim, output_dim, rng);
  OptimizerState opt = OptimizerState::zeros_like(params);

  TrainResult result;
  result.best.config_json = config_snapshot(cfg, ccfg);
  result.best.params = params;
  bool have_best = false;
  std::size_t since_best = 0;

  const std::size_t n = train_set.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();

    // Photo-side negatives, frozen for the epoch.
    std::vector<std::vector<Vector>> cached_h(n);
    parallel_for(n, cfg.threads, [&](std::size_t i) {
      SkipMatrix empty;
      cached_h[i] = bmrnn_forward(params, train_set[i].photos->x,
                                  skips_for(train_set[i], cfg.use_skips, empty))
                        .merged;
    });

    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    double loss_sum = 0.0;
    for (std::size_t b = 0; b < n; b += cfg.batch_size) {
      const std::size_t end = std::min(n, b + cfg.batch_size);
      const std::size_t count = end - b;

      std::vector<NegativeSample> negs(count);
      for (std::size_t k = 0; k < count; ++k) {
        negs[k] = sample_negatives(n, order[b + k], ccfg.negatives_per_positive, rng);
      }
      std::vector<StoryOutcome> outcomes(count);
      parallel_for(count, cfg.threads, [&](std::size_t k) {
        std::vector<const std::vector<Vector>*> neg_v;
        for (std::size_t j : negs[k].sentence_sources) neg_v.push_back(&train_set[j].sentences->v);
        std::vector<NegativeStream> neg_h;
        for (std::size_t j : negs[k].stream_sources) neg_h.push_back({&cached_h[j], &train_set[j].partition});
        outcomes[k] = story_outcome(params, train_set[order[b + k]], neg_v, neg_h, ccfg, cfg.use_skips);
      });

      BMRNNParams grads = zeros_like(params);
      for (std::size_t k = 0; k < count; ++k) {
        if (!std::isfinite(outcomes[k].loss)) {
          throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(b / cfg.batch_size) + ", story " +
                               train_set[order[b + k]].photos->story_id);
        }
        loss_sum += outcomes[k].loss;
        accumulate(grads, outcomes[k].grads);
      }
      scale(grads, 1.0 / static_cast<double>(count));
      if (!cfg.merge_bias) grads.b_merge = Vector(grads.b_merge.dim());
      update_step(params, grads, opt, cfg);
    }

    EpochLog log;
    log.epoch = epoch;
    log.mean_loss = loss_sum / static_cast<double>(n);
    if (!val_set.empty()) {
      const auto report = evaluate_stories(params, val_set, ccfg, cfg.use_skips);
      log.val_recall1 = report.recall_at.at(1);
      log.val_medr = report.median_rank;
    }
    log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(log);

    if (!have_best || log.val_recall1 > result.best.best_val_recall1) {
      have_best = true;
      since_best = 0;
      result.best.params = params;
      result.best.epoch = epoch;
      result.best.best_val_recall1 = log.val_recall1;
    } else {
      ++since_best;
    }
    if (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 &&
        !cfg.checkpoint_path.empty()) {
      auto path = cfg.checkpoint_path;
      path += ".epoch" + std::to_string(epoch);
      save_checkpoint(path, {params, epoch, log.val_recall1, result.best.config_json});
    }
    if (on_epoch) on_epoch(log, params);
    if (val_set.empty()) {
      result.best.params = params;
      result.best.epoch = epoch;
    } else if (cfg.patience > 0 && since_best >= cfg.patience) {
      break;
    }
  }
  return result;
}

// --- gradient checking -----------------------------------------------------

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

struct CheckProblem {
  BMRNNParams params;
  std::vector<Vector> x;
  SkipMatrix skips;
  SubStoryPartition partition;
  std::vector<Vector> V;
  std::vector<std::vector<Vector>> neg_v;
  std::vector<std::vector<Vector>> neg_h;
  std::vector<SubStoryPartition> neg_h_partitions;
  CompatibilityConfig ccfg;

  double loss(const BMRNNParams& p, const std::vector<Vector>& inputs) const {
    return outcome(p, inputs).loss;
  }

  LossResult outcome(const BMRNNParams& p, const std::vector<Vector>& inputs) const {
    const auto H = bmrnn_forward(p, inputs, skips).merged;
    std::vector<const std::vector<Vector>*> nv;
    for (const auto& v : neg_v) nv.push_back(&v);
    std::vector<NegativeStream> nh;
    for (std::size_t k = 0; k < neg_h.size(); ++k) nh.push_back({&neg_h[k], &neg_h_partitions[k]});
    return contrastive_loss(H, V, partition, nv, nh, ccfg);
  }

  // Smallest |hinge| over every term; finite differences are only valid
  // away from the kinks.
  double hinge_clearance() const {
    const auto H = bmrnn_forward(params, x, skips).merged;
    const double pos = compatibility(H, V, partition, ccfg);
    double clearance = std::numeric_limits<double>::infinity();
    for (const auto& v : neg_v) {
      clearance = std::min(clearance, std::abs(ccfg.gamma - pos + compatibility(H, v, partition, ccfg)));
    }
    for (std::size_t k = 0; k < neg_h.size(); ++k) {
      clearance = std::min(clearance, std::abs(ccfg.gamma - pos +
                                               compatibility(neg_h[k], V, neg_h_partitions[k], ccfg)));
    }
    return clearance;
  }
};

std::vector<Vector> random_sequence(std::size_t len, std::size_t dim, SeededRng& rng, double scale) {
  std::vector<Vector> out;
  for (std::size_t t = 0; t < len; ++t) {
    Vector v(dim);
    for (std::size_t i = 0; i < dim; ++i) v[i] = rng.uniform(-scale, scale);
    out.push_back(std::move(v));
  }
  return out;
}

SubStoryPartition random_partition(std::size_t n, SeededRng& rng) {
  const std::size_t groups = 1 + rng.below(n);
  std::vector<std::vector<std::size_t>> g(groups);
  for (std::size_t t = 0; t < n; ++t) g[rng.below(groups)].push_back(t);
  SubStoryPartition p;
  for (auto& grp : g) {
    if (!grp.empty()) p.groups.push_back(std::move(grp));
  }
  return p;
}

SkipMatrix random_skips(std::size_t n, SeededRng& rng) {
  const std::size_t want = n < 2 ? 0 : std::min<std::size_t>(rng.below(3), n - 1);
  for (;;) {
    std::vector<SkipMatrix::Pair> pairs;
    std::vector<bool> has_desc(n, false), has_anc(n, false);
    for (std::size_t attempt = 0; attempt < 50 && pairs.size() < want; ++attempt) {
      const std::size_t p = rng.below(n - 1);
      const std::size_t t = p + 1 + rng.below(n - 1 - p);
      if (has_desc[p] || has_anc[t]) continue;
      has_desc[p] = has_anc[t] = true;
      pairs.emplace_back(p, t);
    }
    if (pairs.size() == want) return SkipMatrix::from_pairs(n, std::move(pairs));
  }
}

void randomize(BMRNNParams& p, SeededRng& rng, double scale) {
  for_each_tensor(p, [&](const std::string&, auto& t) {
    for (double& v : t.values()) v = rng.uniform(-scale, scale);
  });
}

CheckProblem make_problem(const GradCheckConfig& cfg, SeededRng& rng) {
  for (;;) {
    CheckProblem pr;
    const std::size_t hidden = 2 + rng.below(std::max<std::size_t>(cfg.max_hidden, 2) - 1);
    const std::size_t len = 2 + rng.below(std::max<std::size_t>(cfg.max_len, 2) - 1);
    const std::size_t in_dim = 2 + rng.below(3);
    const std::size_t out_dim = 2 + rng.below(3);

    pr.params = BMRNNParams::zeros(in_dim, hidden, out_dim);
    randomize(pr.params, rng, 0.8);
    pr.x = random_sequence(len, in_dim, rng, 1.0);
    pr.skips = random_skips(len, rng);
    pr.partition = random_partition(len, rng);

    const double alphas[] = {0.0, 0.5, 1.0, rng.uniform()};
    pr.ccfg.alpha = alphas[rng.below(4)];
    pr.ccfg.gamma = 0.2 + rng.uniform();
    pr.ccfg.local_mode = rng.below(2) == 0 ? LocalTermMode::aligned : LocalTermMode::all_pairs;
    pr.ccfg.negatives_per_positive = cfg.negatives;

    if (cfg.inactive_hinges) {
      // Positive V strongly aligned with the predicted H, negatives all zero:
      // every hinge reads gamma - c(H,V) < 0.
      const auto H = bmrnn_forward(pr.params, pr.x, pr.skips).merged;
      for (const auto& h : H) pr.V.push_back(1000.0 * h);
      for (std::size_t k = 0; k < cfg.negatives; ++k) {
        pr.neg_v.push_back(std::vector<Vector>(len, Vector(out_dim)));
        pr.neg_h.push_back(std::vector<Vector>(len, Vector(out_dim)));
        pr.neg_h_partitions.push_back(SubStoryPartition::whole(len));
      }
      if (compatibility(H, pr.V, pr.partition, pr.ccfg) <= pr.ccfg.gamma) continue;
      return pr;
    }

    pr.V = random_sequence(len, out_dim, rng, 1.0);
    for (std::size_t k = 0; k < cfg.negatives; ++k) {
      // Mixed lengths exercise the common-prefix rule.
      pr.neg_v.push_back(random_sequence(1 + rng.below(len + 1), out_dim, rng, 1.0));
      const std::size_t hl = 1 + rng.below(len + 1);
      pr.neg_h.push_back(random_sequence(hl, out_dim, rng, 1.0));
      pr.neg_h_partitions.push_back(random_partition(hl, rng));
    }
    if (pr.hinge_clearance() < 1e-3) continue;
    return pr;
  }
}

}  // namespace

GradCheckReport grad_check(const GradCheckConfig& cfg) {
  SeededRng rng(cfg.seed);
  GradCheckReport report;
  const double eps = cfg.epsilon;

  auto record = [&](const std::string& name, double analytic, double numeric) {
    const double err = relative_error(analytic, numeric);
    auto& slot = report.max_rel_error[name];
    slot = std::max(slot, err);
    auto& mag = report.max_abs_grad[name];
    mag = std::max(mag, std::abs(analytic));
    report.max_error = std::max(report.max_error, err);
    ++report.compared;
  };

  for (std::size_t trial = 0; trial < cfg.trials; ++trial) {
    const CheckProblem pr = make_problem(cfg, rng);
    const auto trace = bmrnn_forward(pr.params, pr.x, pr.skips);
    const auto lr = pr.outcome(pr.params, pr.x);

    BMRNNParams analytic = zeros_like(pr.params);
    const auto dx = bmrnn_backward_accumulate(pr.params, pr.x, pr.skips, trace, lr.dH, analytic);
    if (cfg.corrupt) cfg.corrupt(analytic);

    // Walk params and analytic gradients in lockstep.
    BMRNNParams probe = pr.params;
    std::vector<std::pair<std::string, std::span<double>>> probe_views;
    for_each_tensor(probe, [&](const std::string& name, auto& t) { probe_views.emplace_back(name, t.values()); });
    std::vector<std::span<double>> grad_views = flat_views(analytic);

    for (std::size_t k = 0; k < probe_views.size(); ++k) {
      auto& [name, values] = probe_views[k];
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double saved = values[i];
        values[i] = saved + eps;
        const double up = pr.loss(probe, pr.x);
        values[i] = saved - eps;
        const double down = pr.loss(probe, pr.x);
        values[i] = saved;
        record(name, grad_views[k][i], (up - down) / (2.0 * eps));
      }
    }

    std::vector<Vector> xs = pr.x;
    for (std::size_t t = 0; t < xs.size(); ++t) {
      for (std::size_t i = 0; i < xs[t].dim(); ++i) {
        const double saved = xs[t][i];
        xs[t][i] = saved + eps;
        const double up = pr.loss(pr.params, xs);
        xs[t][i] = saved - eps;
        const double down = pr.loss(pr.params, xs);
        xs[t][i] = saved;
        record("x", dx[t][i], (up - down) / (2.0 * eps));
      }
    }
    ++report.trials;
  }
  return report;
}

}  // namespace bmrnn
