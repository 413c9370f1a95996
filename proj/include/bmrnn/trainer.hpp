// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "bmrnn/evaluator.hpp"
#include "bmrnn/network.hpp"
#include "bmrnn/objective.hpp"

namespace bmrnn {

enum class OptimizerKind { adam, sgd_momentum };

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double momentum = 0.9;
  double grad_clip_norm = 5.0;
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 0;  // 0: only the final/best checkpoint
  std::size_t patience = 10;         // early stopping on validation Recall@1
  std::size_t hidden_dim = 16;
  bool merge_bias = false;
  bool use_skips = true;  // false: plain bidirectional GRU ablation
  std::size_t threads = 1;
  /// With checkpoint_every > 0, every k-th epoch is saved to
  /// "<checkpoint_path>.epoch<k>".
  std::filesystem::path checkpoint_path;

  void validate() const;
};

std::string to_string(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& s);

/// One training example: a photo stream, its sentences, its skip structure
/// and its storyline partition.
struct TrainingStory {
  const StoryStream* photos = nullptr;
  const SentenceSequence* sentences = nullptr;
  SkipMatrix skips;
  SubStoryPartition partition;
};

struct OptimizerState {
  BMRNNParams first_moment;   // Adam m, or SGD velocity
  BMRNNParams second_moment;  // Adam v
  std::uint64_t steps = 0;

  static OptimizerState zeros_like(const BMRNNParams& p);
};

/// sqrt of the sum of squares over every tensor.
double global_norm(const BMRNNParams& grads);

/// Clips `grads` to global norm `max_norm` (in place), then applies one
/// Adam or SGD-with-momentum step to `params`. Returns the pre-clip norm.
double update_step(BMRNNParams& params, BMRNNParams& grads, OptimizerState& state,
                   const TrainConfig& cfg);

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double val_recall1 = 0.0;
  double val_medr = 0.0;
  double wall_ms = 0.0;

  std::string to_json_line() const;
};

struct Checkpoint {
  BMRNNParams params;
  std::size_t epoch = 0;
  double best_val_recall1 = 0.0;
  std::string config_json;  // snapshot of TrainConfig + CompatibilityConfig
};

struct TrainResult {
  Checkpoint best;
  std::vector<EpochLog> log;
};

using EpochCallback = std::function<void(const EpochLog&, const BMRNNParams&)>;

/// Minibatch training on the contrastive loss. Photo-side negatives H' are
/// the model's outputs on other training stories, recomputed once per epoch
/// and treated as constants. Throws NumericalError on a non-finite loss.
TrainResult train(const std::vector<TrainingStory>& train_set,
                  const std::vector<TrainingStory>& val_set, const TrainConfig& cfg,
                  const CompatibilityConfig& ccfg, const EpochCallback& on_epoch = {});

/// Validation/test retrieval with the training-time skip policy.
RetrievalReport evaluate_stories(const BMRNNParams& params, const std::vector<TrainingStory>& set,
                                 const CompatibilityConfig& ccfg, bool use_skips);

std::string config_snapshot(const TrainConfig& cfg, const CompatibilityConfig& ccfg);

/// Writes the model file and a sidecar `<path>.json` with the config
/// snapshot, epoch and best validation Recall@1.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// --- gradient checking -----------------------------------------------------

struct GradCheckConfig {
  std::uint64_t seed = 7;
  std::size_t trials = 20;
  std::size_t max_hidden = 6;
  std::size_t max_len = 5;
  std::size_t negatives = 3;
  double epsilon = 1e-5;
  /// Build positives so that every hinge is inactive (loss exactly zero).
  bool inactive_hinges = false;
  /// Applied to the analytic parameter gradients before comparison; lets
  /// tests confirm the harness notices a wrong gradient.
  std::function<void(BMRNNParams&)> corrupt;
};

struct GradCheckReport {
  /// Max relative error per tensor name (plus "x" for the inputs).
  std::map<std::string, double> max_rel_error;
  std::map<std::string, double> max_abs_grad;
  double max_error = 0.0;
  std::size_t trials = 0;
  std::size_t compared = 0;
};

/// |a - b| / max(|a|, |b|, floor): relative error, measured against the floor
/// for entries smaller than it. Central differences at eps = 1e-5 carry about
/// 1e-10 of rounding noise, so a 1e-4 floor keeps tiny entries meaningful.
double relative_error(double analytic, double numeric, double floor = 1e-4);

/// Random small networks (hidden <= max_hidden, N <= max_len, 0-2 skips)
/// under the full contrastive loss; compares every analytic gradient with
/// central finite differences.
GradCheckReport grad_check(const GradCheckConfig& cfg);

}  // namespace bmrnn
