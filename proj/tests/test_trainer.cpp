// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "bmrnn/data_io.hpp"
#include "bmrnn/error.hpp"
#include "bmrnn/trainer.hpp"

using namespace bmrnn;
namespace fs = std::filesystem;

namespace {

struct SynthSet {
  SyntheticCorpus corpus;
  std::vector<TrainingStory> train, val;

  SynthSet(std::size_t num_train, std::size_t num_val, std::uint64_t seed = 1) {
    SynthConfig cfg;
    cfg.num_train = num_train;
    cfg.num_val = num_val;
    cfg.num_test = 0;
    cfg.seed = seed;
    corpus = generate_synthetic(cfg);
    for (std::size_t k = 0; k < corpus.stories.size(); ++k) {
      const auto& s = corpus.stories[k];
      const auto& p = corpus.planted[k];
      TrainingStory t{&s.photos, &s.sentences, p.skips, SubStoryPartition::from_clusters(p.clusters)};
      (s.split == Split::train ? train : val).push_back(t);
    }
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool all_zero(const BMRNNParams& p) {
  bool zero = true;
  for_each_tensor(p, [&](const std::string&, const auto& t) {
    for (double v : t.values()) zero &= v == 0.0;
  });
  return zero;
}

}  // namespace

TEST_CASE("learning rate zero leaves parameters unchanged") {
  SynthSet data(16, 4);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.learning_rate = 0.0;
  CompatibilityConfig ccfg;
  ccfg.negatives_per_positive = 5;
  std::vector<BMRNNParams> seen;
  train(data.train, data.val, cfg, ccfg, [&](const EpochLog&, const BMRNNParams& p) { seen.push_back(p); });
  REQUIRE(seen.size() == 3);
  SeededRng rng(cfg.seed);
  const auto init = BMRNNParams::random(16, cfg.hidden_dim, 16, rng);
  for (const auto& p : seen) CHECK(serialize_model(p) == serialize_model(init));
}

TEST_CASE("training is deterministic") {
  SynthSet data(24, 8);
  TrainConfig cfg;
  cfg.epochs = 3;
  CompatibilityConfig ccfg;
  ccfg.negatives_per_positive = 7;
  const auto a = train(data.train, data.val, cfg, ccfg);
  const auto b = train(data.train, data.val, cfg, ccfg);
  CHECK(serialize_model(a.best.params) == serialize_model(b.best.params));
  REQUIRE(a.log.size() == b.log.size());
  for (std::size_t e = 0; e < a.log.size(); ++e) CHECK(a.log[e].mean_loss == b.log[e].mean_loss);

  // Worker threads do not change the reduction order.
  cfg.threads = 3;
  const auto c = train(data.train, data.val, cfg, ccfg);
  CHECK(serialize_model(a.best.params) == serialize_model(c.best.params));
}

TEST_CASE("mean epoch loss decreases over the first epochs") {
  SynthSet data(64, 16);
  TrainConfig cfg;
  cfg.epochs = 5;
  const auto r = train(data.train, data.val, cfg, CompatibilityConfig{});
  REQUIRE(r.log.size() == 5);
  CHECK(r.log[1].mean_loss < r.log[0].mean_loss);
  CHECK(r.log[2].mean_loss < r.log[1].mean_loss);
  CHECK(std::isfinite(r.log[4].mean_loss));
  for (const auto& l : r.log) {
    const auto j = nlohmann::json::parse(l.to_json_line());
    CHECK(j.contains("epoch"));
    CHECK(j.contains("mean_loss"));
    CHECK(j.contains("val_recall1"));
    CHECK(j.contains("val_medr"));
    CHECK(j.contains("wall_ms"));
  }
}

TEST_CASE("merge bias stays fixed unless enabled") {
  SynthSet data(16, 4);
  TrainConfig cfg;
  cfg.epochs = 2;
  CompatibilityConfig ccfg;
  ccfg.negatives_per_positive = 5;
  BMRNNParams last;
  train(data.train, data.val, cfg, ccfg, [&](const EpochLog&, const BMRNNParams& p) { last = p; });
  CHECK(last.b_merge == Vector(16));
  cfg.merge_bias = true;
  train(data.train, data.val, cfg, ccfg, [&](const EpochLog&, const BMRNNParams& p) { last = p; });
  CHECK(last.b_merge != Vector(16));
}

TEST_CASE("non-finite inputs abort with a diagnostic") {
  SynthSet data(8, 2);
  StoryStream bad = *data.train[3].photos;
  bad.x[1][0] = std::nan("");
  data.train[3].photos = &bad;
  TrainConfig cfg;
  cfg.epochs = 1;
  CompatibilityConfig ccfg;
  ccfg.negatives_per_positive = 3;
  try {
    train(data.train, data.val, cfg, ccfg);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("story") != std::string::npos);
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("update_step identities") {
  SeededRng rng(2);
  const auto start = BMRNNParams::random(3, 2, 3, rng);

  SUBCASE("zero gradient under SGD") {
    auto p = start;
    auto g = BMRNNParams::zeros(3, 2, 3);
    auto st = OptimizerState::zeros_like(p);
    TrainConfig cfg;
    cfg.optimizer = OptimizerKind::sgd_momentum;
    cfg.learning_rate = 0.1;
    update_step(p, g, st, cfg);
    CHECK(serialize_model(p) == serialize_model(start));
  }

  SUBCASE("first Adam step moves by lr * sign(g)") {
    auto p = start;
    auto g = BMRNNParams::zeros(3, 2, 3);
    for_each_tensor(g, [&](const std::string&, auto& t) {
      for (double& v : t.values()) v = rng.uniform(-0.1, 0.1);
    });
    const auto gcopy = g;
    auto st = OptimizerState::zeros_like(p);
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    update_step(p, g, st, cfg);
    std::vector<double> before, after, grad;
    for_each_tensor(start, [&](const std::string&, const auto& t) {
      for (double v : t.values()) before.push_back(v);
    });
    for_each_tensor(p, [&](const std::string&, const auto& t) {
      for (double v : t.values()) after.push_back(v);
    });
    for_each_tensor(gcopy, [&](const std::string&, const auto& t) {
      for (double v : t.values()) grad.push_back(v);
    });
    for (std::size_t i = 0; i < grad.size(); ++i) {
      const double expected = grad[i] > 0 ? -1e-3 : grad[i] < 0 ? 1e-3 : 0.0;
      CHECK(after[i] - before[i] == doctest::Approx(expected).epsilon(1e-4));
    }
  }

  SUBCASE("clipping to the global norm preserves direction") {
    auto g = BMRNNParams::zeros(3, 2, 3);
    std::vector<double> raw;
    for_each_tensor(g, [&](const std::string&, auto& t) {
      for (double& v : t.values()) {
        v = rng.normal();
        raw.push_back(v);
      }
    });
    const double n0 = global_norm(g);
    for_each_tensor(g, [&](const std::string&, auto& t) {
      for (double& v : t.values()) v *= 50.0 / n0;
    });
    CHECK(global_norm(g) == doctest::Approx(50.0));
    auto p = start;
    auto st = OptimizerState::zeros_like(p);
    TrainConfig cfg;
    cfg.optimizer = OptimizerKind::sgd_momentum;
    const double pre = update_step(p, g, st, cfg);
    CHECK(pre == doctest::Approx(50.0));
    CHECK(global_norm(g) == doctest::Approx(5.0));
    std::size_t i = 0;
    for_each_tensor(g, [&](const std::string&, const auto& t) {
      for (double v : t.values()) CHECK(v == doctest::Approx(raw[i++] * 5.0 / n0));
    });
  }
}

TEST_CASE("grad_check: analytic gradients match finite differences") {
  const auto report = grad_check(GradCheckConfig{});
  CHECK(report.trials >= 20);
  CHECK(report.compared > 0);
  for (const auto& [name, err] : report.max_rel_error) {
    INFO(name);
    CHECK(err < 1e-5);
  }
  CHECK(report.max_error < 1e-5);
  CHECK(report.max_rel_error.count("fwd.W_hp") == 1);
  CHECK(report.max_rel_error.count("x") == 1);
}

TEST_CASE("grad_check notices a corrupted W_hp gradient") {
  GradCheckConfig cfg;
  cfg.trials = 5;
  cfg.corrupt = [](BMRNNParams& g) {
    for (double& v : g.fwd.skip_proj.values()) v = v * 1.5 + 0.01;
  };
  const auto report = grad_check(cfg);
  CHECK(report.max_rel_error.at("fwd.W_hp") > 1e-2);
}

TEST_CASE("grad_check with every hinge inactive gives zero gradients") {
  GradCheckConfig cfg;
  cfg.trials = 5;
  cfg.inactive_hinges = true;
  const auto report = grad_check(cfg);
  for (const auto& [name, g] : report.max_abs_grad) {
    INFO(name);
    CHECK(g == 0.0);
  }
}

TEST_CASE("checkpoint save/load/save is byte-identical") {
  SeededRng rng(9);
  Checkpoint c;
  c.params = BMRNNParams::random(4, 3, 4, rng);
  c.epoch = 7;
  c.best_val_recall1 = 42.5;
  c.config_json = config_snapshot(TrainConfig{}, CompatibilityConfig{});
  const auto dir = fs::temp_directory_path() / "bmrnn_test_ckpt";
  fs::create_directories(dir);
  save_checkpoint(dir / "a.bin", c);
  const auto back = load_checkpoint(dir / "a.bin");
  CHECK(back.epoch == 7);
  CHECK(back.best_val_recall1 == 42.5);
  save_checkpoint(dir / "b.bin", back);
  CHECK(slurp(dir / "a.bin") == slurp(dir / "b.bin"));
  CHECK(slurp(dir / "a.bin.json") == slurp(dir / "b.bin.json"));
  const auto side = nlohmann::json::parse(slurp(dir / "a.bin.json"));
  CHECK(side["config"]["negatives"] == 127);
}

TEST_CASE("config validation") {
  TrainConfig cfg;
  cfg.batch_size = 0;
  CHECK_THROWS(cfg.validate());
  CHECK(parse_optimizer("adam") == OptimizerKind::adam);
  CHECK(parse_optimizer("sgd-momentum") == OptimizerKind::sgd_momentum);
  CHECK_THROWS(parse_optimizer("rmsprop"));
}
