// SPDX-License-Identifier: Apache-2.0
//
// bmrnn: synth, detect-skips, train, eval and gradcheck subcommands.
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bmrnn/data_io.hpp"
#include "bmrnn/error.hpp"
#include "bmrnn/evaluator.hpp"
#include "bmrnn/skip_detect.hpp"
#include "bmrnn/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace bmrnn;

namespace {

enum Exit : int { ok = 0, usage = 1, data = 2, numerical = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void log_config(const CLI::App& sub) {
  std::cerr << "# resolved config for " << sub.get_name() << "\n";
  for (const auto* opt : sub.get_options()) {
    const std::string name = opt->get_single_name();
    if (name.empty() || name == "help" || name == "config") continue;
    std::string value;
    if (opt->count() > 0) {
      value = opt->as<std::string>();
    } else {
      value = opt->get_default_str();
    }
    if (value.empty() && opt->get_expected_min() == 0) value = "false";
    if (value.empty()) value = "(unset)";
    std::cerr << "#   " << name << " = " << value << "\n";
  }
}

CLI::App* add_subcommand(CLI::App& app, const std::string& name, const std::string& help) {
  auto* sub = app.add_subcommand(name, help);
  // Consumed by expand_config before parsing; declared for --help.
  sub->add_option("--config", "key = value file; command-line flags take precedence")
      ->type_name("FILE");
  return sub;
}

// --- synth -------------------------------------------------------------------

struct SynthArgs {
  fs::path out;
  SynthConfig cfg;
};

void add_synth(CLI::App& app, SynthArgs& a, std::function<int()>& action) {
  auto* sub = add_subcommand(app, "synth", "Generate a synthetic corpus with planted skips");
  sub->add_option("--out", a.out, "Output directory")->required();
  sub->add_option_function<std::size_t>(
         "--stories",
         [&a](std::size_t n) {
           a.cfg.num_train = n;
           a.cfg.num_val = a.cfg.num_test = n / 4;
         },
         "Training stories; validation and test get a quarter each")
      ->default_str("200");
  sub->add_option("--length", a.cfg.story_len, "Photos per story")->capture_default_str();
  sub->add_option("--scenes", a.cfg.num_scenes, "Scene threads per story")->capture_default_str();
  sub->add_option("--dim", a.cfg.embed_dim, "Photo and sentence embedding dimension")
      ->capture_default_str();
  sub->add_option("--feature-dim", a.cfg.feature_dim, "Photo feature dimension for skip detection")
      ->capture_default_str();
  sub->add_option("--scene-bank", a.cfg.scene_bank, "Corpus-wide scene bank size; 0 for fresh scenes")
      ->capture_default_str();
  sub->add_option("--separation", a.cfg.scene_separation, "Minimum distance between scene centers")
      ->capture_default_str();
  sub->add_option("--noise", a.cfg.noise_sigma, "Photo feature noise sigma")->capture_default_str();
  sub->add_option("--sentence-noise", a.cfg.sentence_noise, "Sentence embedding noise sigma")
      ->capture_default_str();
  sub->add_option("--seed", a.cfg.seed, "Random seed")->capture_default_str();
  action = [&a, sub] {
    log_config(*sub);
    try {
      a.cfg.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    const auto corpus = generate_synthetic(a.cfg);
    fs::create_directories(a.out);
    const auto manifest = write_corpus(a.out, corpus.stories);
    write_skips(a.out / "planted_skips.jsonl", corpus.planted);
    std::cout << "wrote " << corpus.stories.size() << " stories to " << manifest.string() << "\n"
              << "planted skips in " << (a.out / "planted_skips.jsonl").string() << "\n";
    return ok;
  };
}

// --- detect-skips ------------------------------------------------------------

struct DetectArgs {
  fs::path manifest, out;
  APConfig ap;
  bool l2 = false;
};

void add_detect(CLI::App& app, DetectArgs& a, std::function<int()>& action) {
  auto* sub = add_subcommand(app, "detect-skips", "Cluster each story's photos and emit skip pairs");
  sub->add_option("--manifest", a.manifest, "Corpus manifest (JSON lines)")->required();
  sub->add_option("--out", a.out, "Output skips file (JSON lines)")->required();
  sub->add_option("--damping", a.ap.damping, "Affinity propagation damping")->capture_default_str();
  sub->add_option_function<double>("--preference", [&a](double p) { a.ap.preference = p; },
                                   "Exemplar preference (default: median similarity)");
  sub->add_option("--max-iter", a.ap.max_iter, "Iteration cap")->capture_default_str();
  sub->add_option("--window", a.ap.convergence_window, "Stable iterations required to converge")
      ->capture_default_str();
  sub->add_flag("--l2-normalize", a.l2, "Cosine instead of dot-product similarity")->capture_default_str();
  action = [&a, sub] {
    log_config(*sub);
    const auto corpus = load_manifest(a.manifest);
    std::vector<StorySkips> all;
    std::size_t pairs = 0, unconverged = 0;
    for (const auto& st : corpus.stories) {
      if (!st.photos.raw_fc) throw DataError("story " + st.photos.story_id + " has no feature file");
      auto d = detect_skips(*st.photos.raw_fc, a.ap, a.l2);
      pairs += d.skips.pairs().size();
      unconverged += !d.clusters.converged;
      all.push_back({st.photos.story_id, std::move(d.clusters), std::move(d.skips), false});
    }
    write_skips(a.out, all);
    std::cout << all.size() << " stories, " << pairs << " skip pairs, " << unconverged
              << " not converged; wrote " << a.out.string() << "\n";
    return ok;
  };
}

// --- shared loading ------------------------------------------------------------

struct Loaded {
  Corpus corpus;
  std::map<std::string, StorySkips> skips;
};

Loaded load_with_skips(const fs::path& manifest, const fs::path& skips_path) {
  Loaded l{load_manifest(manifest), {}};
  for (auto& s : read_skips(skips_path, l.corpus)) l.skips[s.story_id] = std::move(s);
  return l;
}

std::vector<TrainingStory> split_set(const Loaded& l, Split split) {
  std::vector<TrainingStory> out;
  for (const Story* st : l.corpus.split(split)) {
    const auto it = l.skips.find(st->photos.story_id);
    if (it == l.skips.end()) throw DataError("no skips for story " + st->photos.story_id);
    out.push_back({&st->photos, &st->sentences, it->second.skips,
                   SubStoryPartition::from_clusters(it->second.clusters)});
  }
  return out;
}

LocalTermMode parse_local_mode(const std::string& s) {
  if (s == "aligned") return LocalTermMode::aligned;
  if (s == "all-pairs") return LocalTermMode::all_pairs;
  throw UsageError("unknown local mode " + s);
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
  fs::path manifest, skips, out, log;
  TrainConfig cfg;
  CompatibilityConfig cc;
  std::string optimizer = "adam";
  std::string local_mode = "aligned";
  bool no_skips = false;
};

void add_train(CLI::App& app, TrainArgs& a, std::function<int()>& action) {
  auto* sub = add_subcommand(app, "train", "Train a model on the training split");
  sub->add_option("--manifest", a.manifest, "Corpus manifest")->required();
  sub->add_option("--skips", a.skips, "Skips file from detect-skips")->required();
  sub->add_option("--out", a.out, "Model file; a .json sidecar holds the config")->required();
  sub->add_option("--log", a.log, "JSON-lines training log (default: <out>.log.jsonl)");
  sub->add_option("--alpha", a.cc.alpha, "Weight of the global term in the compatibility score")
      ->capture_default_str();
  sub->add_option("--gamma", a.cc.gamma, "Hinge margin")->capture_default_str();
  sub->add_option("--negatives", a.cc.negatives_per_positive,
                  "Negatives per positive, on each side of the loss")
      ->capture_default_str();
  sub->add_flag("--average-negatives", a.cc.average_negatives,
                "Average each hinge sum over its negatives instead of summing")
      ->capture_default_str();
  sub->add_option("--local-mode", a.local_mode, "Local term: aligned or all-pairs")
      ->capture_default_str();
  sub->add_option("--epochs", a.cfg.epochs, "Maximum epochs")->capture_default_str();
  sub->add_option("--patience", a.cfg.patience, "Early-stopping patience on validation R@1")
      ->capture_default_str();
  sub->add_option("--batch-size", a.cfg.batch_size, "Stories per minibatch")->capture_default_str();
  sub->add_option("--lr", a.cfg.learning_rate, "Learning rate")->capture_default_str();
  sub->add_option("--optimizer", a.optimizer, "adam or sgd-momentum")->capture_default_str();
  sub->add_option("--grad-clip", a.cfg.grad_clip_norm, "Global gradient norm clip")
      ->capture_default_str();
  sub->add_option("--hidden", a.cfg.hidden_dim, "Hidden units per direction")->capture_default_str();
  sub->add_flag("--merge-bias,!--no-merge-bias", a.cfg.merge_bias, "Learn the merge bias")
      ->capture_default_str();
  sub->add_flag("--no-skips", a.no_skips, "Disable skips (plain bidirectional GRU)")->capture_default_str();
  sub->add_option("--checkpoint-every", a.cfg.checkpoint_every, "Save every k-th epoch; 0 disables")
      ->capture_default_str();
  sub->add_option("--threads", a.cfg.threads, "Worker threads; 1 is bit-exact deterministic")
      ->capture_default_str();
  sub->add_option("--seed", a.cfg.seed, "Random seed")->capture_default_str();
  action = [&a, sub] {
    log_config(*sub);
    try {
      a.cfg.optimizer = parse_optimizer(a.optimizer);
      a.cc.local_mode = parse_local_mode(a.local_mode);
      a.cfg.use_skips = !a.no_skips;
      a.cfg.checkpoint_path = a.out;
      a.cfg.validate();
      a.cc.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    const auto l = load_with_skips(a.manifest, a.skips);
    const auto train_set = split_set(l, Split::train);
    const auto val_set = split_set(l, Split::val);

    const fs::path log_path = a.log.empty() ? fs::path(a.out.string() + ".log.jsonl") : a.log;
    std::ofstream log(log_path);
    if (!log) throw DataError("cannot open " + log_path.string() + " for writing");
    log << json{{"config", json::parse(config_snapshot(a.cfg, a.cc))}}.dump() << "\n";
    const auto result = train(train_set, val_set, a.cfg, a.cc, [&](const EpochLog& e, const BMRNNParams&) {
      const auto line = e.to_json_line();
      log << line << "\n";
      log.flush();
      std::cout << line << "\n";
    });
    save_checkpoint(a.out, result.best);
    std::cout << "best epoch " << result.best.epoch << ", validation R@1 "
              << result.best.best_val_recall1 << "; wrote " << a.out.string() << "\n";
    return ok;
  };
}

// --- eval --------------------------------------------------------------------

struct EvalArgs {
  fs::path manifest, skips, model, report;
  std::string split = "test";
  double alpha = CompatibilityConfig{}.alpha;
  std::string local_mode = "aligned";
  bool no_skips = false;
};

void add_eval(CLI::App& app, EvalArgs& a, std::function<int()>& action) {
  auto* sub = add_subcommand(app, "eval", "Rank sentence sequences for each photo stream");
  sub->add_option("--manifest", a.manifest, "Corpus manifest")->required();
  sub->add_option("--skips", a.skips, "Skips file from detect-skips")->required();
  sub->add_option("--model", a.model, "Model file from train")->required();
  sub->add_option("--report", a.report, "Report JSON output");
  sub->add_option("--split", a.split, "Split to evaluate: train, val or test")->capture_default_str();
  auto* alpha = sub->add_option("--alpha", a.alpha, "Compatibility weight (default: from the model)");
  auto* mode = sub->add_option("--local-mode", a.local_mode, "Local term (default: from the model)");
  auto* skips = sub->add_flag("--no-skips", a.no_skips, "Disable skips (default: from the model)");
  action = [&a, sub, alpha, mode, skips] {
    log_config(*sub);
    Split split;
    try {
      split = parse_split(a.split);
    } catch (const std::exception& e) {
      throw UsageError(e.what());
    }
    const auto ckpt = load_checkpoint(a.model);
    CompatibilityConfig cc;
    bool use_skips = true;
    if (!ckpt.config_json.empty()) {
      const auto cfg = json::parse(ckpt.config_json);
      cc.alpha = cfg.value("alpha", cc.alpha);
      cc.local_mode = parse_local_mode(cfg.value("local_mode", std::string("aligned")));
      use_skips = cfg.value("use_skips", true);
    }
    if (alpha->count() > 0) cc.alpha = a.alpha;
    if (mode->count() > 0) cc.local_mode = parse_local_mode(a.local_mode);
    if (skips->count() > 0) use_skips = !a.no_skips;

    const auto l = load_with_skips(a.manifest, a.skips);
    const auto set = split_set(l, split);
    if (set.empty()) throw DataError("split " + a.split + " is empty");
    const auto report = evaluate_stories(ckpt.params, set, cc, use_skips);
    std::cout << report_to_table({{use_skips ? "BMRNN" : "BiGRU", report}});
    if (!a.report.empty()) {
      std::ofstream out(a.report);
      if (!out) throw DataError("cannot open " + a.report.string() + " for writing");
      out << report_to_json(report) << "\n";
    }
    return ok;
  };
}

// --- gradcheck ---------------------------------------------------------------

void add_gradcheck(CLI::App& app, GradCheckConfig& g, std::function<int()>& action) {
  auto* sub = add_subcommand(app, "gradcheck", "Compare analytic and finite-difference gradients");
  sub->add_option("--seed", g.seed, "Random seed")->capture_default_str();
  sub->add_option("--trials", g.trials, "Random networks to check")->capture_default_str();
  sub->add_option("--max-hidden", g.max_hidden, "Largest hidden size")->capture_default_str();
  sub->add_option("--max-len", g.max_len, "Longest story")->capture_default_str();
  sub->add_option("--epsilon", g.epsilon, "Finite-difference step")->capture_default_str();
  action = [&g, sub] {
    log_config(*sub);
    const auto r = grad_check(g);
    for (const auto& [name, err] : r.max_rel_error) std::printf("%-12s %.3e\n", name.c_str(), err);
    std::printf("trials %zu, compared %zu, max rel. error %.3e\n", r.trials, r.compared, r.max_error);
    if (!(r.max_error < 1e-5)) {
      std::cerr << "error: gradient check failed (max rel. error " << r.max_error << ")\n";
      return int(numerical);
    }
    return int(ok);
  };
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// Turns each "key = value" line of the subcommand's --config file into
// "--key=value", placed ahead of the command-line arguments so that later
// flags override it. Unknown keys are rejected.
std::vector<std::string> expand_config(const CLI::App& app, int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  if (args.empty()) return args;
  const CLI::App* sub = nullptr;
  for (const auto* s : app.get_subcommands({})) {
    if (s->get_name() == args[0]) sub = s;
  }
  if (sub == nullptr) return args;

  std::optional<fs::path> path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i) + 2);
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
      break;
    }
  }
  if (!path) return args;

  std::ifstream in(*path);
  if (!in) throw DataError("cannot open config file " + path->string());
  std::vector<std::string> from_file;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = path->string() + ":" + std::to_string(line_no);
    if (eq == std::string::npos) throw UsageError(where + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || key == "config" || key == "help" || sub->get_option_no_throw("--" + key) == nullptr) {
      throw UsageError(where + ": unknown key '" + key + "' for " + sub->get_name());
    }
    from_file.push_back("--" + key + "=" + value);
  }
  args.insert(args.begin() + 1, from_file.begin(), from_file.end());
  return args;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bidirectional multi-thread recurrent network for photo-stream retrieval"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  SynthArgs synth;
  DetectArgs detect;
  TrainArgs train_args;
  EvalArgs eval_args;
  GradCheckConfig gradcheck;
  std::map<std::string, std::function<int()>> actions;
  add_synth(app, synth, actions["synth"]);
  add_detect(app, detect, actions["detect-skips"]);
  add_train(app, train_args, actions["train"]);
  add_eval(app, eval_args, actions["eval"]);
  add_gradcheck(app, gradcheck, actions["gradcheck"]);

  std::vector<std::string> args;
  try {
    args = expand_config(app, argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return usage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return data;
  }
  std::reverse(args.begin(), args.end());  // CLI11 consumes the vector from the back
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return usage;
  }

  try {
    return actions.at(app.get_subcommands().front()->get_name())();
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return usage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return numerical;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return data;
  } catch (const DimensionError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return data;
  } catch (const json::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return data;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return data;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return usage;
  }
}
