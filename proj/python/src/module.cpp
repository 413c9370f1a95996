// SPDX-License-Identifier: Apache-2.0
#include <pybind11/numpy.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <json.hpp>

#include <map>
#include <string>
#include <vector>

#include "bmrnn/data_io.hpp"
#include "bmrnn/error.hpp"
#include "bmrnn/evaluator.hpp"
#include "bmrnn/network.hpp"
#include "bmrnn/skip_detect.hpp"
#include "bmrnn/trainer.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace bmrnn;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<Vector> rows_of(const Array& a, const char* what) {
  if (a.ndim() != 2) throw DimensionError(std::string(what) + " must be a 2-D array");
  const auto r = a.unchecked<2>();
  std::vector<Vector> out(static_cast<std::size_t>(r.shape(0)), Vector(static_cast<std::size_t>(r.shape(1))));
  for (py::ssize_t i = 0; i < r.shape(0); ++i)
    for (py::ssize_t j = 0; j < r.shape(1); ++j) out[std::size_t(i)][std::size_t(j)] = r(i, j);
  return out;
}

Array to_array(const std::vector<Vector>& rows, std::size_t cols) {
  Array out({rows.size(), cols});
  auto w = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols; ++j) w(py::ssize_t(i), py::ssize_t(j)) = rows[i][j];
  return out;
}

Array to_array(const Matrix& m) {
  Array out({m.rows(), m.cols()});
  auto w = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) w(py::ssize_t(i), py::ssize_t(j)) = m(i, j);
  return out;
}

py::dict cluster_dict(const ClusterAssignment& a) {
  py::dict d;
  d["exemplar_of"] = a.exemplar_of;
  d["clusters"] = a.clusters;
  d["converged"] = a.converged;
  d["iterations"] = a.iterations;
  return d;
}

APConfig ap_config(double damping, std::optional<double> preference, std::size_t max_iter,
                   std::size_t window) {
  APConfig cfg;
  cfg.damping = damping;
  cfg.preference = preference;
  cfg.max_iter = max_iter;
  cfg.convergence_window = window;
  return cfg;
}

py::dict report_dict(const RetrievalReport& r) {
  py::dict d;
  d["recall_at_1"] = r.recall_at.at(1);
  d["recall_at_5"] = r.recall_at.at(5);
  d["recall_at_10"] = r.recall_at.at(10);
  d["median_rank"] = r.median_rank;
  d["pool_size"] = r.pool_size;
  d["per_story_ranks"] = r.per_story_ranks;
  return d;
}

LocalTermMode local_mode(const std::string& s) {
  if (s == "aligned") return LocalTermMode::aligned;
  if (s == "all-pairs") return LocalTermMode::all_pairs;
  throw py::value_error("local_mode must be 'aligned' or 'all-pairs'");
}

struct LoadedSplits {
  Corpus corpus;
  std::map<std::string, StorySkips> skips;

  std::vector<TrainingStory> split(Split s) const {
    std::vector<TrainingStory> out;
    for (const Story* st : corpus.split(s)) {
      const auto it = skips.find(st->photos.story_id);
      if (it == skips.end()) throw DataError("no skips for story " + st->photos.story_id);
      out.push_back({&st->photos, &st->sentences, it->second.skips,
                     SubStoryPartition::from_clusters(it->second.clusters)});
    }
    return out;
  }
};

LoadedSplits load(const fs::path& manifest, const fs::path& skips_path) {
  LoadedSplits l{load_manifest(manifest), {}};
  for (auto& s : read_skips(skips_path, l.corpus)) l.skips[s.story_id] = std::move(s);
  return l;
}

}  // namespace

PYBIND11_MODULE(_bmrnn, m) {
  m.doc() = "Bidirectional multi-thread recurrent network for photo-stream retrieval";

  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  m.def(
      "similarity",
      [](const Array& features, bool l2_normalize) {
        return to_array(similarity(rows_of(features, "features"), l2_normalize).s);
      },
      py::arg("features"), py::arg("l2_normalize") = false,
      "Pairwise dot-product (or cosine) similarity of the rows of `features`.");

  m.def(
      "affinity_propagation",
      [](const Array& sim, double damping, std::optional<double> preference, std::size_t max_iter,
         std::size_t window) {
        const auto rows = rows_of(sim, "similarity");
        SimilarityMatrix s{Matrix(rows.size(), rows.empty() ? 0 : rows[0].dim())};
        for (std::size_t i = 0; i < rows.size(); ++i)
          for (std::size_t j = 0; j < rows[i].dim(); ++j) s.s(i, j) = rows[i][j];
        return cluster_dict(affinity_propagation(s, ap_config(damping, preference, max_iter, window)));
      },
      py::arg("similarity"), py::arg("damping") = 0.9, py::arg("preference") = py::none(),
      py::arg("max_iter") = 200, py::arg("convergence_window") = 50);

  m.def(
      "detect_skips",
      [](const Array& features, double damping, std::optional<double> preference, std::size_t max_iter,
         std::size_t window, bool l2_normalize) {
        const auto d = detect_skips(rows_of(features, "features"),
                                    ap_config(damping, preference, max_iter, window), l2_normalize);
        py::dict out = cluster_dict(d.clusters);
        out["skips"] = d.skips.pairs();
        return out;
      },
      py::arg("features"), py::arg("damping") = 0.9, py::arg("preference") = py::none(),
      py::arg("max_iter") = 200, py::arg("convergence_window") = 50, py::arg("l2_normalize") = false,
      "Affinity propagation over photo features, then skip pairs chaining each cluster.");

  py::class_<BMRNNParams>(m, "Model")
      .def_static(
          "random",
          [](std::size_t input_dim, std::size_t hidden_dim, std::size_t output_dim, std::uint64_t seed) {
            SeededRng rng(seed);
            return BMRNNParams::random(input_dim, hidden_dim, output_dim, rng);
          },
          py::arg("input_dim"), py::arg("hidden_dim"), py::arg("output_dim"), py::arg("seed") = 1)
      .def_static("load", [](const fs::path& p) { return load_model(p); }, py::arg("path"))
      .def("save", [](const BMRNNParams& p, const fs::path& path) { save_model(path, p); }, py::arg("path"))
      .def("to_bytes", [](const BMRNNParams& p) { return py::bytes(serialize_model(p)); })
      .def_static("from_bytes", [](const py::bytes& b) { return deserialize_model(std::string(b)); })
      .def_property_readonly("input_dim", &BMRNNParams::input_dim)
      .def_property_readonly("hidden_dim", &BMRNNParams::hidden_dim)
      .def_property_readonly("output_dim", &BMRNNParams::output_dim)
      .def(
          "forward",
          [](const BMRNNParams& p, const Array& x, std::vector<SkipMatrix::Pair> skips) {
            const auto rows = rows_of(x, "x");
            const auto tr = bmrnn_forward(p, rows, SkipMatrix::from_pairs(rows.size(), std::move(skips)));
            return to_array(tr.merged, p.output_dim());
          },
          py::arg("x"), py::arg("skips") = std::vector<SkipMatrix::Pair>{},
          "Merged outputs H (one row per photo) for a photo stream and its forward skip pairs.")
      .def(py::self == py::self);

  m.def(
      "compatibility",
      [](const Array& H, const Array& V, std::vector<std::vector<std::size_t>> groups, double alpha,
         const std::string& mode) {
        CompatibilityConfig cfg;
        cfg.alpha = alpha;
        cfg.local_mode = local_mode(mode);
        SubStoryPartition part{std::move(groups)};
        part.validate();
        return compatibility(rows_of(H, "H"), rows_of(V, "V"), part, cfg);
      },
      py::arg("H"), py::arg("V"), py::arg("groups"), py::arg("alpha") = 0.5,
      py::arg("local_mode") = "aligned");

  m.def(
      "report_from_ranks",
      [](std::vector<std::size_t> ranks, std::size_t pool_size) {
        return report_dict(report_from_ranks(std::move(ranks), pool_size));
      },
      py::arg("ranks"), py::arg("pool_size"));

  m.def(
      "grad_check",
      [](std::uint64_t seed, std::size_t trials) {
        GradCheckConfig cfg;
        cfg.seed = seed;
        cfg.trials = trials;
        const auto r = grad_check(cfg);
        py::dict d;
        d["max_error"] = r.max_error;
        d["trials"] = r.trials;
        d["compared"] = r.compared;
        d["max_rel_error"] = r.max_rel_error;
        return d;
      },
      py::arg("seed") = 7, py::arg("trials") = 20);

  m.def(
      "generate_synthetic",
      [](const fs::path& out_dir, std::size_t stories, std::size_t length, std::size_t scenes,
         std::size_t dim, std::uint64_t seed) {
        SynthConfig cfg;
        cfg.num_train = stories;
        cfg.num_val = cfg.num_test = stories / 4;
        cfg.story_len = length;
        cfg.num_scenes = scenes;
        cfg.embed_dim = dim;
        cfg.seed = seed;
        cfg.validate();
        const auto corpus = generate_synthetic(cfg);
        fs::create_directories(out_dir);
        const auto manifest = write_corpus(out_dir, corpus.stories);
        write_skips(out_dir / "planted_skips.jsonl", corpus.planted);
        return manifest;
      },
      py::arg("out_dir"), py::arg("stories") = 200, py::arg("length") = 5, py::arg("scenes") = 2,
      py::arg("dim") = 16, py::arg("seed") = 1,
      "Writes a synthetic corpus and its planted skips; returns the manifest path.");

  m.def(
      "detect_corpus_skips",
      [](const fs::path& manifest, const fs::path& out, double damping) {
        const auto corpus = load_manifest(manifest);
        APConfig ap;
        ap.damping = damping;
        std::vector<StorySkips> all;
        for (const auto& st : corpus.stories) {
          if (!st.photos.raw_fc) throw DataError("story " + st.photos.story_id + " has no feature file");
          auto d = detect_skips(*st.photos.raw_fc, ap);
          all.push_back({st.photos.story_id, std::move(d.clusters), std::move(d.skips), false});
        }
        write_skips(out, all);
        return all.size();
      },
      py::arg("manifest"), py::arg("out"), py::arg("damping") = 0.9);

  m.def(
      "train",
      [](const fs::path& manifest, const fs::path& skips, const fs::path& out, std::size_t epochs,
         std::uint64_t seed, double alpha, double gamma, std::size_t negatives, double learning_rate,
         std::size_t batch_size, bool use_skips) {
        const auto l = load(manifest, skips);
        TrainConfig tc;
        tc.epochs = epochs;
        tc.seed = seed;
        tc.learning_rate = learning_rate;
        tc.batch_size = batch_size;
        tc.use_skips = use_skips;
        CompatibilityConfig cc;
        cc.alpha = alpha;
        cc.gamma = gamma;
        cc.negatives_per_positive = negatives;
        tc.validate();
        cc.validate();
        TrainResult res;
        {
          py::gil_scoped_release release;
          res = train(l.split(Split::train), l.split(Split::val), tc, cc);
        }
        save_checkpoint(out, res.best);
        py::list log;
        for (const auto& e : res.log) log.append(py::module_::import("json").attr("loads")(e.to_json_line()));
        return log;
      },
      py::arg("manifest"), py::arg("skips"), py::arg("out"), py::arg("epochs") = 50,
      py::arg("seed") = 1, py::arg("alpha") = 0.5, py::arg("gamma") = 0.2, py::arg("negatives") = 127,
      py::arg("learning_rate") = 1e-3, py::arg("batch_size") = 8, py::arg("use_skips") = true,
      "Trains on the training split and saves the best-validation checkpoint; returns the epoch log.");

  m.def(
      "evaluate",
      [](const fs::path& manifest, const fs::path& skips, const fs::path& model, const std::string& split) {
        const auto l = load(manifest, skips);
        const auto ckpt = load_checkpoint(model);
        CompatibilityConfig cc;
        bool use_skips = true;
        if (!ckpt.config_json.empty()) {
          const auto cfg = nlohmann::json::parse(ckpt.config_json);
          cc.alpha = cfg.value("alpha", cc.alpha);
          cc.local_mode = local_mode(cfg.value("local_mode", std::string("aligned")));
          use_skips = cfg.value("use_skips", true);
        }
        return report_dict(evaluate_stories(ckpt.params, l.split(parse_split(split)), cc, use_skips));
      },
      py::arg("manifest"), py::arg("skips"), py::arg("model"), py::arg("split") = "test");
}
