// SPDX-License-Identifier: Apache-2.0
#include "bmrnn/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "bmrnn/error.hpp"

namespace bmrnn {

using nlohmann::json;

// --- tensors ---------------------------------------------------------------

std::size_t Tensor::row_width() const {
  std::size_t w = 1;
  for (std::size_t i = 1; i < dims.size(); ++i) w *= dims[i];
  return w;
}

std::vector<Vector> Tensor::row_vectors(std::size_t first, std::size_t count) const {
  if (dims.size() != 2) throw DataError("expected a rank-2 tensor, got rank " + std::to_string(dims.size()));
  if (first + count > rows()) {
    throw DataError("rows [" + std::to_string(first) + ", " + std::to_string(first + count) +
                    ") out of range for tensor with " + std::to_string(rows()) + " rows");
  }
  const std::size_t w = row_width();
  std::vector<Vector> out;
  out.reserve(count);
  for (std::size_t r = first; r < first + count; ++r) {
    Vector v(w);
    for (std::size_t j = 0; j < w; ++j) v[j] = data[r * w + j];
    out.push_back(std::move(v));
  }
  return out;
}

Tensor Tensor::from_rows(const std::vector<Vector>& rows) {
  Tensor t;
  const std::size_t w = rows.empty() ? 0 : rows.front().dim();
  t.dims = {static_cast<std::uint32_t>(rows.size()), static_cast<std::uint32_t>(w)};
  t.data.reserve(rows.size() * w);
  for (const auto& r : rows) {
    if (r.dim() != w) throw DimensionError("tensor rows of unequal width");
    for (double v : r.values()) t.data.push_back(static_cast<float>(v));
  }
  return t;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const std::string& bytes, std::size_t pos) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
  }
  return v;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void spit(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace

std::string encode_tensor(const Tensor& t) {
  std::size_t total = 1;
  for (auto d : t.dims) total *= d;
  if (total != t.data.size()) throw DimensionError("tensor payload does not match its dims");
  std::string out = "BMT1";
  put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
  for (auto d : t.dims) put_u32(out, d);
  for (float f : t.data) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
  }
  return out;
}

Tensor decode_tensor(const std::string& bytes, const std::string& origin) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "BMT1") != 0) {
    throw DataError(origin + ": bad magic, expected \"BMT1\"");
  }
  std::size_t pos = 4;
  auto need = [&](std::size_t n) {
    if (bytes.size() - pos < n) throw DataError(origin + ": truncated tensor file");
  };
  need(4);
  const std::uint32_t rank = get_u32(bytes, pos);
  pos += 4;
  Tensor t;
  std::size_t total = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    need(4);
    t.dims.push_back(get_u32(bytes, pos));
    total *= t.dims.back();
    pos += 4;
  }
  need(4 * total);
  if (bytes.size() - pos != 4 * total) throw DataError(origin + ": trailing bytes after tensor payload");
  t.data.resize(total);
  for (std::size_t i = 0; i < total; ++i, pos += 4) {
    const std::uint32_t bits = get_u32(bytes, pos);
    std::memcpy(&t.data[i], &bits, 4);
  }
  return t;
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) { spit(path, encode_tensor(t)); }

Tensor read_tensor(const std::filesystem::path& path) { return decode_tensor(slurp(path), path.string()); }

// --- manifest --------------------------------------------------------------

std::string to_string(Split s) {
  switch (s) {
    case Split::train:
      return "train";
    case Split::val:
      return "val";
    case Split::test:
      return "test";
  }
  return "train";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw DataError("unknown split \"" + s + "\"");
}

std::vector<const Story*> Corpus::split(Split s) const {
  std::vector<const Story*> out;
  for (const auto& story : stories) {
    if (story.split == s) out.push_back(&story);
  }
  return out;
}

const Story* Corpus::find(const std::string& story_id) const {
  for (const auto& s : stories) {
    if (s.photos.story_id == story_id) return &s;
  }
  return nullptr;
}

namespace {

ManifestEntry parse_entry(const json& j) {
  ManifestEntry e;
  e.story_id = j.at("story_id").get<std::string>();
  e.length = j.at("N").get<std::size_t>();
  e.split = parse_split(j.value("split", std::string("train")));
  if (j.contains("feature_file") && !j["feature_file"].is_null()) {
    e.feature_file = j["feature_file"].get<std::string>();
    e.feature_offset = j.value("feature_offset", std::size_t{0});
  }
  e.embedding_file = j.at("embedding_file").get<std::string>();
  e.embedding_offset = j.value("embedding_offset", std::size_t{0});
  e.sentence_file = j.at("sentence_file").get<std::string>();
  e.sentence_offset = j.value("sentence_offset", std::size_t{0});
  return e;
}

json entry_to_json(const ManifestEntry& e) {
  json j;
  j["story_id"] = e.story_id;
  j["N"] = e.length;
  j["split"] = to_string(e.split);
  if (e.feature_file) {
    j["feature_file"] = *e.feature_file;
    j["feature_offset"] = e.feature_offset;
  }
  j["embedding_file"] = e.embedding_file;
  j["embedding_offset"] = e.embedding_offset;
  j["sentence_file"] = e.sentence_file;
  j["sentence_offset"] = e.sentence_offset;
  return j;
}

}  // namespace

Corpus load_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw DataError("cannot open manifest " + manifest_path.string());
  const auto base = manifest_path.parent_path();

  Corpus corpus;
  std::map<std::string, Tensor> cache;
  auto tensor = [&](const std::string& file, const std::string& story_id) -> const Tensor& {
    auto it = cache.find(file);
    if (it != cache.end()) return it->second;
    const auto path = base / file;
    try {
      return cache.emplace(file, read_tensor(path)).first->second;
    } catch (const DataError& e) {
      throw DataError(std::string(e.what()) + " (story " + story_id + ")");
    }
  };

  std::string line;
  std::size_t line_no = 0;
  std::set<std::string> ids;
  std::size_t embed_dim = 0, sentence_dim = 0, feature_dim = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ManifestEntry e;
    try {
      e = parse_entry(json::parse(line));
    } catch (const json::exception& ex) {
      throw DataError(manifest_path.string() + ":" + std::to_string(line_no) + ": " + ex.what());
    }
    if (e.length == 0) throw DataError("story " + e.story_id + ": N must be at least 1");
    if (!ids.insert(e.story_id).second) throw DataError("duplicate story_id " + e.story_id);

    auto rows = [&](const std::string& file, std::size_t offset, std::size_t& dim_slot) {
      const Tensor& t = tensor(file, e.story_id);
      std::vector<Vector> v;
      try {
        v = t.row_vectors(offset, e.length);
      } catch (const DataError& ex) {
        throw DataError((base / file).string() + ": " + ex.what() + " (story " + e.story_id + ")");
      }
      if (dim_slot == 0) dim_slot = t.row_width();
      if (t.row_width() != dim_slot) {
        throw DataError((base / file).string() + ": row width " + std::to_string(t.row_width()) +
                        " differs from " + std::to_string(dim_slot) + " (story " + e.story_id + ")");
      }
      return v;
    };

    Story s;
    s.split = e.split;
    s.photos.story_id = e.story_id;
    s.photos.x = rows(e.embedding_file, e.embedding_offset, embed_dim);
    if (e.feature_file) s.photos.raw_fc = rows(*e.feature_file, e.feature_offset, feature_dim);
    s.sentences.story_id = e.story_id;
    s.sentences.v = rows(e.sentence_file, e.sentence_offset, sentence_dim);
    corpus.stories.push_back(std::move(s));
    corpus.manifest.push_back(std::move(e));
  }
  return corpus;
}

std::filesystem::path write_corpus(const std::filesystem::path& dir,
                                   const std::vector<Story>& stories) {
  std::filesystem::create_directories(dir);
  std::vector<Vector> features, embeddings, sentences;
  std::vector<ManifestEntry> entries;
  const bool with_features =
      !stories.empty() && std::all_of(stories.begin(), stories.end(),
                                      [](const Story& s) { return s.photos.raw_fc.has_value(); });
  for (const auto& s : stories) {
    ManifestEntry e;
    e.story_id = s.photos.story_id;
    e.length = s.photos.size();
    e.split = s.split;
    if (s.sentences.size() != e.length) {
      throw DimensionError("story " + e.story_id + ": photo and sentence counts differ");
    }
    if (with_features) {
      e.feature_file = "features.bmt";
      e.feature_offset = features.size();
      features.insert(features.end(), s.photos.raw_fc->begin(), s.photos.raw_fc->end());
    }
    e.embedding_file = "embeddings.bmt";
    e.embedding_offset = embeddings.size();
    embeddings.insert(embeddings.end(), s.photos.x.begin(), s.photos.x.end());
    e.sentence_file = "sentences.bmt";
    e.sentence_offset = sentences.size();
    sentences.insert(sentences.end(), s.sentences.v.begin(), s.sentences.v.end());
    entries.push_back(std::move(e));
  }
  if (with_features) write_tensor(dir / "features.bmt", Tensor::from_rows(features));
  write_tensor(dir / "embeddings.bmt", Tensor::from_rows(embeddings));
  write_tensor(dir / "sentences.bmt", Tensor::from_rows(sentences));

  std::string text;
  for (const auto& e : entries) text += entry_to_json(e).dump() + "\n";
  const auto manifest = dir / "manifest.jsonl";
  spit(manifest, text);
  return manifest;
}

// --- skip artifacts --------------------------------------------------------

std::string skips_to_json_line(const StorySkips& s) {
  json j;
  j["story_id"] = s.story_id;
  j["clusters"] = s.clusters.clusters;
  json pairs = json::array();
  for (const auto& [p, t] : s.skips.pairs()) pairs.push_back({p, t});
  j["skips"] = pairs;
  j["converged"] = s.clusters.converged;
  if (s.planted) j["planted"] = true;
  return j.dump();
}

StorySkips skips_from_json_line(const std::string& line, std::size_t story_length) {
  StorySkips s;
  try {
    const json j = json::parse(line);
    s.story_id = j.at("story_id").get<std::string>();
    s.clusters = ClusterAssignment::from_clusters(
        story_length, j.at("clusters").get<std::vector<std::vector<std::size_t>>>());
    s.clusters.converged = j.value("converged", true);
    std::vector<SkipMatrix::Pair> pairs;
    for (const auto& p : j.at("skips")) pairs.emplace_back(p.at(0).get<std::size_t>(), p.at(1).get<std::size_t>());
    s.skips = SkipMatrix::from_pairs(story_length, std::move(pairs));
    s.planted = j.value("planted", false);
  } catch (const json::exception& ex) {
    throw DataError(std::string("malformed skip record: ") + ex.what());
  }
  return s;
}

void write_skips(const std::filesystem::path& path, const std::vector<StorySkips>& all) {
  std::string text;
  for (const auto& s : all) text += skips_to_json_line(s) + "\n";
  spit(path, text);
}

std::vector<StorySkips> read_skips(const std::filesystem::path& path, const Corpus& corpus) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open skips file " + path.string());
  std::vector<StorySkips> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::string id;
    try {
      id = json::parse(line).at("story_id").get<std::string>();
    } catch (const json::exception& ex) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + ex.what());
    }
    const Story* story = corpus.find(id);
    if (story == nullptr) throw DataError(path.string() + ": unknown story_id " + id);
    try {
      out.push_back(skips_from_json_line(line, story->photos.size()));
    } catch (const DataError& ex) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + " (story " + id + "): " + ex.what());
    }
  }
  return out;
}

// --- synthetic generator ---------------------------------------------------

void SynthConfig::validate() const {
  if (story_len == 0) throw std::invalid_argument("synth: story_len must be at least 1");
  if (num_scenes == 0 || num_scenes > story_len) {
    throw std::invalid_argument("synth: num_scenes must lie in [1, story_len]");
  }
  if (num_scenes >= 2 && num_scenes + 1 > story_len) {
    throw std::invalid_argument(
        "synth: a non-contiguous scene recurrence needs story_len > num_scenes");
  }
  if (!(scene_separation > noise_sigma)) {
    throw std::invalid_argument("synth: scene_separation must exceed noise_sigma");
  }
  if (feature_dim == 0 || embed_dim == 0) throw std::invalid_argument("synth: dims must be positive");
  if (scene_bank > 0 && scene_bank < num_scenes) {
    throw std::invalid_argument("synth: scene_bank must be 0 or at least num_scenes");
  }
}

namespace {

Vector gaussian(std::size_t dim, SeededRng& rng, double sigma = 1.0) {
  Vector v(dim);
  for (std::size_t i = 0; i < dim; ++i) v[i] = sigma * rng.normal();
  return v;
}

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, SeededRng& rng, double sigma) {
  Matrix m(rows, cols);
  for (double& v : m.values()) v = sigma * rng.normal();
  return m;
}

// Points on the sphere of radius `sep`, pairwise at least `sep` apart.
std::vector<Vector> draw_centers(std::size_t count, std::size_t dim, double sep, SeededRng& rng) {
  constexpr int kAttempts = 1000;
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    std::vector<Vector> centers;
    for (std::size_t k = 0; k < count; ++k) {
      Vector u = gaussian(dim, rng);
      const double norm = std::sqrt(squared_norm(u));
      centers.push_back((sep / (norm > 0.0 ? norm : 1.0)) * u);
    }
    bool ok = true;
    for (std::size_t a = 0; a < count && ok; ++a) {
      for (std::size_t b = a + 1; b < count && ok; ++b) {
        ok = std::sqrt(squared_norm(centers[a] - centers[b])) >= sep;
      }
    }
    if (ok) return centers;
  }
  throw std::invalid_argument("synth: cannot place " + std::to_string(count) +
                              " scene centers pairwise " + std::to_string(sep) + " apart in " +
                              std::to_string(dim) + " dims; use a larger feature dim");
}

bool has_noncontiguous_recurrence(const std::vector<std::size_t>& scenes) {
  std::map<std::size_t, std::size_t> last;
  for (std::size_t t = 0; t < scenes.size(); ++t) {
    auto it = last.find(scenes[t]);
    if (it != last.end() && it->second + 1 < t) return true;
    last[scenes[t]] = t;
  }
  return false;
}

std::vector<std::size_t> draw_scene_sequence(const SynthConfig& cfg, SeededRng& rng) {
  for (;;) {
    std::vector<std::size_t> seq(cfg.story_len);
    for (auto& s : seq) s = rng.below(cfg.num_scenes);
    std::set<std::size_t> used(seq.begin(), seq.end());
    if (used.size() != cfg.num_scenes) continue;
    if (cfg.num_scenes >= 2 && !has_noncontiguous_recurrence(seq)) continue;
    // Relabel scenes by first appearance.
    std::map<std::size_t, std::size_t> relabel;
    for (auto& s : seq) {
      auto [it, _] = relabel.emplace(s, relabel.size());
      s = it->second;
    }
    return seq;
  }
}

}  // namespace

SyntheticCorpus generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  SeededRng rng(cfg.seed);

  // Corpus-wide maps: feature -> photo embedding, and (clean embedded scene,
  // position) -> sentence embedding.
  const Matrix projection =
      gaussian_matrix(cfg.embed_dim, cfg.feature_dim, rng, 1.0 / std::sqrt(double(cfg.feature_dim)));
  const Matrix mixing =
      gaussian_matrix(cfg.embed_dim, cfg.embed_dim, rng, 1.0 / std::sqrt(double(cfg.embed_dim)));
  std::vector<Vector> position_codes;
  for (std::size_t t = 0; t < cfg.story_len; ++t) {
    position_codes.push_back(gaussian(cfg.embed_dim, rng, 0.5 / std::sqrt(double(cfg.embed_dim))));
  }

  const std::vector<Vector> bank =
      cfg.scene_bank > 0 ? draw_centers(cfg.scene_bank, cfg.feature_dim, cfg.scene_separation, rng)
                         : std::vector<Vector>{};

  SyntheticCorpus out;
  const std::size_t total = cfg.num_train + cfg.num_val + cfg.num_test;
  for (std::size_t k = 0; k < total; ++k) {
    std::vector<Vector> centers;
    if (bank.empty()) {
      centers = draw_centers(cfg.num_scenes, cfg.feature_dim, cfg.scene_separation, rng);
    } else {
      std::vector<std::size_t> pick(bank.size());
      std::iota(pick.begin(), pick.end(), std::size_t{0});
      for (std::size_t i = 0; i < cfg.num_scenes; ++i) {
        std::swap(pick[i], pick[i + rng.below(pick.size() - i)]);
        centers.push_back(bank[pick[i]]);
      }
    }
    const auto scenes = draw_scene_sequence(cfg, rng);

    Story s;
    char id[32];
    std::snprintf(id, sizeof id, "synth-%05zu", k);
    s.photos.story_id = id;
    s.sentences.story_id = id;
    s.split = k < cfg.num_train ? Split::train
              : k < cfg.num_train + cfg.num_val ? Split::val
                                                : Split::test;
    std::vector<Vector> fc;
    for (std::size_t t = 0; t < cfg.story_len; ++t) {
      const Vector& c = centers[scenes[t]];
      Vector f = c + gaussian(cfg.feature_dim, rng, cfg.noise_sigma);
      s.photos.x.push_back(matvec(projection, f));
      fc.push_back(std::move(f));
      Vector v = matvec(mixing, matvec(projection, c));
      v += position_codes[t];
      v += gaussian(cfg.embed_dim, rng, cfg.sentence_noise / std::sqrt(double(cfg.embed_dim)));
      s.sentences.v.push_back(std::move(v));
    }
    s.photos.raw_fc = std::move(fc);

    std::vector<std::vector<std::size_t>> clusters(cfg.num_scenes);
    for (std::size_t t = 0; t < cfg.story_len; ++t) clusters[scenes[t]].push_back(t);
    StorySkips truth;
    truth.story_id = id;
    truth.clusters = ClusterAssignment::from_clusters(cfg.story_len, clusters);
    truth.skips = build_skip_matrix(truth.clusters);
    truth.planted = true;

    out.stories.push_back(std::move(s));
    out.planted.push_back(std::move(truth));
    out.scenes.push_back(scenes);
  }
  return out;
}

}  // namespace bmrnn
