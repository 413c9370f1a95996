// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>

#include "bmrnn/data_io.hpp"
#include "bmrnn/error.hpp"

using namespace bmrnn;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("bmrnn_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

std::vector<Story> small_stories(std::size_t count) {
  SeededRng rng(11);
  std::vector<Story> out;
  for (std::size_t k = 0; k < count; ++k) {
    Story s;
    s.photos.story_id = s.sentences.story_id = "s" + std::to_string(k);
    s.split = k % 3 == 0 ? Split::train : k % 3 == 1 ? Split::val : Split::test;
    const std::size_t n = 1 + k % 4;
    std::vector<Vector> fc;
    for (std::size_t t = 0; t < n; ++t) {
      s.photos.x.push_back(Vector{rng.uniform(), rng.uniform(), rng.uniform()});
      s.sentences.v.push_back(Vector{rng.uniform(), rng.uniform(), rng.uniform()});
      fc.push_back(Vector{rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()});
    }
    s.photos.raw_fc = fc;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST_CASE("tensor file round-trip is bit-identical at float32") {
  SeededRng rng(1);
  Tensor t;
  t.dims = {7, 5};
  for (int i = 0; i < 35; ++i) t.data.push_back(static_cast<float>(rng.normal()));
  t.data[3] = -0.0f;
  t.data[4] = 1e-40f;  // subnormal
  const auto dir = scratch("tensor");
  write_tensor(dir / "t.bmt", t);
  const auto bytes = slurp(dir / "t.bmt");
  CHECK(bytes.substr(0, 4) == "BMT1");
  CHECK(bytes.size() == 4 + 4 + 8 + 35 * 4);
  const Tensor back = read_tensor(dir / "t.bmt");
  CHECK(back.dims == t.dims);
  CHECK(std::memcmp(back.data.data(), t.data.data(), 35 * sizeof(float)) == 0);

  // Little-endian layout of the first payload value.
  std::uint32_t bits;
  std::memcpy(&bits, &t.data[0], 4);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + 16;
  CHECK(p[0] == (bits & 0xff));
  CHECK(p[3] == (bits >> 24));
}

TEST_CASE("tensor decode errors") {
  Tensor t;
  t.dims = {2, 2};
  t.data = {1, 2, 3, 4};
  const auto good = encode_tensor(t);
  CHECK(message_of([&] { decode_tensor("XMT1" + good.substr(4), "f.bmt"); }).find("bad magic") != std::string::npos);
  CHECK(message_of([&] { decode_tensor(good.substr(0, good.size() - 3), "f.bmt"); }).find("truncated") !=
        std::string::npos);
  CHECK_THROWS_AS(decode_tensor(good + "x", "f.bmt"), DataError);
  CHECK(message_of([&] { decode_tensor("BM", "f.bmt"); }).find("f.bmt") != std::string::npos);
}

TEST_CASE("manifest fixture with 5 stories") {
  const auto dir = scratch("fixture");
  const auto stories = small_stories(5);
  const auto manifest = write_corpus(dir, stories);
  const Corpus c = load_manifest(manifest);
  REQUIRE(c.stories.size() == 5);
  for (std::size_t k = 0; k < 5; ++k) {
    CHECK(c.manifest[k].length == 1 + k % 4);
    CHECK(c.stories[k].photos.size() == c.manifest[k].length);
    CHECK(c.stories[k].split == stories[k].split);
    CHECK(c.stories[k].photos.raw_fc.has_value());
    for (std::size_t t = 0; t < c.stories[k].photos.size(); ++t) {
      for (std::size_t i = 0; i < 3; ++i) {
        CHECK(c.stories[k].photos.x[t][i] == static_cast<double>(static_cast<float>(stories[k].photos.x[t][i])));
      }
    }
  }
  CHECK(c.split(Split::val).size() == 2);
  CHECK(c.find("s3") == &c.stories[3]);
  CHECK(c.find("nope") == nullptr);
}

TEST_CASE("manifest errors name the file and the story") {
  const auto dir = scratch("missing");
  spit(dir / "manifest.jsonl",
       R"({"story_id":"alpha","N":2,"split":"train","embedding_file":"gone.bmt","embedding_offset":0,)"
       R"("sentence_file":"gone.bmt","sentence_offset":0})" "\n");
  auto msg = message_of([&] { load_manifest(dir / "manifest.jsonl"); });
  CHECK(msg.find("gone.bmt") != std::string::npos);
  CHECK(msg.find("alpha") != std::string::npos);

  // Declared N larger than the tensor.
  const auto dir2 = scratch("short");
  write_corpus(dir2, small_stories(2));
  std::string text = slurp(dir2 / "manifest.jsonl");
  const auto pos = text.find("\"N\":1");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 5, "\"N\":9");
  spit(dir2 / "manifest.jsonl", text);
  msg = message_of([&] { load_manifest(dir2 / "manifest.jsonl"); });
  CHECK(msg.find("s0") != std::string::npos);
  CHECK(msg.find(".bmt") != std::string::npos);

  // Corrupted magic.
  const auto dir3 = scratch("magic");
  write_corpus(dir3, small_stories(2));
  std::string bytes = slurp(dir3 / "embeddings.bmt");
  bytes[0] = 'Q';
  spit(dir3 / "embeddings.bmt", bytes);
  msg = message_of([&] { load_manifest(dir3 / "manifest.jsonl"); });
  CHECK(msg.find("bad magic") != std::string::npos);
  CHECK(msg.find("embeddings.bmt") != std::string::npos);

  CHECK_THROWS_AS(load_manifest(dir / "absent.jsonl"), DataError);
  CHECK_THROWS_AS(parse_split("holdout"), DataError);
}

TEST_CASE("skip artifacts round-trip and validate") {
  StorySkips s;
  s.story_id = "x";
  s.clusters = ClusterAssignment::from_clusters(5, {{0, 3}, {1, 4}, {2}});
  s.skips = build_skip_matrix(s.clusters);
  const auto line = skips_to_json_line(s);
  CHECK(line == R"({"clusters":[[0,3],[1,4],[2]],"converged":true,"skips":[[0,3],[1,4]],"story_id":"x"})");
  const auto back = skips_from_json_line(line, 5);
  CHECK(back.skips == s.skips);
  CHECK(back.clusters.clusters == s.clusters.clusters);
  CHECK_FALSE(back.planted);

  CHECK_THROWS_AS(skips_from_json_line(R"({"story_id":"x","clusters":[[0,1]],"skips":[[1,0]]})", 2), DataError);
  CHECK_THROWS_AS(skips_from_json_line(R"({"story_id":"x","clusters":[[0,1]],"skips":[[0,7]]})", 2), DataError);
  CHECK_THROWS_AS(skips_from_json_line("{not json", 2), DataError);
}

TEST_CASE("synthetic generator basics") {
  SynthConfig cfg;
  cfg.num_train = 20;
  cfg.num_val = cfg.num_test = 5;
  const auto a = generate_synthetic(cfg);
  const auto b = generate_synthetic(cfg);
  REQUIRE(a.stories.size() == 30);
  for (std::size_t k = 0; k < a.stories.size(); ++k) {
    CHECK(a.stories[k].photos.x == b.stories[k].photos.x);
    CHECK(a.stories[k].sentences.v == b.stories[k].sentences.v);
    CHECK(a.planted[k].skips == b.planted[k].skips);
  }
  CHECK(a.stories[19].split == Split::train);
  CHECK(a.stories[20].split == Split::val);
  CHECK(a.stories[29].split == Split::test);

  for (std::size_t k = 0; k < a.stories.size(); ++k) {
    const auto& scenes = a.scenes[k];
    CHECK(std::set<std::size_t>(scenes.begin(), scenes.end()).size() == cfg.num_scenes);
    CHECK(a.stories[k].photos.x.front().dim() == cfg.embed_dim);
    CHECK(a.stories[k].photos.raw_fc->front().dim() == cfg.feature_dim);
    CHECK(a.stories[k].sentences.v.front().dim() == cfg.embed_dim);
    // At least one pair skips over an intervening photo.
    bool gap = false;
    for (const auto& [p, t] : a.planted[k].skips.pairs()) {
      gap |= t > p + 1;
      CHECK(scenes[p] == scenes[t]);
    }
    CHECK(gap);
    CHECK(a.planted[k].planted);
  }

  cfg.seed = 2;
  CHECK(generate_synthetic(cfg).stories[0].photos.x != a.stories[0].photos.x);
}

TEST_CASE("synthetic generator: one scene is one chain") {
  SynthConfig cfg;
  cfg.num_train = 3;
  cfg.num_val = cfg.num_test = 0;
  cfg.num_scenes = 1;
  for (const auto& p : generate_synthetic(cfg).planted) {
    CHECK(p.skips.pairs() == std::vector<SkipMatrix::Pair>{{0, 1}, {1, 2}, {2, 3}, {3, 4}});
  }
}

TEST_CASE("synthetic generator: config errors") {
  SynthConfig cfg;
  cfg.num_scenes = 6;
  CHECK_THROWS(generate_synthetic(cfg));
  cfg = SynthConfig{};
  cfg.noise_sigma = 9.0;
  CHECK_THROWS(generate_synthetic(cfg));
  cfg = SynthConfig{};
  cfg.feature_dim = 2;
  cfg.scene_bank = 8;  // 8 points pairwise a radius apart on a circle: impossible
  const auto msg = message_of([&] { generate_synthetic(cfg); });
  CHECK(msg.find("larger feature dim") != std::string::npos);
}

TEST_CASE("synthetic corpus skip structure is recoverable") {
  // Default corpus, training split: detected pairs vs planted pairs.
  const auto corpus = generate_synthetic(SynthConfig{});
  std::size_t hit = 0, detected = 0, planted = 0;
  for (std::size_t k = 0; k < 200; ++k) {
    const auto d = detect_skips(*corpus.stories[k].photos.raw_fc, APConfig{}, false);
    const auto truth = corpus.planted[k].skips.pairs();
    const std::set<SkipMatrix::Pair> want(truth.begin(), truth.end());
    for (const auto& p : d.skips.pairs()) hit += want.count(p);
    detected += d.skips.pairs().size();
    planted += truth.size();
  }
  const double precision = double(hit) / double(detected);
  const double recall = double(hit) / double(planted);
  MESSAGE("precision " << precision << " recall " << recall);
  CHECK(precision >= 0.9);
  CHECK(recall >= 0.9);
}
