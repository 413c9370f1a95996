// SPDX-License-Identifier: Apache-2.0
//
// Corpus ingestion and on-disk formats.
//
//  * Tensor files ("BMT1"): magic, u32 rank, u32 dims, little-endian float32
//    row-major payload. Values are widened to double on load.
//  * Manifest: JSON lines, one story per line, pointing at row ranges in
//    the tensor files (paths relative to the manifest's directory).
//  * Skip artifacts: JSON lines {"story_id", "clusters", "skips",
//    "converged"} with 0-based indices; planted ground truth adds
//    "planted": true.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bmrnn/network.hpp"
#include "bmrnn/objective.hpp"
#include "bmrnn/skip_detect.hpp"

namespace bmrnn {

struct Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  std::size_t rows() const { return dims.empty() ? 0 : dims[0]; }
  std::size_t row_width() const;
  /// Rows [first, first + count) of a rank-2 tensor, widened to double.
  std::vector<Vector> row_vectors(std::size_t first, std::size_t count) const;
  /// Rank-2 tensor from equal-width rows (narrowed to float32).
  static Tensor from_rows(const std::vector<Vector>& rows);
};

std::string encode_tensor(const Tensor& t);
Tensor decode_tensor(const std::string& bytes, const std::string& origin);
void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

enum class Split { train, val, test };
std::string to_string(Split s);
Split parse_split(const std::string& s);

struct Story {
  StoryStream photos;
  SentenceSequence sentences;
  Split split = Split::train;
};

struct ManifestEntry {
  std::string story_id;
  std::size_t length = 0;
  Split split = Split::train;
  std::optional<std::string> feature_file;
  std::size_t feature_offset = 0;
  std::string embedding_file;
  std::size_t embedding_offset = 0;
  std::string sentence_file;
  std::size_t sentence_offset = 0;
};

struct Corpus {
  std::vector<ManifestEntry> manifest;
  std::vector<Story> stories;

  std::vector<const Story*> split(Split s) const;
  const Story* find(const std::string& story_id) const;
};

/// Reads the manifest and every referenced tensor. Errors name the file and
/// the story id.
Corpus load_manifest(const std::filesystem::path& manifest_path);

/// Writes features.bmt / embeddings.bmt / sentences.bmt and manifest.jsonl
/// into `dir`; returns the manifest path.
std::filesystem::path write_corpus(const std::filesystem::path& dir,
                                   const std::vector<Story>& stories);

struct StorySkips {
  std::string story_id;
  ClusterAssignment clusters;
  SkipMatrix skips;
  bool planted = false;
};

std::string skips_to_json_line(const StorySkips& s);
StorySkips skips_from_json_line(const std::string& line, std::size_t story_length);
void write_skips(const std::filesystem::path& path, const std::vector<StorySkips>& all);
/// Looks up each story's length in `corpus` to validate indices.
std::vector<StorySkips> read_skips(const std::filesystem::path& path, const Corpus& corpus);

struct SynthConfig {
  std::size_t num_train = 200;
  std::size_t num_val = 50;
  std::size_t num_test = 50;
  std::size_t story_len = 5;
  std::size_t num_scenes = 2;
  std::size_t feature_dim = 256;  // photo features used for skip detection
  std::size_t embed_dim = 16;    // photo embeddings and sentence embeddings
  double scene_separation = 8.0;
  double noise_sigma = 1.0;
  double sentence_noise = 0.1;
  /// Size of the corpus-wide scene bank each story draws its scenes from;
  /// 0 draws fresh centers for every story.
  std::size_t scene_bank = 4;
  std::uint64_t seed = 1;

  void validate() const;
};

struct SyntheticCorpus {
  std::vector<Story> stories;
  std::vector<StorySkips> planted;
  /// Scene label per timestep, per story.
  std::vector<std::vector<std::size_t>> scenes;
};

/// Photo streams with interleaved scene threads. Each story draws distinct
/// scene centers (from the scene bank, or fresh ones when the bank is 0); a
/// photo feature is its scene's center plus Gaussian noise,
/// its embedding is a fixed corpus-wide projection of the feature, and the
/// paired sentence embedding is a fixed linear image of (clean scene center,
/// position code) plus a little noise. Pooling same-scene photos therefore
/// recovers the sentence far better than any single photo does.
SyntheticCorpus generate_synthetic(const SynthConfig& cfg);

}  // namespace bmrnn
