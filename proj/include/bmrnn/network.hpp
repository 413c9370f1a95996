// SPDX-License-Identifier: Apache-2.0
//
// Bidirectional multi-thread RNN: a forward sGRU sweep with skip pairs, a
// backward sGRU sweep over the reversed story with transposed skips, and a
// linear merge of the two hidden sequences. Both sweeps have their own
// parameters; they share only the inputs.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bmrnn/cells.hpp"
#include "bmrnn/skip_detect.hpp"

namespace bmrnn {

struct StoryStream {
  std::string story_id;
  std::vector<Vector> x;                      // per-photo embeddings
  std::optional<std::vector<Vector>> raw_fc;  // per-photo features for skip detection

  std::size_t size() const noexcept { return x.size(); }
};

struct BMRNNParams {
  SGRUParams fwd;
  SGRUParams bwd;
  Matrix merge_f;  // output x hidden
  Matrix merge_b;  // output x hidden
  Vector b_merge;  // output

  static BMRNNParams zeros(std::size_t input_dim, std::size_t hidden_dim, std::size_t output_dim);
  /// Draws fwd, bwd and the merge matrices from one generator in that order;
  /// b_merge starts at zero.
  static BMRNNParams random(std::size_t input_dim, std::size_t hidden_dim,
                            std::size_t output_dim, SeededRng& rng);

  std::size_t input_dim() const noexcept { return fwd.input_dim(); }
  std::size_t hidden_dim() const noexcept { return fwd.hidden_dim(); }
  std::size_t output_dim() const noexcept { return merge_f.rows(); }
  void validate() const;

  bool operator==(const BMRNNParams&) const = default;
};

/// Visits every tensor under its serialized name ("fwd.W_zx", ..., "b_merge").
template <class P, class F>
void for_each_tensor(P& p, F&& f)
  requires std::is_same_v<std::remove_const_t<P>, BMRNNParams>
{
  for_each_tensor(p.fwd, [&](std::string_view name, auto& t) { f("fwd." + std::string(name), t); });
  for_each_tensor(p.bwd, [&](std::string_view name, auto& t) { f("bwd." + std::string(name), t); });
  f(std::string("merge_f"), p.merge_f);
  f(std::string("merge_b"), p.merge_b);
  f(std::string("b_merge"), p.b_merge);
}

struct ForwardTrace {
  std::vector<StepTrace> fwd;
  std::vector<StepTrace> bwd;
  std::vector<Vector> merged;  // H
};

ForwardTrace bmrnn_forward(const BMRNNParams& params, const std::vector<Vector>& x,
                           const SkipMatrix& skips);
inline ForwardTrace bmrnn_forward(const BMRNNParams& params, const StoryStream& story,
                                  const SkipMatrix& skips) {
  return bmrnn_forward(params, story.x, skips);
}

struct NetworkGradients {
  BMRNNParams dparams;
  std::vector<Vector> dx;
};

/// Full backpropagation through time and across skip edges, for upstream
/// gradients dH on the merged outputs.
NetworkGradients bmrnn_backward(const BMRNNParams& params, const std::vector<Vector>& x,
                                const SkipMatrix& skips, const ForwardTrace& trace,
                                const std::vector<Vector>& dH);

/// Same as bmrnn_backward but adds parameter gradients into `grads`.
std::vector<Vector> bmrnn_backward_accumulate(const BMRNNParams& params,
                                              const std::vector<Vector>& x,
                                              const SkipMatrix& skips,
                                              const ForwardTrace& trace,
                                              const std::vector<Vector>& dH,
                                              BMRNNParams& grads);

// Model file: "BMRN", u16 version, u32 tensor count, then per tensor a
// u32-length-prefixed UTF-8 name, u32 rank, u32 dims, and little-endian
// float32 row-major data.
inline constexpr std::uint16_t kModelFormatVersion = 1;

std::string serialize_model(const BMRNNParams& params);
BMRNNParams deserialize_model(const std::string& bytes, const std::string& origin = "<memory>");
void save_model(const std::filesystem::path& path, const BMRNNParams& params);
BMRNNParams load_model(const std::filesystem::path& path);

/// Rounds every parameter to float32, i.e. the values a saved model holds.
BMRNNParams round_to_float32(const BMRNNParams& params);

}  // namespace bmrnn
