// SPDX-License-Identifier: Apache-2.0
//
// One-timestep GRU and skip-GRU cells with hand-written gradients.
//
// Update convention (kept as in the original model description, which
// flips the usual GRU roles):
//
//   z  = sigmoid(W_zx x + W_zh h_prev + b_z)
//   r  = sigmoid(W_rx x + W_rh h_prev + b_r)
//   s  = sigmoid(W_sx x + W_sh h_skip + b_s)                    (skip only)
//   h~ = tanh(W_hx x + W_hh (r * h_prev) [+ W_hp (s * h_skip)] + b_h)
//   h  = z * h~ + (1 - z) * h_prev
//
// A step without a skip ancestor never evaluates s, and is bit-identical to
// the plain GRU step on the embedded base parameters.
#pragma once

#include <optional>
#include <string_view>
#include <type_traits>

#include "bmrnn/numeric.hpp"

namespace bmrnn {

struct GRUParams {
  Matrix update_in, update_rec;  // W_zx, W_zh
  Matrix reset_in, reset_rec;    // W_rx, W_rh
  Matrix cand_in, cand_rec;      // W_hx, W_hh
  Vector update_bias, reset_bias, cand_bias;

  static GRUParams zeros(std::size_t input_dim, std::size_t hidden_dim);
  static GRUParams random(std::size_t input_dim, std::size_t hidden_dim, SeededRng& rng);

  std::size_t input_dim() const noexcept { return update_in.cols(); }
  std::size_t hidden_dim() const noexcept { return update_in.rows(); }
  /// Throws DimensionError when the tensors disagree on input/hidden dims.
  void validate() const;

  bool operator==(const GRUParams&) const = default;
};

struct SGRUParams {
  GRUParams base;
  Matrix skip_in;   // W_sx
  Matrix skip_rec;  // W_sh
  Matrix skip_proj; // W_hp, shared across all skip pairs
  Vector skip_bias; // b_s

  static SGRUParams zeros(std::size_t input_dim, std::size_t hidden_dim);
  static SGRUParams random(std::size_t input_dim, std::size_t hidden_dim, SeededRng& rng);

  std::size_t input_dim() const noexcept { return base.input_dim(); }
  std::size_t hidden_dim() const noexcept { return base.hidden_dim(); }
  void validate() const;

  bool operator==(const SGRUParams&) const = default;
};

/// Visits every tensor with its serialized name. `f(name, Matrix&|Vector&)`.
template <class P, class F>
void for_each_tensor(P& p, F&& f)
  requires std::is_same_v<std::remove_const_t<P>, GRUParams>
{
  f(std::string_view("W_zx"), p.update_in);
  f(std::string_view("W_zh"), p.update_rec);
  f(std::string_view("W_rx"), p.reset_in);
  f(std::string_view("W_rh"), p.reset_rec);
  f(std::string_view("W_hx"), p.cand_in);
  f(std::string_view("W_hh"), p.cand_rec);
  f(std::string_view("b_z"), p.update_bias);
  f(std::string_view("b_r"), p.reset_bias);
  f(std::string_view("b_h"), p.cand_bias);
}

template <class P, class F>
void for_each_tensor(P& p, F&& f)
  requires std::is_same_v<std::remove_const_t<P>, SGRUParams>
{
  for_each_tensor(p.base, f);
  f(std::string_view("W_sx"), p.skip_in);
  f(std::string_view("W_sh"), p.skip_rec);
  f(std::string_view("W_hp"), p.skip_proj);
  f(std::string_view("b_s"), p.skip_bias);
}

struct StepTrace {
  Vector update;      // z_t
  Vector reset;       // r_t
  std::optional<Vector> skip;  // s_t, present iff had_skip
  Vector candidate;   // h~
  Vector hidden;      // h_t

  bool had_skip() const noexcept { return skip.has_value(); }
};

StepTrace gru_forward(const GRUParams& params, const Vector& x, const Vector& h_prev);

StepTrace sgru_forward(const SGRUParams& params, const Vector& x, const Vector& h_prev,
                       const Vector* h_skip);
inline StepTrace sgru_forward(const SGRUParams& params, const Vector& x, const Vector& h_prev,
                              const std::optional<Vector>& h_skip) {
  return sgru_forward(params, x, h_prev, h_skip ? &*h_skip : nullptr);
}

struct StepInputGrads {
  Vector dx;
  Vector dh_prev;
  Vector dh_skip;  // zero when the step had no skip
};

/// Adds parameter gradients into `grads` and returns input gradients.
StepInputGrads gru_backward_accumulate(const GRUParams& params, const Vector& x,
                                       const Vector& h_prev, const StepTrace& trace,
                                       const Vector& dh, GRUParams& grads);

StepInputGrads sgru_backward_accumulate(const SGRUParams& params, const Vector& x,
                                        const Vector& h_prev, const Vector* h_skip,
                                        const StepTrace& trace, const Vector& dh,
                                        SGRUParams& grads);

struct GRUStepGradients {
  GRUParams dparams;
  Vector dx;
  Vector dh_prev;
};

struct SGRUStepGradients {
  SGRUParams dparams;
  Vector dx;
  Vector dh_prev;
  Vector dh_skip;
};

GRUStepGradients gru_backward(const GRUParams& params, const Vector& x, const Vector& h_prev,
                              const StepTrace& trace, const Vector& dh);

SGRUStepGradients sgru_backward(const SGRUParams& params, const Vector& x,
                                const Vector& h_prev, const std::optional<Vector>& h_skip,
                                const StepTrace& trace, const Vector& dh);

}  // namespace bmrnn
