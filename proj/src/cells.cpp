// SPDX-License-Identifier: Apache-2.0
#include "bmrnn/cells.hpp"

#include <cmath>
#include <string>

#include "bmrnn/error.hpp"

namespace bmrnn {

namespace {

void check_matrix(const Matrix& m, std::size_t rows, std::size_t cols, const char* name) {
  if (m.rows() != rows || m.cols() != cols) {
    throw DimensionError(std::string(name) + ": expected " + std::to_string(rows) + "x" +
                         std::to_string(cols) + ", got " + m.shape_string());
  }
}

void check_vector(const Vector& v, std::size_t dim, const char* name) {
  if (v.dim() != dim) {
    throw DimensionError(std::string(name) + ": expected dim " + std::to_string(dim) +
                         ", got " + std::to_string(v.dim()));
  }
}

// a + b + c in a fixed evaluation order.
Vector affine(const Matrix& w_in, const Vector& x, const Matrix& w_rec, const Vector& h,
              const Vector& bias) {
  Vector out = matvec(w_in, x);
  out += matvec(w_rec, h);
  out += bias;
  return out;
}

void check_step_inputs(const GRUParams& p, const Vector& x, const Vector& h_prev) {
  check_vector(x, p.input_dim(), "x");
  check_vector(h_prev, p.hidden_dim(), "h_prev");
}

// Shared by both cells so that a skip-free sGRU step follows exactly the
// same arithmetic as the plain GRU step.
StepTrace step(const GRUParams& p, const Vector& x, const Vector& h_prev,
               const Matrix* skip_in, const Matrix* skip_rec, const Matrix* skip_proj,
               const Vector* skip_bias, const Vector* h_skip) {
  StepTrace t;
  t.update = sigmoid(affine(p.update_in, x, p.update_rec, h_prev, p.update_bias));
  t.reset = sigmoid(affine(p.reset_in, x, p.reset_rec, h_prev, p.reset_bias));

  Vector pre = affine(p.cand_in, x, p.cand_rec, hadamard(t.reset, h_prev), p.cand_bias);
  if (h_skip != nullptr) {
    t.skip = sigmoid(affine(*skip_in, x, *skip_rec, *h_skip, *skip_bias));
    pre += matvec(*skip_proj, hadamard(*t.skip, *h_skip));
  }
  t.candidate = tanh(pre);

  const std::size_t n = h_prev.dim();
  t.hidden = Vector(n);
  for (std::size_t i = 0; i < n; ++i) {
    t.hidden[i] = t.update[i] * t.candidate[i] + (1.0 - t.update[i]) * h_prev[i];
  }
  return t;
}

}  // namespace

GRUParams GRUParams::zeros(std::size_t input_dim, std::size_t hidden_dim) {
  GRUParams p;
  p.update_in = p.reset_in = p.cand_in = Matrix(hidden_dim, input_dim);
  p.update_rec = p.reset_rec = p.cand_rec = Matrix(hidden_dim, hidden_dim);
  p.update_bias = p.reset_bias = p.cand_bias = Vector(hidden_dim);
  return p;
}

GRUParams GRUParams::random(std::size_t input_dim, std::size_t hidden_dim, SeededRng& rng) {
  GRUParams p = zeros(input_dim, hidden_dim);
  for_each_tensor(p, [&](std::string_view, auto& tensor) {
    if constexpr (std::is_same_v<std::decay_t<decltype(tensor)>, Matrix>) {
      tensor = init_params(tensor.rows(), tensor.cols(), rng);
    }
  });
  return p;
}

void GRUParams::validate() const {
  const std::size_t in = input_dim();
  const std::size_t hid = hidden_dim();
  check_matrix(update_in, hid, in, "W_zx");
  check_matrix(reset_in, hid, in, "W_rx");
  check_matrix(cand_in, hid, in, "W_hx");
  check_matrix(update_rec, hid, hid, "W_zh");
  check_matrix(reset_rec, hid, hid, "W_rh");
  check_matrix(cand_rec, hid, hid, "W_hh");
  check_vector(update_bias, hid, "b_z");
  check_vector(reset_bias, hid, "b_r");
  check_vector(cand_bias, hid, "b_h");
}

SGRUParams SGRUParams::zeros(std::size_t input_dim, std::size_t hidden_dim) {
  SGRUParams p;
  p.base = GRUParams::zeros(input_dim, hidden_dim);
  p.skip_in = Matrix(hidden_dim, input_dim);
  p.skip_rec = p.skip_proj = Matrix(hidden_dim, hidden_dim);
  p.skip_bias = Vector(hidden_dim);
  return p;
}

SGRUParams SGRUParams::random(std::size_t input_dim, std::size_t hidden_dim, SeededRng& rng) {
  SGRUParams p = zeros(input_dim, hidden_dim);
  for_each_tensor(p, [&](std::string_view, auto& tensor) {
    if constexpr (std::is_same_v<std::decay_t<decltype(tensor)>, Matrix>) {
      tensor = init_params(tensor.rows(), tensor.cols(), rng);
    }
  });
  return p;
}

void SGRUParams::validate() const {
  base.validate();
  const std::size_t in = input_dim();
  const std::size_t hid = hidden_dim();
  check_matrix(skip_in, hid, in, "W_sx");
  check_matrix(skip_rec, hid, hid, "W_sh");
  check_matrix(skip_proj, hid, hid, "W_hp");
  check_vector(skip_bias, hid, "b_s");
}

StepTrace gru_forward(const GRUParams& params, const Vector& x, const Vector& h_prev) {
  check_step_inputs(params, x, h_prev);
  return step(params, x, h_prev, nullptr, nullptr, nullptr, nullptr, nullptr);
}

StepTrace sgru_forward(const SGRUParams& params, const Vector& x, const Vector& h_prev,
                       const Vector* h_skip) {
  check_step_inputs(params.base, x, h_prev);
  if (h_skip != nullptr) check_vector(*h_skip, params.hidden_dim(), "h_skip");
  return step(params.base, x, h_prev, &params.skip_in, &params.skip_rec, &params.skip_proj,
              &params.skip_bias, h_skip);
}

namespace {

StepInputGrads backward_impl(const GRUParams& p, const Vector& x, const Vector& h_prev,
                             const StepTrace& t, const Vector& dh, GRUParams& g,
                             const SGRUParams* sp, const Vector* h_skip, SGRUParams* sg) {
  const std::size_t n = h_prev.dim();
  check_vector(dh, n, "dh");

  StepInputGrads out{Vector(x.dim()), Vector(n), Vector(n)};

  // h = z*h~ + (1-z)*h_prev
  Vector d_pre_cand(n), d_pre_update(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double z = t.update[i];
    const double c = t.candidate[i];
    d_pre_cand[i] = dh[i] * z * (1.0 - c * c);
    d_pre_update[i] = dh[i] * (c - h_prev[i]) * z * (1.0 - z);
    out.dh_prev[i] = dh[i] * (1.0 - z);
  }

  // Candidate pre-activation.
  const Vector gated_prev = hadamard(t.reset, h_prev);
  add_outer(g.cand_in, d_pre_cand, x);
  add_outer(g.cand_rec, d_pre_cand, gated_prev);
  g.cand_bias += d_pre_cand;
  out.dx += matvec_transposed(p.cand_in, d_pre_cand);
  const Vector d_gated_prev = matvec_transposed(p.cand_rec, d_pre_cand);

  Vector d_pre_reset(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = t.reset[i];
    d_pre_reset[i] = d_gated_prev[i] * h_prev[i] * r * (1.0 - r);
    out.dh_prev[i] += d_gated_prev[i] * r;
  }

  if (t.had_skip()) {
    const Vector& s = *t.skip;
    const Vector& hs = *h_skip;
    add_outer(sg->skip_proj, d_pre_cand, hadamard(s, hs));
    const Vector d_gated_skip = matvec_transposed(sp->skip_proj, d_pre_cand);
    Vector d_pre_skip(n);
    for (std::size_t i = 0; i < n; ++i) {
      d_pre_skip[i] = d_gated_skip[i] * hs[i] * s[i] * (1.0 - s[i]);
      out.dh_skip[i] = d_gated_skip[i] * s[i];
    }
    add_outer(sg->skip_in, d_pre_skip, x);
    add_outer(sg->skip_rec, d_pre_skip, hs);
    sg->skip_bias += d_pre_skip;
    out.dx += matvec_transposed(sp->skip_in, d_pre_skip);
    out.dh_skip += matvec_transposed(sp->skip_rec, d_pre_skip);
  }

  add_outer(g.update_in, d_pre_update, x);
  add_outer(g.update_rec, d_pre_update, h_prev);
  g.update_bias += d_pre_update;
  out.dx += matvec_transposed(p.update_in, d_pre_update);
  out.dh_prev += matvec_transposed(p.update_rec, d_pre_update);

  add_outer(g.reset_in, d_pre_reset, x);
  add_outer(g.reset_rec, d_pre_reset, h_prev);
  g.reset_bias += d_pre_reset;
  out.dx += matvec_transposed(p.reset_in, d_pre_reset);
  out.dh_prev += matvec_transposed(p.reset_rec, d_pre_reset);

  return out;
}

}  // namespace

StepInputGrads gru_backward_accumulate(const GRUParams& params, const Vector& x,
                                       const Vector& h_prev, const StepTrace& trace,
                                       const Vector& dh, GRUParams& grads) {
  check_step_inputs(params, x, h_prev);
  if (trace.had_skip()) throw DimensionError("gru_backward: trace carries a skip gate");
  return backward_impl(params, x, h_prev, trace, dh, grads, nullptr, nullptr, nullptr);
}

StepInputGrads sgru_backward_accumulate(const SGRUParams& params, const Vector& x,
                                        const Vector& h_prev, const Vector* h_skip,
                                        const StepTrace& trace, const Vector& dh,
                                        SGRUParams& grads) {
  check_step_inputs(params.base, x, h_prev);
  if (trace.had_skip() != (h_skip != nullptr)) {
    throw DimensionError("sgru_backward: h_skip presence disagrees with the trace");
  }
  if (h_skip != nullptr) check_vector(*h_skip, params.hidden_dim(), "h_skip");
  return backward_impl(params.base, x, h_prev, trace, dh, grads.base, &params, h_skip, &grads);
}

GRUStepGradients gru_backward(const GRUParams& params, const Vector& x, const Vector& h_prev,
                              const StepTrace& trace, const Vector& dh) {
  GRUStepGradients out;
  out.dparams = GRUParams::zeros(params.input_dim(), params.hidden_dim());
  auto in = gru_backward_accumulate(params, x, h_prev, trace, dh, out.dparams);
  out.dx = std::move(in.dx);
  out.dh_prev = std::move(in.dh_prev);
  return out;
}

SGRUStepGradients sgru_backward(const SGRUParams& params, const Vector& x,
                                const Vector& h_prev, const std::optional<Vector>& h_skip,
                                const StepTrace& trace, const Vector& dh) {
  SGRUStepGradients out;
  out.dparams = SGRUParams::zeros(params.input_dim(), params.hidden_dim());
  auto in = sgru_backward_accumulate(params, x, h_prev, h_skip ? &*h_skip : nullptr, trace, dh,
                                     out.dparams);
  out.dx = std::move(in.dx);
  out.dh_prev = std::move(in.dh_prev);
  out.dh_skip = std::move(in.dh_skip);
  return out;
}

}  // namespace bmrnn
