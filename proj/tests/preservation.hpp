// SPDX-License-Identifier: Apache-2.0
//
// Four-step scalar sGRU chain with skip (0, 3) and an adversarial input at
// step 1 that closes the reset gate and opens the update gate, so the plain
// recurrence forgets x_0.
#pragma once

#include <cmath>
#include <vector>

#include "bmrnn/cells.hpp"

namespace bmrnn::testing {

struct PreservationCase {
  SGRUParams params;
  std::vector<double> x;
};

inline PreservationCase make_preservation_case(std::uint64_t seed) {
  SeededRng rng(seed);
  auto mag = [&] { return rng.uniform(0.5, 1.5); };
  auto any = [&] { return rng.uniform(-1.5, 1.5); };
  PreservationCase c{SGRUParams::zeros(1, 1), {}};
  auto& b = c.params.base;
  b.update_in(0, 0) = -mag();  // large negative x_1 drives z_1 -> 1
  b.reset_in(0, 0) = mag();    // ... and r_1 -> 0
  b.update_rec(0, 0) = any();
  b.reset_rec(0, 0) = any();
  b.cand_in(0, 0) = any();
  b.cand_rec(0, 0) = any();
  b.update_bias[0] = any();
  b.reset_bias[0] = any();
  b.cand_bias[0] = any();
  c.params.skip_in(0, 0) = any();
  c.params.skip_rec(0, 0) = any();
  c.params.skip_proj(0, 0) = any();
  c.params.skip_bias[0] = any();
  c.x = {rng.uniform(-1, 1), -rng.uniform(6, 10), rng.uniform(-1, 1), rng.uniform(-1, 1)};
  return c;
}

/// h_3 of the chain, with or without the skip from step 0 into step 3.
inline double final_hidden(const SGRUParams& p, const std::vector<double>& x, bool skip) {
  Vector h(1);
  Vector h0;
  for (std::size_t t = 0; t < x.size(); ++t) {
    const bool use = skip && t == 3;
    h = sgru_forward(p, Vector{x[t]}, h, use ? &h0 : nullptr).hidden;
    if (t == 0) h0 = h;
  }
  return h[0];
}

/// |dh_3/dx_0| by central differences.
inline double sensitivity(const PreservationCase& c, bool skip, double eps = 1e-5) {
  auto x = c.x;
  x[0] = c.x[0] + eps;
  const double up = final_hidden(c.params, x, skip);
  x[0] = c.x[0] - eps;
  const double down = final_hidden(c.params, x, skip);
  return std::abs(up - down) / (2.0 * eps);
}

}  // namespace bmrnn::testing
