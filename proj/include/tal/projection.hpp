#pragma once

#include <algorithm>
#include <cstddef>

#include "tal/error.hpp"
#include "tal/tensor.hpp"

namespace tal {

/// Projects a perturbation onto the L-infinity ball of radius eps intersected
/// with the valid pixel box: each coordinate is clamped to
/// [max(-eps, -x), min(eps, 1 - x)]. Written as a single clamp so that
/// x + delta lands in [0, 1] exactly in floating point and the map is
/// idempotent bit for bit.
inline Tensor project_linf(const Tensor& x, const Tensor& delta, double eps) {
  require_same_shape(x, delta, "project_linf");
  Tensor out = delta;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double lo = std::max(-eps, -x[i]);
    const double hi = std::min(eps, 1.0 - x[i]);
    out[i] = std::clamp(out[i], lo, hi);
  }
  return out;
}

/// True when delta obeys the threat model for x.
inline bool within_threat_model(const Tensor& x, const Tensor& delta, double eps, double slack = 1e-12) {
  if (x.shape() != delta.shape()) return false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::abs(delta[i]) > eps + slack) return false;
    const double v = x[i] + delta[i];
    if (v < 0.0 || v > 1.0) return false;
  }
  return true;
}

}  // namespace tal
