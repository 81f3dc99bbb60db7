#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "tal/error.hpp"
#include "tal/tensor.hpp"

namespace tal {

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h at the listed
/// coordinates. Used as the independent oracle for every reverse-mode check.
inline std::vector<double> finite_difference_gradient(const std::function<double(const Tensor&)>& f,
                                                      const Tensor& x, double h,
                                                      const std::vector<std::size_t>& coords) {
  if (!(h > 0.0)) throw ConfigError("finite difference step must be positive");
  std::vector<double> partials;
  partials.reserve(coords.size());
  Tensor probe = x;
  for (std::size_t i : coords) {
    if (i >= x.size()) throw ConfigError("finite difference coordinate " + std::to_string(i) + " out of range");
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("non-finite function value at coordinate " + std::to_string(i));
    }
    partials.push_back((fp - fm) / (2.0 * h));
  }
  return partials;
}

}  // namespace tal
