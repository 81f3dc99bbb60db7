#pragma once

#include <cstddef>
#include <vector>

#include "tal/error.hpp"
#include "tal/model.hpp"
#include "tal/tensor.hpp"

namespace tal {

struct RateCount {
  std::size_t eligible = 0;  // clean-correct images
  std::size_t fooled = 0;    // of those, misclassified after perturbation

  double rate() const {
    if (eligible == 0) throw UndefinedRateError("success rate undefined: no clean-correct images");
    return static_cast<double>(fooled) / static_cast<double>(eligible);
  }
};

/// Counts for the attack success rate on `victim`. Images the victim
/// misclassifies when clean are excluded from the denominator.
inline RateCount success_count(const Model& victim, const std::vector<Tensor>& xs, const std::vector<std::size_t>& ys,
                               const std::vector<Tensor>& deltas) {
  if (xs.size() != ys.size() || xs.size() != deltas.size()) {
    throw ConfigError("success_rate: images, labels and perturbations must align");
  }
  RateCount c;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (classify(victim, xs[i]).predicted != ys[i]) continue;
    ++c.eligible;
    if (classify(victim, xs[i] + deltas[i]).predicted != ys[i]) ++c.fooled;
  }
  return c;
}

inline double success_rate(const Model& victim, const std::vector<Tensor>& xs, const std::vector<std::size_t>& ys,
                           const std::vector<Tensor>& deltas) {
  return success_count(victim, xs, ys, deltas).rate();
}

}  // namespace tal
