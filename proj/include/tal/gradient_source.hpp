#pragma once

#include <cstddef>
#include <string>

#include "tal/error.hpp"
#include "tal/graph.hpp"
#include "tal/model.hpp"
#include "tal/rng.hpp"
#include "tal/tensor.hpp"

namespace tal {

enum class LossKind { cross_entropy };

struct LossAndGradient {
  double loss = 0.0;
  Tensor grad;
};

/// Loss and its exact input gradient for one image, parameters held fixed.
inline LossAndGradient evaluate_with_gradient(const Model& model, const Tensor& input, std::size_t label,
                                              LossKind kind = LossKind::cross_entropy) {
  if (label >= model.spec().classes) {
    throw ConfigError("label " + std::to_string(label) + " out of range for " +
                      std::to_string(model.spec().classes) + " classes");
  }
  (void)kind;
  ComputeGraph g;
  const NodeId x = g.input(input, true);
  const NodeId loss = g.cross_entropy(model.forward(g, x), label);
  g.backward(loss);
  return {g.value(loss)[0], g.take_grad(x)};
}

/// Anything that yields an attack gradient at a point: a single model, a
/// transform-averaged model, or a fused ensemble. Implementations are
/// read-only; randomness comes from the caller's stream.
class GradientSource {
 public:
  virtual ~GradientSource() = default;
  virtual Tensor gradient(const Tensor& point, std::size_t label, Rng& rng) const = 0;
  virtual Shape input_shape() const = 0;
};

class ModelGradient final : public GradientSource {
 public:
  explicit ModelGradient(const Model& model) : model_(&model) {}
  Tensor gradient(const Tensor& point, std::size_t label, Rng&) const override {
    return evaluate_with_gradient(*model_, point, label).grad;
  }
  Shape input_shape() const override { return model_->spec().input_shape(); }
  const Model& model() const noexcept { return *model_; }

 private:
  const Model* model_;
};

}  // namespace tal
