#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tal/error.hpp"
#include "tal/graph.hpp"
#include "tal/rng.hpp"
#include "tal/tensor.hpp"

namespace tal {

enum class Arch { mlp2, cnn_a, cnn_b, cnn_pool };

inline std::string_view to_string(Arch a) {
  switch (a) {
    case Arch::mlp2: return "mlp2";
    case Arch::cnn_a: return "cnn_a";
    case Arch::cnn_b: return "cnn_b";
    case Arch::cnn_pool: return "cnn_pool";
  }
  return "?";
}

inline Arch parse_arch(std::string_view s) {
  if (s == "mlp2") return Arch::mlp2;
  if (s == "cnn_a") return Arch::cnn_a;
  if (s == "cnn_b") return Arch::cnn_b;
  if (s == "cnn_pool") return Arch::cnn_pool;
  throw ConfigError("unknown architecture '" + std::string(s) + "'");
}

struct ArchSpec {
  Arch arch = Arch::cnn_a;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 1;
  std::size_t classes = 8;

  Shape input_shape() const { return {channels, height, width}; }
  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

struct NamedParam {
  std::string name;
  Tensor value;
};

/// A small differentiable classifier. The architecture fixes the parameter
/// list exactly; `forward` appends the network to a graph and returns the
/// logits node. Loaded models are immutable and may be shared across threads.
class Model {
 public:
  Model() = default;
  Model(ArchSpec spec, std::vector<NamedParam> params) : spec_(spec), params_(std::move(params)) {}

  const ArchSpec& spec() const noexcept { return spec_; }
  std::vector<NamedParam>& params() noexcept { return params_; }
  const std::vector<NamedParam>& params() const noexcept { return params_; }

  bool trained() const noexcept { return trained_; }
  std::uint64_t train_seed() const noexcept { return train_seed_; }
  void mark_trained(std::uint64_t seed) {
    trained_ = true;
    train_seed_ = seed;
  }
  void set_train_state(bool trained, std::uint64_t seed) {
    trained_ = trained;
    train_seed_ = seed;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  /// Appends the forward pass. `param_leaves` (optional) receives the leaf
  /// ids of the parameters in declaration order; pass param_grad to request
  /// their gradients.
  NodeId forward(ComputeGraph& g, NodeId x, bool param_grad = false,
                 std::vector<NodeId>* param_leaves = nullptr) const {
    if (g.value(x).shape() != spec_.input_shape()) {
      throw ConfigError("model " + std::string(to_string(spec_.arch)) + " expects input " +
                        shape_str(spec_.input_shape()) + ", got " + shape_str(g.value(x).shape()));
    }
    std::vector<NodeId> leaves;
    leaves.reserve(params_.size());
    for (const auto& p : params_) leaves.push_back(g.borrow(p.value, param_grad));
    if (param_leaves) *param_leaves = leaves;
    auto P = [&](std::size_t i) { return leaves[i]; };
    NodeId h = x;
    switch (spec_.arch) {
      case Arch::mlp2:
        h = g.relu(g.dense(h, P(0), P(1)));
        return g.dense(h, P(2), P(3));
      case Arch::cnn_a:
        h = g.relu(g.conv2d(h, P(0), P(1), Padding::valid));
        h = g.relu(g.conv2d(h, P(2), P(3), Padding::valid));
        return g.dense(h, P(4), P(5));
      case Arch::cnn_b:
        h = g.relu(g.conv2d(h, P(0), P(1), Padding::valid));
        h = g.relu(g.conv2d(h, P(2), P(3), Padding::valid));
        h = g.relu(g.conv2d(h, P(4), P(5), Padding::valid));
        return g.dense(h, P(6), P(7));
      case Arch::cnn_pool:
        h = g.relu(g.conv2d(h, P(0), P(1), Padding::same));
        h = g.avg_pool(h, 2);
        return g.dense(h, P(2), P(3));
    }
    throw ConfigError("unknown architecture");
  }

  /// Logits for a single image.
  Tensor logits(const Tensor& x) const {
    ComputeGraph g;
    const NodeId in = g.input(x, false);
    return g.value(forward(g, in));
  }

 private:
  ArchSpec spec_;
  std::vector<NamedParam> params_;
  bool trained_ = false;
  std::uint64_t train_seed_ = 0;
};

/// Parameter names and shapes for an architecture, in declaration order.
inline std::vector<std::pair<std::string, Shape>> parameter_layout(const ArchSpec& s) {
  const std::size_t c = s.channels, h = s.height, w = s.width, k = s.classes;
  if (c == 0 || h == 0 || w == 0 || k < 2) throw ConfigError("architecture needs positive extents and >= 2 classes");
  switch (s.arch) {
    case Arch::mlp2:
      return {{"fc1.w", {64, c * h * w}}, {"fc1.b", {64}}, {"fc2.w", {k, 64}}, {"fc2.b", {k}}};
    case Arch::cnn_a:
      if (h < 5 || w < 5) throw ConfigError("cnn_a needs inputs of at least 5x5");
      return {{"conv1.w", {6, c, 3, 3}}, {"conv1.b", {6}},
              {"conv2.w", {8, 6, 3, 3}}, {"conv2.b", {8}},
              {"fc.w", {k, 8 * (h - 4) * (w - 4)}}, {"fc.b", {k}}};
    case Arch::cnn_b:
      if (h < 9 || w < 9) throw ConfigError("cnn_b needs inputs of at least 9x9");
      return {{"conv1.w", {4, c, 5, 5}}, {"conv1.b", {4}},
              {"conv2.w", {8, 4, 3, 3}}, {"conv2.b", {8}},
              {"conv3.w", {8, 8, 3, 3}}, {"conv3.b", {8}},
              {"fc.w", {k, 8 * (h - 8) * (w - 8)}}, {"fc.b", {k}}};
    case Arch::cnn_pool:
      if (h < 2 || w < 2) throw ConfigError("cnn_pool needs inputs of at least 2x2");
      return {{"conv1.w", {8, c, 3, 3}}, {"conv1.b", {8}}, {"fc.w", {k, 8 * (h / 2) * (w / 2)}}, {"fc.b", {k}}};
  }
  throw ConfigError("unknown architecture");
}

/// Seeded He-uniform initialisation: weights ~ U(-b, b) with
/// b = sqrt(6 / fan_in), biases zero.
inline Model build_model(const ArchSpec& spec, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x1417));
  std::vector<NamedParam> params;
  for (auto& [name, shape] : parameter_layout(spec)) {
    Tensor t(shape);
    if (shape.size() > 1) {
      const std::size_t fan_in = t.size() / shape[0];
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (double& v : t.data()) v = rng.uniform(-bound, bound);
    }
    params.push_back({name, std::move(t)});
  }
  return Model(spec, std::move(params));
}

/// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax(const Tensor& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

struct Classification {
  Tensor logits;
  std::size_t predicted = 0;
};

inline Classification classify(const Model& model, const Tensor& x) {
  Classification c;
  c.logits = model.logits(x);
  c.predicted = argmax(c.logits);
  return c;
}

}  // namespace tal
