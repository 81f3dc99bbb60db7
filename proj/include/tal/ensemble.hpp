#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <numbers>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tal/affine.hpp"
#include "tal/attack.hpp"
#include "tal/error.hpp"
#include "tal/gradient_source.hpp"
#include "tal/graph.hpp"
#include "tal/model.hpp"
#include "tal/rng.hpp"
#include "tal/tensor.hpp"
#include "tal/transforms.hpp"

namespace tal {

enum class Fusion { loss, logit, prediction, longitude };

inline std::string_view to_string(Fusion f) {
  switch (f) {
    case Fusion::loss: return "loss";
    case Fusion::logit: return "logit";
    case Fusion::prediction: return "prediction";
    case Fusion::longitude: return "longitude";
  }
  return "?";
}

inline Fusion parse_fusion(std::string_view s) {
  for (Fusion f : {Fusion::loss, Fusion::logit, Fusion::prediction, Fusion::longitude})
    if (s == to_string(f)) return f;
  throw ConfigError("unknown fusion mode '" + std::string(s) + "'");
}

/// Conflict test used by gradient alignment.
enum class ConflictRule {
  cosine,  // cos(g_k, g_avg) < tau
  sign,    // sign(g_k) . sign(g_avg) < 0
};

enum class AitKind { vshift, hshift, rotate, scale, resize_pad, noise, dropout };

inline constexpr AitKind kAllAitKinds[] = {AitKind::vshift,     AitKind::hshift, AitKind::rotate, AitKind::scale,
                                           AitKind::resize_pad, AitKind::noise,  AitKind::dropout};

inline std::string_view to_string(AitKind k) {
  switch (k) {
    case AitKind::vshift: return "vshift";
    case AitKind::hshift: return "hshift";
    case AitKind::rotate: return "rotate";
    case AitKind::scale: return "scale";
    case AitKind::resize_pad: return "resize_pad";
    case AitKind::noise: return "noise";
    case AitKind::dropout: return "dropout";
  }
  return "?";
}

inline AitKind parse_ait_kind(std::string_view s) {
  for (AitKind k : kAllAitKinds)
    if (s == to_string(k)) return k;
  throw ConfigError("unknown input transform '" + std::string(s) + "'");
}

/// How input transforms are assigned to ensemble members.
enum class AitMode {
  off,      // no input transforms
  aligned,  // one draw per iteration, shared by every model
  async,    // an independent draw per model per iteration
};

struct EnsembleSpec {
  std::vector<const Model*> models;
  Fusion fusion = Fusion::logit;
  std::vector<double> weights;  // empty means uniform
  double tau = 0.1;
  bool ga_enabled = false;
  ConflictRule conflict_rule = ConflictRule::cosine;
  AitMode ait = AitMode::off;
  std::vector<AitKind> ait_pool{std::begin(kAllAitKinds), std::end(kAllAitKinds)};
  bool ms_enabled = false;

  std::size_t size() const noexcept { return models.size(); }

  std::vector<double> resolved_weights() const {
    if (weights.empty()) return std::vector<double>(models.size(), 1.0 / static_cast<double>(models.size()));
    return weights;
  }

  void validate() const {
    if (models.empty()) throw ConfigError("ensemble needs at least one model");
    for (const Model* m : models)
      if (!m) throw ConfigError("ensemble model handle is null");
    if (!weights.empty()) {
      if (weights.size() != models.size()) throw ConfigError("ensemble weight/model count mismatch");
      double total = 0.0;
      for (double w : weights) {
        if (!(w >= 0.0)) throw ConfigError("ensemble weights must be nonnegative");
        total += w;
      }
      if (std::abs(total - 1.0) > 1e-9) throw ConfigError("ensemble weights must sum to 1");
    }
    if (ait != AitMode::off && ait_pool.empty()) throw ConfigError("input-transform pool is empty");
  }
};

/// Per-model logits and the true label.
struct FusionView {
  std::vector<Tensor> logits;
  std::size_t label = 0;

  std::vector<Tensor> probabilities() const {
    std::vector<Tensor> out;
    for (const Tensor& z : logits) out.push_back(softmax_values(z));
    return out;
  }

  static Tensor softmax_values(const Tensor& z) {
    ComputeGraph g;
    return g.value(g.softmax(g.input(z, false)));
  }
};

/// Appends the fused loss over per-model logits nodes.
///   loss:       sum_k CE(z_k, y)
///   logit:      CE(sum_k w_k z_k, y)
///   prediction: -log(sum_k w_k softmax(z_k)_y)
inline NodeId fuse_outputs(ComputeGraph& g, const std::vector<NodeId>& logits, Fusion mode,
                           const std::vector<double>& weights, std::size_t label) {
  if (logits.empty()) throw ConfigError("fusion needs at least one model");
  if (weights.size() != logits.size()) throw ConfigError("fusion weight/model count mismatch");
  switch (mode) {
    case Fusion::loss: {
      std::vector<NodeId> losses;
      for (NodeId z : logits) losses.push_back(g.cross_entropy(z, label));
      return g.sum(losses);
    }
    case Fusion::logit:
      return g.cross_entropy(g.weighted_sum(logits, weights), label);
    case Fusion::prediction: {
      std::vector<NodeId> probs;
      for (NodeId z : logits) probs.push_back(g.softmax(z));
      return g.scale(g.log(g.pick(g.weighted_sum(probs, weights), label)), -1.0);
    }
    case Fusion::longitude:
      break;
  }
  throw ConfigError("longitude ensembles have no fused loss; use longitude_attack");
}

/// Fused loss value and its autodiff gradients with respect to each model's
/// logits.
struct FusedLoss {
  double loss = 0.0;
  std::vector<Tensor> logit_grads;
};

inline FusedLoss fuse_outputs(const FusionView& view, Fusion mode, const std::vector<double>& weights) {
  ComputeGraph g;
  std::vector<NodeId> zs;
  for (const Tensor& z : view.logits) zs.push_back(g.input(z, true));
  const NodeId loss = fuse_outputs(g, zs, mode, weights, view.label);
  g.backward(loss);
  FusedLoss out{g.value(loss)[0], {}};
  for (NodeId z : zs) out.logit_grads.push_back(g.take_grad(z));
  return out;
}

namespace detail {
inline void require_uniform(const std::vector<double>& weights, std::size_t k) {
  for (double w : weights)
    if (std::abs(w - 1.0 / static_cast<double>(k)) > 1e-12) {
      throw UnsupportedError("closed-form fusion gradients assume uniform weights");
    }
}
}  // namespace detail

/// Closed-form dL/dz_{k,c} as stated in the literature for uniform weights:
///   loss       p_{k,c} - y_c
///   logit      (1/K) sum_m p_{m,c} - y_c
///   prediction ((1/K) sum_m p_{m,c} - y_c) (1 - p_{k,c}) p_{k,c}
/// The logit and prediction forms are not the exact derivatives of the fused
/// losses; see exact_fusion_gradient.
inline std::vector<Tensor> analytic_fusion_gradient(const FusionView& view, Fusion mode,
                                                    const std::vector<double>& weights = {}) {
  const std::size_t k = view.logits.size();
  if (k == 0) throw ConfigError("fusion needs at least one model");
  if (!weights.empty()) detail::require_uniform(weights, k);
  if (mode == Fusion::longitude) throw ConfigError("longitude ensembles have no fused loss");
  const auto p = view.probabilities();
  Tensor mean_p = Tensor::zeros_like(p[0]);
  for (const Tensor& pk : p) mean_p += pk;
  for (double& v : mean_p.data()) v /= static_cast<double>(k);
  std::vector<Tensor> out;
  for (std::size_t m = 0; m < k; ++m) {
    Tensor g = Tensor::zeros_like(p[m]);
    for (std::size_t c = 0; c < g.size(); ++c) {
      const double yc = c == view.label ? 1.0 : 0.0;
      switch (mode) {
        case Fusion::loss: g[c] = p[m][c] - yc; break;
        case Fusion::logit: g[c] = mean_p[c] - yc; break;
        case Fusion::prediction: g[c] = (mean_p[c] - yc) * (1.0 - p[m][c]) * p[m][c]; break;
        case Fusion::longitude: break;
      }
    }
    out.push_back(std::move(g));
  }
  return out;
}

/// Exact closed-form dL/dz_{k,c} of fuse_outputs for arbitrary weights:
///   loss       p_{k,c} - y_c
///   logit      w_k (q_c - y_c), q = softmax(sum_m w_m z_m)
///   prediction -(w_k / P) p_{k,y} (y_c - p_{k,c}), P = sum_m w_m p_{m,y}
inline std::vector<Tensor> exact_fusion_gradient(const FusionView& view, Fusion mode,
                                                 const std::vector<double>& weights = {}) {
  const std::size_t k = view.logits.size();
  if (k == 0) throw ConfigError("fusion needs at least one model");
  if (mode == Fusion::longitude) throw ConfigError("longitude ensembles have no fused loss");
  const std::vector<double> w = weights.empty() ? std::vector<double>(k, 1.0 / static_cast<double>(k)) : weights;
  if (w.size() != k) throw ConfigError("fusion weight/model count mismatch");
  const auto p = view.probabilities();
  const std::size_t y = view.label;
  Tensor mixed = Tensor::zeros_like(view.logits[0]);
  for (std::size_t m = 0; m < k; ++m) axpy(mixed, w[m], view.logits[m]);
  const Tensor q = FusionView::softmax_values(mixed);
  double big_p = 0.0;
  for (std::size_t m = 0; m < k; ++m) big_p += w[m] * p[m][y];
  std::vector<Tensor> out;
  for (std::size_t m = 0; m < k; ++m) {
    Tensor g = Tensor::zeros_like(p[m]);
    for (std::size_t c = 0; c < g.size(); ++c) {
      const double yc = c == y ? 1.0 : 0.0;
      switch (mode) {
        case Fusion::loss: g[c] = p[m][c] - yc; break;
        case Fusion::logit: g[c] = w[m] * (q[c] - yc); break;
        case Fusion::prediction: g[c] = -(w[m] / big_p) * p[m][y] * (yc - p[m][c]); break;
        case Fusion::longitude: break;
      }
    }
    out.push_back(std::move(g));
  }
  return out;
}

inline double cosine_similarity(const Tensor& a, const Tensor& b) {
  const double na = l2_norm(a), nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

/// Gradient alignment. For each k, g_avg is the mean of the other K - 1
/// original gradients; on conflict g_k is replaced by its component
/// orthogonal to g_avg. Conflicts are judged against the original
/// gradients, so the result does not depend on visiting order.
inline std::vector<Tensor> align_gradients(const std::vector<Tensor>& grads, double tau,
                                           ConflictRule rule = ConflictRule::cosine) {
  const std::size_t k = grads.size();
  if (k < 2) throw ConfigError("gradient alignment needs at least two gradients");
  for (const Tensor& g : grads) require_same_shape(g, grads[0], "align_gradients");
  Tensor total = Tensor::zeros_like(grads[0]);
  for (const Tensor& g : grads) total += g;
  std::vector<Tensor> out = grads;
  for (std::size_t n = 0; n < k; ++n) {
    Tensor avg = total - grads[n];
    for (double& v : avg.data()) v /= static_cast<double>(k - 1);
    const double avg_sq = dot(avg, avg);
    if (avg_sq == 0.0) continue;
    bool conflict = false;
    if (rule == ConflictRule::cosine) {
      conflict = cosine_similarity(grads[n], avg) < tau;
    } else {
      double s = 0.0;
      for (std::size_t i = 0; i < avg.size(); ++i) s += sign_of(grads[n][i]) * sign_of(avg[i]);
      conflict = s < 0.0;
    }
    if (!conflict) continue;
    axpy(out[n], -dot(grads[n], avg) / avg_sq, avg);
  }
  return out;
}

/// Transform kinds for one iteration: independent draws per model.
inline std::vector<AitKind> assign_async_transforms(const std::vector<AitKind>& pool, std::size_t k, Rng& rng) {
  if (pool.empty()) throw ConfigError("input-transform pool is empty");
  std::vector<AitKind> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(pool[rng.below(pool.size())]);
  return out;
}

/// Aligned baseline: one draw reused by every model.
inline std::vector<AitKind> assign_aligned_transforms(const std::vector<AitKind>& pool, std::size_t k, Rng& rng) {
  if (pool.empty()) throw ConfigError("input-transform pool is empty");
  return std::vector<AitKind>(k, pool[rng.below(pool.size())]);
}

/// Draws the parameters of one input transform for a (C,H,W) image:
/// shifts of up to 2 px, rotation within 15 degrees, zoom 0.8-1.2, DIM-style
/// resize-and-pad, uniform noise of eps/2, or a 10% pixel dropout mask.
inline std::shared_ptr<const AffineMap> instantiate_ait(AitKind kind, const Shape& shape, double eps, Rng& rng) {
  if (shape.size() != 3) throw ConfigError("input transforms need (C,H,W) images");
  const std::size_t h = shape[1], w = shape[2];
  auto shift_amount = [&] {
    long s = 0;
    while (s == 0) s = static_cast<long>(rng.below(5)) - 2;
    return s;
  };
  AffineMap m;
  switch (kind) {
    case AitKind::vshift: m = AffineMap::shift(h, w, shift_amount(), 0); break;
    case AitKind::hshift: m = AffineMap::shift(h, w, 0, shift_amount()); break;
    case AitKind::rotate: m = AffineMap::rotate_zoom(h, w, rng.uniform(-1.0, 1.0) * std::numbers::pi / 12.0, 1.0); break;
    case AitKind::scale: m = AffineMap::rotate_zoom(h, w, 0.0, rng.uniform(0.8, 1.2)); break;
    case AitKind::resize_pad: m = draw_dim_map(h, w, 1.25, 1.0, rng); break;
    case AitKind::noise: {
      m = AffineMap::identity(h, w);
      Tensor bias(shape);
      for (double& v : bias.data()) v = rng.uniform(-eps / 2.0, eps / 2.0);
      m.set_bias(std::move(bias));
      break;
    }
    case AitKind::dropout: {
      m = AffineMap::identity(h, w);
      Tensor mask(shape, 1.0);
      for (double& v : mask.data())
        if (rng.uniform() < 0.1) v = 0.0;
      m.set_mask(std::move(mask));
      break;
    }
  }
  return std::make_shared<const AffineMap>(std::move(m));
}

/// Lateral ensemble gradient: per-model branch gradients from separate input
/// leaves (each optionally behind its own input transform), optionally
/// aligned, then summed.
class EnsembleGradient final : public GradientSource {
 public:
  EnsembleGradient(EnsembleSpec spec, double eps = 16.0 / 255.0) : spec_(std::move(spec)), eps_(eps) {
    spec_.validate();
    if (spec_.fusion == Fusion::longitude) throw ConfigError("longitude ensembles use longitude_attack");
    for (const Model* m : spec_.models)
      if (m->spec().input_shape() != spec_.models[0]->spec().input_shape()) {
        throw ConfigError("ensemble members disagree on input shape");
      }
  }

  /// Per-model gradients before alignment. Draw order: transform kinds,
  /// then each model's transform parameters in model order.
  std::vector<Tensor> branch_gradients(const Tensor& point, std::size_t label, Rng& rng) const {
    const std::size_t k = spec_.size();
    std::vector<std::shared_ptr<const AffineMap>> maps(k);
    if (spec_.ait == AitMode::async) {
      const auto kinds = assign_async_transforms(spec_.ait_pool, k, rng);
      for (std::size_t i = 0; i < k; ++i) maps[i] = instantiate_ait(kinds[i], point.shape(), eps_, rng);
    } else if (spec_.ait == AitMode::aligned) {
      const auto kinds = assign_aligned_transforms(spec_.ait_pool, k, rng);
      const auto shared = instantiate_ait(kinds[0], point.shape(), eps_, rng);
      for (auto& m : maps) m = shared;
    }
    ComputeGraph g;
    std::vector<NodeId> leaves, logits;
    for (std::size_t i = 0; i < k; ++i) {
      const NodeId leaf = g.input(point, true);
      leaves.push_back(leaf);
      const NodeId in = maps[i] ? g.affine(leaf, maps[i]) : leaf;
      logits.push_back(spec_.models[i]->forward(g, in));
    }
    g.backward(fuse_outputs(g, logits, spec_.fusion, spec_.resolved_weights(), label));
    std::vector<Tensor> grads;
    for (NodeId leaf : leaves) grads.push_back(g.take_grad(leaf));
    return grads;
  }

  Tensor gradient(const Tensor& point, std::size_t label, Rng& rng) const override {
    auto grads = branch_gradients(point, label, rng);
    if (spec_.ga_enabled && grads.size() >= 2) grads = align_gradients(grads, spec_.tau, spec_.conflict_rule);
    Tensor total = Tensor::zeros_like(point);
    for (const Tensor& g : grads) total += g;
    return total;
  }

  Shape input_shape() const override { return spec_.models[0]->spec().input_shape(); }
  const EnsembleSpec& spec() const noexcept { return spec_; }

 private:
  EnsembleSpec spec_;
  double eps_;
};

/// Gradient of one ensemble member, behind a freshly drawn input transform
/// when AIT is enabled.
class MemberGradient final : public GradientSource {
 public:
  MemberGradient(const EnsembleSpec& spec, std::size_t index, double eps) : spec_(&spec), index_(index), eps_(eps) {}

  Tensor gradient(const Tensor& point, std::size_t label, Rng& rng) const override {
    const Model& model = *spec_->models[index_];
    if (spec_->ait == AitMode::off) return evaluate_with_gradient(model, point, label).grad;
    const auto kind = spec_->ait_pool[rng.below(spec_->ait_pool.size())];
    const auto map = instantiate_ait(kind, point.shape(), eps_, rng);
    ComputeGraph g;
    const NodeId leaf = g.input(point, true);
    g.backward(g.cross_entropy(model.forward(g, g.affine(leaf, map)), label));
    return g.take_grad(leaf);
  }
  Shape input_shape() const override { return spec_->models[index_]->spec().input_shape(); }

 private:
  const EnsembleSpec* spec_;
  std::size_t index_;
  double eps_;
};

/// Model order for every iteration of a longitude attack: identity, or a
/// fresh uniform permutation per iteration drawn from `rng` under MS.
inline std::vector<std::vector<std::size_t>> longitude_orders(std::size_t k, std::size_t iters, bool shuffle, Rng& rng) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t t = 0; t < iters; ++t) {
    if (shuffle) {
      out.push_back(rng.permutation(k));
    } else {
      std::vector<std::size_t> id(k);
      for (std::size_t i = 0; i < k; ++i) id[i] = i;
      out.push_back(std::move(id));
    }
  }
  return out;
}

/// Longitudinal ensemble: every iteration visits the K models one at a time
/// (K sub-steps of size alpha_t), sharing delta and momentum. The order
/// stream is derived from `seed` (stream::order).
inline Tensor longitude_attack(const EnsembleSpec& spec, const Tensor& x, std::size_t y, const AttackConfig& cfg,
                               std::uint64_t seed, IterateObserver observer = {},
                               std::vector<std::vector<std::size_t>>* visited = nullptr) {
  spec.validate();
  if (spec.fusion != Fusion::longitude) throw ConfigError("longitude_attack needs fusion = longitude");
  if (cfg.dual_copies > 0) throw UnsupportedError("dual examples are not combined with longitude ensembles");
  IterativeAttack attack(cfg, x, y, seed, std::move(observer));
  std::vector<MemberGradient> members;
  for (std::size_t k = 0; k < spec.size(); ++k) members.emplace_back(spec, k, cfg.eps);

  if (attack.uses_momentum() && (cfg.method == Method::gimifgsm || cfg.init != MomentumInit::none)) {
    EnsembleSpec lateral = spec;
    lateral.fusion = Fusion::loss;
    lateral.ms_enabled = false;
    attack.initialize_momentum(EnsembleGradient(lateral, cfg.eps));
  }
  Rng order_rng(derive_seed(seed, stream::order));
  const auto& steps = attack.steps();
  for (double step : steps) {
    const auto order = longitude_orders(spec.size(), 1, spec.ms_enabled, order_rng).front();
    if (visited) visited->push_back(order);
    for (std::size_t k : order) {
      auto est = attack.estimate(members[k], attack.state().delta, step);
      attack.update(est.grad, step, est.variance.empty() ? nullptr : &est.variance);
    }
  }
  return attack.state().delta;
}

/// Any ensemble attack: lateral fusion feeds the fused gradient to the
/// configured method; longitude runs longitude_attack.
inline Tensor ensemble_attack(const EnsembleSpec& spec, const Tensor& x, std::size_t y, const AttackConfig& cfg,
                              std::uint64_t seed, IterateObserver observer = {}) {
  if (spec.fusion == Fusion::longitude) return longitude_attack(spec, x, y, cfg, seed, std::move(observer));
  return run_attack(cfg, EnsembleGradient(spec, cfg.eps), x, y, seed, std::move(observer));
}

}  // namespace tal
