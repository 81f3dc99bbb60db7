#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tal/affine.hpp"
#include "tal/error.hpp"
#include "tal/gradient_source.hpp"
#include "tal/graph.hpp"
#include "tal/model.hpp"
#include "tal/rng.hpp"
#include "tal/spectral.hpp"
#include "tal/tensor.hpp"

namespace tal {

enum class TransformKind { none, dim, tim, sim, admix, ssa, ssa_h, ssa_plus };

inline std::string_view to_string(TransformKind k) {
  switch (k) {
    case TransformKind::none: return "none";
    case TransformKind::dim: return "dim";
    case TransformKind::tim: return "tim";
    case TransformKind::sim: return "sim";
    case TransformKind::admix: return "admix";
    case TransformKind::ssa: return "ssa";
    case TransformKind::ssa_h: return "ssa_h";
    case TransformKind::ssa_plus: return "ssa_plus";
  }
  return "?";
}

inline TransformKind parse_transform_kind(std::string_view s) {
  for (TransformKind k : {TransformKind::none, TransformKind::dim, TransformKind::tim, TransformKind::sim,
                          TransformKind::admix, TransformKind::ssa, TransformKind::ssa_h, TransformKind::ssa_plus})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown transform '" + std::string(s) + "'");
}

struct TransformSpec {
  TransformKind kind = TransformKind::none;
  std::size_t copies = 20;
  double rho = 0.2;  // high-frequency ratio for ssa_h / ssa_plus
  double dim_pad = 1.1;
  double dim_prob = 0.5;
  std::size_t tim_kernel = 5;
  double tim_sigma = 1.5;
  std::size_t sim_scales = 5;
  double admix_eta = 0.2;
  std::size_t admix_samples = 3;
  double ssa_sigma = 1.0;  // noise scale in units of eps
  double ssa_amp = 0.5;    // spectral modulation M ~ U[1 - amp, 1 + amp]
  double dropout_frac = 0.10;
  double eps = 16.0 / 255.0;

  void validate() const {
    if (copies < 1) throw ConfigError("transform copies must be at least 1");
    if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("rho must be in (0, 1]");
    if (!(dim_pad >= 1.0)) throw ConfigError("dim_pad must be >= 1");
    if (!(dim_prob >= 0.0 && dim_prob <= 1.0)) throw ConfigError("dim_prob must be in [0, 1]");
    if (tim_kernel == 0 || tim_kernel % 2 == 0) throw ConfigError("tim kernel size must be odd");
    if (!(tim_sigma > 0.0)) throw ConfigError("tim sigma must be positive");
    if (sim_scales < 1) throw ConfigError("sim_scales must be at least 1");
    if (admix_samples < 1) throw ConfigError("admix needs at least one sampled image");
    if (!(ssa_sigma >= 0.0) || !(ssa_amp >= 0.0)) throw ConfigError("ssa parameters must be nonnegative");
    if (!(dropout_frac >= 0.0 && dropout_frac <= 1.0)) throw ConfigError("dropout_frac must be in [0, 1]");
    if (!(eps > 0.0)) throw ConfigError("transform eps must be positive");
  }
};

/// Selected DCT coefficients of an H x W plane.
struct FrequencyMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<char> selected;  // row-major (u, v)

  bool at(std::size_t u, std::size_t v) const { return selected[u * width + v] != 0; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(selected.begin(), selected.end(), 1)); }
  std::vector<std::size_t> indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < selected.size(); ++i)
      if (selected[i]) out.push_back(i);
    return out;
  }
};

/// Top ceil(rho * H * W) coefficients ordered by u + v, then u, then v
/// (all descending).
inline FrequencyMask highfreq_mask(std::size_t h, std::size_t w, double rho) {
  if (h == 0 || w == 0) throw ConfigError("mask extents must be positive");
  if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("rho must be in (0, 1]");
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t u = 0; u < h; ++u)
    for (std::size_t v = 0; v < w; ++v) coords.emplace_back(u, v);
  std::sort(coords.begin(), coords.end(), [](const auto& a, const auto& b) {
    const std::size_t ra = a.first + a.second, rb = b.first + b.second;
    if (ra != rb) return ra > rb;
    if (a.first != b.first) return a.first > b.first;
    return a.second > b.second;
  });
  auto keep = static_cast<std::size_t>(std::ceil(rho * static_cast<double>(h * w) - 1e-12));
  keep = std::clamp<std::size_t>(keep, 1, h * w);
  FrequencyMask m{h, w, std::vector<char>(h * w, 0)};
  for (std::size_t i = 0; i < keep; ++i) m.selected[coords[i].first * w + coords[i].second] = 1;
  return m;
}

/// Shared orthonormal DCT plan per extent.
inline std::shared_ptr<const SpectralPlan> shared_plan(std::size_t h, std::size_t w) {
  static std::mutex mu;
  static std::map<std::pair<std::size_t, std::size_t>, std::shared_ptr<const SpectralPlan>> cache;
  std::lock_guard lock(mu);
  auto& slot = cache[{h, w}];
  if (!slot) slot = std::make_shared<const SpectralPlan>(h, w);
  return slot;
}

/// Spectral edit y = c * factor + offset on DCT coefficients. Coefficients
/// outside the edit keep factor 1 and offset 0, so they pass through
/// bit-exactly.
struct SpectralEdit {
  Tensor factor;
  Tensor offset;

  Tensor apply(const Tensor& coeffs) const {
    require_same_shape(coeffs, factor, "spectral edit");
    Tensor y = coeffs;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = y[i] * factor[i] + offset[i];
    return y;
  }
};

enum class SpectralOpKind { scale, noise, dropout };

inline std::string_view to_string(SpectralOpKind k) {
  switch (k) {
    case SpectralOpKind::scale: return "scale";
    case SpectralOpKind::noise: return "noise";
    case SpectralOpKind::dropout: return "dropout";
  }
  return "?";
}

/// One spectral augmentation restricted to `mask`, applied to every channel.
///   scale: masked coefficients times alpha
///   noise: masked coefficients plus U(-amplitude, amplitude)
///   dropout: lround(frac * |mask|) masked coefficients per channel set to 0
inline SpectralEdit spectral_op_edit(const Shape& shape, const FrequencyMask& mask, SpectralOpKind kind, Rng& rng,
                                     double alpha_or_amplitude_or_frac) {
  if (shape.size() != 3 || shape[1] != mask.height || shape[2] != mask.width) {
    throw ConfigError("spectral op: shape " + shape_str(shape) + " does not match mask");
  }
  SpectralEdit e{Tensor(shape, 1.0), Tensor(shape, 0.0)};
  const std::size_t plane = mask.height * mask.width;
  const auto idx = mask.indices();
  for (std::size_t c = 0; c < shape[0]; ++c) {
    const std::size_t base = c * plane;
    switch (kind) {
      case SpectralOpKind::scale:
        for (std::size_t i : idx) e.factor[base + i] = alpha_or_amplitude_or_frac;
        break;
      case SpectralOpKind::noise:
        for (std::size_t i : idx) e.offset[base + i] = rng.uniform(-alpha_or_amplitude_or_frac, alpha_or_amplitude_or_frac);
        break;
      case SpectralOpKind::dropout: {
        const auto n = static_cast<std::size_t>(std::lround(alpha_or_amplitude_or_frac * static_cast<double>(idx.size())));
        const auto perm = rng.permutation(idx.size());
        for (std::size_t j = 0; j < n; ++j) e.factor[base + idx[perm[j]]] = 0.0;
        break;
      }
    }
  }
  return e;
}

/// Applies a spectral op to already-transformed coefficients (with a fixed
/// scale alpha when kind == scale).
inline Tensor apply_spectral_op(const Tensor& coeffs, const FrequencyMask& mask, SpectralOpKind kind, double param,
                                Rng& rng) {
  return spectral_op_edit(coeffs.shape(), mask, kind, rng, param).apply(coeffs);
}

/// Draws the spectral edit for one ssa / ssa_h / ssa_plus copy.
///   ssa:      (X + DCT(xi)) * M on every coefficient
///   ssa_h:    the same restricted to the high-frequency mask
///   ssa_plus: one of scale / noise / dropout, chosen uniformly, on the mask
inline SpectralEdit draw_spectral_edit(const TransformSpec& spec, const Shape& shape, Rng& rng) {
  if (shape.size() != 3) throw ConfigError("spectral transforms need (C,H,W) images");
  const std::size_t h = shape[1], w = shape[2];
  if (spec.kind == TransformKind::ssa_plus) {
    const FrequencyMask mask = highfreq_mask(h, w, spec.rho);
    const auto op = static_cast<SpectralOpKind>(rng.below(3));
    switch (op) {
      case SpectralOpKind::scale: {
        double alpha = rng.uniform();
        while (alpha <= 0.0) alpha = rng.uniform();
        return spectral_op_edit(shape, mask, op, rng, alpha);
      }
      case SpectralOpKind::noise: return spectral_op_edit(shape, mask, op, rng, spec.ssa_sigma * spec.eps);
      case SpectralOpKind::dropout: return spectral_op_edit(shape, mask, op, rng, spec.dropout_frac);
    }
  }
  if (spec.kind != TransformKind::ssa && spec.kind != TransformKind::ssa_h) {
    throw ConfigError("not a spectral transform: " + std::string(to_string(spec.kind)));
  }
  Tensor xi(shape);
  for (double& v : xi.data()) v = spec.ssa_sigma * spec.eps * rng.normal();
  const Tensor xi_hat = shared_plan(h, w)->forward(xi);
  Tensor modulation(shape);
  for (double& v : modulation.data()) v = rng.uniform(1.0 - spec.ssa_amp, 1.0 + spec.ssa_amp);
  SpectralEdit e{Tensor(shape, 1.0), Tensor(shape, 0.0)};
  const bool restricted = spec.kind == TransformKind::ssa_h;
  const FrequencyMask mask = restricted ? highfreq_mask(h, w, spec.rho) : FrequencyMask{};
  for (std::size_t i = 0; i < e.factor.size(); ++i) {
    if (restricted && !mask.selected[i % (h * w)]) continue;
    e.factor[i] = modulation[i];
    e.offset[i] = xi_hat[i] * modulation[i];
  }
  return e;
}

/// DIM resampling: resize to r in [H, round(pad H)], place at a random
/// offset in a round(pad H) canvas, resize back to H x W.
inline AffineMap draw_dim_map(std::size_t h, std::size_t w, double pad, double prob, Rng& rng) {
  if (rng.uniform() >= prob) return AffineMap::identity(h, w);
  const auto ph = static_cast<std::size_t>(std::lround(pad * static_cast<double>(h)));
  const auto pw = static_cast<std::size_t>(std::lround(pad * static_cast<double>(w)));
  const std::size_t rh = h + rng.below(ph - h + 1);
  const auto rw = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(static_cast<double>(rh) * static_cast<double>(w) / static_cast<double>(h))), w,
      pw);
  const std::size_t top = rng.below(ph - rh + 1);
  const std::size_t left = rng.below(pw - rw + 1);
  const AffineMap up = AffineMap::resize(h, w, rh, rw);
  const AffineMap place = AffineMap::embed(rh, rw, ph, pw, top, left);
  const AffineMap down = AffineMap::resize(ph, pw, h, w);
  return down.after(place.after(up));
}

/// Per-copy context for transforms that depend on the copy index or on a
/// mixing partner.
struct CopyContext {
  std::size_t index = 0;
  const Tensor* admix_partner = nullptr;
};

/// Appends one transformed copy of node `x` to the graph. Randomness is
/// drawn from `rng` in a fixed order per kind.
inline NodeId transform_node(ComputeGraph& g, NodeId x, const TransformSpec& spec, const CopyContext& ctx, Rng& rng) {
  const Shape shape = g.value(x).shape();
  switch (spec.kind) {
    case TransformKind::none:
    case TransformKind::tim:
      return x;
    case TransformKind::dim: {
      if (shape.size() != 3) throw ConfigError("dim needs (C,H,W) images");
      auto map = std::make_shared<const AffineMap>(draw_dim_map(shape[1], shape[2], spec.dim_pad, spec.dim_prob, rng));
      return g.affine(x, map);
    }
    case TransformKind::sim:
      return g.scale(x, std::ldexp(1.0, -static_cast<int>(ctx.index % spec.sim_scales)));
    case TransformKind::admix: {
      if (!ctx.admix_partner) throw ConfigError("admix needs an image from another class");
      require_same_shape(g.value(x), *ctx.admix_partner, "admix partner");
      const double s = std::ldexp(1.0, -static_cast<int>(ctx.index % spec.sim_scales));
      return g.affine_const(x, Tensor(shape, s), s * spec.admix_eta * *ctx.admix_partner);
    }
    case TransformKind::ssa:
    case TransformKind::ssa_h:
    case TransformKind::ssa_plus: {
      auto plan = shared_plan(shape[1], shape[2]);
      const SpectralEdit e = draw_spectral_edit(spec, shape, rng);
      return g.idct2(g.affine_const(g.dct2(x, plan), e.factor, e.offset), plan);
    }
  }
  throw ConfigError("unknown transform kind");
}

/// One transformed copy of x.
inline Tensor apply_transform(const TransformSpec& spec, const Tensor& x, Rng& rng, const CopyContext& ctx = {}) {
  spec.validate();
  ComputeGraph g;
  const NodeId in = g.input(x, false);
  return g.value(transform_node(g, in, spec, ctx, rng));
}

/// Normalised 2D Gaussian kernel (size k, std sigma), row-major.
inline std::vector<double> gaussian_kernel(std::size_t k, double sigma) {
  if (k == 0 || k % 2 == 0) throw ConfigError("gaussian kernel size must be odd");
  const long r = static_cast<long>(k / 2);
  std::vector<double> ker(k * k);
  double total = 0.0;
  for (long i = -r; i <= r; ++i)
    for (long j = -r; j <= r; ++j) {
      const double v = std::exp(-static_cast<double>(i * i + j * j) / (2.0 * sigma * sigma));
      ker[static_cast<std::size_t>((i + r) * static_cast<long>(k) + j + r)] = v;
      total += v;
    }
  for (double& v : ker) v /= total;
  return ker;
}

/// Depthwise Gaussian smoothing of a (C,H,W) gradient, same-size output with
/// replicated borders.
inline Tensor tim_smooth_gradient(const Tensor& grad, std::size_t kernel_size, double sigma) {
  if (kernel_size == 0 || kernel_size % 2 == 0) throw ConfigError("tim kernel size must be odd");
  if (grad.rank() != 3) throw ConfigError("tim expects a (C,H,W) gradient");
  if (kernel_size == 1) return grad;
  const auto ker = gaussian_kernel(kernel_size, sigma);
  const long r = static_cast<long>(kernel_size / 2);
  const long h = static_cast<long>(grad.shape()[1]), w = static_cast<long>(grad.shape()[2]);
  Tensor out = Tensor::zeros_like(grad);
  for (std::size_t c = 0; c < grad.shape()[0]; ++c)
    for (long i = 0; i < h; ++i)
      for (long j = 0; j < w; ++j) {
        double acc = 0.0;
        for (long a = -r; a <= r; ++a)
          for (long b = -r; b <= r; ++b) {
            const long ii = std::clamp(i + a, 0L, h - 1), jj = std::clamp(j + b, 0L, w - 1);
            acc += ker[static_cast<std::size_t>((a + r) * static_cast<long>(kernel_size) + b + r)] *
                   grad.at(c, static_cast<std::size_t>(ii), static_cast<std::size_t>(jj));
          }
        out.at(c, static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = acc;
      }
  return out;
}

/// Labelled images admix may draw partners from.
struct AdmixPool {
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;

  /// Indices whose label differs from y.
  std::vector<std::size_t> others(std::size_t y) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] != y) out.push_back(i);
    return out;
  }
};

/// Gradient of the loss through one transformed copy, pulled back to x.
inline Tensor transformed_copy_gradient(const Model& model, const Tensor& x, std::size_t y, const TransformSpec& spec,
                                        const CopyContext& ctx, Rng& rng) {
  ComputeGraph g;
  const NodeId in = g.input(x, true);
  const NodeId t = transform_node(g, in, spec, ctx, rng);
  g.backward(g.cross_entropy(model.forward(g, t), y));
  return g.take_grad(in);
}

/// Mean over c transformed copies of the input gradient. kind none returns
/// the plain gradient; tim smooths the plain gradient. Admix samples its
/// partners (with replacement) from the other-class part of `pool`; copy i
/// uses partner i / sim_scales (mod samples) at scale 2^-(i mod sim_scales).
inline Tensor averaged_transformed_gradient(const Model& model, const Tensor& x, std::size_t y,
                                            const TransformSpec& spec, std::size_t c, Rng& rng,
                                            const AdmixPool* pool = nullptr) {
  spec.validate();
  if (c < 1) throw ConfigError("copies must be at least 1");
  if (spec.kind == TransformKind::none) return evaluate_with_gradient(model, x, y).grad;
  if (spec.kind == TransformKind::tim) {
    return tim_smooth_gradient(evaluate_with_gradient(model, x, y).grad, spec.tim_kernel, spec.tim_sigma);
  }
  std::vector<Tensor> partners;
  if (spec.kind == TransformKind::admix) {
    const auto candidates = pool ? pool->others(y) : std::vector<std::size_t>{};
    if (candidates.empty()) throw ConfigError("admix: other-class pool is empty");
    for (std::size_t k = 0; k < spec.admix_samples; ++k)
      partners.push_back(pool->images[candidates[rng.below(candidates.size())]]);
  }
  Tensor acc = Tensor::zeros_like(x);
  for (std::size_t i = 0; i < c; ++i) {
    CopyContext ctx{i, nullptr};
    if (!partners.empty()) ctx.admix_partner = &partners[(i / spec.sim_scales) % partners.size()];
    acc += transformed_copy_gradient(model, x, y, spec, ctx, rng);
  }
  for (double& v : acc.data()) v /= static_cast<double>(c);
  return acc;
}

/// Gradient source for a transform attack on one surrogate.
class TransformedGradient final : public GradientSource {
 public:
  TransformedGradient(const Model& model, TransformSpec spec, const AdmixPool* pool = nullptr)
      : model_(&model), spec_(std::move(spec)), pool_(pool) {
    spec_.validate();
  }
  Tensor gradient(const Tensor& point, std::size_t label, Rng& rng) const override {
    return averaged_transformed_gradient(*model_, point, label, spec_, spec_.copies, rng, pool_);
  }
  Shape input_shape() const override { return model_->spec().input_shape(); }
  const TransformSpec& spec() const noexcept { return spec_; }

 private:
  const Model* model_;
  TransformSpec spec_;
  const AdmixPool* pool_;
};

}  // namespace tal
