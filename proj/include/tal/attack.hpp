#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "tal/error.hpp"
#include "tal/gradient_source.hpp"
#include "tal/model.hpp"
#include "tal/projection.hpp"
#include "tal/rng.hpp"
#include "tal/schedule.hpp"
#include "tal/tensor.hpp"

namespace tal {

enum class Method { fgsm, ifgsm, mifgsm, nifgsm, pifgsm, emifgsm, vmifgsm, gimifgsm };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::fgsm: return "fgsm";
    case Method::ifgsm: return "ifgsm";
    case Method::mifgsm: return "mifgsm";
    case Method::nifgsm: return "nifgsm";
    case Method::pifgsm: return "pifgsm";
    case Method::emifgsm: return "emifgsm";
    case Method::vmifgsm: return "vmifgsm";
    case Method::gimifgsm: return "gimifgsm";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  for (Method m : {Method::fgsm, Method::ifgsm, Method::mifgsm, Method::nifgsm, Method::pifgsm, Method::emifgsm,
                   Method::vmifgsm, Method::gimifgsm})
    if (s == to_string(m)) return m;
  throw ConfigError("unknown attack method '" + std::string(s) + "'");
}

/// The seven iterative methods (FGSM excluded).
inline constexpr Method kIterativeMethods[] = {Method::ifgsm,   Method::mifgsm,  Method::nifgsm,  Method::pifgsm,
                                               Method::emifgsm, Method::vmifgsm, Method::gimifgsm};

enum class MomentumInit { none, gi, rgi };

inline std::string_view to_string(MomentumInit m) {
  switch (m) {
    case MomentumInit::none: return "none";
    case MomentumInit::gi: return "gi";
    case MomentumInit::rgi: return "rgi";
  }
  return "?";
}

inline MomentumInit parse_momentum_init(std::string_view s) {
  if (s == "none") return MomentumInit::none;
  if (s == "gi") return MomentumInit::gi;
  if (s == "rgi") return MomentumInit::rgi;
  throw ConfigError("unknown momentum init '" + std::string(s) + "'");
}

struct MethodParams {
  double ni_lookahead = 1.6 / 255.0;
  double pi_beta = 2.5;
  std::size_t pi_kernel = 3;
  std::size_t emi_samples = 11;
  double emi_radius = 7.0;
  std::size_t vmi_samples = 20;
  double vmi_beta = 1.5;
  std::size_t gimi_pre_iters = 5;  // also the warm-up length for GI/RGI
};

struct AttackConfig {
  Method method = Method::mifgsm;
  double eps = 16.0 / 255.0;
  std::size_t iters = 10;
  double step_scale = 1.0;
  double decay = 1.0;
  ScheduleSpec schedule;   // main iterate
  bool normalize = true;   // L1-normalise gradients entering momentum
  MethodParams params;

  MomentumInit init = MomentumInit::none;
  std::size_t rgi_copies = 5;

  std::size_t dual_copies = 0;  // 0 disables dual examples
  ScheduleSpec dual_schedule{ScheduleKind::identity, 0.6, Direction::increasing};
  bool clip_duals = true;
  bool random_dual_init = true;
  bool clip_warmup = true;  // project warm-up iterates (GI/RGI/GIMI)

  void validate() const {
    if (!(eps > 0.0)) throw ConfigError("eps must be positive");
    if (iters < 1) throw ConfigError("iters must be at least 1");
    if (!(step_scale > 0.0)) throw ConfigError("step_scale must be positive");
    if (!(decay >= 0.0)) throw ConfigError("decay must be nonnegative");
    if (init == MomentumInit::rgi && rgi_copies == 0) throw ConfigError("rgi needs at least one copy");
    if ((init != MomentumInit::none || method == Method::gimifgsm) && params.gimi_pre_iters == 0) {
      throw ConfigError("momentum warm-up needs at least one iteration");
    }
    if (method == Method::emifgsm && params.emi_samples == 0) throw ConfigError("emi needs samples");
    if (method == Method::vmifgsm && params.vmi_samples == 0) throw ConfigError("vmi needs samples");
  }

  /// Constant base step eps * s * (1/T): the warm-up step, equal bit for bit
  /// to every identity-schedule step.
  double base_step() const { return eps * step_scale * (1.0 / static_cast<double>(iters)); }
};

/// Random streams derived from an attack seed. Public so that reference
/// replays can reproduce the draws.
namespace stream {
inline constexpr std::uint64_t sampling = 0x5a;
inline constexpr std::uint64_t momentum_init = 0x91;
inline constexpr std::uint64_t dual_init = 0xd0;
inline constexpr std::uint64_t order = 0x0d;
inline constexpr std::uint64_t transforms = 0x7f;
}  // namespace stream

/// Per-iteration step sizes: eps * s * w_t, or a single step eps for FGSM.
/// With dual examples enabled the dual schedule drives both iterates.
inline std::vector<double> step_sizes(const AttackConfig& cfg) {
  if (cfg.method == Method::fgsm) return {cfg.eps};
  const auto w = make_schedule(cfg.dual_copies > 0 ? cfg.dual_schedule : cfg.schedule, cfg.iters);
  std::vector<double> steps(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) steps[i] = cfg.eps * cfg.step_scale * w[i];
  return steps;
}

/// Draws a start uniformly in [-eps, eps] per coordinate, then pixel-clamps.
inline Tensor random_start(const Tensor& x, double eps, Rng& rng) {
  Tensor d = Tensor::zeros_like(x);
  for (double& v : d.data()) v = rng.uniform(-eps, eps);
  return project_linf(x, d, eps);
}

/// Called with every iterate: role is "main", "dual" or "warmup".
using IterateObserver = std::function<void(std::string_view role, const Tensor& delta)>;

/// Runs T' momentum steps m <- grad + decay * m, delta <- P(delta + alpha sign m)
/// from `start` and returns the final momentum. With clip off the iterate is
/// left unprojected.
inline Tensor momentum_warmup(const GradientSource& source, const Tensor& x, std::size_t y, Tensor start,
                              std::size_t iters, double decay, double alpha, double eps, bool normalize, Rng& rng,
                              const IterateObserver& observer = {}, bool clip = true) {
  Tensor delta = std::move(start);
  Tensor m = Tensor::zeros_like(x);
  for (std::size_t t = 0; t < iters; ++t) {
    Tensor g = source.gradient(x + delta, y, rng);
    if (normalize) g = l1_normalized(g);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = g[i] + decay * m[i];
    Tensor moved = delta;
    for (std::size_t i = 0; i < moved.size(); ++i) moved[i] += alpha * sign_of(m[i]);
    delta = clip ? project_linf(x, moved, eps) : std::move(moved);
    if (observer) observer("warmup", delta);
  }
  return m;
}

enum class StartDraw { uniform, zero };

/// Random global momentum initialisation: mean of `copies` warm-up momenta,
/// each started from its own random point in the eps-ball. Start points are
/// drawn from the momentum_init stream copy by copy.
inline Tensor rgi_initialize(const GradientSource& source, const Tensor& x, std::size_t y, std::size_t copies,
                             std::size_t iters, double decay, double alpha, double eps, std::uint64_t seed,
                             bool normalize = false, StartDraw draw = StartDraw::uniform,
                             const IterateObserver& observer = {}, bool clip = true) {
  if (copies == 0 || iters == 0) throw ConfigError("rgi needs N >= 1 and T' >= 1");
  Rng init_rng(derive_seed(seed, stream::momentum_init));
  Rng sample_rng(derive_seed(seed, stream::sampling, 1));
  std::vector<Tensor> momenta;
  momenta.reserve(copies);
  for (std::size_t n = 0; n < copies; ++n) {
    Tensor start = draw == StartDraw::uniform ? random_start(x, eps, init_rng) : Tensor::zeros_like(x);
    momenta.push_back(momentum_warmup(source, x, y, std::move(start), iters, decay, alpha, eps, normalize,
                                      sample_rng, observer, clip));
  }
  return mean_of(momenta);
}

inline Tensor rgi_initialize(const Model& model, const Tensor& x, std::size_t y, std::size_t copies,
                             std::size_t iters, double decay, double alpha, double eps, std::uint64_t seed,
                             bool normalize = false, StartDraw draw = StartDraw::uniform, bool clip = true) {
  return rgi_initialize(ModelGradient(model), x, y, copies, iters, decay, alpha, eps, seed, normalize, draw, {}, clip);
}

/// Everything an attack carries between iterations.
struct PerturbationState {
  Tensor delta;
  Tensor momentum;
  std::size_t iter = 0;
  std::vector<Tensor> duals;
  Tensor variance;       // VMI
  Tensor prev_grad;      // EMI sampling direction
  Tensor amplification;  // PI accumulated overflow
};

/// One attack instance on one image. Holds the method's update rule and
/// gradient estimator so that the single-model, dual-example and
/// longitudinal-ensemble drivers share them.
class IterativeAttack {
 public:
  IterativeAttack(const AttackConfig& cfg, const Tensor& x, std::size_t y, std::uint64_t seed,
                  IterateObserver observer = {})
      : cfg_(cfg),
        x_(x),
        y_(y),
        seed_(seed),
        observer_(std::move(observer)),
        sample_rng_(derive_seed(seed, stream::sampling)) {
    cfg_.validate();
    if (cfg_.method == Method::fgsm) cfg_.iters = 1;
    state_.delta = Tensor::zeros_like(x);
    state_.momentum = Tensor::zeros_like(x);
    state_.variance = Tensor::zeros_like(x);
    state_.amplification = Tensor::zeros_like(x);
    steps_ = step_sizes(cfg_);
  }

  const AttackConfig& config() const noexcept { return cfg_; }
  const PerturbationState& state() const noexcept { return state_; }
  const std::vector<double>& steps() const noexcept { return steps_; }
  Rng& sample_rng() noexcept { return sample_rng_; }

  bool uses_momentum() const { return cfg_.method != Method::ifgsm && cfg_.method != Method::fgsm; }

  /// Sets the initial momentum (GIMI warm-up, GI/RGI tricks). No-op for
  /// methods without momentum.
  void initialize_momentum(const GradientSource& source) {
    if (!uses_momentum()) return;
    const bool warm = cfg_.method == Method::gimifgsm || cfg_.init != MomentumInit::none;
    if (!warm) return;
    const double alpha = cfg_.base_step();
    if (cfg_.init == MomentumInit::rgi) {
      state_.momentum = rgi_initialize(source, x_, y_, cfg_.rgi_copies, cfg_.params.gimi_pre_iters, cfg_.decay,
                                       alpha, cfg_.eps, seed_, cfg_.normalize, StartDraw::uniform, observer_,
                                       cfg_.clip_warmup);
    } else {
      Rng rng(derive_seed(seed_, stream::sampling, 1));
      state_.momentum = momentum_warmup(source, x_, y_, Tensor::zeros_like(x_), cfg_.params.gimi_pre_iters,
                                        cfg_.decay, alpha, cfg_.eps, cfg_.normalize, rng, observer_, cfg_.clip_warmup);
    }
  }

  struct Estimate {
    Tensor grad;
    Tensor variance;  // VMI only
  };

  /// The method's gradient estimate with the iterate at `point` (a delta).
  Estimate estimate(const GradientSource& source, const Tensor& point, double step) {
    Estimate est;
    switch (cfg_.method) {
      case Method::nifgsm: {
        Tensor ahead = x_ + point;
        for (std::size_t i = 0; i < ahead.size(); ++i)
          ahead[i] += cfg_.params.ni_lookahead * sign_of(state_.momentum[i]);
        est.grad = source.gradient(ahead, y_, sample_rng_);
        break;
      }
      case Method::emifgsm: {
        const std::size_t n = cfg_.params.emi_samples;
        const double mean_abs = state_.prev_grad.empty() ? 0.0 : l1_norm(state_.prev_grad) /
                                                                     static_cast<double>(state_.prev_grad.size());
        const Tensor base = x_ + point;
        if (mean_abs == 0.0 || n == 1) {
          est.grad = source.gradient(base, y_, sample_rng_);
          break;
        }
        std::vector<Tensor> gs;
        gs.reserve(n);
        for (std::size_t k = 0; k < n; ++k) {
          const double c = -cfg_.params.emi_radius +
                           2.0 * cfg_.params.emi_radius * static_cast<double>(k) / static_cast<double>(n - 1);
          Tensor p = base;
          axpy(p, c * step / mean_abs, state_.prev_grad);
          gs.push_back(source.gradient(p, y_, sample_rng_));
        }
        est.grad = mean_of(gs);
        break;
      }
      case Method::vmifgsm: {
        const Tensor base = x_ + point;
        const Tensor g = source.gradient(base, y_, sample_rng_);
        const double radius = cfg_.params.vmi_beta * cfg_.eps;
        std::vector<Tensor> gs;
        gs.reserve(cfg_.params.vmi_samples);
        for (std::size_t k = 0; k < cfg_.params.vmi_samples; ++k) {
          Tensor p = base;
          for (double& v : p.data()) v += sample_rng_.uniform(-radius, radius);
          gs.push_back(source.gradient(p, y_, sample_rng_));
        }
        est.variance = mean_of(gs) - g;
        est.grad = g + state_.variance;
        break;
      }
      default:
        est.grad = source.gradient(x_ + point, y_, sample_rng_);
        break;
    }
    return est;
  }

  /// Applies the method's update rule to the main iterate.
  void update(const Tensor& grad, double step, const Tensor* new_variance = nullptr) {
    PerturbationState& s = state_;
    if (cfg_.method == Method::ifgsm || cfg_.method == Method::fgsm) {
      s.momentum = grad;
    } else {
      const Tensor g = cfg_.normalize ? l1_normalized(grad) : grad;
      for (std::size_t i = 0; i < g.size(); ++i) s.momentum[i] = cfg_.decay * s.momentum[i] + g[i];
    }
    if (cfg_.method == Method::emifgsm) s.prev_grad = grad;
    if (cfg_.method == Method::vmifgsm && new_variance) s.variance = *new_variance;

    Tensor moved = s.delta;
    if (cfg_.method == Method::pifgsm) {
      const double amp_step = step * cfg_.params.pi_beta;
      for (std::size_t i = 0; i < moved.size(); ++i) s.amplification[i] += amp_step * sign_of(s.momentum[i]);
      Tensor cut = Tensor::zeros_like(moved);
      for (std::size_t i = 0; i < cut.size(); ++i) {
        const double a = s.amplification[i];
        cut[i] = sign_of(a) * std::max(std::abs(a) - cfg_.eps, 0.0);
      }
      const Tensor spread = neighbor_spread(cut, cfg_.params.pi_kernel);
      for (std::size_t i = 0; i < moved.size(); ++i) {
        const double projection = amp_step * sign_of(spread[i]);
        s.amplification[i] += projection;
        moved[i] += amp_step * sign_of(s.momentum[i]) + projection;
      }
    } else {
      for (std::size_t i = 0; i < moved.size(); ++i) moved[i] += step * sign_of(s.momentum[i]);
    }
    s.delta = project_linf(x_, moved, cfg_.eps);
    ++s.iter;
    if (observer_) observer_("main", s.delta);
  }

  /// Full run against one gradient source.
  Tensor run(const GradientSource& source) {
    initialize_momentum(source);
    if (cfg_.dual_copies == 0) {
      for (double step : steps_) {
        Estimate est = estimate(source, state_.delta, step);
        update(est.grad, step, est.variance.empty() ? nullptr : &est.variance);
      }
      return state_.delta;
    }

    Rng dual_rng(derive_seed(seed_, stream::dual_init));
    state_.duals.clear();
    for (std::size_t n = 0; n < cfg_.dual_copies; ++n) {
      state_.duals.push_back(cfg_.random_dual_init ? random_start(x_, cfg_.eps, dual_rng) : Tensor::zeros_like(x_));
    }
    for (double step : steps_) {
      std::vector<Tensor> grads, variances;
      for (Tensor& dual : state_.duals) {
        Estimate est = estimate(source, dual, step);
        for (std::size_t i = 0; i < dual.size(); ++i) dual[i] += step * sign_of(est.grad[i]);
        if (cfg_.clip_duals) dual = project_linf(x_, dual, cfg_.eps);
        if (observer_) observer_("dual", dual);
        grads.push_back(std::move(est.grad));
        if (!est.variance.empty()) variances.push_back(std::move(est.variance));
      }
      const Tensor g = mean_of(grads);
      if (variances.empty()) {
        update(g, step);
      } else {
        const Tensor v = mean_of(variances);
        update(g, step, &v);
      }
    }
    return state_.delta;
  }

  /// Depthwise spread of each pixel's value onto its k x k neighbours
  /// (centre excluded), uniform weights 1 / (k^2 - 1), zero padding.
  static Tensor neighbor_spread(const Tensor& t, std::size_t k) {
    Tensor out = Tensor::zeros_like(t);
    if (k <= 1 || t.rank() != 3) return out;
    const std::size_t ch = t.shape()[0], h = t.shape()[1], w = t.shape()[2];
    const long r = static_cast<long>(k / 2);
    const double wt = 1.0 / static_cast<double>(k * k - 1);
    for (std::size_t c = 0; c < ch; ++c)
      for (long i = 0; i < static_cast<long>(h); ++i)
        for (long j = 0; j < static_cast<long>(w); ++j) {
          double acc = 0.0;
          for (long a = -r; a <= r; ++a)
            for (long b = -r; b <= r; ++b) {
              if (a == 0 && b == 0) continue;
              const long ii = i + a, jj = j + b;
              if (ii < 0 || jj < 0 || ii >= static_cast<long>(h) || jj >= static_cast<long>(w)) continue;
              acc += t.at(c, static_cast<std::size_t>(ii), static_cast<std::size_t>(jj));
            }
          out.at(c, static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = wt * acc;
        }
    return out;
  }

 private:
  AttackConfig cfg_;
  Tensor x_;
  std::size_t y_;
  std::uint64_t seed_;
  IterateObserver observer_;
  Rng sample_rng_;
  PerturbationState state_;
  std::vector<double> steps_;
};

/// Runs the configured attack and returns the final perturbation.
inline Tensor run_attack(const AttackConfig& cfg, const GradientSource& source, const Tensor& x, std::size_t y,
                         std::uint64_t seed, IterateObserver observer = {}) {
  IterativeAttack attack(cfg, x, y, seed, std::move(observer));
  return attack.run(source);
}

inline Tensor run_attack(const AttackConfig& cfg, const Model& model, const Tensor& x, std::size_t y,
                         std::uint64_t seed, IterateObserver observer = {}) {
  return run_attack(cfg, ModelGradient(model), x, y, seed, std::move(observer));
}

/// Dual examples with ensemble: N dual iterates driven by I-FGSM steps on
/// `schedule`, whose mean gradient feeds the main iterate's update rule.
inline Tensor dual_example_attack(const GradientSource& source, const Tensor& x, std::size_t y, AttackConfig cfg,
                                  std::size_t copies, const ScheduleSpec& schedule, std::uint64_t seed,
                                  IterateObserver observer = {}) {
  if (copies == 0) throw ConfigError("dual example needs N >= 1");
  cfg.dual_copies = copies;
  cfg.dual_schedule = schedule;
  return run_attack(cfg, source, x, y, seed, std::move(observer));
}

inline Tensor dual_example_attack(const Model& model, const Tensor& x, std::size_t y, const AttackConfig& cfg,
                                  std::size_t copies, const ScheduleSpec& schedule, std::uint64_t seed) {
  return dual_example_attack(ModelGradient(model), x, y, cfg, copies, schedule, seed);
}

}  // namespace tal
