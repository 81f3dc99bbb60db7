#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tal/attack.hpp"
#include "tal/config.hpp"
#include "tal/dataset.hpp"
#include "tal/ensemble.hpp"
#include "tal/error.hpp"
#include "tal/metrics.hpp"
#include "tal/parallel.hpp"
#include "tal/transforms.hpp"
#include "tal/weights_io.hpp"

namespace tal {

/// Loads model and dataset files once and hands out shared read-only views.
class ResourceStore {
 public:
  const Model& model(const std::string& path) {
    std::lock_guard lock(mu_);
    auto& slot = models_[path];
    if (!slot) slot = std::make_unique<Model>(load_weights(path));
    return *slot;
  }

  const Dataset& dataset(const std::string& path) {
    std::lock_guard lock(mu_);
    auto& slot = datasets_[path];
    if (!slot) slot = std::make_unique<Dataset>(load_dataset(path));
    return *slot;
  }

 private:
  std::mutex mu_;
  std::map<std::string, std::unique_ptr<Model>> models_;
  std::map<std::string, std::unique_ptr<Dataset>> datasets_;
};

/// Display name of a model file: its stem.
inline std::string model_name(const std::string& path) { return std::filesystem::path(path).stem().string(); }

struct VictimResult {
  std::string name;
  double clean_acc = 0.0;
  RateCount count;
  std::optional<double> asr;  // empty when no image is clean-correct
};

struct ImageOutcome {
  std::size_t index = 0;
  std::size_t label = 0;
  std::vector<int> fooled;  // per victim: -1 clean-misclassified, 0 resisted, 1 fooled
};

struct AttackReport {
  std::string run_id;
  std::string method;
  std::string tricks;
  std::string surrogate;
  std::string axis = "none";
  std::string axis_value;
  double clean_acc_surrogate = 0.0;
  RateCount whitebox_count;
  std::optional<double> whitebox;
  std::vector<VictimResult> victims;
  std::optional<double> mean_transfer;
  std::vector<ImageOutcome> images;
  std::string config_echo;
  std::uint64_t seed = 0;
  double wall_ms = 0.0;
  std::vector<std::string> errors;
};

/// Short ';'-joined description of the enabled tricks ("none" if plain).
inline std::string trick_flags(const ExperimentConfig& c) {
  std::vector<std::string> parts;
  const AttackConfig& a = c.attack;
  if (a.init != MomentumInit::none) parts.emplace_back(to_string(a.init));
  if (a.schedule.kind != ScheduleKind::identity || a.schedule.direction != Direction::decreasing) {
    parts.push_back("sched=" + std::string(to_string(a.schedule.kind)) +
                    (a.schedule.direction == Direction::increasing ? "-inc" : ""));
  }
  if (a.dual_copies > 0) parts.push_back("dual=" + std::to_string(a.dual_copies));
  if (!a.normalize) parts.emplace_back("raw");
  if (c.transform.kind != TransformKind::none) {
    parts.push_back("tf=" + std::string(to_string(c.transform.kind)) + "x" + std::to_string(c.transform.copies));
  }
  if (!c.ensemble.surrogates.empty()) {
    parts.push_back("ens=" + std::string(to_string(c.ensemble.fusion)));
    if (c.ensemble.ga) parts.emplace_back("ga");
    if (c.ensemble.ait == AitMode::async) parts.emplace_back("ait");
    if (c.ensemble.ait == AitMode::aligned) parts.emplace_back("tf-aligned");
    if (c.ensemble.ms) parts.emplace_back("ms");
  }
  if (parts.empty()) return "none";
  std::string s;
  for (std::size_t i = 0; i < parts.size(); ++i) s += (i ? ";" : "") + parts[i];
  return s;
}

inline std::string run_id(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(canonical_config(c))));
  return buf;
}

/// Per-image attack seed.
inline std::uint64_t image_seed(std::uint64_t base, std::size_t index) { return derive_seed(base, 0x1a6e, index); }

/// Attacks the configured surrogate(s) on `samples` images and evaluates
/// every victim. Output depends only on the config, the files and the seed;
/// the worker count never changes results.
inline AttackReport run_experiment(const ExperimentConfig& cfg, ResourceStore& store) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.attack.validate();
  cfg.transform.validate();
  if (cfg.dataset.empty()) throw ConfigError("data.dataset is not set");
  const bool ensemble = !cfg.ensemble.surrogates.empty();
  if (!ensemble && cfg.surrogate.empty()) throw ConfigError("data.surrogate is not set");
  if (ensemble && cfg.transform.kind != TransformKind::none) {
    throw UnsupportedError("transform.kind must be none for ensemble attacks; use ensemble.ait");
  }
  const Dataset& data = store.dataset(cfg.dataset);
  if (cfg.offset + cfg.samples > data.size() || cfg.samples == 0) {
    throw ConfigError("data.samples/offset select images outside the dataset (" + std::to_string(data.size()) +
                      " images)");
  }

  EnsembleSpec spec;
  std::vector<std::string> surrogate_paths = ensemble ? cfg.ensemble.surrogates : std::vector{cfg.surrogate};
  for (const auto& p : surrogate_paths) spec.models.push_back(&store.model(p));
  spec.fusion = cfg.ensemble.fusion;
  spec.weights = cfg.ensemble.weights;
  spec.tau = cfg.ensemble.tau;
  spec.ga_enabled = cfg.ensemble.ga;
  spec.conflict_rule = cfg.ensemble.conflict_rule;
  spec.ait = cfg.ensemble.ait;
  spec.ait_pool = cfg.ensemble.ait_pool;
  spec.ms_enabled = cfg.ensemble.ms;
  if (ensemble) spec.validate();
  const Model& primary = *spec.models.front();

  AdmixPool pool;
  if (cfg.transform.kind == TransformKind::admix) {
    pool.images = data.images;
    pool.labels = data.labels;
  }
  TransformSpec tf = cfg.transform;
  tf.eps = cfg.attack.eps;

  std::vector<Tensor> xs, deltas(cfg.samples);
  std::vector<std::size_t> ys;
  for (std::size_t i = 0; i < cfg.samples; ++i) {
    xs.push_back(data.images[cfg.offset + i]);
    ys.push_back(data.labels[cfg.offset + i]);
  }
  parallel_for(cfg.samples, [&](std::size_t i) {
    const std::uint64_t seed = image_seed(cfg.seed, cfg.offset + i);
    if (ensemble) {
      deltas[i] = ensemble_attack(spec, xs[i], ys[i], cfg.attack, seed);
    } else if (tf.kind == TransformKind::none) {
      deltas[i] = run_attack(cfg.attack, primary, xs[i], ys[i], seed);
    } else {
      deltas[i] = run_attack(cfg.attack, TransformedGradient(primary, tf, &pool), xs[i], ys[i], seed);
    }
  });

  AttackReport r;
  r.run_id = run_id(cfg);
  r.method = std::string(to_string(cfg.attack.method));
  r.tricks = trick_flags(cfg);
  r.axis = cfg.axis;
  r.axis_value = cfg.axis_value;
  r.seed = cfg.seed;
  r.config_echo = canonical_config(cfg);
  for (std::size_t i = 0; i < surrogate_paths.size(); ++i) r.surrogate += (i ? "+" : "") + model_name(surrogate_paths[i]);

  r.whitebox_count = success_count(primary, xs, ys, deltas);
  r.clean_acc_surrogate = static_cast<double>(r.whitebox_count.eligible) / static_cast<double>(cfg.samples);
  if (r.whitebox_count.eligible > 0) {
    r.whitebox = r.whitebox_count.rate();
  } else {
    r.errors.push_back("whitebox: no clean-correct images");
  }

  for (std::size_t i = 0; i < cfg.samples; ++i) r.images.push_back({cfg.offset + i, ys[i], {}});
  double total = 0.0;
  std::size_t defined = 0;
  for (const auto& path : cfg.victims) {
    const Model& victim = store.model(path);
    VictimResult v;
    v.name = model_name(path);
    for (std::size_t i = 0; i < cfg.samples; ++i) {
      const bool clean_ok = classify(victim, xs[i]).predicted == ys[i];
      int outcome = -1;
      if (clean_ok) {
        ++v.count.eligible;
        outcome = classify(victim, xs[i] + deltas[i]).predicted != ys[i] ? 1 : 0;
        v.count.fooled += static_cast<std::size_t>(outcome);
      }
      r.images[i].fooled.push_back(outcome);
    }
    v.clean_acc = static_cast<double>(v.count.eligible) / static_cast<double>(cfg.samples);
    if (v.count.eligible > 0) {
      v.asr = v.count.rate();
      total += *v.asr;
      ++defined;
    } else {
      r.errors.push_back("victim " + v.name + ": no clean-correct images");
    }
    r.victims.push_back(std::move(v));
  }
  if (defined > 0) r.mean_transfer = total / static_cast<double>(defined);
  if (cfg.timing) {
    r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }
  return r;
}

inline std::string csv_header() {
  return "run_id,method,tricks,axis,axis_value,surrogate,victim,clean_acc,whitebox_asr,transfer_asr,n_eval,seed,"
         "wall_ms";
}

inline std::string csv_number(const std::optional<double>& v) {
  if (!v) return "NA";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.15g", *v);
  return buf;
}

/// One row per victim plus a "mean" row (mean of the defined victim rates).
inline std::vector<std::string> csv_rows(const AttackReport& r) {
  std::vector<std::string> rows;
  char wall[32];
  std::snprintf(wall, sizeof wall, "%.0f", r.wall_ms);
  auto row = [&](const std::string& victim, std::optional<double> clean, std::optional<double> asr, std::size_t n) {
    std::ostringstream o;
    o << r.run_id << ',' << r.method << ',' << r.tricks << ',' << r.axis << ',' << r.axis_value << ','
      << r.surrogate << ',' << victim << ',' << csv_number(clean) << ',' << csv_number(r.whitebox) << ','
      << csv_number(asr) << ',' << n << ',' << r.seed << ',' << wall;
    rows.push_back(o.str());
  };
  double clean_total = 0.0;
  std::size_t n_total = 0;
  for (const auto& v : r.victims) {
    row(v.name, v.clean_acc, v.asr, v.count.eligible);
    clean_total += v.clean_acc;
    n_total += v.count.eligible;
  }
  std::optional<double> clean_mean;
  if (!r.victims.empty()) clean_mean = clean_total / static_cast<double>(r.victims.size());
  row("mean", clean_mean, r.mean_transfer, n_total);
  return rows;
}

/// Sets one sweep axis on a copy of the config.
inline ExperimentConfig with_axis(ExperimentConfig c, const std::string& axis, const std::string& value) {
  const std::string key = "sweep." + axis;
  if (axis == "iters") c.attack.iters = parse::integer(key, value);
  else if (axis == "step_scale") c.attack.step_scale = parse::real(key, value);
  else if (axis == "decay") c.attack.decay = parse::real(key, value);
  else if (axis == "copies") c.transform.copies = parse::integer(key, value);
  else if (axis == "rho") c.transform.rho = parse::real(key, value);
  else if (axis == "rgi_copies") c.attack.rgi_copies = parse::integer(key, value);
  else if (axis == "dual_copies") c.attack.dual_copies = parse::integer(key, value);
  else throw ConfigError("unknown sweep axis '" + axis + "' (iters, step_scale, decay, copies, rho, rgi_copies, dual_copies)");
  c.axis = axis;
  c.axis_value = value;
  return c;
}

/// One experiment per (method, value); rows in method-major, value order.
inline std::vector<AttackReport> sweep(const ExperimentConfig& cfg, const std::string& axis,
                                       const std::vector<std::string>& values, ResourceStore& store,
                                       const std::vector<Method>& methods = {}) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  std::vector<Method> ms = methods.empty() ? std::vector{cfg.attack.method} : methods;
  std::vector<AttackReport> out;
  for (Method m : ms) {
    ExperimentConfig base = cfg;
    base.attack.method = m;
    for (const auto& v : values) out.push_back(run_experiment(with_axis(base, axis, v), store));
  }
  return out;
}

inline std::string render_csv(const std::vector<AttackReport>& reports) {
  std::string s = csv_header() + "\n";
  for (const auto& r : reports)
    for (const auto& row : csv_rows(r)) s += row + "\n";
  return s;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write '" + path + "'");
  f << text;
  if (!f) throw IoError("write failed for '" + path + "'");
}

}  // namespace tal
