#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "tal/attack.hpp"
#include "tal/ensemble.hpp"
#include "tal/error.hpp"
#include "tal/schedule.hpp"
#include "tal/transforms.hpp"

namespace tal {

/// Sectioned key = value file. '#' and ';' start comments; keys outside a
/// section are rejected.
class IniFile {
 public:
  using Section = std::map<std::string, std::string>;

  static IniFile parse(std::string_view text, const std::string& origin = "<config>") {
    IniFile ini;
    std::string section;
    std::size_t line_no = 0;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
      ++line_no;
      const auto where = [&] { return origin + ":" + std::to_string(line_no) + ": "; };
      const std::string s = trim(strip_comment(line));
      if (s.empty()) continue;
      if (s.front() == '[') {
        if (s.back() != ']') throw ConfigError(where() + "unterminated section header");
        section = trim(s.substr(1, s.size() - 2));
        if (!is_known_section(section)) throw ConfigError(where() + "unknown section [" + section + "]");
        ini.sections_[section];
        continue;
      }
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError(where() + "expected key = value");
      if (section.empty()) throw ConfigError(where() + "key outside of a section");
      const std::string key = trim(s.substr(0, eq));
      if (key.empty()) throw ConfigError(where() + "empty key");
      ini.sections_[section][key] = trim(s.substr(eq + 1));
    }
    return ini;
  }

  static IniFile load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read config file '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse(ss.str(), path);
  }

  static bool is_known_section(const std::string& s) {
    return s == "attack" || s == "transform" || s == "ensemble" || s == "data" || s == "output";
  }

  /// Applies "section.key" = value, as given on the command line.
  void set(const std::string& dotted, const std::string& value) {
    const auto dot = dotted.find('.');
    if (dot == std::string::npos) throw ConfigError("override '" + dotted + "' must look like section.key");
    const std::string section = dotted.substr(0, dot);
    if (!is_known_section(section)) throw ConfigError("unknown section in override '" + dotted + "'");
    sections_[section][dotted.substr(dot + 1)] = value;
  }

  bool has(const std::string& section, const std::string& key) const {
    auto it = sections_.find(section);
    return it != sections_.end() && it->second.count(key) != 0;
  }

  const std::string* get(const std::string& section, const std::string& key) const {
    auto it = sections_.find(section);
    if (it == sections_.end()) return nullptr;
    auto kv = it->second.find(key);
    return kv == it->second.end() ? nullptr : &kv->second;
  }

  const std::map<std::string, Section>& sections() const noexcept { return sections_; }

  static std::string trim(std::string_view s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return std::string(s.substr(a, b - a));
  }

 private:
  static std::string strip_comment(const std::string& line) {
    const auto pos = line.find_first_of("#;");
    return pos == std::string::npos ? line : line.substr(0, pos);
  }

  std::map<std::string, Section> sections_;
};

namespace parse {

inline double real(const std::string& key, const std::string& v) {
  // Accepts plain numbers and fractions such as 16/255.
  const auto slash = v.find('/');
  if (slash != std::string::npos) return real(key, v.substr(0, slash)) / real(key, v.substr(slash + 1));
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(d)) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  }
}

inline std::uint64_t integer(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  const auto res = std::from_chars(v.data(), end, out);
  if (res.ec != std::errc() || res.ptr != end) {
    throw ConfigError("'" + key + "' expects a nonnegative integer, got '" + v + "'");
  }
  return out;
}

inline bool boolean(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "yes" || v == "1") return true;
  if (v == "false" || v == "off" || v == "no" || v == "0") return false;
  throw ConfigError("'" + key + "' expects true/false, got '" + v + "'");
}

inline std::vector<std::string> list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(v);
  while (std::getline(in, item, ',')) {
    item = IniFile::trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace parse

/// Ensemble settings as configured: model files plus the fusion options.
struct EnsembleSettings {
  std::vector<std::string> surrogates;  // empty: single-surrogate attack
  Fusion fusion = Fusion::logit;
  std::vector<double> weights;
  double tau = 0.1;
  bool ga = false;
  ConflictRule conflict_rule = ConflictRule::cosine;
  AitMode ait = AitMode::off;
  std::vector<AitKind> ait_pool{std::begin(kAllAitKinds), std::end(kAllAitKinds)};
  bool ms = false;
};

struct ExperimentConfig {
  AttackConfig attack;
  TransformSpec transform;
  EnsembleSettings ensemble;
  std::string dataset;
  std::string surrogate;
  std::vector<std::string> victims;
  std::size_t samples = 500;
  std::size_t offset = 0;
  std::uint64_t seed = 0;
  std::string output;  // CSV path; empty writes to stdout
  bool timing = false;
  std::string axis = "none";
  std::string axis_value;
};

/// Hyper-parameter "adjustment" presets tuned against a remote API in the
/// literature. Methods without a preset are returned unchanged.
inline AttackConfig adjustment_preset(AttackConfig a) {
  switch (a.method) {
    case Method::ifgsm: a.iters = 2; break;
    case Method::mifgsm: a.iters = 5; a.decay = 1.2; break;
    case Method::pifgsm: a.iters = 18; a.step_scale = 0.8; a.decay = 0.95; break;
    case Method::vmifgsm: a.iters = 32; a.decay = 1.0; a.params.vmi_samples = 15; break;
    case Method::gimifgsm: a.iters = 4; a.params.gimi_pre_iters = 9; a.decay = 1.3; break;
    default: break;
  }
  return a;
}

namespace detail {

template <class Fn>
void each_key(const IniFile& ini, const std::string& section, Fn&& fn) {
  auto it = ini.sections().find(section);
  if (it == ini.sections().end()) return;
  for (const auto& [k, v] : it->second) fn(k, v, section + "." + k);
}

}  // namespace detail

/// Builds an experiment config; unknown keys are configuration errors.
inline ExperimentConfig experiment_from_ini(const IniFile& ini) {
  ExperimentConfig c;
  AttackConfig& a = c.attack;
  detail::each_key(ini, "attack", [&](const std::string& k, const std::string& v, const std::string& q) {
    if (k == "method") a.method = parse_method(v);
    else if (k == "eps") a.eps = parse::real(q, v);
    else if (k == "iters") a.iters = parse::integer(q, v);
    else if (k == "step_scale") a.step_scale = parse::real(q, v);
    else if (k == "decay") a.decay = parse::real(q, v);
    else if (k == "schedule") a.schedule.kind = parse_schedule_kind(v);
    else if (k == "schedule_p") a.schedule.p = parse::real(q, v);
    else if (k == "schedule_direction") a.schedule.direction = parse_direction(v);
    else if (k == "normalize") a.normalize = parse::boolean(q, v);
    else if (k == "init") a.init = parse_momentum_init(v);
    else if (k == "rgi_copies") a.rgi_copies = parse::integer(q, v);
    else if (k == "warmup_iters") a.params.gimi_pre_iters = parse::integer(q, v);
    else if (k == "dual_copies") a.dual_copies = parse::integer(q, v);
    else if (k == "dual_schedule") a.dual_schedule.kind = parse_schedule_kind(v);
    else if (k == "dual_schedule_p") a.dual_schedule.p = parse::real(q, v);
    else if (k == "dual_direction") a.dual_schedule.direction = parse_direction(v);
    else if (k == "clip_duals") a.clip_duals = parse::boolean(q, v);
    else if (k == "dual_random_init") a.random_dual_init = parse::boolean(q, v);
    else if (k == "clip_warmup") a.clip_warmup = parse::boolean(q, v);
    else if (k == "ni_lookahead") a.params.ni_lookahead = parse::real(q, v);
    else if (k == "pi_beta") a.params.pi_beta = parse::real(q, v);
    else if (k == "pi_kernel") a.params.pi_kernel = parse::integer(q, v);
    else if (k == "emi_samples") a.params.emi_samples = parse::integer(q, v);
    else if (k == "emi_radius") a.params.emi_radius = parse::real(q, v);
    else if (k == "vmi_samples") a.params.vmi_samples = parse::integer(q, v);
    else if (k == "vmi_beta") a.params.vmi_beta = parse::real(q, v);
    else if (k == "preset") {
      if (v != "none" && v != "adjustment") throw ConfigError("'" + q + "' expects none or adjustment");
    } else throw ConfigError("unknown key '" + q + "'");
  });
  if (const std::string* preset = ini.get("attack", "preset"); preset && *preset == "adjustment") {
    // Preset values fill in whatever the file leaves unset.
    const AttackConfig p = adjustment_preset(a);
    if (!ini.has("attack", "iters")) a.iters = p.iters;
    if (!ini.has("attack", "decay")) a.decay = p.decay;
    if (!ini.has("attack", "step_scale")) a.step_scale = p.step_scale;
    if (!ini.has("attack", "vmi_samples")) a.params.vmi_samples = p.params.vmi_samples;
    if (!ini.has("attack", "warmup_iters")) a.params.gimi_pre_iters = p.params.gimi_pre_iters;
  }
  TransformSpec& t = c.transform;
  detail::each_key(ini, "transform", [&](const std::string& k, const std::string& v, const std::string& q) {
    if (k == "kind") t.kind = parse_transform_kind(v);
    else if (k == "copies") t.copies = parse::integer(q, v);
    else if (k == "rho") t.rho = parse::real(q, v);
    else if (k == "dim_pad") t.dim_pad = parse::real(q, v);
    else if (k == "dim_prob") t.dim_prob = parse::real(q, v);
    else if (k == "tim_kernel") t.tim_kernel = parse::integer(q, v);
    else if (k == "tim_sigma") t.tim_sigma = parse::real(q, v);
    else if (k == "sim_scales") t.sim_scales = parse::integer(q, v);
    else if (k == "admix_eta") t.admix_eta = parse::real(q, v);
    else if (k == "admix_samples") t.admix_samples = parse::integer(q, v);
    else if (k == "ssa_sigma") t.ssa_sigma = parse::real(q, v);
    else if (k == "ssa_amp") t.ssa_amp = parse::real(q, v);
    else if (k == "dropout_frac") t.dropout_frac = parse::real(q, v);
    else throw ConfigError("unknown key '" + q + "'");
  });
  EnsembleSettings& e = c.ensemble;
  detail::each_key(ini, "ensemble", [&](const std::string& k, const std::string& v, const std::string& q) {
    if (k == "surrogates") e.surrogates = parse::list(v);
    else if (k == "fusion") e.fusion = parse_fusion(v);
    else if (k == "weights") {
      e.weights.clear();
      for (const auto& w : parse::list(v)) e.weights.push_back(parse::real(q, w));
    } else if (k == "tau") e.tau = parse::real(q, v);
    else if (k == "ga") e.ga = parse::boolean(q, v);
    else if (k == "conflict_rule") {
      if (v == "cosine") e.conflict_rule = ConflictRule::cosine;
      else if (v == "sign") e.conflict_rule = ConflictRule::sign;
      else throw ConfigError("'" + q + "' expects cosine or sign");
    } else if (k == "ait") {
      if (v == "off") e.ait = AitMode::off;
      else if (v == "aligned") e.ait = AitMode::aligned;
      else if (v == "async") e.ait = AitMode::async;
      else throw ConfigError("'" + q + "' expects off, aligned or async");
    } else if (k == "ait_pool") {
      e.ait_pool.clear();
      for (const auto& s : parse::list(v)) e.ait_pool.push_back(parse_ait_kind(s));
    } else if (k == "ms") e.ms = parse::boolean(q, v);
    else throw ConfigError("unknown key '" + q + "'");
  });
  detail::each_key(ini, "data", [&](const std::string& k, const std::string& v, const std::string& q) {
    if (k == "dataset") c.dataset = v;
    else if (k == "surrogate") c.surrogate = v;
    else if (k == "victims") c.victims = parse::list(v);
    else if (k == "samples") c.samples = parse::integer(q, v);
    else if (k == "offset") c.offset = parse::integer(q, v);
    else if (k == "seed") c.seed = parse::integer(q, v);
    else throw ConfigError("unknown key '" + q + "'");
  });
  detail::each_key(ini, "output", [&](const std::string& k, const std::string& v, const std::string& q) {
    if (k == "csv") c.output = v;
    else if (k == "timing") c.timing = parse::boolean(q, v);
    else throw ConfigError("unknown key '" + q + "'");
  });
  c.transform.eps = c.attack.eps;
  return c;
}

inline std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Canonical, fully explicit rendering of a config (every key, fixed order).
/// Used as the config echo and hashed into the run id.
inline std::string canonical_config(const ExperimentConfig& c) {
  std::ostringstream o;
  const AttackConfig& a = c.attack;
  auto join = [](const std::vector<std::string>& xs) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + xs[i];
    return s;
  };
  o << "[attack]\n"
    << "method = " << to_string(a.method) << "\neps = " << format_real(a.eps) << "\niters = " << a.iters
    << "\nstep_scale = " << format_real(a.step_scale) << "\ndecay = " << format_real(a.decay)
    << "\nschedule = " << to_string(a.schedule.kind) << "\nschedule_p = " << format_real(a.schedule.p)
    << "\nschedule_direction = " << to_string(a.schedule.direction) << "\nnormalize = " << a.normalize
    << "\ninit = " << to_string(a.init) << "\nrgi_copies = " << a.rgi_copies
    << "\nwarmup_iters = " << a.params.gimi_pre_iters << "\ndual_copies = " << a.dual_copies
    << "\ndual_schedule = " << to_string(a.dual_schedule.kind)
    << "\ndual_schedule_p = " << format_real(a.dual_schedule.p)
    << "\ndual_direction = " << to_string(a.dual_schedule.direction) << "\nclip_duals = " << a.clip_duals
    << "\ndual_random_init = " << a.random_dual_init << "\nclip_warmup = " << a.clip_warmup
    << "\nni_lookahead = " << format_real(a.params.ni_lookahead)
    << "\npi_beta = " << format_real(a.params.pi_beta) << "\npi_kernel = " << a.params.pi_kernel
    << "\nemi_samples = " << a.params.emi_samples << "\nemi_radius = " << format_real(a.params.emi_radius)
    << "\nvmi_samples = " << a.params.vmi_samples << "\nvmi_beta = " << format_real(a.params.vmi_beta) << "\n";
  const TransformSpec& t = c.transform;
  o << "[transform]\nkind = " << to_string(t.kind) << "\ncopies = " << t.copies << "\nrho = " << format_real(t.rho)
    << "\ndim_pad = " << format_real(t.dim_pad) << "\ndim_prob = " << format_real(t.dim_prob)
    << "\ntim_kernel = " << t.tim_kernel << "\ntim_sigma = " << format_real(t.tim_sigma)
    << "\nsim_scales = " << t.sim_scales << "\nadmix_eta = " << format_real(t.admix_eta)
    << "\nadmix_samples = " << t.admix_samples << "\nssa_sigma = " << format_real(t.ssa_sigma)
    << "\nssa_amp = " << format_real(t.ssa_amp) << "\ndropout_frac = " << format_real(t.dropout_frac) << "\n";
  const EnsembleSettings& e = c.ensemble;
  std::vector<std::string> weights, pool;
  for (double w : e.weights) weights.push_back(format_real(w));
  for (AitKind k : e.ait_pool) pool.emplace_back(to_string(k));
  o << "[ensemble]\nsurrogates = " << join(e.surrogates) << "\nfusion = " << to_string(e.fusion)
    << "\nweights = " << join(weights) << "\ntau = " << format_real(e.tau) << "\nga = " << e.ga
    << "\nconflict_rule = " << (e.conflict_rule == ConflictRule::cosine ? "cosine" : "sign")
    << "\nait = " << (e.ait == AitMode::off ? "off" : e.ait == AitMode::aligned ? "aligned" : "async")
    << "\nait_pool = " << join(pool) << "\nms = " << e.ms << "\n";
  o << "[data]\ndataset = " << c.dataset << "\nsurrogate = " << c.surrogate << "\nvictims = " << join(c.victims)
    << "\nsamples = " << c.samples << "\noffset = " << c.offset << "\nseed = " << c.seed << "\n";
  return o.str();
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace tal
