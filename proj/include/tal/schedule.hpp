#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "tal/error.hpp"

namespace tal {

enum class ScheduleKind { identity, log, linear, exp, pvalue };
enum class Direction { decreasing, increasing };

inline std::string_view to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::identity: return "identity";
    case ScheduleKind::log: return "log";
    case ScheduleKind::linear: return "linear";
    case ScheduleKind::exp: return "exp";
    case ScheduleKind::pvalue: return "pvalue";
  }
  return "?";
}

inline ScheduleKind parse_schedule_kind(std::string_view s) {
  if (s == "identity" || s == "ori" || s == "none") return ScheduleKind::identity;
  if (s == "log") return ScheduleKind::log;
  if (s == "linear") return ScheduleKind::linear;
  if (s == "exp") return ScheduleKind::exp;
  if (s == "pvalue") return ScheduleKind::pvalue;
  throw ConfigError("unknown schedule kind '" + std::string(s) + "'");
}

inline std::string_view to_string(Direction d) { return d == Direction::increasing ? "increasing" : "decreasing"; }

inline Direction parse_direction(std::string_view s) {
  if (s == "decreasing") return Direction::decreasing;
  if (s == "increasing") return Direction::increasing;
  throw ConfigError("unknown schedule direction '" + std::string(s) + "'");
}

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::identity;
  double p = 0.6;  // pvalue exponent
  Direction direction = Direction::decreasing;
};

/// Normalised step weights w_1..w_T (sum 1). With d_i = T - i + 1:
///   identity 1, log ln(d_i + 1), linear d_i, exp e^{d_i}, pvalue 1 / i^p.
/// The decreasing kinds are nonincreasing in i; `increasing` reverses the
/// list.
inline std::vector<double> make_schedule(const ScheduleSpec& spec, std::size_t T) {
  if (T == 0) throw ConfigError("schedule length must be at least 1");
  if (spec.kind == ScheduleKind::pvalue && !(spec.p >= 0.0)) throw ConfigError("pvalue exponent must be >= 0");
  std::vector<double> w(T);
  const double td = static_cast<double>(T);
  for (std::size_t idx = 0; idx < T; ++idx) {
    const double i = static_cast<double>(idx + 1);
    const double d = td - i + 1.0;
    switch (spec.kind) {
      case ScheduleKind::identity: w[idx] = 1.0; break;
      case ScheduleKind::log: w[idx] = std::log(d + 1.0); break;
      case ScheduleKind::linear: w[idx] = d; break;
      case ScheduleKind::exp: w[idx] = std::exp(d - td); break;  // shifted by e^{-T}; cancels on normalisation
      case ScheduleKind::pvalue: w[idx] = 1.0 / std::pow(i, spec.p); break;
    }
  }
  double total = 0.0;
  for (double v : w) total += v;
  for (double& v : w) v /= total;
  if (spec.direction == Direction::increasing) std::reverse(w.begin(), w.end());
  return w;
}

}  // namespace tal
