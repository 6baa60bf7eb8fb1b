#pragma once

// Acceleration-window arithmetic: s pi <= lambda < sqrt(1 + (s pi)^2) for
// s in {0, 1/2, 1, 3/2, ...}. Windows are half-open [lower, upper), pairwise
// disjoint, and ordered in s.

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "fermi/errors.hpp"

namespace fermi {

struct AccelWindow {
  double s = 0.0;      // window index, non-negative multiple of 1/2
  double lower = 0.0;  // s pi, inclusive
  double upper = 0.0;  // sqrt(1 + (s pi)^2), exclusive

  bool contains(double lambda) const { return lower <= lambda && lambda < upper; }
};

namespace detail {
inline void require_half_integer_index(double s) {
  const double two_s = 2.0 * s;
  if (!(s >= 0.0) || !std::isfinite(s) || two_s != std::floor(two_s))
    throw InvalidIndexError("window index s must be a non-negative multiple of 1/2 (got " +
                            std::to_string(s) + ")");
}
}  // namespace detail

inline AccelWindow window_bounds(double s) {
  detail::require_half_integer_index(s);
  const double sp = s * std::numbers::pi;
  return AccelWindow{s, sp, std::hypot(1.0, sp)};
}

/// The unique window with index <= s_max containing lambda, if any. The
/// degenerate s = 0 window [0, 1) participates only when include_s0 is set;
/// classification starts at s = 1/2 otherwise.
inline std::optional<AccelWindow> classify(double lambda, double s_max = 64.0,
                                           bool include_s0 = false) {
  if (lambda < 0.0 || !std::isfinite(lambda))
    throw InvalidParameterError("classify: lambda must be finite and >= 0");
  detail::require_half_integer_index(s_max);
  for (double s = include_s0 ? 0.0 : 0.5; s <= s_max; s += 0.5) {
    const AccelWindow w = window_bounds(s);
    if (lambda < w.lower) break;  // windows are ordered; no later window can match
    if (w.contains(lambda)) return w;
  }
  return std::nullopt;
}

/// All windows with lower <= lambda_max, ascending in s.
inline std::vector<AccelWindow> enumerate_windows(double lambda_max,
                                                  bool include_s0 = false) {
  if (lambda_max < 0.0 || !std::isfinite(lambda_max))
    throw InvalidParameterError("enumerate_windows: lambda_max must be finite and >= 0");
  std::vector<AccelWindow> out;
  for (double s = include_s0 ? 0.0 : 0.5;; s += 0.5) {
    const AccelWindow w = window_bounds(s);
    if (w.lower > lambda_max) break;
    out.push_back(w);
  }
  return out;
}

}  // namespace fermi
