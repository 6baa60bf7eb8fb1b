#pragma once

// 1-D marginal distribution on an ordered axis, shared by the quantum
// marginals and the classical histogram estimator.

#include <cstddef>
#include <vector>

#include "fermi/errors.hpp"

namespace fermi {

/// Trapezoid integral of y over x (both size >= 2, x strictly increasing).
inline double trapezoid(const std::vector<double>& x, const std::vector<double>& y) {
  double acc = 0.0;
  for (std::size_t i = 0; i + 1 < x.size(); ++i)
    acc += 0.5 * (y[i] + y[i + 1]) * (x[i + 1] - x[i]);
  return acc;
}

struct DistributionProfile {
  std::vector<double> axis;     // strictly increasing (z or p, scaled)
  std::vector<double> density;  // >= 0
  double total = 0.0;           // trapezoid integral of density over axis

  void validate() const {
    if (axis.size() != density.size() || axis.size() < 2)
      throw InvalidParameterError("DistributionProfile: axis/density size mismatch");
    for (std::size_t i = 0; i + 1 < axis.size(); ++i)
      if (!(axis[i] < axis[i + 1]))
        throw InvalidParameterError("DistributionProfile: axis must be strictly increasing");
    for (double d : density)
      if (d < 0.0)
        throw InvalidParameterError("DistributionProfile: negative density");
  }
};

}  // namespace fermi
