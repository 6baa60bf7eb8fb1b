#pragma once

// Conversion between laboratory units and the dimensionless variables of the
// modulated-mirror bouncer, plus the scaled Hamiltonian shared by the
// classical and quantum propagators.
//
// Scaled coordinates:  z = z~ w^2/g,  p = p~ w/(m g),  t = w t~.
// Control parameters:  V0 = hbar w^2 Omega_eff / (4 m g^2),
//                      kappa = 2 k g / w^2,
//                      lambda = w^2 eps / (2 k g),
//                      kbar = hbar w^3 / (m g^2).
// In these variables  H = p^2/2 + z + V0 exp(-kappa (z - lambda sin t)).

#include <cmath>
#include <string>

#include "fermi/errors.hpp"

namespace fermi {

inline constexpr double kDefaultHbar = 1.054571817e-34;  // J s
inline constexpr double kDefaultGravity = 9.8;           // m/s^2

/// The exponential mirror term saturates here instead of overflowing, so
/// integrators see a finite stiff wall.
inline constexpr double kWallSaturation = 1e300;

struct LabParams {
  double mass = 0.0;             // kg
  double gravity = kDefaultGravity;
  double decay_wavenumber = 0.0; // k, 1/m (evanescent decay length k^-1)
  double mod_frequency = 0.0;    // omega, rad/s
  double mod_amplitude = 0.0;    // eps, dimensionless exponent modulation depth
  double rabi_eff = 0.0;         // Omega_eff, rad/s
  double hbar = kDefaultHbar;    // J s, configurable for tests

  void validate() const {
    auto positive = [](double v, const char* name) {
      if (!(v > 0.0) || !std::isfinite(v))
        throw InvalidParameterError(std::string("LabParams.") + name +
                                    " must be strictly positive");
    };
    positive(mass, "mass");
    positive(gravity, "gravity");
    positive(decay_wavenumber, "decay_wavenumber");
    positive(mod_frequency, "mod_frequency");
    positive(hbar, "hbar");
    if (mod_amplitude < 0.0 || !std::isfinite(mod_amplitude))
      throw InvalidParameterError("LabParams.mod_amplitude must be >= 0");
    if (rabi_eff < 0.0 || !std::isfinite(rabi_eff))
      throw InvalidParameterError("LabParams.rabi_eff must be >= 0");
  }
};

struct ScaledParams {
  double V0 = 0.0;      // dimensionless mirror strength
  double kappa = 1.0;   // dimensionless steepness
  double lambda = 0.0;  // dimensionless modulation strength
  double kbar = 1.0;    // dimensionless Planck constant

  void validate() const {
    if (V0 < 0.0 || !std::isfinite(V0))
      throw InvalidParameterError("ScaledParams.V0 must be >= 0");
    if (!(kappa > 0.0) || !std::isfinite(kappa))
      throw InvalidParameterError("ScaledParams.kappa must be > 0");
    if (lambda < 0.0 || !std::isfinite(lambda))
      throw InvalidParameterError("ScaledParams.lambda must be >= 0");
    if (!(kbar > 0.0) || !std::isfinite(kbar))
      throw InvalidParameterError("ScaledParams.kbar must be > 0");
  }
};

inline ScaledParams to_dimensionless(const LabParams& lab) {
  lab.validate();
  const double w = lab.mod_frequency;
  const double g = lab.gravity;
  const double m = lab.mass;
  const double k = lab.decay_wavenumber;
  ScaledParams s;
  s.V0 = lab.hbar * w * w * lab.rabi_eff / (4.0 * m * g * g);
  s.kappa = 2.0 * k * g / (w * w);
  s.lambda = w * w * lab.mod_amplitude / (2.0 * k * g);
  s.kbar = lab.hbar * w * w * w / (m * g * g);
  return s;
}

/// Anchor for the (non-injective) inverse map. mod_frequency <= 0 means
/// "derive omega from kbar"; an explicit omega must agree with
/// (kbar m g^2 / hbar)^(1/3) to 1e-9 relative.
struct LabAnchor {
  double mass = 0.0;
  double gravity = kDefaultGravity;
  double mod_frequency = 0.0;  // optional
  double hbar = kDefaultHbar;
};

inline LabParams to_lab(const ScaledParams& scaled, const LabAnchor& anchor) {
  scaled.validate();
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v))
      throw InvalidParameterError(std::string("LabAnchor.") + name +
                                  " must be strictly positive");
  };
  positive(anchor.mass, "mass");
  positive(anchor.gravity, "gravity");
  positive(anchor.hbar, "hbar");

  const double m = anchor.mass;
  const double g = anchor.gravity;
  const double w_derived = std::cbrt(scaled.kbar * m * g * g / anchor.hbar);
  double w = w_derived;
  if (anchor.mod_frequency > 0.0) {
    if (std::abs(anchor.mod_frequency - w_derived) > 1e-9 * w_derived)
      throw InvalidParameterError(
          "LabAnchor.mod_frequency is inconsistent with kbar = hbar w^3/(m g^2)");
    w = anchor.mod_frequency;
  }

  LabParams lab;
  lab.mass = m;
  lab.gravity = g;
  lab.hbar = anchor.hbar;
  lab.mod_frequency = w;
  lab.decay_wavenumber = scaled.kappa * w * w / (2.0 * g);
  lab.mod_amplitude = scaled.kappa * scaled.lambda;
  lab.rabi_eff = 4.0 * m * g * g * scaled.V0 / (anchor.hbar * w * w);
  lab.validate();
  return lab;
}

/// Instantaneous mirror position lambda sin t.
inline double mirror_position(double lambda, double t) {
  return lambda * std::sin(t);
}

/// Mirror velocity d/dt [lambda sin t].
inline double mirror_velocity(double lambda, double t) {
  return lambda * std::cos(t);
}

/// scale * e^a, saturated at kWallSaturation. scale >= 0.
inline double saturated_wall(double scale, double a) {
  if (scale == 0.0) return 0.0;
  // log-domain overflow check: ln(scale) + a vs ln(1e300)
  if (a + std::log(scale) > 690.0) return kWallSaturation;
  const double v = scale * std::exp(a);
  return v > kWallSaturation ? kWallSaturation : v;
}

/// Potential term V0 exp(-kappa (z - lambda sin t)), saturated.
inline double scaled_potential_wall(double z, double t, const ScaledParams& p) {
  return saturated_wall(p.V0, -p.kappa * (z - mirror_position(p.lambda, t)));
}

/// Full scaled potential V(z,t) = z + wall term.
inline double scaled_potential(double z, double t, const ScaledParams& p) {
  return z + scaled_potential_wall(z, t, p);
}

/// Scaled force F(z,t) = -dV/dz = -1 + V0 kappa exp(-kappa (z - lambda sin t)),
/// wall term saturated.
inline double scaled_force(double z, double t, const ScaledParams& p) {
  return -1.0 +
         saturated_wall(p.V0 * p.kappa, -p.kappa * (z - mirror_position(p.lambda, t)));
}

/// H(z,p,t) = p^2/2 + z + V0 exp(-kappa (z - lambda sin t)).
inline double scaled_hamiltonian_value(double z, double p, double t,
                                       const ScaledParams& params) {
  params.validate();
  return 0.5 * p * p + scaled_potential(z, t, params);
}

}  // namespace fermi
