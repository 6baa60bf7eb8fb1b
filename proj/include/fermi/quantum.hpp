#pragma once

// Spectral split-operator propagation of the scaled Schroedinger equation
//
//   i kbar dpsi/dt = [ -(kbar^2/2) d^2/dz^2 + z + V0 e^{-kappa(z - lambda sin t)} ] psi
//
// Strang splitting: half potential phase at the midpoint time, full kinetic
// phase exp(-i p^2 h / (2 kbar)) in the spectral domain, half potential phase
// again. Globally second order in h for the time-dependent potential.
//
// The conjugate momentum grid is p_j = kbar (2 pi / L) j for signed integer
// frequencies j in [-n/2, n/2).

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "fermi/errors.hpp"
#include "fermi/fft.hpp"
#include "fermi/profile.hpp"
#include "fermi/scaling.hpp"

namespace fermi {

struct SpatialGrid {
  double z_min = -5.0;
  double z_max = 400.0;
  std::size_t n_points = 1u << 14;

  void validate() const {
    if (!(z_min < z_max))
      throw InvalidParameterError("SpatialGrid: z_min must be < z_max");
    if (n_points < 2 || (n_points & (n_points - 1)) != 0)
      throw InvalidParameterError("SpatialGrid: n_points must be a power of two >= 2");
  }

  double length() const { return z_max - z_min; }
  double dz() const { return length() / static_cast<double>(n_points); }
  double z(std::size_t j) const { return z_min + dz() * static_cast<double>(j); }

  /// Signed spectral frequency for DFT bin k.
  long signed_freq(std::size_t k) const {
    const long n = static_cast<long>(n_points);
    const long kk = static_cast<long>(k);
    return kk < n / 2 ? kk : kk - n;
  }
  double momentum_spacing(double kbar) const {
    return kbar * 2.0 * std::numbers::pi / length();
  }
  double momentum(std::size_t k, double kbar) const {
    return momentum_spacing(kbar) * static_cast<double>(signed_freq(k));
  }
  double momentum_max(double kbar) const {
    return momentum_spacing(kbar) * static_cast<double>(n_points / 2);
  }
};

struct WavepacketState {
  SpatialGrid grid;
  ScaledParams params;
  ComplexField amplitudes;  // psi on the grid
  double t = 0.0;
  double absorbed_norm = 0.0;  // probability removed by the boundary absorber

  /// ||psi||^2 as the Riemann sum of |psi|^2 dz.
  double norm_squared() const {
    double acc = 0.0;
    for (const auto& a : amplitudes) acc += std::norm(a);
    return acc * grid.dz();
  }
};

/// Minimum-uncertainty Gaussian, Delta z = kbar / (2 Delta p). The +-6 sigma
/// support in both z and p must fit the grid.
inline WavepacketState init_gaussian(double center_z, double center_p, double delta_p,
                                     const SpatialGrid& grid, const ScaledParams& params) {
  grid.validate();
  params.validate();
  if (!(delta_p > 0.0))
    throw InvalidParameterError("init_gaussian: delta_p must be > 0");
  const double sigma_z = params.kbar / (2.0 * delta_p);

  const auto margin_error = [](const std::string& what, double need, double have) {
    throw GridTooSmallError("init_gaussian: " + what + " support needs " +
                            std::to_string(need) + " but the grid offers " +
                            std::to_string(have));
  };
  if (center_z - 6.0 * sigma_z < grid.z_min)
    margin_error("lower z", center_z - 6.0 * sigma_z, grid.z_min);
  if (center_z + 6.0 * sigma_z > grid.z_max)
    margin_error("upper z", center_z + 6.0 * sigma_z, grid.z_max);
  const double p_nyq = grid.momentum_max(params.kbar);
  if (center_p - 6.0 * delta_p < -p_nyq)
    margin_error("lower p", center_p - 6.0 * delta_p, -p_nyq);
  if (center_p + 6.0 * delta_p > p_nyq)
    margin_error("upper p", center_p + 6.0 * delta_p, p_nyq);

  WavepacketState psi;
  psi.grid = grid;
  psi.params = params;
  psi.amplitudes.resize(grid.n_points);
  const std::complex<double> i_unit(0.0, 1.0);
  for (std::size_t j = 0; j < grid.n_points; ++j) {
    const double z = grid.z(j);
    const double u = (z - center_z) / (2.0 * sigma_z);
    psi.amplitudes[j] = std::exp(-u * u + i_unit * (center_p * (z - center_z) / params.kbar));
  }
  // normalize exactly on the grid
  const double nrm = std::sqrt(psi.norm_squared());
  for (auto& a : psi.amplitudes) a /= nrm;
  return psi;
}

struct QuantumStepOptions {
  bool absorber = false;          // cosine-ramp mask near z_max
  double absorber_fraction = 0.05;
  // probability allowed in the outer 5% of the momentum grid before the
  // propagation aborts (accelerating runs must size the grid for t_end)
  double momentum_guard_tail = 0.05;
  double momentum_guard_limit = 1e-6;
  long guard_interval_steps = 1000;
};

struct SignalSeries {
  std::vector<double> times;
  std::vector<double> mean_z;
  std::vector<double> mean_p;
  std::vector<double> var_z;   // Delta z^2
  std::vector<double> var_p;   // Delta p^2
  std::vector<double> norm;    // ||psi||^2
};

/// Drives repeated Strang steps for one (grid, params, h) combination; owns
/// the FFT plans and the cached phase tables.
class SplitOperatorStepper {
 public:
  SplitOperatorStepper(const SpatialGrid& grid, const ScaledParams& params, double h,
                       const QuantumStepOptions& opts = {})
      : grid_(grid), params_(params), h_(h), opts_(opts) {
    grid.validate();
    params.validate();
    if (!(h > 0.0)) throw InvalidParameterError("SplitOperatorStepper: h must be > 0");
    const std::size_t n = grid.n_points;
    buf_.resize(n);
    scratch_.resize(n);
    fft_ = std::make_unique<Fft1d>(buf_.data(), n);
    scratch_fft_ = std::make_unique<Fft1d>(scratch_.data(), n);

    const std::complex<double> i_unit(0.0, 1.0);
    // static gravity half-phase and kinetic full phase
    grav_half_.resize(n);
    kinetic_.resize(n);
    wall_exp_.resize(n);
    mask_.assign(n, 1.0);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j) {
      const double z = grid.z(j);
      grav_half_[j] = std::exp(-i_unit * (z * 0.5 * h / params.kbar));
      const double p = grid.momentum(j, params.kbar);
      kinetic_[j] = std::exp(-i_unit * (p * p * 0.5 * h / params.kbar)) * inv_n;
      // e^{-kappa z_j}, clamped into double range; combined with e^{kappa m}
      // per step, the product saturates via saturated_wall
      wall_exp_[j] = -params.kappa * z;
    }
    if (opts.absorber) {
      const double za = grid.z_max - opts.absorber_fraction * grid.length();
      for (std::size_t j = 0; j < n; ++j) {
        const double z = grid.z(j);
        if (z > za) {
          const double u = (z - za) / (grid.z_max - za);
          const double c = std::cos(0.5 * std::numbers::pi * u);
          mask_[j] = c * c;
        }
      }
    }
  }

  double h() const { return h_; }
  const SpatialGrid& grid() const { return grid_; }

  void load(const WavepacketState& psi) {
    if (psi.grid.n_points != grid_.n_points)
      throw InvalidParameterError("SplitOperatorStepper: grid mismatch");
    std::copy(psi.amplitudes.begin(), psi.amplitudes.end(), buf_.begin());
    t_ = psi.t;
    absorbed_ = psi.absorbed_norm;
    steps_since_guard_ = 0;
  }

  void store(WavepacketState& psi) const {
    psi.grid = grid_;
    psi.params = params_;
    psi.amplitudes.assign(buf_.begin(), buf_.end());
    psi.t = t_;
    psi.absorbed_norm = absorbed_;
  }

  double time() const { return t_; }
  double absorbed_norm() const { return absorbed_; }

  void step_once() {
    apply_potential_half(t_ + 0.5 * h_);
    fft_->forward();
    for (std::size_t j = 0; j < buf_.size(); ++j) buf_[j] *= kinetic_[j];
    fft_->backward();
    apply_potential_half(t_ + 0.5 * h_);
    if (opts_.absorber) {
      double removed = 0.0;
      for (std::size_t j = 0; j < buf_.size(); ++j) {
        const double before = std::norm(buf_[j]);
        buf_[j] *= mask_[j];
        removed += before - std::norm(buf_[j]);
      }
      absorbed_ += removed * grid_.dz();
    }
    t_ += h_;
    if (++steps_since_guard_ >= opts_.guard_interval_steps) {
      steps_since_guard_ = 0;
      check_health();
    }
  }

  /// Norm, position and momentum moments of the current state.
  void measure(double& norm_sq, double& mean_z, double& var_z, double& mean_p,
               double& var_p) {
    const std::size_t n = buf_.size();
    const double dz = grid_.dz();
    double s0 = 0.0, s1 = 0.0, s2 = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double w = std::norm(buf_[j]);
      const double z = grid_.z(j);
      s0 += w;
      s1 += w * z;
      s2 += w * z * z;
    }
    norm_sq = s0 * dz;
    mean_z = s1 / s0;
    var_z = std::max(0.0, s2 / s0 - mean_z * mean_z);

    std::copy(buf_.begin(), buf_.end(), scratch_.begin());
    scratch_fft_->forward();
    double q0 = 0.0, q1 = 0.0, q2 = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double w = std::norm(scratch_[k]);
      const double p = grid_.momentum(k, params_.kbar);
      q0 += w;
      q1 += w * p;
      q2 += w * p * p;
    }
    mean_p = q1 / q0;
    var_p = std::max(0.0, q2 / q0 - mean_p * mean_p);
  }

  /// Probability fraction in the outer momentum_guard_tail of the p grid.
  double momentum_tail_fraction() {
    const std::size_t n = buf_.size();
    std::copy(buf_.begin(), buf_.end(), scratch_.begin());
    scratch_fft_->forward();
    const long edge = static_cast<long>(
        (1.0 - opts_.momentum_guard_tail) * static_cast<double>(n / 2));
    double tail = 0.0, total = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double w = std::norm(scratch_[k]);
      total += w;
      if (std::abs(grid_.signed_freq(k)) >= edge) tail += w;
    }
    return total > 0.0 ? tail / total : 0.0;
  }

  void check_health() {
    for (const auto& a : buf_)
      if (!std::isfinite(a.real()) || !std::isfinite(a.imag()))
        throw PropagationDivergedError("wavepacket amplitudes became non-finite at t=" +
                                       std::to_string(t_));
    const double tail = momentum_tail_fraction();
    if (tail > opts_.momentum_guard_limit)
      throw PropagationDivergedError(
          "probability " + std::to_string(tail) + " reached the outer " +
          std::to_string(opts_.momentum_guard_tail * 100.0) +
          "% of the momentum grid at t=" + std::to_string(t_) +
          "; enlarge the grid for this t_end");
  }

 private:
  void apply_potential_half(double t_mid) {
    const std::size_t n = buf_.size();
    const double m = mirror_position(params_.lambda, t_mid);
    const std::complex<double> i_unit(0.0, 1.0);
    // gravity phase everywhere
    for (std::size_t j = 0; j < n; ++j) buf_[j] *= grav_half_[j];
    if (params_.V0 == 0.0) return;
    // wall phase only where it is numerically non-identity:
    //   V0 e^{-kappa (z-m)} (h/2)/kbar >= 1e-16
    const double z_cut =
        m + (std::log(params_.V0 * 0.5 * h_ / params_.kbar) + 36.85) / params_.kappa;
    const std::size_t j_cut = z_cut <= grid_.z_min
                                  ? 0
                                  : std::min(n, static_cast<std::size_t>(std::max(
                                                    0.0, std::ceil((z_cut - grid_.z_min) /
                                                                   grid_.dz()))));
    const double shift = params_.kappa * m;
    for (std::size_t j = 0; j < j_cut; ++j) {
      const double wall = saturated_wall(params_.V0, wall_exp_[j] + shift);
      buf_[j] *= std::exp(-i_unit * (wall * 0.5 * h_ / params_.kbar));
    }
  }

  SpatialGrid grid_;
  ScaledParams params_;
  double h_;
  QuantumStepOptions opts_;
  ComplexField buf_;
  ComplexField scratch_;
  std::unique_ptr<Fft1d> fft_;
  std::unique_ptr<Fft1d> scratch_fft_;
  std::vector<std::complex<double>> grav_half_;
  std::vector<std::complex<double>> kinetic_;
  std::vector<double> wall_exp_;  // -kappa z_j
  std::vector<double> mask_;
  double t_ = 0.0;
  double absorbed_ = 0.0;
  long steps_since_guard_ = 0;
};

/// One Strang step of size h (convenience wrapper; building the stepper per
/// call is slow, use SplitOperatorStepper or propagate for long runs).
inline WavepacketState step(const WavepacketState& psi, double h,
                            const QuantumStepOptions& opts = {}) {
  SplitOperatorStepper stepper(psi.grid, psi.params, h, opts);
  stepper.load(psi);
  stepper.step_once();
  WavepacketState out;
  stepper.store(out);
  return out;
}

namespace detail {
inline long steps_to(double from, double to, double h, const char* what) {
  const double raw = (to - from) / h;
  const long n = static_cast<long>(std::llround(raw));
  if (std::abs(raw - static_cast<double>(n)) > 1e-6)
    throw ScheduleError(std::string(what) + " " + std::to_string(to) +
                        " is not a multiple of the step h=" + std::to_string(h));
  return n;
}
}  // namespace detail

/// Repeated stepping with observer extraction at the scheduled times (all of
/// which must lie on the h grid within [psi.t, t_end]).
inline std::pair<WavepacketState, SignalSeries> propagate(
    const WavepacketState& psi0, double t_end, double h,
    const std::vector<double>& observer_times, const QuantumStepOptions& opts = {}) {
  if (!(h > 0.0)) throw InvalidParameterError("propagate: h must be > 0");
  if (t_end < psi0.t) throw InvalidParameterError("propagate: t_end precedes psi.t");
  const long total = detail::steps_to(psi0.t, t_end, h, "t_end");
  std::vector<long> obs_steps;
  obs_steps.reserve(observer_times.size());
  for (double ot : observer_times) {
    if (ot < psi0.t - 1e-12 || ot > t_end + 1e-12)
      throw ScheduleError("observer time outside [t, t_end]");
    obs_steps.push_back(detail::steps_to(psi0.t, ot, h, "observer time"));
  }

  SplitOperatorStepper stepper(psi0.grid, psi0.params, h, opts);
  stepper.load(psi0);

  SignalSeries series;
  const auto observe = [&]() {
    double n2, mz, vz, mp, vp;
    stepper.measure(n2, mz, vz, mp, vp);
    series.times.push_back(stepper.time());
    series.mean_z.push_back(mz);
    series.mean_p.push_back(mp);
    series.var_z.push_back(vz);
    series.var_p.push_back(vp);
    series.norm.push_back(n2);
  };

  std::size_t next_obs = 0;
  for (long step_i = 0; step_i <= total; ++step_i) {
    while (next_obs < obs_steps.size() && obs_steps[next_obs] == step_i) {
      stepper.check_health();
      observe();
      ++next_obs;
    }
    if (step_i < total) stepper.step_once();
  }
  stepper.check_health();

  WavepacketState out;
  stepper.store(out);
  return {std::move(out), std::move(series)};
}

/// |psi~(p)|^2 on the ascending momentum grid; integrates to ||psi||^2.
inline DistributionProfile momentum_marginal(const WavepacketState& psi) {
  const std::size_t n = psi.grid.n_points;
  ComplexField scratch(psi.amplitudes.begin(), psi.amplitudes.end());
  Fft1d fft(scratch.data(), n);
  fft.forward();

  const double dp = psi.grid.momentum_spacing(psi.params.kbar);
  const double dz = psi.grid.dz();
  const double L = psi.grid.length();
  // |c_k|^2 = dz^2/L |DFT_k|^2 ; density = |c_k|^2 / dp
  const double scale = dz * dz / (L * dp);

  DistributionProfile prof;
  prof.axis.resize(n);
  prof.density.resize(n);
  // fftshift: ascending momenta
  const std::size_t half = n / 2;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = (i + half) % n;  // start at the most negative frequency
    prof.axis[i] = psi.grid.momentum(k, psi.params.kbar);
    prof.density[i] = std::norm(scratch[k]) * scale;
  }
  prof.total = trapezoid(prof.axis, prof.density);
  return prof;
}

/// |psi(z)|^2 on the spatial grid.
inline DistributionProfile position_marginal(const WavepacketState& psi) {
  const std::size_t n = psi.grid.n_points;
  DistributionProfile prof;
  prof.axis.resize(n);
  prof.density.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    prof.axis[j] = psi.grid.z(j);
    prof.density[j] = std::norm(psi.amplitudes[j]);
  }
  prof.total = trapezoid(prof.axis, prof.density);
  return prof;
}

/// Halve h until the Richardson ratio ||psi_h - psi_{h/2}|| / ||psi_{h/2} - psi_{h/4}||
/// sits in the second-order band [3, 5.5] on a short probe run.
inline double choose_timestep(const WavepacketState& psi0, double h0, double probe_t,
                              int max_halvings = 6) {
  double h = h0;
  for (int iter = 0; iter <= max_halvings; ++iter) {
    const long n_probe = std::max<long>(8, static_cast<long>(std::llround(probe_t / h)));
    const double t_end = psi0.t + static_cast<double>(n_probe) * h;
    const auto run = [&](double hh) {
      return propagate(psi0, t_end, hh, {}, {}).first;
    };
    const WavepacketState a = run(h);
    const WavepacketState b = run(0.5 * h);
    const WavepacketState c = run(0.25 * h);
    double d1 = 0.0, d2 = 0.0;
    for (std::size_t j = 0; j < a.amplitudes.size(); ++j) {
      d1 += std::norm(a.amplitudes[j] - b.amplitudes[j]);
      d2 += std::norm(b.amplitudes[j] - c.amplitudes[j]);
    }
    d1 = std::sqrt(d1);
    d2 = std::sqrt(d2);
    if (d2 == 0.0) return h;  // already at machine precision
    const double ratio = d1 / d2;
    if (ratio >= 3.0 && ratio <= 5.5) return h;
    h *= 0.5;
  }
  return h;
}

}  // namespace fermi
