#pragma once

// Classical dynamics of the modulated-mirror bouncer: the idealized hard-wall
// bounce map (kappa -> infinity limit) and a kick-drift-kick symplectic
// integrator for the smooth exponential mirror, plus seeded Gaussian
// ensembles and their moment traces.
//
// Scaled equations of motion: z' = p, p' = -1 + V0 kappa e^{-kappa(z - lambda sin t)}.
// Hard-wall limit: free flight z(tau) = z + p tau - tau^2/2 off the moving
// surface z_m(t) = lambda sin t, elastic reflection in the mirror frame.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "fermi/errors.hpp"
#include "fermi/rng.hpp"
#include "fermi/scaling.hpp"

namespace fermi {

struct ClassicalState {
  double z = 0.0;
  double p = 0.0;
  double t = 0.0;

  bool finite() const {
    return std::isfinite(z) && std::isfinite(p) && std::isfinite(t);
  }
};

/// Integration blew up; carries the last finite state.
class IntegrationDivergedError : public Error {
 public:
  IntegrationDivergedError(const std::string& what, ClassicalState last)
      : Error(what), last_good(last) {}
  ClassicalState last_good;
};

/// Free flight under scaled gravity for time tau.
inline ClassicalState free_flight(const ClassicalState& s, double tau) {
  return {s.z + s.p * tau - 0.5 * tau * tau, s.p - tau, s.t + tau};
}

// ---------------------------------------------------------------------------
// hard-wall bounce map
// ---------------------------------------------------------------------------

struct BounceOptions {
  double residual_tol = 1e-12;   // |z(tau) - mirror| at the accepted root
  double fine_step = 2.0 * std::numbers::pi / 1024.0;  // scan resolution near the wall
  double grazing_eps = 1e-10;    // |p_in - mirror velocity| below which a bounce grazes
  double grazing_advance = 1e-8; // free-flight nudge applied before retrying
  int max_grazing_retries = 16;
  double on_mirror_tol = 1e-12;  // |z - mirror| treated as "on the mirror"
};

/// Smallest tau > 0 with z + p tau - tau^2/2 = lambda sin(t + tau), found by
/// bracketed bisection and polished by Newton. While the free-flight parabola
/// sits above +lambda no root can exist, so that stretch is skipped
/// analytically; the remainder is scanned at fine_step.
inline double find_bounce_time(const ClassicalState& s, double lambda,
                               const BounceOptions& opts = {}) {
  if (!s.finite()) throw InvalidParameterError("find_bounce_time: non-finite state");
  const auto parabola = [&](double tau) { return s.z + s.p * tau - 0.5 * tau * tau; };
  const auto f = [&](double tau) {
    return parabola(tau) - lambda * std::sin(s.t + tau);
  };
  const auto fprime = [&](double tau) {
    return s.p - tau - lambda * std::cos(s.t + tau);
  };

  const double f0 = f(0.0);
  if (f0 < -opts.on_mirror_tol)
    throw InvalidParameterError("find_bounce_time: state is below the mirror");

  // Beyond tau_stop the parabola is below -lambda, so f < 0 with certainty.
  const double tau_stop =
      s.p + std::sqrt(s.p * s.p + 2.0 * (s.z + lambda)) + 4.0 * opts.fine_step;

  double tau_a = 0.0;
  double fa = f0;
  if (std::abs(f0) <= opts.on_mirror_tol) {
    // departing from the surface; step off it before scanning
    tau_a = std::min(opts.fine_step * 1e-6, tau_stop * 0.5);
    fa = f(tau_a);
  }
  // skip the stretch where the parabola is strictly above the mirror's reach
  if (lambda > 0.0 && parabola(tau_a) > lambda) {
    const double disc = s.p * s.p + 2.0 * (s.z - lambda);
    if (disc > 0.0) {
      const double tau_reach = s.p + std::sqrt(disc);
      if (tau_reach > tau_a) {
        tau_a = tau_reach;
        fa = f(tau_a);
      }
    }
  }

  double root = -1.0;
  while (tau_a < tau_stop) {
    const double tau_b = std::min(tau_a + opts.fine_step, tau_stop);
    const double fb = f(tau_b);
    if (fa > 0.0 && fb <= 0.0) {
      double lo = tau_a, hi = tau_b;
      for (int i = 0; i < 80 && (hi - lo) > 1e-16 * std::max(1.0, hi); ++i) {
        const double mid = 0.5 * (lo + hi);
        (f(mid) > 0.0 ? lo : hi) = mid;
      }
      root = 0.5 * (lo + hi);
      // Newton polish, kept inside the bracket
      for (int i = 0; i < 8; ++i) {
        const double fr = f(root);
        if (std::abs(fr) <= opts.residual_tol) break;
        const double dfr = fprime(root);
        if (dfr == 0.0) break;
        const double next = root - fr / dfr;
        if (next <= lo || next >= hi) break;
        root = next;
      }
      return root;
    }
    tau_a = tau_b;
    fa = fb;
  }
  throw BracketingError(
      "find_bounce_time: no sign change up to tau=" + std::to_string(tau_stop) +
      " (numerical bracketing failure)");
}

struct BounceResult {
  ClassicalState state;     // on the mirror, just after reflection
  double time_of_flight = 0.0;
  int grazing_retries = 0;
};

/// Advance to the next mirror impact and reflect elastically in the mirror
/// frame: p' = 2 lambda cos(t_hit) - p_in. Grazing impacts
/// (|p_in - lambda cos t_hit| < grazing_eps) are nudged forward by
/// grazing_advance and retried.
inline BounceResult bounce_map_step(const ClassicalState& state, double lambda,
                                    const BounceOptions& opts = {}) {
  ClassicalState s = state;
  double tof = 0.0;
  for (int retry = 0;; ++retry) {
    double tau;
    const bool on_mirror =
        std::abs(s.z - mirror_position(lambda, s.t)) <= opts.on_mirror_tol;
    if (on_mirror && s.p - mirror_velocity(lambda, s.t) < 0.0) {
      tau = 0.0;  // incoming exactly on the surface: reflect immediately
    } else {
      tau = find_bounce_time(s, lambda, opts);
    }
    const double t_hit = s.t + tau;
    const double p_in = s.p - tau;
    const double v_mirror = mirror_velocity(lambda, t_hit);
    if (std::abs(p_in - v_mirror) < opts.grazing_eps) {
      if (retry >= opts.max_grazing_retries)
        throw BracketingError("bounce_map_step: persistent grazing impact");
      s = free_flight(s, tau);
      s = free_flight(s, opts.grazing_advance);
      tof += tau + opts.grazing_advance;
      continue;
    }
    return BounceResult{
        {mirror_position(lambda, t_hit), 2.0 * v_mirror - p_in, t_hit},
        tof + tau,
        retry};
  }
}

// ---------------------------------------------------------------------------
// smooth symplectic integrator
// ---------------------------------------------------------------------------

struct SmoothOptions {
  double h = 1e-3;            // base step far from the mirror
  double substep_tol = 1e-4;  // split the step while |F| h^2 exceeds this
  int max_substep_depth = 48;
  bool ballistic_jumps = true;  // exact free-fall fast path where the wall force underflows
};

namespace detail {

/// One kick-drift-kick step of size h with the force frozen at the midpoint
/// time. Exact for the pure-gravity region (linear potential).
inline ClassicalState kdk_step(const ClassicalState& s, double h,
                               const ScaledParams& params) {
  const double t_mid = s.t + 0.5 * h;
  const double m = mirror_position(params.lambda, t_mid);
  const auto force = [&](double z) {
    return -1.0 + saturated_wall(params.V0 * params.kappa, -params.kappa * (z - m));
  };
  const double p1 = s.p + 0.5 * h * force(s.z);
  const double z2 = s.z + h * p1;
  const double p2 = p1 + 0.5 * h * force(z2);
  return {z2, p2, s.t + h};
}

/// Conservative bound on the wall |force| anywhere the step can reach.
inline double wall_force_bound(const ClassicalState& s, double h,
                               const ScaledParams& params) {
  const double z_low = std::min(s.z, s.z + h * s.p) - 0.5 * h * h;
  const double m_high = mirror_position(params.lambda, s.t + 0.5 * h) +
                        params.lambda * h;  // mirror moves at most lambda per unit time
  return saturated_wall(params.V0 * params.kappa, -params.kappa * (z_low - m_high));
}

inline void adaptive_step(ClassicalState& s, double h, const ScaledParams& params,
                          const SmoothOptions& opts, int depth) {
  const double bound = 1.0 + wall_force_bound(s, h, params);
  if (bound * h * h > opts.substep_tol && depth < opts.max_substep_depth) {
    adaptive_step(s, 0.5 * h, params, opts, depth + 1);
    adaptive_step(s, 0.5 * h, params, opts, depth + 1);
    return;
  }
  s = kdk_step(s, h, params);
}

/// Height above which the wall force is below double-precision noise, i.e.
/// dynamics is exactly free fall.
inline double ballistic_floor(const ScaledParams& params) {
  if (params.V0 == 0.0) return -std::numeric_limits<double>::infinity();
  // V0 kappa e^{-kappa (z - lambda)} < 1e-18
  return params.lambda +
         (std::log(params.V0 * params.kappa) + 41.5) / params.kappa;
}

}  // namespace detail

/// Integrate the smooth dynamics from state.t to t_end (t_end >= state.t).
/// Second-order symplectic stepping with midpoint-time forces; steps are
/// geometrically subdivided near the wall until |F| h^2 <= substep_tol.
inline ClassicalState integrate_smooth(ClassicalState state, const ScaledParams& params,
                                       double t_end, const SmoothOptions& opts = {}) {
  params.validate();
  if (!(opts.h > 0.0)) throw InvalidParameterError("integrate_smooth: h must be > 0");
  if (t_end < state.t)
    throw InvalidParameterError("integrate_smooth: t_end precedes the state time");

  const double z_ballistic = detail::ballistic_floor(params);
  while (state.t < t_end) {
    const double remaining = t_end - state.t;

    if (opts.ballistic_jumps && state.z > z_ballistic) {
      // exact flight until the trajectory can re-enter the wall region
      const double drop = state.z - z_ballistic;
      const double tau_reenter =
          state.p + std::sqrt(std::max(0.0, state.p * state.p + 2.0 * drop));
      const double jump = std::min(tau_reenter, remaining);
      if (jump > opts.h) {
        state = free_flight(state, jump);
        continue;
      }
    }

    const double h = std::min(opts.h, remaining);
    detail::adaptive_step(state, h, params, opts, 0);
    if (!state.finite())
      throw IntegrationDivergedError("integrate_smooth: state became non-finite",
                                     state);
  }
  return state;
}

/// Single exposed KDK step (symplecticity and convergence tests drive this).
inline ClassicalState smooth_step(const ClassicalState& s, double h,
                                  const ScaledParams& params) {
  return detail::kdk_step(s, h, params);
}

// ---------------------------------------------------------------------------
// ensembles
// ---------------------------------------------------------------------------

struct Ensemble {
  std::vector<ClassicalState> states;
  std::uint64_t seed = 0;
  long rejected_draws = 0;  // draws below the mirror, redrawn
};

struct GaussianEnsembleSpec {
  double mean_z = 0.0;
  double mean_p = 0.0;
  double sigma_z = 0.1;
  double sigma_p = 0.1;
  long n = 1;
  double t0 = 0.0;
};

/// Independent Gaussian draws in z and p; draws below the instantaneous
/// mirror lambda sin(t0) are rejected and redrawn. The expected rejection
/// rate must not exceed one half, which for a Gaussian marginal is exactly
/// the condition mean_z >= mirror level.
inline Ensemble sample_gaussian_ensemble(const GaussianEnsembleSpec& spec,
                                         double lambda, std::uint64_t seed) {
  if (!(spec.sigma_z > 0.0) || !(spec.sigma_p > 0.0))
    throw InvalidParameterError("sample_gaussian_ensemble: sigmas must be > 0");
  if (spec.n < 1)
    throw InvalidParameterError("sample_gaussian_ensemble: n must be >= 1");
  const double mirror = mirror_position(lambda, spec.t0);
  if (spec.mean_z < mirror)
    throw InvalidInitialConditionError(
        "sample_gaussian_ensemble: mean_z below the mirror implies an expected "
        "rejection rate above 50%");

  Ensemble ens;
  ens.seed = seed;
  ens.states.reserve(static_cast<std::size_t>(spec.n));
  const long budget = 1000 * spec.n;
  long draws = 0;
  for (long i = 0; i < spec.n; ++i) {
    Rng rng = Rng::substream(seed, static_cast<std::uint64_t>(i));
    for (;;) {
      if (++draws > budget)
        throw InvalidInitialConditionError(
            "sample_gaussian_ensemble: draw budget exhausted");
      const double z = spec.mean_z + spec.sigma_z * rng.normal();
      const double p = spec.mean_p + spec.sigma_p * rng.normal();
      if (z >= mirror) {
        ens.states.push_back({z, p, spec.t0});
        break;
      }
      ++ens.rejected_draws;
    }
  }
  return ens;
}

// ---------------------------------------------------------------------------
// ensemble propagation with moment traces
// ---------------------------------------------------------------------------

struct MomentTrace {
  std::vector<double> times;
  std::vector<double> mean_z;
  std::vector<double> mean_p;
  std::vector<double> var_z;
  std::vector<double> var_p;
  std::vector<double> accel_fraction;
};

/// Accelerating-trajectory criterion over per-bounce energies: at least
/// min_positive of the last `window` bounce-to-bounce gains exceed
/// gain_threshold, and the net gain over the window is at least
/// min_gain_ratio of the energy at the window start.
struct AccelFlagRule {
  int window = 10;
  int min_positive = 10;
  double gain_threshold = 0.0;
  double min_gain_ratio = 0.25;

  bool flagged(const std::vector<double>& bounce_energies) const {
    const int nb = static_cast<int>(bounce_energies.size());
    if (nb < window + 1) return false;
    int positive = 0;
    for (int i = nb - window; i < nb; ++i)
      if (bounce_energies[static_cast<std::size_t>(i)] -
              bounce_energies[static_cast<std::size_t>(i - 1)] >
          gain_threshold)
        ++positive;
    if (positive < min_positive) return false;
    const double e0 = bounce_energies[static_cast<std::size_t>(nb - window - 1)];
    const double net = bounce_energies[static_cast<std::size_t>(nb - 1)] - e0;
    return net >= min_gain_ratio * std::max(std::abs(e0), 1e-12);
  }
};

enum class DynamicsBackend { kHardWall, kSmooth };

struct PhaseSpacePoint {
  double z = 0.0;
  double p = 0.0;
};

struct Snapshot {
  double t = 0.0;
  std::vector<PhaseSpacePoint> points;  // trajectory order, divergent rows NaN
};

/// Moments of the subset flagged accelerating at the end of the run.
struct SubsetTrace {
  std::vector<double> times;
  std::vector<double> mean_energy;
  std::vector<double> var_p;
  long count = 0;
};

struct EnsemblePropagation {
  MomentTrace trace;
  std::vector<Snapshot> snapshots;
  SubsetTrace flagged;      // subset flagged at t_end
  long diverged = 0;        // trajectories dropped from the moments
  long grazing_retries = 0; // hard-wall backend only
};

struct PropagationSchedule {
  double t_end = 0.0;
  std::vector<double> trace_times;     // moment sampling grid
  std::vector<double> snapshot_times;  // subset of [0, t_end]
};

inline PropagationSchedule uniform_schedule(double t_end, double dt,
                                            std::vector<double> snapshots = {}) {
  PropagationSchedule s;
  s.t_end = t_end;
  const long n = static_cast<long>(std::llround(t_end / dt));
  for (long i = 0; i <= n; ++i) s.trace_times.push_back(std::min(i * dt, t_end));
  s.snapshot_times = std::move(snapshots);
  return s;
}

namespace detail {

struct TrajectoryRecord {
  std::vector<double> z;           // per trace time
  std::vector<double> p;
  std::vector<double> energy;
  std::vector<char> flag;          // flag state as of that time
  std::vector<PhaseSpacePoint> snaps;
  bool diverged = false;
  bool final_flag = false;
  int grazing = 0;
};

/// Propagate one trajectory through the merged trace/snapshot grid,
/// recording moments inputs and per-bounce energies.
inline TrajectoryRecord propagate_one(const ClassicalState& init,
                                      const ScaledParams& params,
                                      const PropagationSchedule& sched,
                                      DynamicsBackend backend,
                                      const AccelFlagRule& rule,
                                      const SmoothOptions& smooth,
                                      const BounceOptions& bounce) {
  TrajectoryRecord rec;
  const std::size_t nt = sched.trace_times.size();
  const std::size_t ns = sched.snapshot_times.size();
  rec.z.assign(nt, std::numeric_limits<double>::quiet_NaN());
  rec.p.assign(nt, std::numeric_limits<double>::quiet_NaN());
  rec.energy.assign(nt, std::numeric_limits<double>::quiet_NaN());
  rec.flag.assign(nt, 0);
  rec.snaps.assign(ns, {std::numeric_limits<double>::quiet_NaN(),
                        std::numeric_limits<double>::quiet_NaN()});

  std::vector<double> bounce_energies;
  ClassicalState s = init;
  std::size_t ti = 0, si = 0;

  // skip trace points that precede the initial time (t0 > 0 ensembles)
  while (ti < nt && sched.trace_times[ti] < s.t - 1e-12) ++ti;
  while (si < ns && sched.snapshot_times[si] < s.t - 1e-12) ++si;

  try {
    if (backend == DynamicsBackend::kHardWall) {
      const double lambda = params.lambda;
      while (true) {
        // next event: bounce or end of run
        double tau;
        const bool on_mirror =
            std::abs(s.z - mirror_position(lambda, s.t)) <= bounce.on_mirror_tol;
        if (on_mirror && s.p - mirror_velocity(lambda, s.t) < 0.0)
          tau = 0.0;
        else
          tau = find_bounce_time(s, lambda, bounce);
        const double t_hit = s.t + tau;

        const auto record_until = [&](double horizon) {
          while (ti < nt && sched.trace_times[ti] <= horizon + 1e-12) {
            const ClassicalState at = free_flight(s, sched.trace_times[ti] - s.t);
            rec.z[ti] = at.z;
            rec.p[ti] = at.p;
            rec.energy[ti] = 0.5 * at.p * at.p + at.z;
            rec.flag[ti] = rule.flagged(bounce_energies) ? 1 : 0;
            ++ti;
          }
          while (si < ns && sched.snapshot_times[si] <= horizon + 1e-12) {
            const ClassicalState at = free_flight(s, sched.snapshot_times[si] - s.t);
            rec.snaps[si] = {at.z, at.p};
            ++si;
          }
        };

        if (t_hit >= sched.t_end) {
          record_until(sched.t_end);
          break;
        }
        record_until(t_hit);
        const BounceResult br = bounce_map_step(s, lambda, bounce);
        rec.grazing += br.grazing_retries;
        s = br.state;
        bounce_energies.push_back(0.5 * s.p * s.p + s.z);
      }
    } else {
      // smooth backend: integrate between sample times, detect wall turnings
      // (p crossing upward) inside the integrator via a wrapper
      double prev_p = s.p;
      const auto advance_to = [&](double t_target) {
        // step with turning detection: reuse integrate_smooth stepping but
        // watch the momentum sign between base steps
        while (s.t < t_target) {
          const double remaining = t_target - s.t;
          const double z_ballistic = detail::ballistic_floor(params);
          if (smooth.ballistic_jumps && s.z > z_ballistic) {
            const double drop = s.z - z_ballistic;
            const double tau_reenter =
                s.p + std::sqrt(std::max(0.0, s.p * s.p + 2.0 * drop));
            const double jump = std::min(tau_reenter, remaining);
            if (jump > smooth.h) {
              s = free_flight(s, jump);
              prev_p = s.p;
              continue;
            }
          }
          const double h = std::min(smooth.h, remaining);
          detail::adaptive_step(s, h, params, smooth, 0);
          if (!s.finite())
            throw IntegrationDivergedError("ensemble trajectory diverged", s);
          if (prev_p <= 0.0 && s.p > 0.0)
            bounce_energies.push_back(scaled_hamiltonian_value(s.z, s.p, s.t, params));
          prev_p = s.p;
        }
      };
      std::vector<double> events;
      events.reserve(nt + ns + 1);
      for (std::size_t i = ti; i < nt; ++i) events.push_back(sched.trace_times[i]);
      for (std::size_t i = si; i < ns; ++i) events.push_back(sched.snapshot_times[i]);
      events.push_back(sched.t_end);
      std::sort(events.begin(), events.end());
      for (double ev : events) {
        if (ev < s.t) continue;
        advance_to(ev);
        while (ti < nt && sched.trace_times[ti] <= s.t + 1e-12) {
          rec.z[ti] = s.z;
          rec.p[ti] = s.p;
          rec.energy[ti] = scaled_hamiltonian_value(s.z, s.p, s.t, params);
          rec.flag[ti] = rule.flagged(bounce_energies) ? 1 : 0;
          ++ti;
        }
        while (si < ns && sched.snapshot_times[si] <= s.t + 1e-12) {
          rec.snaps[si] = {s.z, s.p};
          ++si;
        }
      }
    }
    rec.final_flag = rule.flagged(bounce_energies);
  } catch (const Error&) {
    rec.diverged = true;
  }
  return rec;
}

}  // namespace detail

struct EnsembleOptions {
  DynamicsBackend backend = DynamicsBackend::kSmooth;
  AccelFlagRule accel;
  SmoothOptions smooth;
  BounceOptions bounce;
  int workers = 0;  // 0 = hardware concurrency
};

/// Propagate every trajectory independently and reduce moments in fixed
/// trajectory order, so the result is bit-identical for any worker count.
/// Divergent trajectories are dropped from the moments and counted.
inline EnsemblePropagation propagate_ensemble(const Ensemble& ens,
                                              const ScaledParams& params,
                                              const PropagationSchedule& sched,
                                              const EnsembleOptions& opts = {}) {
  params.validate();
  if (ens.states.empty())
    throw InvalidParameterError("propagate_ensemble: empty ensemble");
  for (double ts : sched.snapshot_times)
    if (ts < 0.0 || ts > sched.t_end + 1e-12)
      throw ScheduleError("propagate_ensemble: snapshot time outside [0, t_end]");

  const std::size_t n = ens.states.size();
  std::vector<detail::TrajectoryRecord> records(n);

  int workers = opts.workers > 0
                    ? opts.workers
                    : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  workers = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(workers), n));

  const auto work = [&](int w) {
    for (std::size_t i = static_cast<std::size_t>(w); i < n;
         i += static_cast<std::size_t>(workers))
      records[i] = detail::propagate_one(ens.states[i], params, sched, opts.backend,
                                         opts.accel, opts.smooth, opts.bounce);
  };
  if (workers <= 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& th : pool) th.join();
  }

  // sequential reduction in trajectory order
  EnsemblePropagation out;
  const std::size_t nt = sched.trace_times.size();
  out.trace.times = sched.trace_times;
  out.trace.mean_z.assign(nt, 0.0);
  out.trace.mean_p.assign(nt, 0.0);
  out.trace.var_z.assign(nt, 0.0);
  out.trace.var_p.assign(nt, 0.0);
  out.trace.accel_fraction.assign(nt, 0.0);
  out.flagged.times = sched.trace_times;
  out.flagged.mean_energy.assign(nt, 0.0);
  out.flagged.var_p.assign(nt, 0.0);

  std::vector<double> sz(nt, 0.0), szz(nt, 0.0), sp(nt, 0.0), spp(nt, 0.0),
      sflag(nt, 0.0);
  std::vector<double> fs_e(nt, 0.0), fs_p(nt, 0.0), fs_pp(nt, 0.0);
  long kept = 0;
  for (const auto& r : records) {
    if (r.diverged) {
      ++out.diverged;
      continue;
    }
    ++kept;
    out.grazing_retries += r.grazing;
    for (std::size_t j = 0; j < nt; ++j) {
      sz[j] += r.z[j];
      szz[j] += r.z[j] * r.z[j];
      sp[j] += r.p[j];
      spp[j] += r.p[j] * r.p[j];
      sflag[j] += r.flag[j];
    }
    if (r.final_flag) {
      ++out.flagged.count;
      for (std::size_t j = 0; j < nt; ++j) {
        fs_e[j] += r.energy[j];
        fs_p[j] += r.p[j];
        fs_pp[j] += r.p[j] * r.p[j];
      }
    }
  }
  if (kept == 0)
    throw IntegrationDivergedError("propagate_ensemble: every trajectory diverged",
                                   ens.states.front());
  const double inv = 1.0 / static_cast<double>(kept);
  for (std::size_t j = 0; j < nt; ++j) {
    out.trace.mean_z[j] = sz[j] * inv;
    out.trace.mean_p[j] = sp[j] * inv;
    out.trace.var_z[j] = std::max(0.0, szz[j] * inv - out.trace.mean_z[j] * out.trace.mean_z[j]);
    out.trace.var_p[j] = std::max(0.0, spp[j] * inv - out.trace.mean_p[j] * out.trace.mean_p[j]);
    out.trace.accel_fraction[j] = sflag[j] * inv;
  }
  if (out.flagged.count > 0) {
    const double finv = 1.0 / static_cast<double>(out.flagged.count);
    for (std::size_t j = 0; j < nt; ++j) {
      out.flagged.mean_energy[j] = fs_e[j] * finv;
      const double mp = fs_p[j] * finv;
      out.flagged.var_p[j] = std::max(0.0, fs_pp[j] * finv - mp * mp);
    }
  }

  // snapshots, trajectory order
  out.snapshots.reserve(sched.snapshot_times.size());
  for (std::size_t k = 0; k < sched.snapshot_times.size(); ++k) {
    Snapshot snap;
    snap.t = sched.snapshot_times[k];
    snap.points.reserve(n);
    for (const auto& r : records)
      snap.points.push_back(r.diverged ? PhaseSpacePoint{
                                             std::numeric_limits<double>::quiet_NaN(),
                                             std::numeric_limits<double>::quiet_NaN()}
                                       : r.snaps[k]);
    out.snapshots.push_back(std::move(snap));
  }
  return out;
}

}  // namespace fermi
