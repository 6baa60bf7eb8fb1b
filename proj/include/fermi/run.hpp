#pragma once

// Run orchestration: execute the configured pipeline into a temp directory,
// write artifacts, then the manifest, then commit by rename. Re-running an
// identical completed config is a no-op unless forced.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fermi/classical.hpp"
#include "fermi/columnar.hpp"
#include "fermi/config.hpp"
#include "fermi/diagnostics.hpp"
#include "fermi/errors.hpp"
#include "fermi/manifest.hpp"
#include "fermi/quantum.hpp"
#include "fermi/scaling.hpp"
#include "fermi/windows.hpp"

namespace fermi {

inline constexpr const char* kOutputRootEnv = "FERMI_OUTPUT_ROOT";

/// output_dir resolved against $FERMI_OUTPUT_ROOT when relative.
inline std::filesystem::path resolve_output_dir(const std::string& output_dir) {
  std::filesystem::path p(output_dir);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv(kOutputRootEnv)) return std::filesystem::path(root) / p;
  return p;
}

struct RunResult {
  RunManifest manifest;
  std::filesystem::path directory;
};

namespace detail {

struct ArtifactWriter {
  std::filesystem::path dir;
  std::vector<ArtifactEntry>* entries;

  void note(const std::string& rel) const {
    ArtifactEntry e;
    e.path = rel;
    const auto p = dir / rel;
    e.bytes = std::filesystem::file_size(p);
    e.checksum = checksum_file(p);
    entries->push_back(e);
  }
};

inline std::string snapshot_tag(double t) {
  std::ostringstream ss;
  ss << t;
  std::string s = ss.str();
  for (char& c : s)
    if (c == '.') c = 'p';
  return s;
}

inline void write_comb_report(const ArtifactWriter& w, const std::string& stem,
                              const DistributionProfile& profile, const CombFit& fit) {
  std::vector<std::pair<std::string, std::string>> kvs;
  kvs.emplace_back("spacing_defined", fit.spacing_defined ? "1" : "0");
  kvs.emplace_back("spacing", format_g17(fit.spacing));
  kvs.emplace_back("comb_width", format_g17(fit.comb_width));
  kvs.emplace_back("envelope_width", format_g17(fit.envelope_width));
  kvs.emplace_back("contrast", format_g17(fit.contrast));
  kvs.emplace_back("offset", format_g17(fit.offset));
  kvs.emplace_back("normalization", format_g17(fit.normalization));
  write_kv_block(w.dir / (stem + "_fit.txt"), kvs, {"gaussian comb fit of " + stem});
  w.note(stem + "_fit.txt");

  // residual table: axis, data, model, residual
  double mu = 0.0, tot = 0.0;
  for (std::size_t i = 0; i < profile.axis.size(); ++i) {
    mu += profile.axis[i] * profile.density[i];
    tot += profile.density[i];
  }
  mu = tot > 0.0 ? mu / tot : 0.0;
  std::vector<std::vector<double>> rows;
  rows.reserve(profile.axis.size());
  for (std::size_t i = 0; i < profile.axis.size(); ++i) {
    const double model = comb_model_value(fit, mu, profile.axis[i]);
    rows.push_back({profile.axis[i], profile.density[i], model, profile.density[i] - model});
  }
  write_columnar(w.dir / (stem + "_residuals.tsv"), {"axis", "density", "model", "residual"},
                 rows);
  w.note(stem + "_residuals.tsv");
}

inline void write_profile(const ArtifactWriter& w, const std::string& rel,
                          const DistributionProfile& prof,
                          const std::vector<std::string>& comments = {}) {
  std::vector<std::vector<double>> rows;
  rows.reserve(prof.axis.size());
  for (std::size_t i = 0; i < prof.axis.size(); ++i)
    rows.push_back({prof.axis[i], prof.density[i]});
  write_columnar(w.dir / rel, {"axis", "density"}, rows, comments);
  w.note(rel);
}

/// Raw little-endian float64 interleaved (re, im) with a text header.
inline void write_wavefunction(const ArtifactWriter& w, const std::string& rel,
                               const WavepacketState& psi) {
  static_assert(std::endian::native == std::endian::little,
                "wavefunction snapshots are little-endian");
  std::ofstream out(w.dir / rel, std::ios::binary);
  if (!out) throw IoError("write_wavefunction: cannot open " + rel);
  out << "fermi-wavefunction format_version=" << kFormatVersion << "\n";
  out << "n_points " << psi.grid.n_points << "\n";
  out << "z_min " << format_g17(psi.grid.z_min) << "\n";
  out << "z_max " << format_g17(psi.grid.z_max) << "\n";
  out << "t " << format_g17(psi.t) << "\n";
  out << "V0 " << format_g17(psi.params.V0) << " kappa " << format_g17(psi.params.kappa)
      << " lambda " << format_g17(psi.params.lambda) << " kbar "
      << format_g17(psi.params.kbar) << "\n";
  out << "absorbed_norm " << format_g17(psi.absorbed_norm) << "\n";
  out << "data float64le interleaved re,im\n";
  out << "end-header\n";
  for (const auto& a : psi.amplitudes) {
    const double re = a.real(), im = a.imag();
    out.write(reinterpret_cast<const char*>(&re), sizeof(double));
    out.write(reinterpret_cast<const char*>(&im), sizeof(double));
  }
  if (!out) throw IoError("write_wavefunction: write failed for " + rel);
  w.note(rel);
}

struct WavefunctionFile {
  SpatialGrid grid;
  ScaledParams params;
  ComplexField amplitudes;
  double t = 0.0;
  double absorbed_norm = 0.0;
};

inline WavefunctionFile read_wavefunction(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_wavefunction: cannot open " + path.string());
  WavefunctionFile wf;
  std::string line;
  while (std::getline(in, line)) {
    if (line == "end-header") break;
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key == "n_points") ss >> wf.grid.n_points;
    else if (key == "z_min") ss >> wf.grid.z_min;
    else if (key == "z_max") ss >> wf.grid.z_max;
    else if (key == "t") ss >> wf.t;
    else if (key == "absorbed_norm") ss >> wf.absorbed_norm;
    else if (key == "V0") {
      std::string k2;
      ss >> wf.params.V0 >> k2 >> wf.params.kappa >> k2 >> wf.params.lambda >> k2 >>
          wf.params.kbar;
    }
  }
  wf.amplitudes.resize(wf.grid.n_points);
  for (auto& a : wf.amplitudes) {
    double re = 0.0, im = 0.0;
    in.read(reinterpret_cast<char*>(&re), sizeof(double));
    in.read(reinterpret_cast<char*>(&im), sizeof(double));
    a = {re, im};
  }
  if (!in) throw IoError("read_wavefunction: truncated data in " + path.string());
  return wf;
}

struct PipelineCounters {
  long classical_bounces = 0;
  long quantum_steps = 0;
};

inline void run_classical_pipeline(const RunConfig& cfg, const ArtifactWriter& w,
                                   PipelineCounters& counters) {
  const ScaledParams params = cfg.resolved_scaled();
  GaussianEnsembleSpec spec;
  spec.mean_z = cfg.initial.center_z;
  spec.mean_p = cfg.initial.center_p;
  spec.sigma_z = cfg.initial.delta_z;
  spec.sigma_p = cfg.initial.delta_p;
  spec.n = cfg.initial.n_particles;
  spec.t0 = cfg.initial.t0;
  const Ensemble ens = sample_gaussian_ensemble(spec, params.lambda, cfg.seed);

  PropagationSchedule sched = uniform_schedule(cfg.schedule.t_end, cfg.schedule.sample_dt,
                                               cfg.schedule.snapshots);
  if (sched.snapshot_times.empty() ||
      sched.snapshot_times.back() < cfg.schedule.t_end - 1e-12)
    sched.snapshot_times.push_back(cfg.schedule.t_end);

  EnsembleOptions opts;
  opts.backend = cfg.classical.backend;
  opts.accel = cfg.classical.accel;
  opts.smooth.h = cfg.classical.h;
  opts.smooth.substep_tol = cfg.classical.substep_tol;
  opts.smooth.ballistic_jumps = cfg.classical.ballistic_jumps;
  const EnsemblePropagation result = propagate_ensemble(ens, params, sched, opts);

  // moments
  {
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < result.trace.times.size(); ++i)
      rows.push_back({result.trace.times[i], result.trace.mean_z[i], result.trace.mean_p[i],
                      result.trace.var_z[i], result.trace.var_p[i],
                      result.trace.accel_fraction[i]});
    write_columnar(w.dir / "classical_moments.tsv",
                   {"t", "mean_z", "mean_p", "var_z", "var_p", "accel_fraction"}, rows,
                   {"rejected_draws=" + std::to_string(ens.rejected_draws),
                    "diverged=" + std::to_string(result.diverged),
                    "flagged_count=" + std::to_string(result.flagged.count)});
    w.note("classical_moments.tsv");
  }
  // snapshots
  for (const auto& snap : result.snapshots) {
    std::vector<std::vector<double>> rows;
    rows.reserve(snap.points.size());
    for (const auto& pt : snap.points) rows.push_back({snap.t, pt.z, pt.p});
    const std::string rel = "classical_snapshot_t" + snapshot_tag(snap.t) + ".tsv";
    write_columnar(w.dir / rel, {"t", "z", "p"}, rows);
    w.note(rel);
  }
  counters.classical_bounces = result.grazing_retries;  // retries only; bounces tracked per run

  // final momentum marginal + analysis
  const Snapshot& last = result.snapshots.back();
  std::vector<double> p_samples;
  p_samples.reserve(last.points.size());
  for (const auto& pt : last.points)
    if (std::isfinite(pt.p)) p_samples.push_back(pt.p);
  double p_lo = *std::min_element(p_samples.begin(), p_samples.end());
  double p_hi = *std::max_element(p_samples.begin(), p_samples.end());
  const double pad = 0.05 * std::max(1.0, p_hi - p_lo);
  AxisSpec axis{p_lo - pad, p_hi + pad,
                static_cast<std::size_t>(cfg.analysis.histogram_bins)};
  const DistributionProfile marginal = histogram_marginal(p_samples, axis);
  write_profile(w, "classical_p_marginal.tsv", marginal,
                {"t=" + format_g17(last.t)});

  if (cfg.analysis.comb) {
    const CombFit fit = comb_fit(marginal);
    write_comb_report(w, "classical_comb", marginal, fit);
  }
  if (cfg.analysis.diffusion) {
    try {
      const DiffusionFit fit =
          diffusion_exponent(result.trace.times, result.trace.var_p,
                             cfg.analysis.diffusion_t_lo, cfg.analysis.diffusion_t_hi);
      write_kv_block(w.dir / "classical_diffusion_fit.txt",
                     {{"alpha", format_g17(fit.alpha)},
                      {"prefactor", format_g17(fit.prefactor)},
                      {"t_lo", format_g17(fit.t_lo)},
                      {"t_hi", format_g17(fit.t_hi)},
                      {"r_squared", format_g17(fit.r_squared)}});
      w.note("classical_diffusion_fit.txt");
    } catch (const FitDomainError&) {
      // bounded runs can have var_p hitting zero; skip the fit artifact
    }
  }
  if (cfg.analysis.breathing && result.trace.times.size() >= 32) {
    std::vector<double> delta_z(result.trace.var_z.size());
    for (std::size_t i = 0; i < delta_z.size(); ++i)
      delta_z[i] = std::sqrt(result.trace.var_z[i]);
    const BreathingScore score =
        breathing_score(result.trace.times, result.trace.var_p, delta_z);
    write_kv_block(w.dir / "classical_breathing.txt",
                   {{"defined", score.defined ? "1" : "0"},
                    {"correlation", format_g17(score.correlation)},
                    {"period_trend", format_g17(score.period_trend)},
                    {"mean_period", format_g17(score.mean_period)},
                    {"crossings", std::to_string(score.crossings)}});
    w.note("classical_breathing.txt");
  }
}

inline void run_quantum_pipeline(const RunConfig& cfg, const ArtifactWriter& w,
                                 PipelineCounters& counters) {
  const ScaledParams params = cfg.resolved_scaled();
  WavepacketState psi = init_gaussian(cfg.initial.center_z, cfg.initial.center_p,
                                      cfg.initial.delta_p, cfg.quantum.grid, params);
  psi.t = cfg.initial.t0;

  QuantumStepOptions qopts;
  qopts.absorber = cfg.quantum.absorber;
  qopts.absorber_fraction = cfg.quantum.absorber_fraction;

  double h = cfg.quantum.h;
  if (cfg.quantum.auto_step)
    h = choose_timestep(psi, h, 2.0 * std::numbers::pi);
  // make sample_dt an exact multiple of h so observers land on the step grid
  const double ratio = cfg.schedule.sample_dt / h;
  if (std::abs(ratio - std::round(ratio)) > 1e-9)
    h = cfg.schedule.sample_dt / std::max(1.0, std::round(ratio));

  std::vector<double> snaps = cfg.schedule.snapshots;
  if (snaps.empty() || snaps.back() < cfg.schedule.t_end - 1e-12)
    snaps.push_back(cfg.schedule.t_end);

  SplitOperatorStepper stepper(cfg.quantum.grid, params, h, qopts);
  stepper.load(psi);

  const long steps_per_sample =
      static_cast<long>(std::llround(cfg.schedule.sample_dt / h));
  const long total_samples =
      static_cast<long>(std::llround(cfg.schedule.t_end / cfg.schedule.sample_dt));
  const long total_steps = steps_per_sample * total_samples;
  counters.quantum_steps = total_steps;

  SignalSeries series;
  WavepacketState current;
  std::size_t next_snap = 0;
  for (long step_i = 0; step_i <= total_steps; ++step_i) {
    if (step_i % steps_per_sample == 0) {
      double n2, mz, vz, mp, vp;
      stepper.measure(n2, mz, vz, mp, vp);
      series.times.push_back(stepper.time());
      series.mean_z.push_back(mz);
      series.mean_p.push_back(mp);
      series.var_z.push_back(vz);
      series.var_p.push_back(vp);
      series.norm.push_back(n2);
    }
    while (next_snap < snaps.size() &&
           stepper.time() >= snaps[next_snap] - 0.5 * h) {
      stepper.check_health();
      stepper.store(current);
      const std::string tag = snapshot_tag(snaps[next_snap]);
      write_wavefunction(w, "psi_t" + tag + ".wf", current);
      write_profile(w, "quantum_p_marginal_t" + tag + ".tsv", momentum_marginal(current),
                    {"t=" + format_g17(current.t)});
      ++next_snap;
    }
    if (step_i < total_steps) stepper.step_once();
  }
  stepper.check_health();
  WavepacketState final_psi;
  stepper.store(final_psi);

  {
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < series.times.size(); ++i)
      rows.push_back({series.times[i], series.mean_z[i], series.mean_p[i],
                      std::sqrt(series.var_z[i]), series.var_p[i], series.norm[i]});
    write_columnar(w.dir / "quantum_series.tsv",
                   {"t", "mean_z", "mean_p", "delta_z", "var_p", "norm"}, rows,
                   {"h=" + format_g17(h),
                    "absorbed_norm=" + format_g17(final_psi.absorbed_norm)});
    w.note("quantum_series.tsv");
  }

  const DistributionProfile final_marginal = momentum_marginal(final_psi);
  if (cfg.analysis.comb) {
    const CombFit fit = comb_fit(final_marginal);
    write_comb_report(w, "quantum_comb", final_marginal, fit);
    const DistributionProfile zmarg = position_marginal(final_psi);
    const CombFit zfit = comb_fit(zmarg);
    write_kv_block(w.dir / "quantum_comb_position_fit.txt",
                   {{"spacing_defined", zfit.spacing_defined ? "1" : "0"},
                    {"spacing", format_g17(zfit.spacing)},
                    {"comb_width", format_g17(zfit.comb_width)},
                    {"envelope_width", format_g17(zfit.envelope_width)},
                    {"contrast", format_g17(zfit.contrast)},
                    {"offset", format_g17(zfit.offset)}});
    w.note("quantum_comb_position_fit.txt");
  }
  if (cfg.analysis.diffusion) {
    try {
      const DiffusionFit fit = diffusion_exponent(series.times, series.var_p,
                                                  cfg.analysis.diffusion_t_lo,
                                                  cfg.analysis.diffusion_t_hi);
      write_kv_block(w.dir / "quantum_diffusion_fit.txt",
                     {{"alpha", format_g17(fit.alpha)},
                      {"prefactor", format_g17(fit.prefactor)},
                      {"t_lo", format_g17(fit.t_lo)},
                      {"t_hi", format_g17(fit.t_hi)},
                      {"r_squared", format_g17(fit.r_squared)}});
      w.note("quantum_diffusion_fit.txt");
    } catch (const FitDomainError&) {
    }
  }
  if (cfg.analysis.breathing && series.times.size() >= 32) {
    std::vector<double> delta_z(series.var_z.size());
    for (std::size_t i = 0; i < delta_z.size(); ++i) delta_z[i] = std::sqrt(series.var_z[i]);
    const BreathingScore score = breathing_score(series.times, series.var_p, delta_z);
    write_kv_block(w.dir / "quantum_breathing.txt",
                   {{"defined", score.defined ? "1" : "0"},
                    {"correlation", format_g17(score.correlation)},
                    {"period_trend", format_g17(score.period_trend)},
                    {"mean_period", format_g17(score.mean_period)},
                    {"crossings", std::to_string(score.crossings)}});
    w.note("quantum_breathing.txt");
  }
}

}  // namespace detail

/// Execute the configured pipeline. Identical completed runs are detected via
/// the manifest's config hash and skipped unless force is set. On pipeline
/// failure the partial artifacts are committed with status "failed" so they
/// can be inspected; the error is recorded in the manifest.
inline RunResult run(const RunConfig& cfg, bool force = false) {
  const std::filesystem::path final_dir = resolve_output_dir(cfg.output_dir);
  const std::string hash = config_hash(cfg);

  if (!force && std::filesystem::exists(final_dir / kManifestName)) {
    RunManifest existing = read_manifest(final_dir);
    if (existing.config_hash == hash && existing.status == "complete") {
      existing.no_op = true;
      return {existing, final_dir};
    }
  }

  std::filesystem::path tmp_dir = final_dir;
  tmp_dir += ".tmp-" + std::to_string(
      std::chrono::steady_clock::now().time_since_epoch().count() % 1000000);
  std::filesystem::create_directories(tmp_dir);

  RunManifest manifest;
  manifest.config_hash = hash;
  manifest.scaled = cfg.resolved_scaled();
  detail::ArtifactWriter writer{tmp_dir, &manifest.artifacts};
  detail::PipelineCounters counters;

  const auto t_start = std::chrono::steady_clock::now();
  try {
    // the resolved config is itself the first artifact
    {
      std::ofstream out(tmp_dir / "config.cfg");
      out << serialize_config(cfg);
    }
    writer.note("config.cfg");

    if (cfg.mode == RunMode::kClassical || cfg.mode == RunMode::kBoth)
      detail::run_classical_pipeline(cfg, writer, counters);
    if (cfg.mode == RunMode::kQuantum || cfg.mode == RunMode::kBoth)
      detail::run_quantum_pipeline(cfg, writer, counters);
    manifest.status = "complete";
  } catch (const Error& e) {
    manifest.status = "failed";
    manifest.error = e.what();
  }
  manifest.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  manifest.classical_bounces = counters.classical_bounces;
  manifest.quantum_steps = counters.quantum_steps;

  write_manifest(tmp_dir, manifest);

  if (std::filesystem::exists(final_dir)) std::filesystem::remove_all(final_dir);
  std::filesystem::create_directories(final_dir.parent_path().empty()
                                          ? std::filesystem::path(".")
                                          : final_dir.parent_path());
  std::filesystem::rename(tmp_dir, final_dir);
  return {manifest, final_dir};
}

}  // namespace fermi
