#pragma once

// Run configuration: sectioned key-value text ("[section] / key = value",
// '#' or ';' comments). Unknown keys are errors, not warnings; defaults are
// resolved at parse time so serialize(parse(x)) is canonical and
// parse(serialize(cfg)) == cfg.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fermi/classical.hpp"
#include "fermi/columnar.hpp"
#include "fermi/errors.hpp"
#include "fermi/quantum.hpp"
#include "fermi/scaling.hpp"
#include "fermi/version.hpp"

namespace fermi {

enum class RunMode { kClassical, kQuantum, kBoth };

inline std::string to_string(RunMode m) {
  switch (m) {
    case RunMode::kClassical: return "classical";
    case RunMode::kQuantum: return "quantum";
    case RunMode::kBoth: return "both";
  }
  return "?";
}

inline std::string to_string(DynamicsBackend b) {
  return b == DynamicsBackend::kHardWall ? "hard-wall" : "smooth";
}

struct ScheduleConfig {
  double t_end = 100.0;
  double sample_dt = 1.0;
  std::vector<double> snapshots;  // t_end is always snapshotted in addition
};

struct InitialConfig {
  double center_z = 0.0;
  double center_p = 0.0;
  double delta_p = 0.1;
  double delta_z = 0.0;  // resolved: kbar/(2 delta_p) when left 0
  long n_particles = 10000;
  double t0 = 0.0;
};

struct ClassicalConfig {
  DynamicsBackend backend = DynamicsBackend::kSmooth;
  double h = 1e-3;
  double substep_tol = 1e-4;
  bool ballistic_jumps = true;
  AccelFlagRule accel;
};

struct QuantumConfig {
  SpatialGrid grid;
  double h = 2e-3;
  bool auto_step = true;
  bool absorber = false;
  double absorber_fraction = 0.05;
};

struct AnalysisConfig {
  bool comb = true;
  bool diffusion = true;
  double diffusion_t_lo = 0.0;  // resolved: t_end/10 when left 0
  double diffusion_t_hi = 0.0;  // resolved: t_end when left 0
  bool breathing = true;
  long histogram_bins = 512;
};

struct SweepConfig {
  std::string axis;            // e.g. physics.scaled.lambda
  std::vector<double> values;
  int workers = 0;             // 0 = hardware concurrency
};

struct RunConfig {
  int format_version = kFormatVersion;
  std::optional<LabParams> lab;
  std::optional<ScaledParams> scaled;
  RunMode mode = RunMode::kClassical;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string output_dir = "run-out";
  ScheduleConfig schedule;
  InitialConfig initial;
  ClassicalConfig classical;
  QuantumConfig quantum;
  AnalysisConfig analysis;
  SweepConfig sweep;

  /// The dimensionless control set every pipeline consumes.
  ScaledParams resolved_scaled() const {
    if (scaled) return *scaled;
    return to_dimensionless(*lab);
  }
};

namespace detail {

struct KeyValueFile {
  std::map<std::string, std::string> values;  // "section.key" -> raw text
  std::vector<std::string> order;
  mutable std::set<std::string> consumed;

  bool has(const std::string& path) const { return values.count(path) > 0; }

  std::optional<std::string> take(const std::string& path) const {
    auto it = values.find(path);
    if (it == values.end()) return std::nullopt;
    consumed.insert(path);
    return it->second;
  }
};

inline KeyValueFile parse_key_values(const std::string& text) {
  KeyValueFile kv;
  std::istringstream in(text);
  std::string line;
  std::string section;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto cut = line.find_first_of("#;");
    if (cut != std::string::npos) line.erase(cut);
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      if (a == std::string::npos) return std::string();
      const auto b = s.find_last_not_of(" \t\r");
      return s.substr(a, b - a + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("line " + std::to_string(line_no) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty())
        throw ConfigError("line " + std::to_string(line_no) + ": empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    const std::string path = section.empty() ? key : section + "." + key;
    if (kv.values.count(path))
      throw ConfigError("duplicate key: " + path);
    kv.values[path] = value;
    kv.order.push_back(path);
  }
  return kv;
}

inline double parse_double(const std::string& path, const std::string& raw) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(raw, &pos);
    if (pos != raw.size()) throw std::invalid_argument("trail");
    return v;
  } catch (...) {
    throw ConfigError(path + ": cannot parse '" + raw + "' as a number");
  }
}

inline long parse_long(const std::string& path, const std::string& raw) {
  try {
    std::size_t pos = 0;
    const long v = std::stol(raw, &pos);
    if (pos != raw.size()) throw std::invalid_argument("trail");
    return v;
  } catch (...) {
    throw ConfigError(path + ": cannot parse '" + raw + "' as an integer");
  }
}

inline bool parse_bool(const std::string& path, const std::string& raw) {
  if (raw == "true" || raw == "1" || raw == "on" || raw == "yes") return true;
  if (raw == "false" || raw == "0" || raw == "off" || raw == "no") return false;
  throw ConfigError(path + ": cannot parse '" + raw + "' as a boolean");
}

inline std::vector<double> parse_double_list(const std::string& path, const std::string& raw) {
  std::vector<double> out;
  std::string item;
  std::istringstream ss(raw);
  while (std::getline(ss, item, ',')) {
    const auto a = item.find_first_not_of(" \t");
    if (a == std::string::npos) continue;
    const auto b = item.find_last_not_of(" \t");
    out.push_back(parse_double(path, item.substr(a, b - a + 1)));
  }
  return out;
}

struct Getter {
  const KeyValueFile& kv;

  double num(const std::string& path, double dflt) const {
    auto raw = kv.take(path);
    return raw ? parse_double(path, *raw) : dflt;
  }
  std::optional<double> num_opt(const std::string& path) const {
    auto raw = kv.take(path);
    if (!raw) return std::nullopt;
    return parse_double(path, *raw);
  }
  long integer(const std::string& path, long dflt) const {
    auto raw = kv.take(path);
    return raw ? parse_long(path, *raw) : dflt;
  }
  bool boolean(const std::string& path, bool dflt) const {
    auto raw = kv.take(path);
    return raw ? parse_bool(path, *raw) : dflt;
  }
  std::string text(const std::string& path, const std::string& dflt) const {
    auto raw = kv.take(path);
    return raw ? *raw : dflt;
  }
  std::vector<double> list(const std::string& path) const {
    auto raw = kv.take(path);
    return raw ? parse_double_list(path, *raw) : std::vector<double>{};
  }
};

}  // namespace detail

/// Parse and fully validate a run config; all defaults are resolved.
inline RunConfig parse_config(const std::string& text) {
  const detail::KeyValueFile kv = detail::parse_key_values(text);
  const detail::Getter get{kv};
  RunConfig cfg;

  cfg.format_version = static_cast<int>(get.integer("format_version", kFormatVersion));
  if (cfg.format_version != kFormatVersion)
    throw ConfigError("format_version: expected " + std::to_string(kFormatVersion));

  // --- physics: exactly one block ---
  const bool has_scaled = kv.has("physics.scaled.V0") || kv.has("physics.scaled.kappa") ||
                          kv.has("physics.scaled.lambda") || kv.has("physics.scaled.kbar");
  const bool has_lab = kv.has("physics.lab.mass") || kv.has("physics.lab.decay_wavenumber") ||
                       kv.has("physics.lab.mod_frequency") ||
                       kv.has("physics.lab.mod_amplitude") || kv.has("physics.lab.rabi_eff");
  if (has_scaled && has_lab)
    throw ConfigError(
        "physics: both physics.scaled.* and physics.lab.* given; provide exactly one block");
  if (!has_scaled && !has_lab)
    throw ConfigError("physics: missing block; provide physics.scaled.* or physics.lab.*");
  if (has_scaled) {
    ScaledParams s;
    s.V0 = get.num("physics.scaled.V0", 0.0);
    s.kappa = get.num("physics.scaled.kappa", 1.0);
    s.lambda = get.num("physics.scaled.lambda", 0.0);
    s.kbar = get.num("physics.scaled.kbar", 1.0);
    try {
      s.validate();
    } catch (const Error& e) {
      throw ConfigError(std::string("physics.scaled: ") + e.what());
    }
    cfg.scaled = s;
  } else {
    LabParams l;
    l.mass = get.num("physics.lab.mass", 0.0);
    l.gravity = get.num("physics.lab.gravity", kDefaultGravity);
    l.decay_wavenumber = get.num("physics.lab.decay_wavenumber", 0.0);
    l.mod_frequency = get.num("physics.lab.mod_frequency", 0.0);
    l.mod_amplitude = get.num("physics.lab.mod_amplitude", 0.0);
    l.rabi_eff = get.num("physics.lab.rabi_eff", 0.0);
    l.hbar = get.num("physics.lab.hbar", kDefaultHbar);
    try {
      l.validate();
    } catch (const Error& e) {
      throw ConfigError(std::string("physics.lab: ") + e.what());
    }
    cfg.lab = l;
  }

  // --- run ---
  const std::string mode = get.text("run.mode", "classical");
  if (mode == "classical") cfg.mode = RunMode::kClassical;
  else if (mode == "quantum") cfg.mode = RunMode::kQuantum;
  else if (mode == "both") cfg.mode = RunMode::kBoth;
  else throw ConfigError("run.mode: expected classical|quantum|both, got '" + mode + "'");
  if (auto raw = kv.take("run.seed")) {
    cfg.seed = static_cast<std::uint64_t>(detail::parse_long("run.seed", *raw));
    cfg.seed_set = true;
  }
  cfg.output_dir = get.text("run.output_dir", "run-out");
  if (cfg.output_dir.empty()) throw ConfigError("run.output_dir: must not be empty");
  if ((cfg.mode == RunMode::kClassical || cfg.mode == RunMode::kBoth) && !cfg.seed_set)
    throw ConfigError("run.seed: mandatory for ensemble (classical/both) runs");

  // --- schedule ---
  cfg.schedule.t_end = get.num("schedule.t_end", 100.0);
  if (!(cfg.schedule.t_end > 0.0)) throw ConfigError("schedule.t_end: must be > 0");
  cfg.schedule.sample_dt = get.num("schedule.sample_dt", 1.0);
  if (!(cfg.schedule.sample_dt > 0.0)) throw ConfigError("schedule.sample_dt: must be > 0");
  cfg.schedule.snapshots = get.list("schedule.snapshots");
  for (double s : cfg.schedule.snapshots)
    if (s < 0.0 || s > cfg.schedule.t_end)
      throw ConfigError("schedule.snapshots: time " + format_g17(s) + " outside [0, t_end]");
  if (!std::is_sorted(cfg.schedule.snapshots.begin(), cfg.schedule.snapshots.end()))
    throw ConfigError("schedule.snapshots: times must be ascending");

  // --- initial ---
  cfg.initial.center_z = get.num("initial.center_z", 0.0);
  cfg.initial.center_p = get.num("initial.center_p", 0.0);
  cfg.initial.delta_p = get.num("initial.delta_p", 0.1);
  if (!(cfg.initial.delta_p > 0.0)) throw ConfigError("initial.delta_p: must be > 0");
  const ScaledParams scaled = cfg.resolved_scaled();
  cfg.initial.delta_z = get.num("initial.delta_z", 0.0);
  if (cfg.initial.delta_z == 0.0)
    cfg.initial.delta_z = scaled.kbar / (2.0 * cfg.initial.delta_p);
  if (!(cfg.initial.delta_z > 0.0)) throw ConfigError("initial.delta_z: must be > 0");
  cfg.initial.n_particles = get.integer("initial.n_particles", 10000);
  if (cfg.initial.n_particles < 1) throw ConfigError("initial.n_particles: must be >= 1");
  cfg.initial.t0 = get.num("initial.t0", 0.0);

  // --- classical ---
  const std::string backend = get.text("classical.backend", "smooth");
  if (backend == "smooth") cfg.classical.backend = DynamicsBackend::kSmooth;
  else if (backend == "hard-wall") cfg.classical.backend = DynamicsBackend::kHardWall;
  else throw ConfigError("classical.backend: expected smooth|hard-wall, got '" + backend + "'");
  cfg.classical.h = get.num("classical.h", 1e-3);
  if (!(cfg.classical.h > 0.0)) throw ConfigError("classical.h: must be > 0");
  cfg.classical.substep_tol = get.num("classical.substep_tol", 1e-4);
  if (!(cfg.classical.substep_tol > 0.0))
    throw ConfigError("classical.substep_tol: must be > 0");
  cfg.classical.ballistic_jumps = get.boolean("classical.ballistic_jumps", true);
  cfg.classical.accel.window = static_cast<int>(get.integer("classical.accel_window", 10));
  if (cfg.classical.accel.window < 1) throw ConfigError("classical.accel_window: must be >= 1");
  cfg.classical.accel.min_positive =
      static_cast<int>(get.integer("classical.accel_min_positive", cfg.classical.accel.window));
  cfg.classical.accel.gain_threshold = get.num("classical.accel_gain_threshold", 0.0);
  cfg.classical.accel.min_gain_ratio = get.num("classical.accel_min_gain_ratio", 0.25);

  // --- quantum ---
  cfg.quantum.grid.z_min = get.num("quantum.z_min", -5.0);
  cfg.quantum.grid.z_max = get.num("quantum.z_max", 400.0);
  cfg.quantum.grid.n_points = static_cast<std::size_t>(get.integer("quantum.n_points", 1 << 14));
  try {
    cfg.quantum.grid.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("quantum grid: ") + e.what());
  }
  cfg.quantum.h = get.num("quantum.h", 2e-3);
  if (!(cfg.quantum.h > 0.0)) throw ConfigError("quantum.h: must be > 0");
  cfg.quantum.auto_step = get.boolean("quantum.auto_step", true);
  cfg.quantum.absorber = get.boolean("quantum.absorber", false);
  cfg.quantum.absorber_fraction = get.num("quantum.absorber_fraction", 0.05);
  if (!(cfg.quantum.absorber_fraction > 0.0) || !(cfg.quantum.absorber_fraction < 0.5))
    throw ConfigError("quantum.absorber_fraction: must be in (0, 0.5)");

  // --- analysis ---
  cfg.analysis.comb = get.boolean("analysis.comb", true);
  cfg.analysis.diffusion = get.boolean("analysis.diffusion", true);
  cfg.analysis.diffusion_t_lo = get.num("analysis.diffusion_t_lo", 0.0);
  if (cfg.analysis.diffusion_t_lo == 0.0)
    cfg.analysis.diffusion_t_lo = cfg.schedule.t_end / 10.0;
  cfg.analysis.diffusion_t_hi = get.num("analysis.diffusion_t_hi", 0.0);
  if (cfg.analysis.diffusion_t_hi == 0.0) cfg.analysis.diffusion_t_hi = cfg.schedule.t_end;
  if (!(cfg.analysis.diffusion_t_lo < cfg.analysis.diffusion_t_hi))
    throw ConfigError("analysis.diffusion_t_lo must be < analysis.diffusion_t_hi");
  cfg.analysis.breathing = get.boolean("analysis.breathing", true);
  cfg.analysis.histogram_bins = get.integer("analysis.histogram_bins", 512);
  if (cfg.analysis.histogram_bins < 2)
    throw ConfigError("analysis.histogram_bins: must be >= 2");

  // --- sweep (optional section) ---
  cfg.sweep.axis = get.text("sweep.axis", "");
  cfg.sweep.values = get.list("sweep.values");
  cfg.sweep.workers = static_cast<int>(get.integer("sweep.workers", 0));
  if (!cfg.sweep.axis.empty() && cfg.sweep.values.empty())
    throw ConfigError("sweep.values: required when sweep.axis is set");

  // --- unknown keys are errors ---
  std::vector<std::string> unknown;
  for (const auto& path : kv.order)
    if (!kv.consumed.count(path)) unknown.push_back(path);
  if (!unknown.empty()) {
    std::string msg = "unknown config key(s):";
    for (const auto& u : unknown) msg += " " + u;
    throw ConfigError(msg);
  }
  return cfg;
}

/// Canonical text for a resolved config; parse(serialize(cfg)) == cfg.
inline std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream out;
  out << "format_version = " << cfg.format_version << "\n\n";
  if (cfg.scaled) {
    out << "[physics.scaled]\n";
    out << "V0 = " << format_g17(cfg.scaled->V0) << "\n";
    out << "kappa = " << format_g17(cfg.scaled->kappa) << "\n";
    out << "lambda = " << format_g17(cfg.scaled->lambda) << "\n";
    out << "kbar = " << format_g17(cfg.scaled->kbar) << "\n";
  } else {
    out << "[physics.lab]\n";
    out << "mass = " << format_g17(cfg.lab->mass) << "\n";
    out << "gravity = " << format_g17(cfg.lab->gravity) << "\n";
    out << "decay_wavenumber = " << format_g17(cfg.lab->decay_wavenumber) << "\n";
    out << "mod_frequency = " << format_g17(cfg.lab->mod_frequency) << "\n";
    out << "mod_amplitude = " << format_g17(cfg.lab->mod_amplitude) << "\n";
    out << "rabi_eff = " << format_g17(cfg.lab->rabi_eff) << "\n";
    out << "hbar = " << format_g17(cfg.lab->hbar) << "\n";
  }
  out << "\n[run]\n";
  out << "mode = " << to_string(cfg.mode) << "\n";
  if (cfg.seed_set) out << "seed = " << cfg.seed << "\n";
  out << "output_dir = " << cfg.output_dir << "\n";
  out << "\n[schedule]\n";
  out << "t_end = " << format_g17(cfg.schedule.t_end) << "\n";
  out << "sample_dt = " << format_g17(cfg.schedule.sample_dt) << "\n";
  if (!cfg.schedule.snapshots.empty()) {
    out << "snapshots = ";
    for (std::size_t i = 0; i < cfg.schedule.snapshots.size(); ++i)
      out << (i ? "," : "") << format_g17(cfg.schedule.snapshots[i]);
    out << "\n";
  }
  out << "\n[initial]\n";
  out << "center_z = " << format_g17(cfg.initial.center_z) << "\n";
  out << "center_p = " << format_g17(cfg.initial.center_p) << "\n";
  out << "delta_p = " << format_g17(cfg.initial.delta_p) << "\n";
  out << "delta_z = " << format_g17(cfg.initial.delta_z) << "\n";
  out << "n_particles = " << cfg.initial.n_particles << "\n";
  out << "t0 = " << format_g17(cfg.initial.t0) << "\n";
  out << "\n[classical]\n";
  out << "backend = " << to_string(cfg.classical.backend) << "\n";
  out << "h = " << format_g17(cfg.classical.h) << "\n";
  out << "substep_tol = " << format_g17(cfg.classical.substep_tol) << "\n";
  out << "ballistic_jumps = " << (cfg.classical.ballistic_jumps ? "true" : "false") << "\n";
  out << "accel_window = " << cfg.classical.accel.window << "\n";
  out << "accel_min_positive = " << cfg.classical.accel.min_positive << "\n";
  out << "accel_gain_threshold = " << format_g17(cfg.classical.accel.gain_threshold) << "\n";
  out << "accel_min_gain_ratio = " << format_g17(cfg.classical.accel.min_gain_ratio) << "\n";
  out << "\n[quantum]\n";
  out << "z_min = " << format_g17(cfg.quantum.grid.z_min) << "\n";
  out << "z_max = " << format_g17(cfg.quantum.grid.z_max) << "\n";
  out << "n_points = " << cfg.quantum.grid.n_points << "\n";
  out << "h = " << format_g17(cfg.quantum.h) << "\n";
  out << "auto_step = " << (cfg.quantum.auto_step ? "true" : "false") << "\n";
  out << "absorber = " << (cfg.quantum.absorber ? "true" : "false") << "\n";
  out << "absorber_fraction = " << format_g17(cfg.quantum.absorber_fraction) << "\n";
  out << "\n[analysis]\n";
  out << "comb = " << (cfg.analysis.comb ? "true" : "false") << "\n";
  out << "diffusion = " << (cfg.analysis.diffusion ? "true" : "false") << "\n";
  out << "diffusion_t_lo = " << format_g17(cfg.analysis.diffusion_t_lo) << "\n";
  out << "diffusion_t_hi = " << format_g17(cfg.analysis.diffusion_t_hi) << "\n";
  out << "breathing = " << (cfg.analysis.breathing ? "true" : "false") << "\n";
  out << "histogram_bins = " << cfg.analysis.histogram_bins << "\n";
  if (!cfg.sweep.axis.empty()) {
    out << "\n[sweep]\n";
    out << "axis = " << cfg.sweep.axis << "\n";
    out << "values = ";
    for (std::size_t i = 0; i < cfg.sweep.values.size(); ++i)
      out << (i ? "," : "") << format_g17(cfg.sweep.values[i]);
    out << "\n";
    out << "workers = " << cfg.sweep.workers << "\n";
  }
  return out.str();
}

/// FNV-1a 64-bit over the canonical serialization.
inline std::uint64_t fnv1a64(const std::string& data) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string config_hash(const RunConfig& cfg) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "fnv1a64:%016llx",
                static_cast<unsigned long long>(fnv1a64(serialize_config(cfg))));
  return buf;
}

/// Apply a `--set key=value` override on the raw config text (flag wins).
inline std::string apply_override(const std::string& text, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string path = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);
  const auto dot = path.rfind('.');
  const std::string section = dot == std::string::npos ? "" : path.substr(0, dot);
  const std::string key = dot == std::string::npos ? path : path.substr(dot + 1);
  // parse/serialize round trip is not possible on raw text with overrides of
  // unknown shape; instead append a dedicated section block at the end, which
  // the line parser treats as the latest value -- but duplicates are errors,
  // so rewrite the original line when present.
  std::istringstream in(text);
  std::ostringstream out;
  std::string line;
  std::string cur_section;
  bool replaced = false;
  while (std::getline(in, line)) {
    std::string probe = line;
    const auto cut = probe.find_first_of("#;");
    if (cut != std::string::npos) probe.erase(cut);
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      if (a == std::string::npos) return std::string();
      const auto b = s.find_last_not_of(" \t\r");
      return s.substr(a, b - a + 1);
    };
    const std::string t = trim(probe);
    if (!t.empty() && t.front() == '[' && t.back() == ']') {
      cur_section = trim(t.substr(1, t.size() - 2));
    } else if (!t.empty()) {
      const auto e = t.find('=');
      if (e != std::string::npos && trim(t.substr(0, e)) == key && cur_section == section) {
        out << key << " = " << value << "\n";
        replaced = true;
        continue;
      }
    }
    out << line << "\n";
  }
  if (!replaced) {
    if (section.empty())
      out << key << " = " << value << "\n";
    else
      out << "[" << section << "]\n" << key << " = " << value << "\n";
  }
  return out.str();
}

}  // namespace fermi
