#pragma once

// Run manifest: resolved parameters, config hash, artifact checksums, wall
// time and step counts. Written last into the run directory as the commit
// marker; verify_manifest detects any post-hoc artifact edit.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fermi/config.hpp"
#include "fermi/errors.hpp"
#include "fermi/scaling.hpp"
#include "fermi/version.hpp"

namespace fermi {

struct ArtifactEntry {
  std::string path;  // relative to the run directory
  std::uint64_t bytes = 0;
  std::string checksum;
};

struct RunManifest {
  int format_version = kFormatVersion;
  std::string code_version = kVersion;
  std::string config_hash;
  ScaledParams scaled;
  std::string status;  // "complete" | "failed"
  std::string error;
  std::vector<ArtifactEntry> artifacts;
  double wall_seconds = 0.0;
  long classical_steps = 0;
  long classical_bounces = 0;
  long quantum_steps = 0;
  bool no_op = false;  // true when an identical completed run was found
};

inline constexpr const char* kManifestName = "manifest.json";

inline std::string checksum_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checksum_file: cannot open " + path.string());
  std::uint64_t h = 1469598103934665603ULL;
  char buf[65536];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    const std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
    if (got < static_cast<std::streamsize>(sizeof(buf))) break;
  }
  char out[32];
  std::snprintf(out, sizeof(out), "fnv1a64:%016llx", static_cast<unsigned long long>(h));
  return out;
}

inline nlohmann::json to_json(const RunManifest& m) {
  nlohmann::json j;
  j["format_version"] = m.format_version;
  j["code_version"] = m.code_version;
  j["config_hash"] = m.config_hash;
  j["scaled_params"] = {{"V0", m.scaled.V0},
                        {"kappa", m.scaled.kappa},
                        {"lambda", m.scaled.lambda},
                        {"kbar", m.scaled.kbar}};
  j["status"] = m.status;
  if (!m.error.empty()) j["error"] = m.error;
  j["artifacts"] = nlohmann::json::array();
  for (const auto& a : m.artifacts)
    j["artifacts"].push_back({{"path", a.path}, {"bytes", a.bytes}, {"checksum", a.checksum}});
  j["wall_seconds"] = m.wall_seconds;
  j["step_counts"] = {{"classical_steps", m.classical_steps},
                      {"classical_bounces", m.classical_bounces},
                      {"quantum_steps", m.quantum_steps}};
  return j;
}

inline RunManifest manifest_from_json(const nlohmann::json& j) {
  RunManifest m;
  m.format_version = j.at("format_version").get<int>();
  m.code_version = j.at("code_version").get<std::string>();
  m.config_hash = j.at("config_hash").get<std::string>();
  const auto& s = j.at("scaled_params");
  m.scaled.V0 = s.at("V0").get<double>();
  m.scaled.kappa = s.at("kappa").get<double>();
  m.scaled.lambda = s.at("lambda").get<double>();
  m.scaled.kbar = s.at("kbar").get<double>();
  m.status = j.at("status").get<std::string>();
  if (j.contains("error")) m.error = j.at("error").get<std::string>();
  for (const auto& a : j.at("artifacts")) {
    ArtifactEntry e;
    e.path = a.at("path").get<std::string>();
    e.bytes = a.at("bytes").get<std::uint64_t>();
    e.checksum = a.at("checksum").get<std::string>();
    m.artifacts.push_back(e);
  }
  m.wall_seconds = j.at("wall_seconds").get<double>();
  const auto& c = j.at("step_counts");
  m.classical_steps = c.at("classical_steps").get<long>();
  m.classical_bounces = c.at("classical_bounces").get<long>();
  m.quantum_steps = c.at("quantum_steps").get<long>();
  return m;
}

inline void write_manifest(const std::filesystem::path& dir, const RunManifest& m) {
  std::ofstream out(dir / kManifestName);
  if (!out) throw IoError("write_manifest: cannot open " + (dir / kManifestName).string());
  out << to_json(m).dump(2) << "\n";
  if (!out) throw IoError("write_manifest: write failed");
}

inline RunManifest read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / kManifestName);
  if (!in) throw IoError("read_manifest: cannot open " + (dir / kManifestName).string());
  nlohmann::json j;
  in >> j;
  return manifest_from_json(j);
}

/// Re-checksum all artifacts against the manifest; returns the mismatching
/// paths (empty = verified).
inline std::vector<std::string> verify_manifest(const std::filesystem::path& dir) {
  const RunManifest m = read_manifest(dir);
  std::vector<std::string> bad;
  for (const auto& a : m.artifacts) {
    const auto p = dir / a.path;
    if (!std::filesystem::exists(p) || checksum_file(p) != a.checksum)
      bad.push_back(a.path);
  }
  return bad;
}

}  // namespace fermi
