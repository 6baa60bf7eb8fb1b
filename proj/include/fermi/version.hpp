#pragma once

namespace fermi {

inline constexpr const char* kVersion = "0.1.0";

// Stamped into every columnar/raw artifact header and into run manifests.
inline constexpr int kFormatVersion = 1;

}  // namespace fermi
