#pragma once

#include <stdexcept>
#include <string>

namespace fermi {

/// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// A physical or numerical parameter violates its domain (non-positive mass,
/// negative sigma, ...). The message names the offending field.
class InvalidParameterError : public Error {
 public:
  using Error::Error;
};

/// Window index s is negative or not a multiple of 1/2.
class InvalidIndexError : public Error {
 public:
  using Error::Error;
};

/// Root bracketing for the hard-wall bounce failed within the search horizon.
class BracketingError : public Error {
 public:
  using Error::Error;
};

/// Initial ensemble specification cannot be sampled (expected rejection rate
/// above one half, or the draw budget was exhausted).
class InvalidInitialConditionError : public Error {
 public:
  using Error::Error;
};

/// Requested wavepacket does not fit the grid; names the violated margin.
class GridTooSmallError : public Error {
 public:
  using Error::Error;
};

/// Wavepacket propagation produced non-finite amplitudes or probability
/// escaped to the edge of the momentum grid.
class PropagationDivergedError : public Error {
 public:
  using Error::Error;
};

/// Observer time does not lie on the propagation time grid.
class ScheduleError : public Error {
 public:
  using Error::Error;
};

/// Diagnostic fit asked to operate outside its domain (non-positive data in a
/// log-log window, too few points, ...).
class FitDomainError : public Error {
 public:
  using Error::Error;
};

/// Histogram request where every sample falls outside the axis range.
class EmptyHistogramError : public Error {
 public:
  using Error::Error;
};

/// Config parse/validation failure; the message carries the key path.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Filesystem-level failure while reading or writing run artifacts.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace fermi
