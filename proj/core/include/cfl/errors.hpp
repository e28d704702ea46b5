#pragma once

#include <stdexcept>
#include <string>

namespace cfl {

// Base class for all library failures. The CLI maps subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape, key-set or layer-count inconsistencies.
class StructuralError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// An operation was asked to differentiate or execute something outside the
// supported op set.
class CapabilityError : public Error {
 public:
  using Error::Error;
};

// A latency-table lookup hit a key the table does not cover.
class CoverageError : public Error {
 public:
  using Error::Error;
};

// No architecture fits under a worker's latency bound. Carries the tightest
// latency seen while sampling so callers can report how far off the bound is.
class InfeasibilityError : public Error {
 public:
  InfeasibilityError(const std::string& msg, double tightest_ms)
      : Error(msg), tightest_latency_ms(tightest_ms) {}
  double tightest_latency_ms;
};

class PartitionError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ReportError : public Error {
 public:
  using Error::Error;
};

}  // namespace cfl
