#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace relflow {

/// Invalid configuration value or command-line input.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Corrupt or truncated binary container. Carries the byte offset where parsing failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// NaN/Inf where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An operation was called in the wrong order (e.g. backward without a recorded forward).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// The pair sampler could not find a single non-ambiguous pair within its retry budget.
class SamplingExhausted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A Gaussian step density was requested with zero noise.
class DegenerateDensity : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class RewardUnavailable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// External judge timed out, died, or replied with something unparseable.
class JudgeUnavailable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace relflow
