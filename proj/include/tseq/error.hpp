// SPDX-License-Identifier: Apache-2.0
//
// Error categories shared by every module. Each maps to one CLI exit code.

#pragma once

#include <stdexcept>
#include <string>

namespace tseq {

class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A token sequence violated the generation contract (roles, legality, EOS).
class DecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what, long sample_index = -1)
      : std::runtime_error(what), sample_index_(sample_index) {}

  /// Index of the offending batch element, or -1 when not tied to one.
  long sample_index() const noexcept { return sample_index_; }

 private:
  long sample_index_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inputs that are individually well-formed but inconsistent with each other
/// (e.g. prediction and ground-truth video ids differ).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool condition, const std::string& message) {
  if (!condition) throw InvalidArgument(message);
}

}  // namespace detail
}  // namespace tseq
