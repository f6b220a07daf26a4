#pragma once

#include <stdexcept>
#include <string>

namespace nup {

/// A loss or component evaluated to NaN/Inf; the message carries the diagnostics.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace nup
