#pragma once

#include <stdexcept>
#include <string>

namespace ltu {

// Invalid configuration, plan file, or command line. CLI maps this to exit 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Failure while doing the work (bad data, shape mismatch, broken file,
// non-finite loss). CLI maps this to exit 1.
struct RuntimeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace ltu
