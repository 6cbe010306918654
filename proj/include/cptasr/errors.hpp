#pragma once

#include <stdexcept>
#include <string>

namespace cptasr {

/// Invalid configuration value (bad range, unknown preset, mismatched shapes).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent data (manifests, feature files, checkpoints).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A CTC target cannot be aligned to the available number of frames.
struct InfeasibleError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// No pseudo-label survived confidence filtering.
struct EmptyPseudoPoolError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Training produced non-finite values.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace cptasr
