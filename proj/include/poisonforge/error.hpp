#pragma once

#include <stdexcept>
#include <string>

namespace poisonforge {

/// Bad caller input: shape mismatches, out-of-range parameters, missing
/// attack targets, and similar contract violations.
struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Malformed on-disk data: bad magic, truncated payload, unparsable header.
/// The message names the offending field or array.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Structurally valid data whose stored invariants do not hold, e.g. a
/// poisoned dataset whose pixels violate its declared budget.
struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Operation requires state the object does not have (e.g. momentum update
/// on a bundle built without a momentum copy).
struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Degenerate numerics in strict mode, e.g. a zero-norm row fed to a
/// cosine-based metric.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A lossy media transform failed (codec error).
struct TransformError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Training diverged; carries the step index at which the loss went
/// non-finite.
struct TrainingError : std::runtime_error {
  long step_index;
  TrainingError(const std::string& msg, long step)
      : std::runtime_error(msg + " (step " + std::to_string(step) + ")"),
        step_index(step) {}
};

/// A poison generator could not meet its own quality bar (e.g. the surrogate
/// never reached the required clean train accuracy).
struct GeneratorQualityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Requested a gradient through something that cannot provide one.
struct UnsupportedOperationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Config validation failure. The message names the offending key and the
/// module it belongs to.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace poisonforge
