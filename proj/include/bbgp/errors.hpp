#pragma once

#include <stdexcept>
#include <string>

namespace bbgp {

// Base class for all library errors.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Inconsistent dimensions or an invalid model configuration.
struct config_error : error {
  using error::error;
};

// Arguments outside the domain of a probability function.
struct domain_error : error {
  using error::error;
};

// Malformed input file; message carries the line number when known.
struct load_error : error {
  using error::error;
};

// Initialization could not produce a usable starting point.
struct init_error : error {
  using error::error;
};

// The iterative fit did not reach the requested tolerance.
struct convergence_error : error {
  using error::error;
};

// Caller violated an interface contract (e.g. non-nested models).
struct usage_error : error {
  using error::error;
};

}  // namespace bbgp
