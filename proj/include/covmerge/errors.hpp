#pragma once

#include <stdexcept>
#include <string>

namespace covmerge {

// Malformed external input: container files, config files.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A numerical procedure failed (divergence, non-convergence, bad conditioning).
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace covmerge
