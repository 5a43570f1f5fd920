#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace covmerge::verify {

struct PropertyResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

// The full property suite, in a fixed order, deterministic for a given
// seed. Every tolerance is pinned in the implementation.
std::vector<PropertyResult> run_verification(std::uint64_t seed);

}  // namespace covmerge::verify
