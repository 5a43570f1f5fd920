// Acceptance suite: one line per criterion, nonzero exit on any failure.
// Each check pins its tolerances and instance counts in src/verify.cpp.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>

#include "covmerge/verify.hpp"

int main(int argc, char** argv) {
  std::uint64_t seed = 0;
  if (argc > 1) seed = std::strtoull(argv[1], nullptr, 10);

  using clock = std::chrono::steady_clock;
  const auto begin = clock::now();
  const auto results = covmerge::verify::run_verification(seed);
  const double elapsed = std::chrono::duration<double>(clock::now() - begin).count();

  int failures = 0;
  int index = 0;
  for (const auto& r : results) {
    ++index;
    std::printf("criterion %02d %-44s %s  [%s]\n", index, r.name.c_str(),
                r.passed ? "PASS" : "FAIL", r.detail.c_str());
    if (!r.passed) ++failures;
  }

  // The descent-oracle comparison must finish well inside its 30 s budget;
  // the whole suite shares that bound here.
  std::printf("suite runtime %.2f s (budget 30 s)\n", elapsed);
  if (elapsed > 30.0) {
    std::printf("criterion runtime budget exceeded\n");
    ++failures;
  }

  if (failures > 0) {
    std::printf("%d criterion(s) failed\n", failures);
    return 1;
  }
  std::printf("all %zu criteria passed\n", results.size());
  return 0;
}
