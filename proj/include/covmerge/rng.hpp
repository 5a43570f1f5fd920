#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "covmerge/linalg.hpp"

namespace covmerge {

// Deterministic generator with fixed output across standard libraries:
// draws are derived from raw mt19937_64 words, not from std distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform on [0, 1), a multiple of 2^-53.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller transform; 1 - u keeps the log argument in (0, 1].
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t integer(std::uint64_t n) { return n == 0 ? 0 : engine_() % n; }

  Matrix matrix_normal(Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = scale * normal();
    return m;
  }

  // Entries on the 2^-52 grid in [lo, hi); differences of such values stay
  // exact in float64, which the bit-exact reconstruction checks rely on.
  Matrix matrix_uniform(Eigen::Index rows, Eigen::Index cols, double lo = -1.0,
                        double hi = 1.0) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = uniform(lo, hi);
    return m;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace covmerge
