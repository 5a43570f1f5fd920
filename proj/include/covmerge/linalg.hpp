#pragma once

#include <Eigen/Dense>
#include <vector>

#include "covmerge/errors.hpp"

namespace covmerge {

// All merge math runs in float64 row-major matrices, whatever the storage
// dtype of the checkpoints involved.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// Thin SVD A = U * diag(s) * Vt with a fixed sign convention: the
// largest-magnitude entry of each left singular vector is positive, so the
// factors are reproducible across runs.
struct SvdFactors {
  Matrix u;                 // m x r, orthonormal columns
  Vector singular_values;   // length r = min(m, n), non-increasing
  Matrix vt;                // r x n, orthonormal rows
};

SvdFactors svd(const Matrix& a);

// Rank-reveal threshold used by pinv when no explicit tolerance is given.
double default_pinv_rtol(Eigen::Index rows, Eigen::Index cols);

// Moore-Penrose pseudoinverse. Singular values <= rtol * sigma_max are
// treated as zero; rtol <= 0 selects default_pinv_rtol.
Matrix pinv(const Matrix& a, double rtol = 0.0);

double frobenius_inner(const Matrix& a, const Matrix& b);  // tr(A^T B)
double frobenius_norm(const Matrix& a);

// arccos of the Frobenius cosine between two nonzero matrices, in [0, pi].
// Throws std::invalid_argument on a zero-norm argument.
double angular_distance(const Matrix& a, const Matrix& b);

double spectral_norm(const Matrix& a);  // largest singular value

// Sample Pearson correlation. Throws std::invalid_argument if either series
// has zero variance or fewer than two points.
double pearson(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace covmerge
