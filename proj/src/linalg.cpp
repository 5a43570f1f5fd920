#include "covmerge/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace covmerge {

namespace {

void require_finite(const Matrix& a, const char* op) {
  if (!a.allFinite()) {
    throw NumericalError(std::string(op) + ": matrix has non-finite entries");
  }
}

// Largest-magnitude entry of each left singular vector made positive.
// Ties resolved by the lowest row index.
void apply_sign_convention(Matrix& u, Matrix& vt) {
  for (Eigen::Index j = 0; j < u.cols(); ++j) {
    Eigen::Index arg = 0;
    double best = -1.0;
    for (Eigen::Index i = 0; i < u.rows(); ++i) {
      const double mag = std::abs(u(i, j));
      if (mag > best) {
        best = mag;
        arg = i;
      }
    }
    if (u.rows() > 0 && u(arg, j) < 0.0) {
      u.col(j) = -u.col(j);
      if (j < vt.rows()) vt.row(j) = -vt.row(j);
    }
  }
}

}  // namespace

SvdFactors svd(const Matrix& a) {
  require_finite(a, "svd");
  SvdFactors f;
  const Eigen::Index r = std::min(a.rows(), a.cols());
  if (r == 0) {
    f.u = Matrix::Zero(a.rows(), 0);
    f.singular_values = Vector::Zero(0);
    f.vt = Matrix::Zero(0, a.cols());
    return f;
  }
  // Jacobi is the more accurate kernel for small blocks; divide-and-conquer
  // keeps large benchmark layers tractable. Both are deterministic.
  if (std::max(a.rows(), a.cols()) < 32) {
    Eigen::JacobiSVD<Matrix> dec(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (dec.info() != Eigen::Success) {
      throw NumericalError("svd: Jacobi iteration did not converge");
    }
    f.u = dec.matrixU();
    f.singular_values = dec.singularValues();
    f.vt = dec.matrixV().transpose();
  } else {
    Eigen::BDCSVD<Matrix> dec(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (dec.info() != Eigen::Success) {
      throw NumericalError("svd: divide-and-conquer iteration did not converge");
    }
    f.u = dec.matrixU();
    f.singular_values = dec.singularValues();
    f.vt = dec.matrixV().transpose();
  }
  apply_sign_convention(f.u, f.vt);
  return f;
}

double default_pinv_rtol(Eigen::Index rows, Eigen::Index cols) {
  return static_cast<double>(std::max(rows, cols)) *
         std::numeric_limits<double>::epsilon();
}

Matrix pinv(const Matrix& a, double rtol) {
  require_finite(a, "pinv");
  if (a.rows() == 0 || a.cols() == 0) return Matrix::Zero(a.cols(), a.rows());
  if (rtol <= 0.0) rtol = default_pinv_rtol(a.rows(), a.cols());
  const SvdFactors f = svd(a);
  const double smax = f.singular_values.size() > 0 ? f.singular_values(0) : 0.0;
  const double cutoff = rtol * smax;
  Vector inv(f.singular_values.size());
  for (Eigen::Index i = 0; i < inv.size(); ++i) {
    const double s = f.singular_values(i);
    inv(i) = s > cutoff ? 1.0 / s : 0.0;
  }
  return f.vt.transpose() * inv.asDiagonal() * f.u.transpose();
}

double frobenius_inner(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("frobenius_inner: shape mismatch");
  }
  return (a.array() * b.array()).sum();
}

double frobenius_norm(const Matrix& a) { return a.norm(); }

double angular_distance(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("angular_distance: shape mismatch");
  }
  require_finite(a, "angular_distance");
  require_finite(b, "angular_distance");
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) {
    throw std::invalid_argument("angular_distance: undefined angle for zero-norm argument");
  }
  const double cosv = std::clamp(frobenius_inner(a, b) / (na * nb), -1.0, 1.0);
  // acos is ill-conditioned near +-1; the chord form evaluates the same
  // angle to full precision there.
  if (std::abs(cosv) < 0.99) return std::acos(cosv);
  if (cosv > 0.0) {
    const double chord = (a / na - b / nb).norm();
    return 2.0 * std::asin(std::min(1.0, 0.5 * chord));
  }
  const double chord = (a / na + b / nb).norm();
  return std::numbers::pi - 2.0 * std::asin(std::min(1.0, 0.5 * chord));
}

double spectral_norm(const Matrix& a) {
  require_finite(a, "spectral_norm");
  if (a.rows() == 0 || a.cols() == 0) return 0.0;
  const SvdFactors f = svd(a);
  return f.singular_values.size() > 0 ? f.singular_values(0) : 0.0;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("pearson: length mismatch");
  if (x.size() < 2) throw std::invalid_argument("pearson: need at least two points");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx == 0.0 || syy == 0.0) {
    throw std::invalid_argument("pearson: zero variance series");
  }
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

}  // namespace covmerge
