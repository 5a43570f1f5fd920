#include <cmath>
#include <numbers>

#include "covmerge/linalg.hpp"
#include "covmerge/rng.hpp"
#include "doctest.h"

using namespace covmerge;

namespace {

// Independent largest-singular-value oracle: power iteration on A^T A.
double power_iteration_sigma_max(const Matrix& a, int iters = 2000) {
  if (a.size() == 0) return 0.0;
  const Matrix gram = a.transpose() * a;
  Vector v = Vector::Ones(gram.rows());
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) += 1e-3 * static_cast<double>(i);
  v /= v.norm();
  for (int i = 0; i < iters; ++i) {
    Vector w = gram * v;
    const double n = w.norm();
    if (n == 0.0) return 0.0;
    v = w / n;
  }
  return std::sqrt(v.dot(gram * v));
}

}  // namespace

TEST_CASE("svd of the identity has unit singular values") {
  const SvdFactors f = svd(Matrix::Identity(3, 3));
  REQUIRE(f.singular_values.size() == 3);
  for (int i = 0; i < 3; ++i) CHECK(f.singular_values(i) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("svd of diag(3,0) is (3,0)") {
  Matrix a = Matrix::Zero(2, 2);
  a(0, 0) = 3.0;
  const SvdFactors f = svd(a);
  CHECK(f.singular_values(0) == doctest::Approx(3.0));
  CHECK(f.singular_values(1) == doctest::Approx(0.0));
}

TEST_CASE("svd reconstructs and has orthonormal factors") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = rng.matrix_normal(5, 3);
    const SvdFactors f = svd(a);
    const Matrix rebuilt = f.u * f.singular_values.asDiagonal() * f.vt;
    CHECK((rebuilt - a).norm() <= 1e-10 * a.norm());
    const Matrix ugram = f.u.transpose() * f.u;
    const Matrix vgram = f.vt * f.vt.transpose();
    CHECK((ugram - Matrix::Identity(3, 3)).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK((vgram - Matrix::Identity(3, 3)).cwiseAbs().maxCoeff() <= 1e-10);
    for (Eigen::Index i = 1; i < f.singular_values.size(); ++i) {
      CHECK(f.singular_values(i - 1) >= f.singular_values(i));
    }
  }
}

TEST_CASE("svd is deterministic and sign-fixed") {
  Rng rng(2);
  const Matrix a = rng.matrix_normal(6, 4);
  const SvdFactors f1 = svd(a);
  const SvdFactors f2 = svd(a);
  CHECK(f1.u == f2.u);
  CHECK(f1.vt == f2.vt);
  for (Eigen::Index j = 0; j < f1.u.cols(); ++j) {
    Eigen::Index arg = 0;
    f1.u.col(j).cwiseAbs().maxCoeff(&arg);
    CHECK(f1.u(arg, j) >= 0.0);
  }
}

TEST_CASE("svd rejects non-finite input") {
  Matrix a = Matrix::Zero(2, 2);
  a(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(svd(a), NumericalError);
}

TEST_CASE("pinv of the identity is the identity") {
  const Matrix p = pinv(Matrix::Identity(4, 4));
  CHECK((p - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("pinv of a rank-deficient diagonal inverts the nonzero entries") {
  Matrix a = Matrix::Zero(2, 2);
  a(0, 0) = 4.0;
  const Matrix p = pinv(a);
  CHECK(p(0, 0) == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(p(1, 1) == doctest::Approx(0.0));
  CHECK(p(0, 1) == doctest::Approx(0.0));
}

TEST_CASE("pinv satisfies the four Penrose conditions") {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix m = rng.matrix_normal(4, 4);
    const Matrix a = m.transpose() * m;  // PSD
    const Matrix p = pinv(a);
    const double scale = std::max(1.0, a.norm());
    CHECK((a * p * a - a).norm() <= 1e-8 * scale);
    CHECK((p * a * p - p).norm() <= 1e-8 * std::max(1.0, p.norm()));
    CHECK(((a * p).transpose() - a * p).norm() <= 1e-8 * std::max(1.0, (a * p).norm()));
    CHECK(((p * a).transpose() - p * a).norm() <= 1e-8 * std::max(1.0, (p * a).norm()));
  }
}

TEST_CASE("pinv is an involution on full-rank matrices") {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix a = rng.matrix_normal(5, 3);
    CHECK((pinv(pinv(a)) - a).norm() <= 1e-7 * a.norm());
  }
}

TEST_CASE("pinv of the zero matrix is zero") {
  const Matrix p = pinv(Matrix::Zero(3, 2));
  CHECK(p.rows() == 2);
  CHECK(p.cols() == 3);
  CHECK(p.norm() == 0.0);
}

TEST_CASE("frobenius inner product of identities is the dimension") {
  CHECK(frobenius_inner(Matrix::Identity(2, 2), Matrix::Identity(2, 2)) == 2.0);
}

TEST_CASE("frobenius inner product with zero is zero") {
  Rng rng(5);
  const Matrix a = rng.matrix_normal(3, 4);
  CHECK(frobenius_inner(a, Matrix::Zero(3, 4)) == 0.0);
}

TEST_CASE("frobenius inner product matches the elementwise-sum oracle") {
  Rng rng(6);
  const Matrix a = rng.matrix_normal(4, 5);
  const Matrix b = rng.matrix_normal(4, 5);
  double expected = 0.0;
  for (Eigen::Index i = 0; i < 4; ++i)
    for (Eigen::Index j = 0; j < 5; ++j) expected += a(i, j) * b(i, j);
  CHECK(frobenius_inner(a, b) == doctest::Approx(expected).epsilon(1e-12));
  CHECK_THROWS_AS(frobenius_inner(a, Matrix::Zero(2, 2)), std::invalid_argument);
}

TEST_CASE("angular distance of positive multiples is zero") {
  Rng rng(7);
  const Matrix a = rng.matrix_normal(3, 3);
  CHECK(angular_distance(a, Matrix(2.0 * a)) == 0.0);
}

TEST_CASE("angular distance of orthogonal matrices is pi/2") {
  Matrix a = Matrix::Zero(2, 2);
  Matrix b = Matrix::Zero(2, 2);
  a(0, 0) = 1.0;
  b(1, 1) = 1.0;
  CHECK(angular_distance(a, b) == doctest::Approx(std::numbers::pi / 2).epsilon(1e-14));
}

TEST_CASE("angular distance of antipodal matrices is pi") {
  Rng rng(8);
  const Matrix a = rng.matrix_normal(3, 2);
  CHECK(angular_distance(a, Matrix(-a)) == doctest::Approx(std::numbers::pi).epsilon(1e-14));
}

TEST_CASE("angular distance rejects zero-norm input") {
  CHECK_THROWS_WITH_AS(angular_distance(Matrix::Zero(2, 2), Matrix::Identity(2, 2)),
                       doctest::Contains("undefined angle"), std::invalid_argument);
}

TEST_CASE("angular distance satisfies the triangle inequality") {
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const Matrix a = rng.matrix_normal(3, 3);
    const Matrix b = rng.matrix_normal(3, 3);
    const Matrix c = rng.matrix_normal(3, 3);
    CHECK(angular_distance(a, c) <=
          angular_distance(a, b) + angular_distance(b, c) + 1e-12);
  }
}

TEST_CASE("angular distance is invariant to positive rescaling") {
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix a = rng.matrix_normal(4, 2);
    const Matrix b = rng.matrix_normal(4, 2);
    const double base = angular_distance(a, b);
    for (double c : {1e-6, 0.5, 1e7}) {
      for (double d : {3.0, 1e-4}) {
        CHECK(angular_distance(Matrix(c * a), Matrix(d * b)) ==
              doctest::Approx(base).epsilon(1e-10));
      }
    }
  }
}

TEST_CASE("spectral norm of scaled identities and zero") {
  CHECK(spectral_norm(Matrix(3.0 * Matrix::Identity(4, 4))) == doctest::Approx(3.0));
  CHECK(spectral_norm(Matrix::Zero(3, 2)) == 0.0);
}

TEST_CASE("spectral norm matches the power-iteration oracle") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix a = rng.matrix_normal(6, 4);
    CHECK(spectral_norm(a) == doctest::Approx(power_iteration_sigma_max(a)).epsilon(1e-8));
  }
}

TEST_CASE("pearson of a series with itself is one") {
  const std::vector<double> x = {1.0, 2.0, 4.5, -3.0};
  CHECK(pearson(x, x) == 1.0);
  std::vector<double> nx;
  for (double v : x) nx.push_back(-v);
  CHECK(pearson(x, nx) == -1.0);
}

TEST_CASE("pearson matches the direct formula") {
  Rng rng(12);
  std::vector<double> x, y;
  for (int i = 0; i < 50; ++i) {
    x.push_back(rng.normal());
    y.push_back(rng.normal());
  }
  const double n = 50.0;
  double mx = 0, my = 0;
  for (int i = 0; i < 50; ++i) {
    mx += x[i] / n;
    my += y[i] / n;
  }
  double sxx = 0, syy = 0, sxy = 0;
  for (int i = 0; i < 50; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  CHECK(pearson(x, y) == doctest::Approx(sxy / std::sqrt(sxx * syy)).epsilon(1e-12));
}

TEST_CASE("pearson rejects constant and short series") {
  CHECK_THROWS_WITH_AS(pearson({1.0, 1.0, 1.0}, {1.0, 2.0, 3.0}),
                       doctest::Contains("zero variance"), std::invalid_argument);
  CHECK_THROWS_AS(pearson({1.0}, {2.0}), std::invalid_argument);
  CHECK_THROWS_AS(pearson({1.0, 2.0}, {2.0}), std::invalid_argument);
}

TEST_CASE("pseudoinverse perturbation stays below the norm-product bound") {
  Rng rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    const auto m = static_cast<Eigen::Index>(1 + rng.integer(6));
    const auto n = static_cast<Eigen::Index>(1 + rng.integer(6));
    const Matrix a = rng.matrix_normal(m, n);
    const Matrix b = rng.matrix_normal(m, n);
    const Matrix pa = pinv(a);
    const Matrix pb = pinv(b);
    const double rhs = std::max(pa.norm() * pa.norm(), pb.norm() * pb.norm()) * (a - b).norm();
    CHECK((pa - pb).norm() <= rhs);
  }
}
