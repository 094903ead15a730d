#include <doctest.h>

#include "mixfit/errors.hpp"
#include "mixfit/linalg.hpp"

using namespace mixfit;

TEST_SUITE("linalg") {
  TEST_CASE("cholesky factor reproduces a hand 2x2 matrix") {
    Eigen::MatrixXd s(2, 2);
    s << 4, 2, 2, 3;
    const SpdFactor f(s);
    CHECK((f.lower() * f.lower().transpose() - s).norm() < 1e-14);
    CHECK(f.log_det() == doctest::Approx(std::log(4.0 * 3.0 - 2.0 * 2.0)).epsilon(1e-14));

    // r' S^-1 r against the adjugate inverse.
    Eigen::Vector2d r(1.0, -2.0);
    Eigen::Matrix2d inv;
    inv << 3, -2, -2, 4;
    inv /= 8.0;
    CHECK(f.squared_mahalanobis(r) == doctest::Approx(r.dot(inv * r)).epsilon(1e-14));
    CHECK((f.inverse() - inv).norm() < 1e-14);
    CHECK((s * f.solve(r) - r).norm() < 1e-13);
  }

  TEST_CASE("non positive definite input is rejected") {
    Eigen::MatrixXd s(2, 2);
    s << 1, 2, 2, 1;
    CHECK_THROWS_AS(SpdFactor{s}, DecompositionError);
    CHECK_THROWS_AS(SpdFactor{Eigen::MatrixXd::Zero(3, 3)}, DecompositionError);
    CHECK_THROWS_AS(SpdFactor{Eigen::MatrixXd(2, 3)}, DimensionError);
  }

  TEST_CASE("pivot threshold") {
    Eigen::MatrixXd s = Eigen::MatrixXd::Identity(2, 2);
    s(1, 1) = 0.5 * kMinCholeskyPivot;
    CHECK_THROWS_AS(SpdFactor{s}, DecompositionError);
    s(1, 1) = 2.0 * kMinCholeskyPivot;
    CHECK_NOTHROW(SpdFactor{s});
  }

  TEST_CASE("collinear normal equations name the dependent column") {
    Eigen::MatrixXd x(4, 3);
    x << 1, 2, 0, 1, 4, 1, 1, 6, 0, 1, 8, 1;
    x.col(1) = 2.0 * x.col(0);  // column 1 duplicates column 0
    const Eigen::MatrixXd a = x.transpose() * x;
    try {
      solve_normal_equations(a, Eigen::VectorXd::Ones(3));
      FAIL("expected CollinearityError");
    } catch (const CollinearityError& e) {
      REQUIRE(e.columns().size() == 1);
      CHECK((e.columns()[0] == 0 || e.columns()[0] == 1));
    }
  }

  TEST_CASE("eigenvalue floor") {
    Eigen::MatrixXd s(2, 2);
    s << 1, 1, 1, 1;  // eigenvalues 0 and 2
    const Eigen::MatrixXd f = floor_eigenvalues(s, 1e-3);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(f);
    CHECK(eig.eigenvalues()(0) == doctest::Approx(1e-3));
    CHECK(eig.eigenvalues()(1) == doctest::Approx(2.0));
    // Already above the floor: returned unchanged.
    CHECK((floor_eigenvalues(Eigen::MatrixXd::Identity(3, 3), 1e-8) -
           Eigen::MatrixXd::Identity(3, 3))
              .norm() == 0.0);
  }
}
