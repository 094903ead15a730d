#pragma once

#include <Eigen/Dense>

namespace mixfit {

/// Smallest admissible Cholesky pivot (the diagonal entry before its square root).
inline constexpr double kMinCholeskyPivot = 1e-12;

/// Cholesky factor of a symmetric positive-definite matrix, Sigma = L L^T.
class SpdFactor {
 public:
  /// Throws DecompositionError when any pivot falls below kMinCholeskyPivot.
  explicit SpdFactor(const Eigen::MatrixXd& sigma);

  Eigen::Index dim() const { return lower_.rows(); }
  const Eigen::MatrixXd& lower() const { return lower_; }
  double log_det() const { return log_det_; }

  /// r^T Sigma^{-1} r, through one triangular solve.
  double squared_mahalanobis(const Eigen::Ref<const Eigen::VectorXd>& r) const;

  Eigen::VectorXd solve(const Eigen::Ref<const Eigen::VectorXd>& b) const;
  /// Solves for several right-hand sides at once.
  Eigen::MatrixXd solve_many(const Eigen::Ref<const Eigen::MatrixXd>& b) const;
  Eigen::MatrixXd inverse() const;

 private:
  Eigen::MatrixXd lower_;
  double log_det_ = 0.0;
};

/// Solves the symmetric normal equations A x = b. Throws CollinearityError
/// naming the columns left out of the numerical rank when A is singular.
Eigen::VectorXd solve_normal_equations(const Eigen::MatrixXd& a, const Eigen::VectorXd& b);

/// Symmetrizes and raises every eigenvalue of `sigma` to at least `floor`.
Eigen::MatrixXd floor_eigenvalues(const Eigen::MatrixXd& sigma, double floor);

}  // namespace mixfit
