#include "mixfit/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <vector>
#include <string>

#include "mixfit/errors.hpp"

namespace mixfit {

SpdFactor::SpdFactor(const Eigen::MatrixXd& sigma) {
  const Eigen::Index p = sigma.rows();
  if (sigma.cols() != p || p == 0) {
    throw DimensionError("covariance must be a non-empty square matrix");
  }
  lower_ = Eigen::MatrixXd::Zero(p, p);
  for (Eigen::Index j = 0; j < p; ++j) {
    double pivot = sigma(j, j);
    for (Eigen::Index k = 0; k < j; ++k) pivot -= lower_(j, k) * lower_(j, k);
    if (!(pivot >= kMinCholeskyPivot)) {
      throw DecompositionError("matrix is not positive definite: Cholesky pivot " +
                               std::to_string(pivot) + " at column " +
                               std::to_string(j));
    }
    const double d = std::sqrt(pivot);
    lower_(j, j) = d;
    log_det_ += 2.0 * std::log(d);
    for (Eigen::Index i = j + 1; i < p; ++i) {
      double s = sigma(i, j);
      for (Eigen::Index k = 0; k < j; ++k) s -= lower_(i, k) * lower_(j, k);
      lower_(i, j) = s / d;
    }
  }
}

double SpdFactor::squared_mahalanobis(const Eigen::Ref<const Eigen::VectorXd>& r) const {
  return lower_.triangularView<Eigen::Lower>().solve(r).squaredNorm();
}

Eigen::VectorXd SpdFactor::solve(const Eigen::Ref<const Eigen::VectorXd>& b) const {
  Eigen::VectorXd x = lower_.triangularView<Eigen::Lower>().solve(b);
  lower_.transpose().triangularView<Eigen::Upper>().solveInPlace(x);
  return x;
}

Eigen::MatrixXd SpdFactor::solve_many(const Eigen::Ref<const Eigen::MatrixXd>& b) const {
  Eigen::MatrixXd x = lower_.triangularView<Eigen::Lower>().solve(b);
  lower_.transpose().triangularView<Eigen::Upper>().solveInPlace(x);
  return x;
}

Eigen::MatrixXd SpdFactor::inverse() const {
  return solve_many(Eigen::MatrixXd::Identity(dim(), dim()));
}

Eigen::VectorXd solve_normal_equations(const Eigen::MatrixXd& a, const Eigen::VectorXd& b) {
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  qr.setThreshold(1e-10);
  if (qr.rank() < a.cols()) {
    std::vector<std::size_t> offending;
    for (Eigen::Index k = qr.rank(); k < a.cols(); ++k) {
      offending.push_back(static_cast<std::size_t>(qr.colsPermutation().indices()(k)));
    }
    std::sort(offending.begin(), offending.end());
    std::string cols;
    for (auto c : offending) cols += (cols.empty() ? "" : ", ") + std::to_string(c);
    throw CollinearityError(offending, "normal matrix is rank deficient (rank " +
                                           std::to_string(qr.rank()) + " of " +
                                           std::to_string(a.cols()) + "); offending columns: " + cols);
  }
  return qr.solve(b);
}

Eigen::MatrixXd floor_eigenvalues(const Eigen::MatrixXd& sigma, double floor) {
  const Eigen::MatrixXd sym = 0.5 * (sigma + sigma.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
  Eigen::VectorXd values = eig.eigenvalues();
  if (values.minCoeff() >= floor) return sym;
  values = values.cwiseMax(floor);
  Eigen::MatrixXd out = eig.eigenvectors() * values.asDiagonal() * eig.eigenvectors().transpose();
  return 0.5 * (out + out.transpose());
}

}  // namespace mixfit
