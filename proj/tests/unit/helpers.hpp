#pragma once

#include <cmath>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "mixfit/densities.hpp"
#include "mixfit/random.hpp"

namespace testing {

inline mixfit::MixtureModel normal_mixture(std::vector<std::pair<double, double>> mu_sigma2,
                                           std::vector<double> weights) {
  mixfit::MixtureModel m;
  for (auto [mu, s2] : mu_sigma2) m.components.push_back(mixfit::UnivariateNormal{mu, s2});
  m.weights = Eigen::Map<Eigen::VectorXd>(weights.data(), static_cast<Eigen::Index>(weights.size()));
  return m;
}

inline mixfit::Observations normal_draws(std::size_t n, double mu, double sd, mixfit::Rng& rng) {
  std::normal_distribution<double> d(mu, sd);
  mixfit::Observations y(1, static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < y.cols(); ++i) y(0, i) = d(rng);
  return y;
}

/// Naive normal log density written out from the formula.
inline double normal_logpdf(double y, double mu, double s2) {
  return -0.5 * std::log(2.0 * M_PI * s2) - (y - mu) * (y - mu) / (2.0 * s2);
}

}  // namespace testing
