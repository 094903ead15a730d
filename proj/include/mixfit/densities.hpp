#pragma once

// Parametric component densities: log-density evaluation, closed-form
// weighted maximum likelihood and sampling.
//
// Observations are stored column-wise in an Eigen matrix (one observation per
// column). Univariate families use a 1 x N matrix. For the panel-linear
// family a column holds the outcome in row 0 followed by the design row.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "mixfit/linalg.hpp"
#include "mixfit/random.hpp"

namespace mixfit {

enum class ComponentFamily {
  UnivariateNormal,
  Poisson,
  Exponential,
  MultivariateNormal,
  PanelLinearGaussian,
};

std::string_view family_name(ComponentFamily family);

struct UnivariateNormal {
  double mu = 0.0;
  double sigma2 = 1.0;
};

struct Poisson {
  double lambda = 1.0;
};

/// Parameterized by its mean (rate = 1 / mean).
struct Exponential {
  double mean = 1.0;
};

struct MultivariateNormal {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
};

/// y | x ~ N(x' beta_tilde, sigma2_alpha + sigma2_eps) for a single panel cell.
/// beta_tilde is (slope, Mundlak mean coefficient, T time effects).
struct PanelLinearGaussian {
  Eigen::VectorXd beta_tilde;
  double sigma2_alpha = 0.0;
  double sigma2_eps = 1.0;
};

using ComponentParams = std::variant<UnivariateNormal, Poisson, Exponential,
                                     MultivariateNormal, PanelLinearGaussian>;

using Observations = Eigen::MatrixXd;

ComponentFamily family_of(const ComponentParams& params);

/// Throws DomainError/DecompositionError if `params` violates its invariants.
void validate_params(const ComponentParams& params);

bool same_params(const ComponentParams& a, const ComponentParams& b);

/// Wraps a univariate sample as a 1 x N observation matrix.
Observations univariate(std::span<const double> values);

/// Lower bound applied to variance-like estimates in weighted_mle.
inline constexpr double kVarianceFloor = 1e-10;

/// Component parameters prepared for repeated evaluation (caches the
/// covariance factorization and normalizing constants).
class ComponentEvaluator {
 public:
  explicit ComponentEvaluator(ComponentParams params);

  const ComponentParams& params() const { return params_; }
  ComponentFamily family() const { return family_; }

  double log_density(const Eigen::Ref<const Eigen::VectorXd>& obs) const;

  /// Observation minus the component mean (outcome residual for panel cells).
  Eigen::VectorXd residual(const Eigen::Ref<const Eigen::VectorXd>& obs) const;

  /// Component covariance of the quantity returned by residual().
  Eigen::MatrixXd covariance() const;

  double squared_euclidean(const Eigen::Ref<const Eigen::VectorXd>& obs) const;
  double squared_mahalanobis(const Eigen::Ref<const Eigen::VectorXd>& obs) const;

 private:
  void check_support(const Eigen::Ref<const Eigen::VectorXd>& obs) const;

  ComponentParams params_;
  ComponentFamily family_;
  std::optional<SpdFactor> factor_;
  double log_norm_ = 0.0;
};

/// log f(obs | params).
double log_density(const ComponentParams& params,
                   const Eigen::Ref<const Eigen::VectorXd>& obs);

/// log f(obs_i | params) for every column of `data`, vectorized per family.
Eigen::VectorXd log_density_vector(const ComponentParams& params, const Observations& data);

/// Maximizer of sum_i w_i log f(y_i | theta) over the family, in closed form.
/// `group` only labels errors.
ComponentParams weighted_mle(ComponentFamily family, const Observations& data,
                             const Eigen::Ref<const Eigen::VectorXd>& weights,
                             std::size_t group = 0);

/// Weighted log-likelihood sum_i w_i log f(y_i | params).
double weighted_loglik(const ComponentParams& params, const Observations& data,
                       const Eigen::Ref<const Eigen::VectorXd>& weights);

/// n i.i.d. draws. Panel cells cannot be sampled without a design and throw.
Observations sample(const ComponentParams& params, std::size_t n, Rng& rng);

/// Finite mixture: G homogeneous components with mixing weights pi.
/// `covariates` optionally holds one covariate density per group (psi_g).
struct MixtureModel {
  std::vector<ComponentParams> components;
  Eigen::VectorXd weights;
  std::vector<MultivariateNormal> covariates;

  std::size_t size() const { return components.size(); }
  ComponentFamily family() const;
};

/// Throws on invalid weights or parameters; returns non-fatal warnings
/// (e.g. two identical components).
std::vector<std::string> validate_model(const MixtureModel& model);

/// Dimension of one observation column for `params`.
Eigen::Index observation_dim(const ComponentParams& params);

}  // namespace mixfit
