#include "mixfit/densities.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "mixfit/errors.hpp"

namespace mixfit {
namespace {

constexpr double kLog2Pi = 1.8378770664093454836;  // log(2 pi)

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::string fmt_value(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

void check_weights(const Observations& data, const Eigen::Ref<const Eigen::VectorXd>& weights,
                   std::size_t group) {
  if (weights.size() != data.cols()) {
    throw DimensionError("weights have " + std::to_string(weights.size()) +
                         " entries for " + std::to_string(data.cols()) + " observations");
  }
  for (Eigen::Index i = 0; i < weights.size(); ++i) {
    if (!std::isfinite(weights(i)) || weights(i) < 0.0) {
      throw DomainError("weight " + std::to_string(i) + " is negative or not finite");
    }
  }
  if (!(weights.sum() > 0.0)) {
    throw DegenerateComponentError(group, "weights sum to zero");
  }
}

// True when every positive-weight column of `data` is the same point.
bool single_support_point(const Observations& data,
                          const Eigen::Ref<const Eigen::VectorXd>& weights) {
  Eigen::Index first = -1;
  for (Eigen::Index i = 0; i < data.cols(); ++i) {
    if (weights(i) <= 0.0) continue;
    if (first < 0) {
      first = i;
    } else if (data.col(i) != data.col(first)) {
      return false;
    }
  }
  return true;
}

}  // namespace

std::string_view family_name(ComponentFamily family) {
  switch (family) {
    case ComponentFamily::UnivariateNormal: return "normal";
    case ComponentFamily::Poisson: return "poisson";
    case ComponentFamily::Exponential: return "exponential";
    case ComponentFamily::MultivariateNormal: return "multivariate-normal";
    case ComponentFamily::PanelLinearGaussian: return "panel-linear-gaussian";
  }
  return "unknown";
}

ComponentFamily family_of(const ComponentParams& params) {
  return static_cast<ComponentFamily>(params.index());
}

Eigen::Index observation_dim(const ComponentParams& params) {
  return std::visit(Overloaded{
                        [](const MultivariateNormal& p) { return p.mu.size(); },
                        [](const PanelLinearGaussian& p) { return p.beta_tilde.size() + 1; },
                        [](const auto&) { return Eigen::Index{1}; },
                    },
                    params);
}

void validate_params(const ComponentParams& params) {
  std::visit(Overloaded{
                 [](const UnivariateNormal& p) {
                   if (!std::isfinite(p.mu) || !(p.sigma2 > 0.0) || !std::isfinite(p.sigma2)) {
                     throw DomainError("normal component needs finite mu and sigma2 > 0");
                   }
                 },
                 [](const Poisson& p) {
                   if (!(p.lambda > 0.0) || !std::isfinite(p.lambda)) {
                     throw DomainError("poisson component needs lambda > 0");
                   }
                 },
                 [](const Exponential& p) {
                   if (!(p.mean > 0.0) || !std::isfinite(p.mean)) {
                     throw DomainError("exponential component needs mean > 0");
                   }
                 },
                 [](const MultivariateNormal& p) {
                   if (p.sigma.rows() != p.mu.size() || p.sigma.cols() != p.mu.size()) {
                     throw DimensionError("multivariate normal: sigma must be p x p with p = dim(mu)");
                   }
                   if (!p.sigma.isApprox(p.sigma.transpose(), 1e-10)) {
                     throw DecompositionError("multivariate normal: sigma is not symmetric");
                   }
                   SpdFactor{p.sigma};
                 },
                 [](const PanelLinearGaussian& p) {
                   if (!(p.sigma2_eps > 0.0) || !(p.sigma2_alpha >= 0.0)) {
                     throw DomainError("panel component needs sigma2_eps > 0 and sigma2_alpha >= 0");
                   }
                 },
             },
             params);
}

bool same_params(const ComponentParams& a, const ComponentParams& b) {
  if (a.index() != b.index()) return false;
  return std::visit(
      Overloaded{
          [&](const UnivariateNormal& p) {
            const auto& q = std::get<UnivariateNormal>(b);
            return p.mu == q.mu && p.sigma2 == q.sigma2;
          },
          [&](const Poisson& p) { return p.lambda == std::get<Poisson>(b).lambda; },
          [&](const Exponential& p) { return p.mean == std::get<Exponential>(b).mean; },
          [&](const MultivariateNormal& p) {
            const auto& q = std::get<MultivariateNormal>(b);
            return p.mu == q.mu && p.sigma == q.sigma;
          },
          [&](const PanelLinearGaussian& p) {
            const auto& q = std::get<PanelLinearGaussian>(b);
            return p.beta_tilde == q.beta_tilde && p.sigma2_alpha == q.sigma2_alpha &&
                   p.sigma2_eps == q.sigma2_eps;
          },
      },
      a);
}

Observations univariate(std::span<const double> values) {
  Observations out(1, static_cast<Eigen::Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) out(0, static_cast<Eigen::Index>(i)) = values[i];
  return out;
}

// ---------------------------------------------------------------------------

ComponentEvaluator::ComponentEvaluator(ComponentParams params)
    : params_(std::move(params)), family_(family_of(params_)) {
  validate_params(params_);
  switch (family_) {
    case ComponentFamily::UnivariateNormal: {
      const auto& p = std::get<UnivariateNormal>(params_);
      log_norm_ = -0.5 * (kLog2Pi + std::log(p.sigma2));
      break;
    }
    case ComponentFamily::MultivariateNormal: {
      const auto& p = std::get<MultivariateNormal>(params_);
      factor_.emplace(p.sigma);
      log_norm_ = -0.5 * (static_cast<double>(p.mu.size()) * kLog2Pi + factor_->log_det());
      break;
    }
    case ComponentFamily::PanelLinearGaussian: {
      const auto& p = std::get<PanelLinearGaussian>(params_);
      log_norm_ = -0.5 * (kLog2Pi + std::log(p.sigma2_alpha + p.sigma2_eps));
      break;
    }
    default:
      break;
  }
}

void ComponentEvaluator::check_support(const Eigen::Ref<const Eigen::VectorXd>& obs) const {
  if (obs.size() != observation_dim(params_)) {
    throw DimensionError(std::string(family_name(family_)) + ": observation has dimension " +
                         std::to_string(obs.size()) + ", expected " +
                         std::to_string(observation_dim(params_)));
  }
  const double y = obs(0);
  if (family_ == ComponentFamily::Poisson && !(y >= 0.0 && std::floor(y) == y)) {
    throw DomainError("poisson: observation " + fmt_value(y) +
                      " is not a nonnegative integer");
  }
  if (family_ == ComponentFamily::Exponential && !(y >= 0.0)) {
    throw DomainError("exponential: observation " + fmt_value(y) + " is negative");
  }
}

double ComponentEvaluator::log_density(const Eigen::Ref<const Eigen::VectorXd>& obs) const {
  check_support(obs);
  switch (family_) {
    case ComponentFamily::UnivariateNormal: {
      const auto& p = std::get<UnivariateNormal>(params_);
      const double r = obs(0) - p.mu;
      return log_norm_ - 0.5 * r * r / p.sigma2;
    }
    case ComponentFamily::Poisson: {
      const double lambda = std::get<Poisson>(params_).lambda;
      const double y = obs(0);
      return y * std::log(lambda) - lambda - std::lgamma(y + 1.0);
    }
    case ComponentFamily::Exponential: {
      const double m = std::get<Exponential>(params_).mean;
      return -std::log(m) - obs(0) / m;
    }
    case ComponentFamily::MultivariateNormal: {
      const auto& p = std::get<MultivariateNormal>(params_);
      return log_norm_ - 0.5 * factor_->squared_mahalanobis(obs - p.mu);
    }
    case ComponentFamily::PanelLinearGaussian: {
      const auto& p = std::get<PanelLinearGaussian>(params_);
      const double r = obs(0) - obs.tail(obs.size() - 1).dot(p.beta_tilde);
      return log_norm_ - 0.5 * r * r / (p.sigma2_alpha + p.sigma2_eps);
    }
  }
  return 0.0;
}

Eigen::VectorXd ComponentEvaluator::residual(const Eigen::Ref<const Eigen::VectorXd>& obs) const {
  check_support(obs);
  return std::visit(
      Overloaded{
          [&](const UnivariateNormal& p) -> Eigen::VectorXd { return Eigen::VectorXd::Constant(1, obs(0) - p.mu); },
          [&](const Poisson& p) -> Eigen::VectorXd { return Eigen::VectorXd::Constant(1, obs(0) - p.lambda); },
          [&](const Exponential& p) -> Eigen::VectorXd { return Eigen::VectorXd::Constant(1, obs(0) - p.mean); },
          [&](const MultivariateNormal& p) -> Eigen::VectorXd { return Eigen::VectorXd(obs - p.mu); },
          [&](const PanelLinearGaussian& p) -> Eigen::VectorXd {
            return Eigen::VectorXd::Constant(
                1, obs(0) - obs.tail(obs.size() - 1).dot(p.beta_tilde));
          },
      },
      params_);
}

Eigen::MatrixXd ComponentEvaluator::covariance() const {
  return std::visit(
      Overloaded{
          [](const UnivariateNormal& p) -> Eigen::MatrixXd { return Eigen::MatrixXd::Constant(1, 1, p.sigma2); },
          [](const Poisson& p) -> Eigen::MatrixXd { return Eigen::MatrixXd::Constant(1, 1, p.lambda); },
          [](const Exponential& p) -> Eigen::MatrixXd { return Eigen::MatrixXd::Constant(1, 1, p.mean * p.mean); },
          [](const MultivariateNormal& p) -> Eigen::MatrixXd { return p.sigma; },
          [](const PanelLinearGaussian& p) -> Eigen::MatrixXd {
            return Eigen::MatrixXd::Constant(1, 1, p.sigma2_alpha + p.sigma2_eps);
          },
      },
      params_);
}

double ComponentEvaluator::squared_euclidean(const Eigen::Ref<const Eigen::VectorXd>& obs) const {
  return residual(obs).squaredNorm();
}

double ComponentEvaluator::squared_mahalanobis(const Eigen::Ref<const Eigen::VectorXd>& obs) const {
  const Eigen::VectorXd r = residual(obs);
  if (factor_) return factor_->squared_mahalanobis(r);
  const double var = covariance()(0, 0);
  if (!(var >= kMinCholeskyPivot)) {
    throw DecompositionError("component variance below the Cholesky pivot threshold");
  }
  return r(0) * r(0) / var;
}

double log_density(const ComponentParams& params, const Eigen::Ref<const Eigen::VectorXd>& obs) {
  return ComponentEvaluator(params).log_density(obs);
}

Eigen::VectorXd log_density_vector(const ComponentParams& params, const Observations& data) {
  validate_params(params);
  const Eigen::Index dim = observation_dim(params);
  if (data.rows() != dim) {
    throw DimensionError(std::string(family_name(family_of(params))) +
                         ": observations have dimension " + std::to_string(data.rows()) +
                         ", expected " + std::to_string(dim));
  }
  const auto support_error = [&](double y) {
    return DomainError(std::string(family_name(family_of(params))) + ": observation " +
                       fmt_value(y) + " is outside the support");
  };
  return std::visit(
      Overloaded{
          [&](const UnivariateNormal& p) -> Eigen::VectorXd {
            const double norm = -0.5 * (kLog2Pi + std::log(p.sigma2));
            return (norm - 0.5 * (data.row(0).array() - p.mu).square() / p.sigma2)
                .matrix()
                .transpose();
          },
          [&](const Poisson& p) -> Eigen::VectorXd {
            Eigen::VectorXd out(data.cols());
            const double log_lambda = std::log(p.lambda);
            for (Eigen::Index i = 0; i < data.cols(); ++i) {
              const double y = data(0, i);
              if (!(y >= 0.0 && std::floor(y) == y)) throw support_error(y);
              out(i) = y * log_lambda - p.lambda - std::lgamma(y + 1.0);
            }
            return out;
          },
          [&](const Exponential& p) -> Eigen::VectorXd {
            if (data.cols() > 0 && !(data.row(0).minCoeff() >= 0.0)) {
              throw support_error(data.row(0).minCoeff());
            }
            return (-std::log(p.mean) - data.row(0).array() / p.mean).matrix().transpose();
          },
          [&](const MultivariateNormal& p) -> Eigen::VectorXd {
            const SpdFactor factor(p.sigma);
            const double norm =
                -0.5 * (static_cast<double>(p.mu.size()) * kLog2Pi + factor.log_det());
            const Eigen::MatrixXd z =
                factor.lower().triangularView<Eigen::Lower>().solve(data.colwise() - p.mu);
            return (norm - 0.5 * z.colwise().squaredNorm().array()).matrix().transpose();
          },
          [&](const PanelLinearGaussian& p) -> Eigen::VectorXd {
            const double s2 = p.sigma2_alpha + p.sigma2_eps;
            const double norm = -0.5 * (kLog2Pi + std::log(s2));
            const Eigen::ArrayXd r = data.row(0).transpose().array() -
                                     (data.bottomRows(dim - 1).transpose() * p.beta_tilde).array();
            return (norm - 0.5 * r.square() / s2).matrix();
          },
      },
      params);
}

// ---------------------------------------------------------------------------

ComponentParams weighted_mle(ComponentFamily family, const Observations& data,
                             const Eigen::Ref<const Eigen::VectorXd>& weights,
                             std::size_t group) {
  check_weights(data, weights, group);
  const double total = weights.sum();
  const auto positive = (weights.array() > 0.0).count();

  const bool variance_family = family == ComponentFamily::UnivariateNormal ||
                               family == ComponentFamily::MultivariateNormal ||
                               family == ComponentFamily::PanelLinearGaussian;
  if (variance_family && positive < 2) {
    throw DegenerateComponentError(group, "fewer than two observations with positive weight");
  }

  switch (family) {
    case ComponentFamily::UnivariateNormal: {
      if (data.rows() != 1) throw DimensionError("normal family expects univariate data");
      if (single_support_point(data, weights)) {
        throw DegenerateComponentError(group, "all weight on a single point");
      }
      const Eigen::VectorXd y = data.row(0).transpose();
      const double mu = weights.dot(y) / total;
      const double s2 = weights.dot((y.array() - mu).square().matrix()) / total;
      return UnivariateNormal{mu, std::max(s2, kVarianceFloor)};
    }
    case ComponentFamily::Poisson:
    case ComponentFamily::Exponential: {
      if (data.rows() != 1) throw DimensionError("count/duration families expect univariate data");
      for (Eigen::Index i = 0; i < data.cols(); ++i) {
        if (weights(i) <= 0.0) continue;
        const double y = data(0, i);
        const bool ok = family == ComponentFamily::Poisson ? (y >= 0.0 && std::floor(y) == y)
                                                           : (y >= 0.0);
        if (!ok) {
          throw DomainError(std::string(family_name(family)) + ": observation " + fmt_value(y) +
                            " is outside the support");
        }
      }
      const double m = std::max(weights.dot(data.row(0).transpose()) / total, kVarianceFloor);
      if (family == ComponentFamily::Poisson) return Poisson{m};
      return Exponential{m};
    }
    case ComponentFamily::MultivariateNormal: {
      if (single_support_point(data, weights)) {
        throw DegenerateComponentError(group, "all weight on a single point");
      }
      const Eigen::VectorXd mu = data * weights / total;
      const Eigen::MatrixXd centered = data.colwise() - mu;
      Eigen::MatrixXd sigma = centered * weights.asDiagonal() * centered.transpose() / total;
      return MultivariateNormal{mu, floor_eigenvalues(sigma, kVarianceFloor)};
    }
    case ComponentFamily::PanelLinearGaussian: {
      const Eigen::VectorXd y = data.row(0).transpose();
      const Eigen::MatrixXd x = data.bottomRows(data.rows() - 1);
      const Eigen::MatrixXd xw = x * weights.asDiagonal();
      const Eigen::VectorXd beta = solve_normal_equations(xw * x.transpose(), xw * y);
      const Eigen::VectorXd r = y - x.transpose() * beta;
      const double s2 = weights.dot(r.array().square().matrix()) / total;
      return PanelLinearGaussian{beta, 0.0, std::max(s2, kVarianceFloor)};
    }
  }
  throw DomainError("unknown component family");
}

double weighted_loglik(const ComponentParams& params, const Observations& data,
                       const Eigen::Ref<const Eigen::VectorXd>& weights) {
  if (weights.size() != data.cols()) throw DimensionError("weights/observations mismatch");
  const ComponentEvaluator eval(params);
  double sum = 0.0;
  for (Eigen::Index i = 0; i < data.cols(); ++i) {
    if (weights(i) != 0.0) sum += weights(i) * eval.log_density(data.col(i));
  }
  return sum;
}

Observations sample(const ComponentParams& params, std::size_t n, Rng& rng) {
  validate_params(params);
  const auto cols = static_cast<Eigen::Index>(n);
  std::normal_distribution<double> std_normal(0.0, 1.0);
  return std::visit(
      Overloaded{
          [&](const UnivariateNormal& p) {
            Observations out(1, cols);
            const double sd = std::sqrt(p.sigma2);
            for (Eigen::Index i = 0; i < cols; ++i) out(0, i) = p.mu + sd * std_normal(rng);
            return out;
          },
          [&](const Poisson& p) {
            Observations out(1, cols);
            std::poisson_distribution<long long> draw(p.lambda);
            for (Eigen::Index i = 0; i < cols; ++i) out(0, i) = static_cast<double>(draw(rng));
            return out;
          },
          [&](const Exponential& p) {
            Observations out(1, cols);
            std::exponential_distribution<double> draw(1.0 / p.mean);
            for (Eigen::Index i = 0; i < cols; ++i) out(0, i) = draw(rng);
            return out;
          },
          [&](const MultivariateNormal& p) {
            const SpdFactor factor(p.sigma);
            Observations out(p.mu.size(), cols);
            Eigen::VectorXd z(p.mu.size());
            for (Eigen::Index i = 0; i < cols; ++i) {
              for (Eigen::Index k = 0; k < z.size(); ++k) z(k) = std_normal(rng);
              out.col(i) = p.mu + factor.lower() * z;
            }
            return out;
          },
          [&](const PanelLinearGaussian&) -> Observations {
            throw DomainError("panel-linear-gaussian cells are generated by the panel module");
          },
      },
      params);
}

// ---------------------------------------------------------------------------

ComponentFamily MixtureModel::family() const {
  if (components.empty()) throw DomainError("mixture has no components");
  return family_of(components.front());
}

std::vector<std::string> validate_model(const MixtureModel& model) {
  const std::size_t g = model.size();
  if (g == 0) throw DomainError("mixture needs at least one component");
  if (static_cast<std::size_t>(model.weights.size()) != g) {
    throw DimensionError("mixture has " + std::to_string(g) + " components but " +
                         std::to_string(model.weights.size()) + " weights");
  }
  const auto family = model.family();
  for (std::size_t k = 0; k < g; ++k) {
    if (family_of(model.components[k]) != family) {
      throw DomainError("mixture components must share one family");
    }
    validate_params(model.components[k]);
    const double w = model.weights(static_cast<Eigen::Index>(k));
    const bool ok = g == 1 ? (w > 0.0 && w <= 1.0) : (w > 0.0 && w < 1.0);
    if (!ok) throw DomainError("mixing weight " + std::to_string(k) + " outside (0, 1)");
  }
  if (std::abs(model.weights.sum() - 1.0) > 1e-12) {
    throw DomainError("mixing weights do not sum to one");
  }
  if (!model.covariates.empty()) {
    if (model.covariates.size() != g) {
      throw DimensionError("covariate densities must be given for every group");
    }
    for (const auto& psi : model.covariates) validate_params(psi);
  }
  std::vector<std::string> warnings;
  for (std::size_t a = 0; a < g; ++a) {
    for (std::size_t b = a + 1; b < g; ++b) {
      if (same_params(model.components[a], model.components[b])) {
        warnings.push_back("components " + std::to_string(a) + " and " + std::to_string(b) +
                           " have identical parameters");
      }
    }
  }
  return warnings;
}

}  // namespace mixfit
