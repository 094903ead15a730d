#include "mixfit/mixture_em.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mixfit/errors.hpp"

namespace mixfit {
namespace {

// Row-wise log-sum-exp of an N x G matrix.
Eigen::VectorXd row_logsumexp(const Eigen::MatrixXd& m) {
  const Eigen::VectorXd peak = m.rowwise().maxCoeff();
  return peak.array() + (m.colwise() - peak).array().exp().rowwise().sum().log();
}

Assignment responsibilities_from(const Eigen::MatrixXd& log_weighted) {
  const Eigen::VectorXd lse = row_logsumexp(log_weighted);
  Eigen::MatrixXd tau = (log_weighted.colwise() - lse).array().exp().matrix();
  const Eigen::VectorXd sums = tau.rowwise().sum();
  tau.array().colwise() /= sums.array();
  return Assignment::soft(std::move(tau));
}

double penalty_of(const MixtureModel& model, std::size_t n, PenaltyKind penalty) {
  return penalty == PenaltyKind::NormalChen ? chen_penalty(model, n) : 0.0;
}

Observations select_columns(const Observations& data, const std::vector<Eigen::Index>& idx) {
  Observations out(data.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = data.col(idx[k]);
  return out;
}

// MLE of one split part. A normal part holding a single distinct value has no
// variance estimate; it starts as a spike at the variance floor instead, which
// is the outlier-driven start the split protocol is meant to produce.
ComponentParams split_part_mle(ComponentFamily family, const Observations& part, std::size_t group) {
  if (family == ComponentFamily::UnivariateNormal &&
      part.row(0).maxCoeff() == part.row(0).minCoeff()) {
    return UnivariateNormal{part(0, 0), kVarianceFloor};
  }
  return weighted_mle(family, part, Eigen::VectorXd::Ones(part.cols()), group);
}

}  // namespace

Eigen::MatrixXd weighted_log_densities(const MixtureModel& model, const Observations& data) {
  const auto g = static_cast<Eigen::Index>(model.size());
  if (model.weights.size() != g) throw DimensionError("one mixing weight per component is required");
  Eigen::MatrixXd out(data.cols(), g);
  for (Eigen::Index k = 0; k < g; ++k) {
    out.col(k) = log_density_vector(model.components[static_cast<std::size_t>(k)], data).array() +
                 std::log(model.weights(k));
  }
  return out;
}

double mixture_loglik(const MixtureModel& model, const Observations& data) {
  return row_logsumexp(weighted_log_densities(model, data)).sum();
}

double chen_penalty(std::span<const double> variances, std::size_t n) {
  if (n == 0) throw DomainError("penalty needs a positive sample size");
  double sum = 0.0;
  for (double s2 : variances) {
    if (!(s2 > 0.0)) throw DomainError("penalty needs strictly positive variances");
    sum += 1.0 / s2 + std::log(s2);
  }
  return -sum / std::sqrt(static_cast<double>(n));
}

double chen_penalty(const MixtureModel& model, std::size_t n) {
  std::vector<double> variances;
  for (const auto& c : model.components) {
    if (const auto* p = std::get_if<UnivariateNormal>(&c)) {
      variances.push_back(p->sigma2);
    } else if (const auto* q = std::get_if<PanelLinearGaussian>(&c)) {
      variances.push_back(q->sigma2_alpha + q->sigma2_eps);
    } else {
      throw DomainError("the variance penalty applies to normal components only");
    }
  }
  return chen_penalty(variances, n);
}

double penalized_loglik(const MixtureModel& model, const Observations& data, PenaltyKind penalty) {
  return mixture_loglik(model, data) +
         penalty_of(model, static_cast<std::size_t>(data.cols()), penalty);
}

Assignment e_step(const MixtureModel& model, const Observations& data) {
  return responsibilities_from(weighted_log_densities(model, data));
}

double penalized_normal_variance(double ss, double mass, std::size_t n) {
  const double a = 1.0 / std::sqrt(static_cast<double>(n));
  return (ss + 2.0 * a) / (mass + 2.0 * a);
}

MixtureModel m_step(ComponentFamily family, const Observations& data, const Assignment& tau,
                    const EmConfig& config) {
  if (static_cast<Eigen::Index>(tau.size()) != data.cols()) {
    throw DimensionError("responsibilities and observations differ in count");
  }
  if (config.penalty == PenaltyKind::NormalChen && family != ComponentFamily::UnivariateNormal) {
    throw DomainError("the variance penalty applies to normal components only");
  }
  const auto n = static_cast<double>(data.cols());
  const Eigen::MatrixXd& w = tau.matrix();
  MixtureModel out;
  out.weights.resize(w.cols());
  for (Eigen::Index g = 0; g < w.cols(); ++g) {
    const auto group = static_cast<std::size_t>(g);
    const double mass = w.col(g).sum();
    if (!(mass >= 1e-6 * n)) {
      throw DegenerateComponentError(group, "responsibility mass " + std::to_string(mass) +
                                                " below 1e-6 N");
    }
    out.weights(g) = mass / n;
    ComponentParams theta = weighted_mle(family, data, w.col(g), group);
    if (auto* p = std::get_if<UnivariateNormal>(&theta)) {
      if (config.penalty == PenaltyKind::NormalChen) {
        const double ss = w.col(g).dot((data.row(0).array() - p->mu).square().matrix().transpose());
        p->sigma2 = penalized_normal_variance(ss, mass, static_cast<std::size_t>(n));
      }
      p->sigma2 = std::max(p->sigma2, config.variance_floor);
    } else if (auto* q = std::get_if<MultivariateNormal>(&theta)) {
      q->sigma = floor_eigenvalues(q->sigma, config.variance_floor);
    }
    out.components.push_back(std::move(theta));
  }
  return out;
}

FitReport fit_em(const Observations& data, const MixtureModel& init, const EmConfig& config) {
  if (config.max_iter < 1 || !(config.loglik_tol > 0.0) || !(config.rel_tol > 0.0)) {
    throw DomainError("EM needs max_iter >= 1 and positive tolerances");
  }
  validate_model(init);
  const auto n = static_cast<std::size_t>(data.cols());
  if (n == 0) throw InsufficientDataError("EM needs at least one observation");
  const ComponentFamily family = init.family();

  FitReport report;
  report.model = init;
  Eigen::MatrixXd log_weighted = weighted_log_densities(report.model, data);
  report.objective_trace.push_back(row_logsumexp(log_weighted).sum() +
                                   penalty_of(report.model, n, config.penalty));

  for (std::size_t k = 1; k <= config.max_iter; ++k) {
    const Assignment tau = responsibilities_from(log_weighted);
    MixtureModel next = m_step(family, data, tau, config);
    next.covariates = report.model.covariates;
    log_weighted = weighted_log_densities(next, data);
    const double previous = report.objective_trace.back();
    const double current = row_logsumexp(log_weighted).sum() + penalty_of(next, n, config.penalty);
    if (current < previous - config.monotonicity_slack) {
      throw MonotonicityError(k, previous, current);
    }
    report.model = std::move(next);
    report.objective_trace.push_back(current);
    report.iterations = k;
    const double change = std::abs(current - previous);
    const bool done = config.rule == ConvergenceRule::Absolute
                          ? change < config.loglik_tol
                          : change < config.rel_tol * std::abs(previous);
    if (done) {
      report.converged = true;
      break;
    }
  }

  report.responsibilities = responsibilities_from(log_weighted);
  report.hard_labels = report.responsibilities->harden();
  if (config.compute_variance) {
    report.variance_estimates = sandwich_variance(report.model, data, *report.hard_labels);
  }
  return report;
}

MultiStartResult multi_start_em(const Observations& data, const std::vector<MixtureModel>& inits,
                                const EmConfig& config) {
  if (inits.empty()) throw DomainError("multi-start needs at least one init");
  MultiStartResult out;
  bool have = false;
  std::vector<std::string> causes;
  for (std::size_t s = 0; s < inits.size(); ++s) {
    try {
      FitReport fit = fit_em(data, inits[s], config);
      if (!have || fit.objective() > out.best.objective()) {
        out.best = std::move(fit);
        out.best_index = s;
        have = true;
      }
    } catch (const Error& e) {
      out.failures.emplace_back(s, e.what());
      causes.push_back("start " + std::to_string(s) + ": " + e.what());
    }
  }
  if (!have) throw AggregateError(std::move(causes));
  return out;
}

// ---------------------------------------------------------------------------

double empirical_quantile(std::vector<double> values, double q) {
  if (values.empty()) throw InsufficientDataError("quantile of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw DomainError("quantile level outside [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

InitSet quantile_split_inits(const Observations& data, ComponentFamily family,
                             const std::optional<MixtureModel>& truth) {
  if (data.rows() != 1 || family == ComponentFamily::MultivariateNormal ||
      family == ComponentFamily::PanelLinearGaussian) {
    throw DomainError("quantile-split inits need univariate data from a scalar family");
  }
  const auto n = data.cols();
  std::vector<double> y(data.data(), data.data() + n);
  std::vector<double> levels = kSplitQuantiles;
  if (family == ComponentFamily::UnivariateNormal) {
    for (double q : kSplitQuantiles) levels.push_back(1.0 - q);
  }

  InitSet out;
  for (double q : levels) {
    const double cut = empirical_quantile(y, q);
    std::vector<Eigen::Index> lower, upper;
    for (Eigen::Index i = 0; i < n; ++i) (data(0, i) < cut ? lower : upper).push_back(i);
    const std::string tag = "split at q=" + std::to_string(q) + ": ";
    if (lower.empty() || upper.empty()) {
      out.warnings.push_back(tag + "one part is empty, skipped");
      continue;
    }
    try {
      const Observations a = select_columns(data, lower);
      const Observations b = select_columns(data, upper);
      MixtureModel m;
      m.components.push_back(split_part_mle(family, a, 0));
      m.components.push_back(split_part_mle(family, b, 1));
      const double pi1 = static_cast<double>(lower.size()) / static_cast<double>(n);
      m.weights = Eigen::Vector2d(pi1, 1.0 - pi1);
      out.inits.push_back(std::move(m));
    } catch (const Error& e) {
      out.warnings.push_back(tag + e.what() + ", skipped");
    }
  }
  if (truth) out.inits.push_back(*truth);
  return out;
}

// ---------------------------------------------------------------------------

double component_mean(const ComponentParams& params) {
  switch (family_of(params)) {
    case ComponentFamily::UnivariateNormal: return std::get<UnivariateNormal>(params).mu;
    case ComponentFamily::Poisson: return std::get<Poisson>(params).lambda;
    case ComponentFamily::Exponential: return std::get<Exponential>(params).mean;
    case ComponentFamily::MultivariateNormal: return std::get<MultivariateNormal>(params).mu(0);
    case ComponentFamily::PanelLinearGaussian:
      return std::get<PanelLinearGaussian>(params).beta_tilde(0);
  }
  return 0.0;
}

double component_sd(const ComponentParams& params) {
  switch (family_of(params)) {
    case ComponentFamily::UnivariateNormal:
      return std::sqrt(std::get<UnivariateNormal>(params).sigma2);
    case ComponentFamily::Poisson: return std::sqrt(std::get<Poisson>(params).lambda);
    case ComponentFamily::Exponential: return std::get<Exponential>(params).mean;
    case ComponentFamily::MultivariateNormal:
      return std::sqrt(std::get<MultivariateNormal>(params).sigma(0, 0));
    case ComponentFamily::PanelLinearGaussian: {
      const auto& p = std::get<PanelLinearGaussian>(params);
      return std::sqrt(p.sigma2_alpha + p.sigma2_eps);
    }
  }
  return 0.0;
}

std::vector<std::size_t> mean_order(const MixtureModel& model) {
  std::vector<std::size_t> order(model.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double ma = component_mean(model.components[a]);
    const double mb = component_mean(model.components[b]);
    if (ma != mb) return ma < mb;
    return component_sd(model.components[a]) < component_sd(model.components[b]);
  });
  return order;
}

MixtureModel permute_model(const MixtureModel& model, const std::vector<std::size_t>& order) {
  if (order.size() != model.size()) throw DimensionError("permutation length differs from G");
  MixtureModel out;
  out.weights.resize(model.weights.size());
  for (std::size_t k = 0; k < order.size(); ++k) {
    out.components.push_back(model.components[order[k]]);
    out.weights(static_cast<Eigen::Index>(k)) = model.weights(static_cast<Eigen::Index>(order[k]));
    if (!model.covariates.empty()) out.covariates.push_back(model.covariates[order[k]]);
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

// Symmetric unit matrix E_ab for the (a, b) entry of a covariance.
Eigen::MatrixXd unit_sym(Eigen::Index p, Eigen::Index a, Eigen::Index b) {
  Eigen::MatrixXd e = Eigen::MatrixXd::Zero(p, p);
  e(a, b) = 1.0;
  e(b, a) = 1.0;
  return e;
}

ScoreHessian mvn_score_hessian(const MultivariateNormal& theta, const Observations& data) {
  const Eigen::Index p = theta.mu.size();
  const Eigen::Index q = p * (p + 1) / 2;
  const Eigen::Index n = data.cols();
  const SpdFactor factor(theta.sigma);
  const Eigen::MatrixXd k_inv = factor.inverse();
  const Eigen::MatrixXd u = factor.solve_many(data.colwise() - theta.mu);  // p x n

  std::vector<std::pair<Eigen::Index, Eigen::Index>> pairs;
  for (Eigen::Index b = 0; b < p; ++b) {
    for (Eigen::Index a = b; a < p; ++a) pairs.emplace_back(a, b);
  }
  std::vector<Eigen::MatrixXd> units;
  for (const auto& [a, b] : pairs) units.push_back(unit_sym(p, a, b));

  ScoreHessian out;
  out.scores.resize(n, p + q);
  out.scores.leftCols(p) = u.transpose();
  for (Eigen::Index j = 0; j < q; ++j) {
    const auto [a, b] = pairs[static_cast<std::size_t>(j)];
    const double tr = a == b ? k_inv(a, a) : 2.0 * k_inv(a, b);
    const Eigen::ArrayXd quad = a == b ? Eigen::ArrayXd(u.row(a).transpose().array().square())
                                       : Eigen::ArrayXd(2.0 * u.row(a).transpose().array() *
                                                        u.row(b).transpose().array());
    out.scores.col(p + j) = (-0.5 * tr + 0.5 * quad).matrix();
  }

  const Eigen::VectorXd u_sum = u.rowwise().sum();
  const Eigen::MatrixXd uu = u * u.transpose();
  out.hessian = Eigen::MatrixXd::Zero(p + q, p + q);
  out.hessian.topLeftCorner(p, p) = -static_cast<double>(n) * k_inv;
  for (Eigen::Index j = 0; j < q; ++j) {
    const Eigen::MatrixXd& e_ab = units[static_cast<std::size_t>(j)];
    const Eigen::VectorXd cross = -k_inv * e_ab * u_sum;
    out.hessian.block(0, p + j, p, 1) = cross;
    out.hessian.block(p + j, 0, 1, p) = cross.transpose();
    const Eigen::MatrixXd ke_ab = k_inv * e_ab;
    for (Eigen::Index l = j; l < q; ++l) {
      const Eigen::MatrixXd& e_cd = units[static_cast<std::size_t>(l)];
      const Eigen::MatrixXd ke_cd = k_inv * e_cd;
      const double h = 0.5 * static_cast<double>(n) * (ke_cd * ke_ab).trace() -
                       (e_ab * k_inv * e_cd * uu).trace();
      out.hessian(p + j, p + l) = h;
      out.hessian(p + l, p + j) = h;
    }
  }
  return out;
}

}  // namespace

ScoreHessian score_and_hessian(const ComponentParams& params, const Observations& data) {
  const Eigen::Index n = data.cols();
  ScoreHessian out;
  switch (family_of(params)) {
    case ComponentFamily::UnivariateNormal: {
      const auto& p = std::get<UnivariateNormal>(params);
      const Eigen::ArrayXd r = data.row(0).transpose().array() - p.mu;
      const double s2 = p.sigma2;
      out.scores.resize(n, 2);
      out.scores.col(0) = (r / s2).matrix();
      out.scores.col(1) = (-0.5 / s2 + r.square() / (2.0 * s2 * s2)).matrix();
      out.hessian.resize(2, 2);
      out.hessian(0, 0) = -static_cast<double>(n) / s2;
      out.hessian(0, 1) = out.hessian(1, 0) = -r.sum() / (s2 * s2);
      out.hessian(1, 1) = static_cast<double>(n) / (2.0 * s2 * s2) - r.square().sum() / (s2 * s2 * s2);
      return out;
    }
    case ComponentFamily::Poisson: {
      const double lambda = std::get<Poisson>(params).lambda;
      const Eigen::ArrayXd y = data.row(0).transpose().array();
      out.scores = (y / lambda - 1.0).matrix();
      out.hessian = Eigen::MatrixXd::Constant(1, 1, -y.sum() / (lambda * lambda));
      return out;
    }
    case ComponentFamily::Exponential: {
      const double m = std::get<Exponential>(params).mean;
      const Eigen::ArrayXd y = data.row(0).transpose().array();
      out.scores = (-1.0 / m + y / (m * m)).matrix();
      out.hessian = Eigen::MatrixXd::Constant(
          1, 1, static_cast<double>(n) / (m * m) - 2.0 * y.sum() / (m * m * m));
      return out;
    }
    case ComponentFamily::MultivariateNormal:
      return mvn_score_hessian(std::get<MultivariateNormal>(params), data);
    case ComponentFamily::PanelLinearGaussian: {
      const auto& p = std::get<PanelLinearGaussian>(params);
      const Eigen::Index k = p.beta_tilde.size();
      const Eigen::MatrixXd x = data.bottomRows(k);  // k x n
      const Eigen::ArrayXd r = data.row(0).transpose().array() - (x.transpose() * p.beta_tilde).array();
      const double s2 = p.sigma2_alpha + p.sigma2_eps;
      out.scores.resize(n, k + 1);
      out.scores.leftCols(k) = x.transpose() * (r / s2).matrix().asDiagonal();
      out.scores.col(k) = (-0.5 / s2 + r.square() / (2.0 * s2 * s2)).matrix();
      out.hessian = Eigen::MatrixXd::Zero(k + 1, k + 1);
      out.hessian.topLeftCorner(k, k) = -x * x.transpose() / s2;
      const Eigen::VectorXd cross = -x * r.matrix() / (s2 * s2);
      out.hessian.block(0, k, k, 1) = cross;
      out.hessian.block(k, 0, 1, k) = cross.transpose();
      out.hessian(k, k) = static_cast<double>(n) / (2.0 * s2 * s2) - r.square().sum() / (s2 * s2 * s2);
      return out;
    }
  }
  throw DomainError("unknown component family");
}

std::vector<Eigen::MatrixXd> sandwich_variance(const MixtureModel& model, const Observations& data,
                                               const Assignment& hard_labels) {
  if (static_cast<Eigen::Index>(hard_labels.size()) != data.cols() ||
      hard_labels.groups() != model.size()) {
    throw DimensionError("labels do not match the data and model");
  }
  const auto labels = hard_labels.labels();
  std::vector<Eigen::MatrixXd> out;
  for (std::size_t g = 0; g < model.size(); ++g) {
    std::vector<Eigen::Index> idx;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == g) idx.push_back(static_cast<Eigen::Index>(i));
    }
    if (idx.empty()) throw SingularHessianError("group " + std::to_string(g) + " has no observations");
    const ScoreHessian sh = score_and_hessian(model.components[g], select_columns(data, idx));
    Eigen::FullPivLU<Eigen::MatrixXd> lu(sh.hessian);
    lu.setThreshold(1e-12);
    if (!lu.isInvertible()) {
      throw SingularHessianError("observed Hessian of group " + std::to_string(g) + " is singular");
    }
    const Eigen::MatrixXd h_inv = lu.inverse();
    const Eigen::MatrixXd meat = sh.scores.transpose() * sh.scores;
    Eigen::MatrixXd v = h_inv * meat * h_inv.transpose();
    out.push_back(0.5 * (v + v.transpose()));
  }
  return out;
}

}  // namespace mixfit
