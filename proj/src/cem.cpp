#include "mixfit/cem.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

namespace mixfit {
namespace {

// The observations with positive weight, gathered once per run.
struct ActiveSet {
  std::vector<Eigen::Index> index;
  Observations y;
  Observations x;
  Eigen::VectorXd w;
  bool has_x = false;
  std::size_t total = 0;
};

ActiveSet gather(const Observations& data, const CemInputs& inputs) {
  ActiveSet a;
  a.total = static_cast<std::size_t>(data.cols());
  if (inputs.covariates != nullptr && inputs.covariates->cols() != data.cols()) {
    throw DimensionError("covariates and observations differ in count");
  }
  if (inputs.weights != nullptr && inputs.weights->size() != data.cols()) {
    throw DimensionError("observation weights and observations differ in count");
  }
  for (Eigen::Index i = 0; i < data.cols(); ++i) {
    const double w = inputs.weights ? (*inputs.weights)(i) : 1.0;
    if (!std::isfinite(w) || w < 0.0) throw DomainError("observation weights must be finite and >= 0");
    if (w > 0.0) a.index.push_back(i);
  }
  const auto n = static_cast<Eigen::Index>(a.index.size());
  a.y.resize(data.rows(), n);
  a.w.resize(n);
  a.has_x = inputs.covariates != nullptr;
  if (a.has_x) a.x.resize(inputs.covariates->rows(), n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const Eigen::Index i = a.index[static_cast<std::size_t>(k)];
    a.y.col(k) = data.col(i);
    a.w(k) = inputs.weights ? (*inputs.weights)(i) : 1.0;
    if (a.has_x) a.x.col(k) = inputs.covariates->col(i);
  }
  return a;
}

// N x G matrix of log f_g(y_i) (+ log p_g(x_i)).
Eigen::MatrixXd log_joint(const MixtureModel& model, const ActiveSet& a, bool with_covariates) {
  Eigen::MatrixXd out(a.y.cols(), static_cast<Eigen::Index>(model.size()));
  for (std::size_t g = 0; g < model.size(); ++g) {
    const auto col = static_cast<Eigen::Index>(g);
    out.col(col) = log_density_vector(model.components[g], a.y);
    if (with_covariates) out.col(col) += log_density_vector(model.covariates[g], a.x);
  }
  return out;
}

double objective_from(const Eigen::MatrixXd& log_f, const Eigen::VectorXd& w,
                      const std::vector<std::size_t>& labels) {
  double sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    sum += w(row) * log_f(row, static_cast<Eigen::Index>(labels[i]));
  }
  return sum;
}

std::vector<std::size_t> argmax_rows(const Eigen::MatrixXd& scores) {
  std::vector<std::size_t> labels(static_cast<std::size_t>(scores.rows()));
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index g = 1; g < scores.cols(); ++g) {
      if (scores(i, g) > scores(i, best)) best = g;
    }
    labels[static_cast<std::size_t>(i)] = static_cast<std::size_t>(best);
  }
  return labels;
}

void check_sizes(const std::vector<std::size_t>& labels, std::size_t groups, std::size_t minimum,
                 std::size_t iteration) {
  std::vector<std::size_t> counts(groups, 0);
  for (auto l : labels) ++counts[l];
  for (std::size_t g = 0; g < groups; ++g) {
    if (counts[g] < minimum) {
      throw DegenerateComponentError(
          g, "group has " + std::to_string(counts[g]) + " members, fewer than " +
                 std::to_string(minimum),
          iteration);
    }
  }
}

Eigen::VectorXd group_shares(const std::vector<std::size_t>& labels, const Eigen::VectorXd& w,
                             std::size_t groups) {
  Eigen::VectorXd mass = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(groups));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    mass(static_cast<Eigen::Index>(labels[i])) += w(static_cast<Eigen::Index>(i));
  }
  Eigen::VectorXd pi = mass / mass.sum();
  // Close the simplex exactly.
  const auto last = static_cast<Eigen::Index>(groups) - 1;
  if (last > 0) pi(last) = 1.0 - pi.head(last).sum();
  return pi;
}

MixtureModel maximize(ComponentFamily family, const ActiveSet& a,
                      const std::vector<std::size_t>& labels, const MixtureModel& previous,
                      const CemConfig& config) {
  const std::size_t groups = previous.size();
  MixtureModel out;
  out.weights = group_shares(labels, a.w, groups);
  for (std::size_t g = 0; g < groups; ++g) {
    Eigen::VectorXd wg(a.w.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const auto row = static_cast<Eigen::Index>(i);
      wg(row) = labels[i] == g ? a.w(row) : 0.0;
    }
    ComponentParams theta = weighted_mle(family, a.y, wg, g);
    if (auto* p = std::get_if<UnivariateNormal>(&theta)) {
      p->sigma2 = std::max(p->sigma2, config.variance_floor);
    } else if (auto* q = std::get_if<MultivariateNormal>(&theta)) {
      q->sigma = floor_eigenvalues(q->sigma, config.variance_floor);
    } else if (auto* r = std::get_if<PanelLinearGaussian>(&theta)) {
      r->sigma2_eps = std::max(r->sigma2_eps, config.variance_floor);
    }
    out.components.push_back(std::move(theta));
    if (config.covariate_model) {
      auto psi = std::get<MultivariateNormal>(
          weighted_mle(ComponentFamily::MultivariateNormal, a.x, wg, g));
      if (config.covariate_divisor == CovarianceDivisor::DegreesOfFreedom) {
        const double mass = wg.sum();
        const double dof = mass - static_cast<double>(a.x.rows());
        if (!(dof > 0.0)) {
          throw InsufficientDataError("group " + std::to_string(g) +
                                      " has too little weight for the covariate covariance");
        }
        psi.sigma *= mass / dof;
      }
      psi.sigma = floor_eigenvalues(psi.sigma, config.variance_floor);
      out.covariates.push_back(std::move(psi));
    }
  }
  if (!config.covariate_model) out.covariates = previous.covariates;
  return out;
}

FitReport make_report(const MixtureModel& model, const std::vector<std::size_t>& active_labels,
                      const ActiveSet& a) {
  FitReport r;
  r.model = model;
  r.model.weights = group_shares(active_labels, a.w, model.size());
  std::vector<std::size_t> full(a.total, kNoGroup);
  for (std::size_t k = 0; k < active_labels.size(); ++k) {
    full[static_cast<std::size_t>(a.index[k])] = active_labels[k];
  }
  r.hard_labels = Assignment::hard(full, model.size());
  return r;
}

}  // namespace

bool cem_is_monotone(const CemConfig& config) {
  if (config.classifier.rule != DiscriminantRule::JointDensity) return false;
  if (config.covariate_model && config.covariate_divisor != CovarianceDivisor::Mle) return false;
  const bool joint = config.classifier.source == FeatureSource::Joint;
  return joint == config.covariate_model && config.classifier.source != FeatureSource::Covariates;
}

double cml_objective(const MixtureModel& model, const Observations& data, const Assignment& labels,
                     const CemInputs& inputs, bool with_covariates) {
  if (static_cast<Eigen::Index>(labels.size()) != data.cols() || labels.groups() != model.size()) {
    throw DimensionError("labels do not match the data and model");
  }
  if (with_covariates && (inputs.covariates == nullptr || model.covariates.size() != model.size())) {
    throw DomainError("covariate term requested without covariates and their densities");
  }
  const auto full = labels.labels();
  double sum = 0.0;
  for (std::size_t g = 0; g < model.size(); ++g) {
    std::vector<Eigen::Index> idx;
    for (std::size_t i = 0; i < full.size(); ++i) {
      const double w = inputs.weights ? (*inputs.weights)(static_cast<Eigen::Index>(i)) : 1.0;
      if (full[i] == g && w > 0.0) idx.push_back(static_cast<Eigen::Index>(i));
    }
    if (idx.empty()) continue;
    Observations y(data.rows(), static_cast<Eigen::Index>(idx.size()));
    Eigen::VectorXd w(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      y.col(static_cast<Eigen::Index>(k)) = data.col(idx[k]);
      w(static_cast<Eigen::Index>(k)) = inputs.weights ? (*inputs.weights)(idx[k]) : 1.0;
    }
    Eigen::VectorXd lf = log_density_vector(model.components[g], y);
    if (with_covariates) {
      Observations x(inputs.covariates->rows(), y.cols());
      for (std::size_t k = 0; k < idx.size(); ++k) {
        x.col(static_cast<Eigen::Index>(k)) = inputs.covariates->col(idx[k]);
      }
      lf += log_density_vector(model.covariates[g], x);
    }
    sum += w.dot(lf);
  }
  return sum;
}

FitReport fit_cem(const Observations& data, const MixtureModel& init, const CemConfig& config,
                  const CemInputs& inputs) {
  if (config.max_iter < 1 || config.min_group_size < 1) {
    throw DomainError("C-EM needs max_iter >= 1 and min_group_size >= 1");
  }
  validate_model(init);
  const ActiveSet a = gather(data, inputs);
  if (a.index.empty()) throw InsufficientDataError("no observation has positive weight");
  const bool uses_x = config.covariate_model || config.classifier.source != FeatureSource::Outcome;
  if (uses_x && !a.has_x) throw DomainError("the C-EM configuration needs covariates");
  if (uses_x && init.covariates.size() != init.size()) {
    throw DomainError("the initial model needs covariate densities");
  }
  const std::size_t groups = init.size();
  const ComponentFamily family = init.family();
  const bool monotone = cem_is_monotone(config);
  const bool with_x = config.covariate_model;

  auto classify = [&](const MixtureModel& m, Eigen::MatrixXd& log_f) {
    log_f = log_joint(m, a, with_x);
    if (monotone) return argmax_rows(log_f);
    return argmax_rows(discriminant_matrix(config.classifier, a.y, m, a.has_x ? &a.x : nullptr));
  };

  MixtureModel model = init;
  Eigen::MatrixXd log_f;
  std::vector<std::size_t> labels = classify(model, log_f);
  check_sizes(labels, groups, config.min_group_size, 0);

  std::vector<double> trace{objective_from(log_f, a.w, labels)};
  MixtureModel best_model = model;
  std::vector<std::size_t> best_labels = labels;
  double best_objective = trace.front();
  std::deque<std::vector<std::size_t>> history;

  for (std::size_t k = 1; k <= config.max_iter; ++k) {
    MixtureModel next = maximize(family, a, labels, model, config);
    std::vector<std::size_t> next_labels = classify(next, log_f);
    check_sizes(next_labels, groups, config.min_group_size, k);
    const double value = objective_from(log_f, a.w, next_labels);
    if (monotone && value < trace.back() - config.monotonicity_slack) {
      throw MonotonicityError(k, trace.back(), value);
    }
    trace.push_back(value);
    model = std::move(next);
    if (value > best_objective) {
      best_objective = value;
      best_model = model;
      best_labels = next_labels;
    }

    if (next_labels == labels) {
      FitReport r = make_report(model, next_labels, a);
      r.objective_trace = std::move(trace);
      r.iterations = k;
      r.converged = true;
      return r;
    }
    for (std::size_t back = 0; back < history.size(); ++back) {
      if (history[back] == next_labels) {
        FitReport r = make_report(best_model, best_labels, a);
        r.objective_trace = trace;
        r.iterations = k;
        throw CycleError(back + 2, k, std::move(r));
      }
    }
    history.push_front(std::move(labels));
    if (history.size() > config.cycle_window) history.pop_back();
    labels = std::move(next_labels);
  }

  FitReport r = make_report(model, labels, a);
  r.objective_trace = std::move(trace);
  r.iterations = config.max_iter;
  r.converged = false;
  return r;
}

MultiStartResult multi_start_cem(const Observations& data, const std::vector<MixtureModel>& inits,
                                 const CemConfig& config, const CemInputs& inputs) {
  if (inits.empty()) throw DomainError("multi-start needs at least one init");
  MultiStartResult out;
  bool have = false;
  std::vector<std::string> causes;
  for (std::size_t s = 0; s < inits.size(); ++s) {
    try {
      FitReport fit = fit_cem(data, inits[s], config, inputs);
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

}  // namespace mixfit
