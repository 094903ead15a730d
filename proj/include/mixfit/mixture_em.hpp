#pragma once

// EM maximization of the (optionally penalized) mixture likelihood, with the
// quantile-split initialization protocol and sandwich variances.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "mixfit/classify.hpp"
#include "mixfit/densities.hpp"

namespace mixfit {

enum class ConvergenceRule {
  /// Stop when the objective gains less than loglik_tol.
  Absolute,
  /// Stop when |change| / |previous objective| < rel_tol.
  Relative,
};

enum class PenaltyKind { None, NormalChen };

struct EmConfig {
  std::size_t max_iter = 100;
  double loglik_tol = 1e-10;
  double rel_tol = 1e-4;
  ConvergenceRule rule = ConvergenceRule::Absolute;
  PenaltyKind penalty = PenaltyKind::None;
  /// Lower bound on variances and covariance eigenvalues after each M-step.
  double variance_floor = 1e-8;
  /// Allowed decrease of the objective between iterations before aborting.
  double monotonicity_slack = 1e-8;
  /// Compute sandwich variances for the final estimates.
  bool compute_variance = false;
};

struct FitReport {
  MixtureModel model;
  /// trace[0] is the objective at the initial values, trace[k] after iteration k.
  std::vector<double> objective_trace;
  std::size_t iterations = 0;
  bool converged = false;
  std::optional<Assignment> responsibilities;
  std::optional<Assignment> hard_labels;
  /// One matrix per group, empty unless requested.
  std::vector<Eigen::MatrixXd> variance_estimates;

  double objective() const { return objective_trace.empty() ? 0.0 : objective_trace.back(); }
};

/// N x G matrix of log(pi_g) + log f_g(y_i).
Eigen::MatrixXd weighted_log_densities(const MixtureModel& model, const Observations& data);

/// sum_i log sum_g pi_g f_g(y_i), through log-sum-exp.
double mixture_loglik(const MixtureModel& model, const Observations& data);

/// -N^{-1/2} sum_g (1 / sigma2_g + log sigma2_g) over normal components.
double chen_penalty(const MixtureModel& model, std::size_t n);
double chen_penalty(std::span<const double> variances, std::size_t n);

/// Objective maximized by fit_em: mixture loglik plus the configured penalty.
double penalized_loglik(const MixtureModel& model, const Observations& data, PenaltyKind penalty);

/// tau_ig = pi_g f_g(y_i) / sum_j pi_j f_j(y_i), in log space.
Assignment e_step(const MixtureModel& model, const Observations& data);

/// Maximizer of the penalized objective for sigma2 given weighted residual
/// sum of squares `ss`, weight total `mass` and sample size n:
/// (ss + 2a) / (mass + 2a), a = n^{-1/2}.
double penalized_normal_variance(double ss, double mass, std::size_t n);

/// pi_g = column mean of tau, theta_g = weighted MLE with column-g weights.
/// Throws DegenerateComponentError when a column carries less than 1e-6 N.
MixtureModel m_step(ComponentFamily family, const Observations& data, const Assignment& tau,
                    const EmConfig& config = {});

/// Throws MonotonicityError if the objective drops by more than the slack.
FitReport fit_em(const Observations& data, const MixtureModel& init, const EmConfig& config);

struct MultiStartResult {
  FitReport best;
  std::size_t best_index = 0;
  /// (start index, cause) of every start that failed.
  std::vector<std::pair<std::size_t, std::string>> failures;
};

/// Runs fit_em from every init and keeps the highest final objective.
/// Throws AggregateError when every start fails.
MultiStartResult multi_start_em(const Observations& data, const std::vector<MixtureModel>& inits,
                                const EmConfig& config);

inline const std::vector<double> kSplitQuantiles = {0.9999, 0.9995, 0.999, 0.995,
                                                    0.99,   0.98,   0.97,  0.95};

struct InitSet {
  std::vector<MixtureModel> inits;
  std::vector<std::string> warnings;
};

/// Empirical quantile with linear interpolation between order statistics.
double empirical_quantile(std::vector<double> values, double q);

/// Two-component starting values from splits at the quantiles in
/// kSplitQuantiles (and their complements for the normal family). Each part
/// is fitted by MLE; pi_1 = |part 1| / N. A normal part with a single distinct
/// value starts at the variance floor. Splits with an empty part, or a part
/// that cannot be fitted, are skipped with a warning. `truth`, when given, is appended last.
InitSet quantile_split_inits(const Observations& data, ComponentFamily family,
                             const std::optional<MixtureModel>& truth = std::nullopt);

/// Location used to order components: mean for the scalar families, first
/// coordinate of mu for the multivariate normal.
double component_mean(const ComponentParams& params);
double component_sd(const ComponentParams& params);

/// Permutation that sorts components ascending by mean, then by standard
/// deviation; order[k] is the old index placed at position k.
std::vector<std::size_t> mean_order(const MixtureModel& model);

/// Reorders components, weights and covariate densities: out[k] = in[order[k]].
MixtureModel permute_model(const MixtureModel& model, const std::vector<std::size_t>& order);

/// Sandwich variance per group: H^{-1} (sum_i s_i s_i') H^{-1} over the
/// observations labelled g, with analytic scores s_i and Hessian H.
/// Parameter order: normal (mu, sigma2); poisson (lambda); exponential (mean);
/// multivariate normal (mu, vech of the lower triangle of sigma, column-major);
/// panel cells (beta_tilde, sigma2_alpha + sigma2_eps).
std::vector<Eigen::MatrixXd> sandwich_variance(const MixtureModel& model, const Observations& data,
                                               const Assignment& hard_labels);

/// Per-observation scores (rows) and summed Hessian of one component.
struct ScoreHessian {
  Eigen::MatrixXd scores;
  Eigen::MatrixXd hessian;
};
ScoreHessian score_and_hessian(const ComponentParams& params, const Observations& data);

}  // namespace mixfit
