#pragma once

// Monte Carlo harness for the two simulation exercises: data generation per
// replication from counter-based seeds, multi-start fitting, label alignment
// and bias/MSE/percentile summaries.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mixfit/classify.hpp"
#include "mixfit/densities.hpp"
#include "mixfit/mixture_em.hpp"
#include "mixfit/panel.hpp"
#include "mixfit/random.hpp"

namespace mixfit {

enum class PercentileBasis { Estimate, Bias };

struct ParameterSummary {
  std::string name;
  /// Mean of the true values (constant in the first exercise).
  double truth = 0.0;
  double mean_estimate = 0.0;
  double bias = 0.0;
  double mse = 0.0;
  double p025 = 0.0;
  double p975 = 0.0;
  std::size_t count = 0;
};

/// bias = mean(est - truth), mse = mean((est - truth)^2); the percentiles are
/// of the estimates or of the per-replication bias. Throws
/// InsufficientDataError for empty input.
ParameterSummary summarize_parameter(const std::string& name, std::span<const double> estimates,
                                     std::span<const double> truths, PercentileBasis basis);

struct Interval {
  double lower = 0.0;
  double upper = 0.0;
};

/// Percentile bootstrap interval for the mean of `values`.
Interval bootstrap_mean_interval(std::span<const double> values, std::size_t resamples, double level,
                                 Rng& rng);

enum class AlignRule { SortByMean, MatchTruth };

/// Relabels a fit. SortByMean orders components ascending by mean (standard
/// deviation on ties). MatchTruth applies the permutation that minimizes
/// misclassification against `truth`, which is then required. Labels,
/// responsibilities and per-group variances follow the components.
FitReport align_labels(const FitReport& fit, AlignRule rule, const Assignment* truth = nullptr);

/// Applies out[k] = in[order[k]] to every group-indexed part of a fit.
FitReport permute_fit(const FitReport& fit, const std::vector<std::size_t>& order);

struct ReplicationFailure {
  std::size_t sample_size = 0;
  std::size_t replication = 0;
  std::string algorithm;
  std::string cause;
};

// ---------------------------------------------------------------------------
// Exercise 1: univariate two-component mixtures.

struct Exercise1Scenario {
  /// Two univariate components with weights in (0, 1).
  MixtureModel truth;
  std::vector<std::size_t> sample_sizes{100, 1000, 10000};
  std::size_t replications = 1000;
  std::uint64_t seed = 1;
  /// Penalty defaults to NormalChen for normal mixtures, None otherwise.
  std::optional<EmConfig> em;
  bool truth_init = true;
};

void validate_scenario(const Exercise1Scenario& scenario);

/// Parameter names in report order, e.g. mu1, mu2, sigma1, sigma2, pi1.
std::vector<std::string> exercise1_parameter_names(const MixtureModel& truth);

/// Values of `model` in the order of exercise1_parameter_names. Standard
/// deviations, not variances, are reported for normal components.
std::vector<double> exercise1_parameters(const MixtureModel& model);

/// First floor(pi_1 N) observations from component 1, the rest from 2.
Observations generate_exercise1(const MixtureModel& truth, std::size_t n, Rng& rng);

/// Sorts estimated and true components by mean and pairs them by rank, then
/// returns the estimates in the truth's own component order.
MixtureModel align_to_truth_order(const MixtureModel& estimate, const MixtureModel& truth);

struct Exercise1Cell {
  std::size_t sample_size = 0;
  std::vector<ParameterSummary> parameters;
  /// estimates[r] holds the aligned parameters of successful replication r.
  std::vector<std::vector<double>> estimates;
  std::size_t successes = 0;
  std::size_t failures = 0;
  std::size_t nonconverged = 0;
};

struct Exercise1Report {
  std::vector<std::string> parameter_names;
  std::vector<double> truth;
  std::vector<Exercise1Cell> cells;
  std::vector<ReplicationFailure> failures;
};

/// Per replication: draw data, fit EM from every quantile split (and the
/// truth), keep the highest objective and align by sorted means. Failed
/// replications are recorded; more than half failing at one sample size
/// throws ScenarioAbortedError.
Exercise1Report run_exercise1(const Exercise1Scenario& scenario, std::size_t threads = 1);

// ---------------------------------------------------------------------------
// Exercise 2: latent-group linear panels.

struct Exercise2Scenario {
  std::size_t units = 500;
  std::size_t periods = 5;
  std::size_t groups = 2;
  std::size_t dim = 1;
  std::size_t replications = 250;
  std::size_t inits = 25;
  std::uint64_t seed = 1;
  bool run_em = true;
  bool run_cem = true;
  PanelConfig config;
};

void validate_scenario(const Exercise2Scenario& scenario);

/// beta_g, gamma_g, time1_g..timeT_g, sigma2_alpha_g, sigma2_eps_g, pi_g for
/// g = 1..G (one-based suffixes), grouped by g.
std::vector<std::string> exercise2_parameter_names(std::size_t periods, std::size_t groups);
std::vector<double> exercise2_parameters(const MixtureModel& model);

struct Exercise2Algorithm {
  PanelAlgorithm algorithm = PanelAlgorithm::CEM;
  std::vector<ParameterSummary> parameters;
  std::vector<std::vector<double>> estimates;
  std::vector<std::vector<double>> truths;
  /// Misclassification rate of every successful replication.
  std::vector<double> misclassification;
  std::size_t successes = 0;
  std::size_t failures = 0;
  std::size_t nonconverged = 0;

  double zero_misclassification_share() const;
  double mean_misclassification() const;
};

struct Exercise2Report {
  std::vector<std::string> parameter_names;
  std::vector<Exercise2Algorithm> algorithms;
  std::vector<ReplicationFailure> failures;
};

/// Per replication: generate the panel, draw `inits` random starts, run each
/// enabled algorithm from the same starts, keep its best objective and align
/// labels to the truth. Percentiles are of the bias.
Exercise2Report run_exercise2(const Exercise2Scenario& scenario, std::size_t threads = 1);

std::string algorithm_name(PanelAlgorithm algorithm);

}  // namespace mixfit
