#pragma once

// Classification EM: weighted-MLE M-steps alternating with hard C-steps under
// a pluggable classifier, maximizing the classification-mixture likelihood.

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mixfit/classify.hpp"
#include "mixfit/densities.hpp"
#include "mixfit/errors.hpp"
#include "mixfit/mixture_em.hpp"

namespace mixfit {

enum class CovarianceDivisor {
  /// sum of weights (maximum likelihood).
  Mle,
  /// sum of weights minus the covariate dimension.
  DegreesOfFreedom,
};

struct CemConfig {
  ClassifierSpec classifier;
  std::size_t max_iter = 100;
  std::size_t min_group_size = 2;
  /// Re-estimate the covariate densities psi_g in every M-step.
  bool covariate_model = false;
  CovarianceDivisor covariate_divisor = CovarianceDivisor::Mle;
  /// Floor on variances and covariance eigenvalues after each M-step.
  double variance_floor = 1e-8;
  /// Number of past label vectors searched for a repeat.
  std::size_t cycle_window = 10;
  double monotonicity_slack = 1e-8;
};

/// Labels repeated with a period above one. Carries the iterate with the
/// highest objective seen before stopping.
class CycleError : public Error {
 public:
  CycleError(std::size_t period, std::size_t iteration, FitReport best)
      : Error("labels cycle with period " + std::to_string(period) + " at iteration " +
              std::to_string(iteration)),
        period_(period),
        best_(std::move(best)) {}

  std::size_t period() const noexcept { return period_; }
  const FitReport& best() const noexcept { return best_; }

 private:
  std::size_t period_;
  FitReport best_;
};

/// Optional side information for a C-EM run. Observations with zero weight
/// are left out of both steps and come back with the label kNoGroup.
struct CemInputs {
  const Observations* covariates = nullptr;
  const Eigen::VectorXd* weights = nullptr;
};

/// sum_i sum_g w_i z_ig log f_g(y_i), plus log p_g(x_i) when
/// `with_covariates` is set. Unassigned rows contribute nothing.
double cml_objective(const MixtureModel& model, const Observations& data, const Assignment& labels,
                     const CemInputs& inputs = {}, bool with_covariates = false);

/// True when the configured classifier maximizes the objective in the C-step,
/// so that every iteration is an ascent step.
bool cem_is_monotone(const CemConfig& config);

/// Runs C-EM from `init` until the labels stop changing.
/// pi_g = n_g / N at exit. Throws DegenerateComponentError when a group
/// shrinks below min_group_size, CycleError on a label cycle, and
/// MonotonicityError when a monotone configuration loses objective.
FitReport fit_cem(const Observations& data, const MixtureModel& init, const CemConfig& config,
                  const CemInputs& inputs = {});

/// fit_cem from every init; keeps the highest final objective.
MultiStartResult multi_start_cem(const Observations& data, const std::vector<MixtureModel>& inits,
                                 const CemConfig& config, const CemInputs& inputs = {});

}  // namespace mixfit
