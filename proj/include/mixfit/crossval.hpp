#pragma once

// Repeated K-fold cross-validation over panel units. Folds partition units,
// never cells, and test memberships come from the covariate densities only.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mixfit/panel.hpp"
#include "mixfit/random.hpp"

namespace mixfit {

struct CvPlan {
  std::size_t folds = 2;
  std::size_t repetitions = 10;
  std::uint64_t seed = 1;
  /// Start every fold from the top_k full-data fits instead of random draws.
  bool warm_start = false;
  std::size_t top_k = 15;
  /// Random starts per fit (and for the full-data fit when warm starting).
  std::size_t inits = 25;
  PanelConfig panel;
};

void validate_plan(const CvPlan& plan, std::size_t units);

struct FoldSplit {
  std::size_t repetition = 0;
  std::size_t fold = 0;
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// For each repetition a uniformly random partition of the units into K folds
/// whose sizes differ by at most one; fold k of a repetition is the test set
/// of one split. Splits are ordered by (repetition, fold).
std::vector<FoldSplit> split_units(std::size_t units, const CvPlan& plan, Rng& rng);

/// Dataset restricted to `units`, in the given order.
PanelDataset subset_units(const PanelDataset& data, std::span<const std::size_t> units);

enum class MembershipKind {
  /// One-hot at argmax_g log p_g(x).
  Hard,
  /// Posterior pi_g p_g(x) / sum_h pi_h p_h(x).
  Soft,
};

/// Cell-by-group membership weights from the covariate densities.
Eigen::MatrixXd covariate_memberships(const MixtureModel& model, const Observations& covariates,
                                      MembershipKind kind);

/// yhat_it = sum_g w_itg X_it beta_tilde_g over all cells of `test`, with the
/// Mundlak design built from the test units' own covariates. Throws
/// DimensionError when the covariate dimension does not match the model.
Eigen::VectorXd predict_outcome(const MixtureModel& model, const PanelDataset& test,
                                MembershipKind kind);

/// Same prediction from explicit design rows and N T x G membership weights.
Eigen::VectorXd predict_outcome(const MixtureModel& model, const Eigen::MatrixXd& design_rows,
                                const Eigen::MatrixXd& memberships);

struct FoldResult {
  std::size_t repetition = 0;
  std::size_t fold = 0;
  /// Model fitted on the training units.
  MixtureModel model;
  Eigen::VectorXd prediction;
  /// Weighted squared error and weight total over the test cells.
  double sse = 0.0;
  double weight = 0.0;
};

/// Fits the training units of `split` and predicts its test units. `inits`
/// overrides the random starts (warm start).
FoldResult run_fold(const PanelDataset& data, const FoldSplit& split, std::size_t groups,
                    PanelAlgorithm algorithm, const CvPlan& plan, Rng& rng,
                    const std::vector<MixtureModel>* inits = nullptr);

struct CvFoldRecord {
  std::size_t repetition = 0;
  std::size_t fold = 0;
  std::size_t test_units = 0;
  double test_weight = 0.0;
  double rmse = 0.0;
  double baseline_rmse = 0.0;
  bool ok = false;
  std::string error;
};

struct CvReport {
  std::size_t groups = 0;
  PanelAlgorithm algorithm = PanelAlgorithm::CEM;
  /// sqrt of the squared errors pooled over every evaluated test cell.
  double rmse_overall = 0.0;
  double baseline_rmse = 0.0;
  /// rmse_overall / baseline_rmse, with the one-group model as baseline.
  double relative_to_G1 = 0.0;
  std::vector<CvFoldRecord> folds;
  std::size_t skipped = 0;
  std::vector<std::string> warnings;

  std::vector<double> rmse_per_fold() const;
};

/// Runs every split for the G-group model and the one-group baseline. A fold
/// whose fit fails is skipped and recorded; all folds failing throws
/// AggregateError.
CvReport cross_validate(const PanelDataset& data, std::size_t groups, PanelAlgorithm algorithm,
                        const CvPlan& plan, std::size_t threads = 1);

}  // namespace mixfit
