#pragma once

// Latent-group linear panels: the simulated design with Markov memberships,
// Mundlak expansion, iterative weighted GLS with group-specific random-effect
// variance components, and unit-clustered robust variances.

#include <cstddef>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mixfit/classify.hpp"
#include "mixfit/densities.hpp"
#include "mixfit/mixture_em.hpp"
#include "mixfit/random.hpp"

namespace mixfit {

/// Balanced panel of N units over T periods. Cell (i, t) has flat index
/// i * T + t; covariates are stored p x (N T) in that order. Cells with zero
/// weight are treated as missing.
struct PanelDataset {
  std::size_t units = 0;
  std::size_t periods = 0;
  Eigen::MatrixXd outcome;     // N x T
  Eigen::MatrixXd covariates;  // p x (N T)
  Eigen::MatrixXd weights;     // N x T, entries in [0, 1]
  /// Zero-based true group of every cell, when known.
  std::optional<std::vector<std::size_t>> truth_labels;
  std::vector<std::string> unit_ids;
  std::vector<std::string> period_ids;

  std::size_t cells() const { return units * periods; }
  std::size_t dim() const { return static_cast<std::size_t>(covariates.rows()); }
  Eigen::Index cell(std::size_t i, std::size_t t) const {
    return static_cast<Eigen::Index>(i * periods + t);
  }
  /// Cell weights flattened to length N T.
  Eigen::VectorXd flat_weights() const;
};

/// Throws DimensionError/DomainError when shapes or entries are invalid.
void validate_dataset(const PanelDataset& data);

/// Rows (x_it1, xbar_i1, 1[t = 1], ..., 1[t = T]) for every cell.
struct MundlakDesign {
  Eigen::MatrixXd rows;  // (N T) x (2 + T)
  std::vector<std::size_t> excluded_units;
  std::vector<std::string> warnings;

  Eigen::Index columns() const { return rows.cols(); }
};

/// xbar_i1 is the weight-averaged x_it1 over the unit's periods with positive
/// weight. Units whose weights are all zero are listed as excluded.
MundlakDesign mundlak_expand(const PanelDataset& data);

/// (1 + k) x (N T) observation columns (y, design row) for panel cells.
Observations panel_cells(const PanelDataset& data, const MundlakDesign& design);

/// Omega = sigma2_alpha J_T + sigma2_eps I_T.
Eigen::MatrixXd random_effects_covariance(std::size_t periods, double sigma2_alpha,
                                          double sigma2_eps);

/// Weighted GLS coefficients per group: (sum_i X_i' W Omega^{-1} W X_i)^{-1}
/// (sum_i X_i' W Omega^{-1} W y_i) with W = diag(w_i1, ..., w_iT).
/// `weights[g]` is N x T. Throws CollinearityError for a singular system.
std::vector<Eigen::VectorXd> iwgls_step(const MundlakDesign& design, const Eigen::MatrixXd& outcome,
                                        const std::vector<Eigen::MatrixXd>& weights,
                                        const std::vector<Eigen::MatrixXd>& omegas);

struct VarianceComponents {
  double sigma2_alpha_eps = 0.0;
  double sigma2_alpha = 0.0;
  double sigma2_eps = 0.0;
};

/// Degrees-of-freedom corrected total variance sum w e^2 / (sum w - k), the
/// weighted between-unit variance of unit-mean residuals, and their
/// difference floored at `floor`. With hard weights units carrying a weight
/// total of 0 or 1 are left out of the between-unit part; with soft weights
/// only units with zero total are. Throws InsufficientDataError when
/// sum w <= k.
VarianceComponents variance_components(const Eigen::MatrixXd& residuals,
                                       const Eigen::MatrixXd& weights, std::size_t columns,
                                       bool hard_weights, double floor);

/// Unit-clustered sandwich Q^{-1} [sum_i X_i' W Omega^{-1} e_i e_i' Omega^{-1} W X_i] Q^{-1}
/// with e_i = W (y_i - X_i beta). Throws CollinearityError when Q is singular.
Eigen::MatrixXd cluster_robust_variance(const MundlakDesign& design, const Eigen::MatrixXd& outcome,
                                        const Eigen::MatrixXd& weights, const Eigen::MatrixXd& omega,
                                        const Eigen::VectorXd& beta);

enum class PanelAlgorithm { EM, CEM };

enum class PanelMStep {
  /// Weighted GLS with the current Omega, degrees-of-freedom corrected
  /// variances and (sum w - p) covariate covariances.
  Iwgls,
  /// Exact maximizer of the cell-wise objective: weighted least squares,
  /// maximum-likelihood variances (penalized for EM) and covariances.
  CellMle,
};

struct PanelConfig {
  std::size_t max_iter = 100;
  double rel_tol = 1e-4;
  double variance_floor = 1e-8;
  /// Penalty added to the EM objective (and used by its CellMle update).
  PenaltyKind penalty = PenaltyKind::NormalChen;
  PanelMStep m_step = PanelMStep::Iwgls;
  ClassifierSpec classifier{DiscriminantRule::JointDensity, FeatureSource::Joint};
  std::size_t min_group_size = 2;
  double monotonicity_slack = 1e-8;
  bool robust_variance = true;
};

struct PanelFit {
  /// Components are PanelLinearGaussian, covariates hold psi_g. Labels and
  /// responsibilities run over the N T cells; zero-weight cells carry kNoGroup.
  FitReport report;
  PanelAlgorithm algorithm = PanelAlgorithm::CEM;
  std::vector<VarianceComponents> variances;
  /// Final membership weights, one N x T matrix per group.
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::MatrixXd> robust_variance;
  /// counts(a, b): adjacent labelled periods moving from group a to b.
  Eigen::MatrixXd transition_counts;
  std::vector<std::string> warnings;
};

/// Iterates membership weights (posterior for EM, hard classification for
/// C-EM) and the weighted panel M-step from `init`. EM stops on a relative
/// objective change below rel_tol, C-EM when labels repeat. With one group
/// both algorithms iterate the pooled GLS fit to the same relative tolerance.
/// Monotone ascent is enforced for the CellMle M-step.
PanelFit fit_panel(const PanelDataset& data, std::size_t groups, PanelAlgorithm algorithm,
                   const MixtureModel& init, const PanelConfig& config);

/// fit_panel from each init, keeping the highest final objective.
struct PanelMultiStart {
  PanelFit best;
  std::size_t best_index = 0;
  std::vector<std::pair<std::size_t, std::string>> failures;
  /// Final objective of every start (NaN for failures).
  std::vector<double> objectives;
};
PanelMultiStart multi_start_panel(const PanelDataset& data, std::size_t groups,
                                  PanelAlgorithm algorithm, const std::vector<MixtureModel>& inits,
                                  const PanelConfig& config);

/// Random starting values: coefficients N(0, 1), sigma2_alpha = 0,
/// sigma2_eps = 1, covariate densities at the pooled moments with means
/// perturbed by N(0, 0.1^2), uniform mixing weights.
std::vector<MixtureModel> random_panel_inits(const PanelDataset& data, std::size_t groups,
                                             std::size_t count, Rng& rng);

struct Exercise2Draw {
  PanelDataset data;
  /// True beta_tilde, sigma2_alpha_g = g (one-based), sigma2_eps = 1, psi_g,
  /// and the realized group shares as mixing weights.
  MixtureModel truth;
  Eigen::MatrixXd transition;
};

/// Simulated latent-group panel: Markov memberships with Dirichlet(1, ..., 1)
/// transition rows and a uniform first period, covariates x_it ~ N_p(mu_g,
/// P_g P_g') and outcome x_it1 beta_g + xbar_i1 gamma_g + delta_tg + alpha_ig
/// + eps_it.
Exercise2Draw generate_exercise2(std::size_t units, std::size_t periods, std::size_t groups,
                                 std::size_t dim, Rng& rng);

/// Long-format CSV: unit_id, period, y, w, x1..xp and optionally true_group
/// (one-based). The panel must be balanced; missing cells appear with w = 0.
PanelDataset read_panel_csv(const std::string& path);
void write_panel_csv(const PanelDataset& data, const std::string& path);
void write_panel_csv(const PanelDataset& data, std::ostream& out);

/// Transition counts over adjacent periods t-1, t of each unit where both
/// cells carry a label.
Eigen::MatrixXd transition_counts(const PanelDataset& data, const std::vector<std::size_t>& labels,
                                  std::size_t groups);

}  // namespace mixfit
