#pragma once

// Hard classifiers (joint density, Euclidean, Mahalanobis), misclassification
// rates under the best label permutation, and closed-form moments of the
// cross-group distances used to validate those classifiers.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "mixfit/densities.hpp"
#include "mixfit/random.hpp"

namespace mixfit {

/// Label used for observations that are carried through without a group.
inline constexpr std::size_t kNoGroup = std::numeric_limits<std::size_t>::max();

enum class AssignmentKind { Hard, Soft };

/// Group memberships, N x G. Hard rows are one-hot (or all zero for an
/// observation deliberately left unassigned); soft rows are nonnegative and
/// sum to one. Group labels are zero-based.
class Assignment {
 public:
  static Assignment hard(std::span<const std::size_t> labels, std::size_t groups);
  static Assignment soft(Eigen::MatrixXd responsibilities);

  AssignmentKind kind() const { return kind_; }
  const Eigen::MatrixXd& matrix() const { return matrix_; }
  std::size_t size() const { return static_cast<std::size_t>(matrix_.rows()); }
  std::size_t groups() const { return static_cast<std::size_t>(matrix_.cols()); }

  /// Row-wise argmax, lowest index on ties; kNoGroup for all-zero rows.
  std::vector<std::size_t> labels() const;

  /// Column sums (group sizes for hard assignments).
  Eigen::VectorXd counts() const;

  /// Hard assignment at the argmax of every row.
  Assignment harden() const;

 private:
  Assignment(AssignmentKind kind, Eigen::MatrixXd m) : kind_(kind), matrix_(std::move(m)) {}

  AssignmentKind kind_;
  Eigen::MatrixXd matrix_;
};

enum class DiscriminantRule { JointDensity, Euclidean, Mahalanobis };
enum class FeatureSource { Outcome, Covariates, Joint };

struct ClassifierSpec {
  DiscriminantRule rule = DiscriminantRule::JointDensity;
  FeatureSource source = FeatureSource::Outcome;
};

/// h_j(y): log f_j(y) for JointDensity, -||y - mu_j||^2 for Euclidean and
/// -(y - mu_j)' Sigma_j^{-1} (y - mu_j) for Mahalanobis.
double discriminant(const ClassifierSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& obs,
                    const ComponentParams& params);

/// Same with a covariate vector x and its group density psi. The feature
/// source selects the outcome, the covariates, or both (stacked for the
/// distance rules, summed log densities for JointDensity).
double discriminant(const ClassifierSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& obs,
                    const ComponentParams& params, const Eigen::Ref<const Eigen::VectorXd>& x,
                    const MultivariateNormal& psi);

/// N x G matrix of discriminants. `covariates` (p x N) is required when the
/// feature source uses covariates; the model must then carry psi.
Eigen::MatrixXd discriminant_matrix(const ClassifierSpec& spec, const Observations& data,
                                    const MixtureModel& model,
                                    const Observations* covariates = nullptr);

/// One-hot at the row argmax; ties go to the lowest group index.
Assignment argmax_assignment(const Eigen::MatrixXd& scores);

Assignment classify_hard(const ClassifierSpec& spec, const Observations& data,
                         const MixtureModel& model, const Observations* covariates = nullptr);

struct Misclassification {
  double rate = 0.0;
  /// permutation[estimated_label] = truth_label.
  std::vector<std::size_t> permutation;
};

/// Minimum over label permutations of the share of misassigned observations.
/// Exhaustive for G <= 8, Hungarian assignment above. Rows unassigned in
/// either argument are ignored.
Misclassification misclassification_rate(const Assignment& estimated, const Assignment& truth);

/// Permutation maximizing total agreement of a G x G matrix; perm[row] = col.
std::vector<std::size_t> best_permutation(const Eigen::MatrixXd& agreement);

/// Minimum-cost perfect matching on a square cost matrix; result[row] = col.
std::vector<std::size_t> hungarian_min_cost(const Eigen::MatrixXd& cost);

/// Gaussian data-generating process for classifier studies.
struct ClassificationDgp {
  enum class Kind {
    /// mu_g ~ N_p(0, I), Sigma_g = P_g P_g' with P_g unit upper triangular,
    /// off-diagonal entries N(0, 1); redrawn each replication.
    RandomCovariance,
    /// Fixed group densities, used as given.
    Fixed,
  };
  Kind kind = Kind::RandomCovariance;
  std::size_t groups = 2;
  std::vector<MultivariateNormal> fixed;
  /// Membership probabilities; uniform when empty.
  Eigen::VectorXd weights;
};

/// Draws the group densities of one replication.
std::vector<MultivariateNormal> draw_group_densities(const ClassificationDgp& dgp, std::size_t p,
                                                     Rng& rng);

/// Unit upper-triangular P with N(0, 1) off-diagonals; Sigma = P P'.
Eigen::MatrixXd random_unit_upper_covariance(std::size_t p, Rng& rng);

struct ClassifierErrorEstimate {
  /// Share of replications with at least one misclassified observation.
  double uniform_error = 0.0;
  /// Mean per-observation misclassification rate, and its standard error.
  double mean_rate = 0.0;
  double rate_std_error = 0.0;
  std::size_t replications = 0;
};

/// Monte Carlo error of `rule` evaluated at the true parameters.
ClassifierErrorEstimate uniform_error_estimate(const ClassifierSpec& rule,
                                               const ClassificationDgp& dgp, std::size_t p,
                                               std::size_t n, std::size_t replications, Rng& rng);

/// E||x - mu_other||^2 for x ~ own: tr(Sigma_own) + ||mu_other - mu_own||^2.
double expected_sq_euclidean(const MultivariateNormal& own, const Eigen::VectorXd& other_mean);

/// E[(x - mu_j)' Sigma_j^{-1} (x - mu_j)] for x ~ own, evaluated through the
/// lower-triangular factors W with Sigma^{-1} = W W':
/// 2 sum_l d_ll + sum_{m <= l} v_lm^2 - p + ||a' W_j||^2.
double expected_sq_mahalanobis(const MultivariateNormal& own, const MultivariateNormal& other);

struct MarkovBound {
  double probability = 0.0;  // P[f >= g]
  double bound = 0.0;        // (E f + sqrt(Var g) / 2) / E g
  bool holds = false;
};

/// Two-sided Markov bound on a finite support with point masses `mass`.
MarkovBound generalized_markov_bound(std::span<const double> f, std::span<const double> g,
                                     std::span<const double> mass);

}  // namespace mixfit
