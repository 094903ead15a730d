#include "mixfit/classify.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

#include "mixfit/errors.hpp"

namespace mixfit {
namespace {

bool uses_outcome(FeatureSource s) { return s != FeatureSource::Covariates; }
bool uses_covariates(FeatureSource s) { return s != FeatureSource::Outcome; }

// Discriminant of one group, with everything that depends only on the
// parameters computed once.
class GroupScorer {
 public:
  GroupScorer(const ClassifierSpec& spec, const ComponentParams& theta,
              const MultivariateNormal* psi)
      : spec_(spec), theta_(theta) {
    if (uses_covariates(spec.source)) {
      if (psi == nullptr) {
        throw DomainError("classifier uses covariates but no covariate density was given");
      }
      psi_.emplace(*psi);
    }
    if (spec.rule == DiscriminantRule::Mahalanobis) {
      if (spec.source == FeatureSource::Joint) {
        const Eigen::MatrixXd sy = theta_.covariance();
        const Eigen::MatrixXd sx = psi_->covariance();
        Eigen::MatrixXd block = Eigen::MatrixXd::Zero(sy.rows() + sx.rows(), sy.rows() + sx.rows());
        block.topLeftCorner(sy.rows(), sy.rows()) = sy;
        block.bottomRightCorner(sx.rows(), sx.rows()) = sx;
        joint_.emplace(block);
      } else {
        const Eigen::MatrixXd s = spec.source == FeatureSource::Outcome ? theta_.covariance()
                                                                        : psi_->covariance();
        single_.emplace(s);
      }
    }
  }

  double score(const Eigen::Ref<const Eigen::VectorXd>& y,
               const Eigen::Ref<const Eigen::VectorXd>& x) const {
    switch (spec_.rule) {
      case DiscriminantRule::JointDensity: {
        double h = 0.0;
        if (uses_outcome(spec_.source)) h += theta_.log_density(y);
        if (uses_covariates(spec_.source)) h += psi_->log_density(x);
        return h;
      }
      case DiscriminantRule::Euclidean: {
        double d = 0.0;
        if (uses_outcome(spec_.source)) d += theta_.squared_euclidean(y);
        if (uses_covariates(spec_.source)) d += psi_->squared_euclidean(x);
        return -d;
      }
      case DiscriminantRule::Mahalanobis: {
        if (spec_.source == FeatureSource::Outcome) {
          return -single_->squared_mahalanobis(theta_.residual(y));
        }
        if (spec_.source == FeatureSource::Covariates) {
          return -single_->squared_mahalanobis(psi_->residual(x));
        }
        const Eigen::VectorXd ry = theta_.residual(y);
        const Eigen::VectorXd rx = psi_->residual(x);
        Eigen::VectorXd r(ry.size() + rx.size());
        r << ry, rx;
        return -joint_->squared_mahalanobis(r);
      }
    }
    return 0.0;
  }

 private:
  ClassifierSpec spec_;
  ComponentEvaluator theta_;
  std::optional<ComponentEvaluator> psi_;
  std::optional<SpdFactor> single_;
  std::optional<SpdFactor> joint_;
};

}  // namespace

// ---------------------------------------------------------------------------

Assignment Assignment::hard(std::span<const std::size_t> labels, std::size_t groups) {
  if (groups == 0) throw DimensionError("assignment needs at least one group");
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(labels.size()),
                                            static_cast<Eigen::Index>(groups));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == kNoGroup) continue;
    if (labels[i] >= groups) {
      throw DimensionError("label " + std::to_string(labels[i]) + " out of range for " +
                           std::to_string(groups) + " groups");
    }
    m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(labels[i])) = 1.0;
  }
  return Assignment(AssignmentKind::Hard, std::move(m));
}

Assignment Assignment::soft(Eigen::MatrixXd responsibilities) {
  for (Eigen::Index i = 0; i < responsibilities.rows(); ++i) {
    if ((responsibilities.row(i).array() < 0.0).any() ||
        std::abs(responsibilities.row(i).sum() - 1.0) > 1e-12) {
      throw DomainError("responsibility row " + std::to_string(i) +
                        " is not a probability vector");
    }
  }
  return Assignment(AssignmentKind::Soft, std::move(responsibilities));
}

std::vector<std::size_t> Assignment::labels() const {
  std::vector<std::size_t> out(size(), kNoGroup);
  for (Eigen::Index i = 0; i < matrix_.rows(); ++i) {
    double best = 0.0;
    for (Eigen::Index g = 0; g < matrix_.cols(); ++g) {
      if (matrix_(i, g) > best) {
        best = matrix_(i, g);
        out[static_cast<std::size_t>(i)] = static_cast<std::size_t>(g);
      }
    }
  }
  return out;
}

Eigen::VectorXd Assignment::counts() const { return matrix_.colwise().sum().transpose(); }

Assignment Assignment::harden() const {
  const auto l = labels();
  return hard(l, groups());
}

// ---------------------------------------------------------------------------

double discriminant(const ClassifierSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& obs,
                    const ComponentParams& params) {
  if (spec.source != FeatureSource::Outcome) {
    throw DomainError("covariate-based discriminants need a covariate vector and density");
  }
  return GroupScorer(spec, params, nullptr).score(obs, obs);
}

double discriminant(const ClassifierSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& obs,
                    const ComponentParams& params, const Eigen::Ref<const Eigen::VectorXd>& x,
                    const MultivariateNormal& psi) {
  return GroupScorer(spec, params, &psi).score(obs, x);
}

Eigen::MatrixXd discriminant_matrix(const ClassifierSpec& spec, const Observations& data,
                                    const MixtureModel& model, const Observations* covariates) {
  const std::size_t groups = model.size();
  if (groups == 0) throw DomainError("model has no components");
  const bool need_x = uses_covariates(spec.source);
  if (need_x) {
    if (covariates == nullptr) throw DomainError("classifier needs covariates");
    if (covariates->cols() != data.cols()) {
      throw DimensionError("covariates and observations differ in count");
    }
    if (model.covariates.size() != groups) {
      throw DomainError("model carries no covariate densities");
    }
  }
  if (spec.rule == DiscriminantRule::JointDensity) {
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(data.cols(), static_cast<Eigen::Index>(groups));
    for (std::size_t g = 0; g < groups; ++g) {
      const auto col = static_cast<Eigen::Index>(g);
      if (uses_outcome(spec.source)) h.col(col) += log_density_vector(model.components[g], data);
      if (need_x) h.col(col) += log_density_vector(model.covariates[g], *covariates);
    }
    return h;
  }
  std::vector<GroupScorer> scorers;
  scorers.reserve(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    scorers.emplace_back(spec, model.components[g], need_x ? &model.covariates[g] : nullptr);
  }
  Eigen::MatrixXd h(data.cols(), static_cast<Eigen::Index>(groups));
  for (Eigen::Index i = 0; i < data.cols(); ++i) {
    for (std::size_t g = 0; g < groups; ++g) {
      h(i, static_cast<Eigen::Index>(g)) =
          need_x ? scorers[g].score(data.col(i), covariates->col(i))
                 : scorers[g].score(data.col(i), data.col(i));
    }
  }
  return h;
}

Assignment argmax_assignment(const Eigen::MatrixXd& scores) {
  std::vector<std::size_t> labels(static_cast<std::size_t>(scores.rows()));
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index g = 1; g < scores.cols(); ++g) {
      if (scores(i, g) > scores(i, best)) best = g;
    }
    labels[static_cast<std::size_t>(i)] = static_cast<std::size_t>(best);
  }
  return Assignment::hard(labels, static_cast<std::size_t>(scores.cols()));
}

Assignment classify_hard(const ClassifierSpec& spec, const Observations& data,
                         const MixtureModel& model, const Observations* covariates) {
  return argmax_assignment(discriminant_matrix(spec, data, model, covariates));
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> hungarian_min_cost(const Eigen::MatrixXd& cost) {
  const auto n = static_cast<std::size_t>(cost.rows());
  if (cost.cols() != cost.rows()) throw DimensionError("cost matrix must be square");
  // Potentials formulation, 1-based with a virtual column 0.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
  for (std::size_t row = 1; row <= n; ++row) {
    match[0] = row;
    std::size_t col0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[col0] = 1;
      const std::size_t r0 = match[col0];
      double delta = inf;
      std::size_t col1 = 0;
      for (std::size_t c = 1; c <= n; ++c) {
        if (used[c]) continue;
        const double cur = cost(static_cast<Eigen::Index>(r0 - 1), static_cast<Eigen::Index>(c - 1)) -
                           u[r0] - v[c];
        if (cur < minv[c]) {
          minv[c] = cur;
          way[c] = col0;
        }
        if (minv[c] < delta) {
          delta = minv[c];
          col1 = c;
        }
      }
      for (std::size_t c = 0; c <= n; ++c) {
        if (used[c]) {
          u[match[c]] += delta;
          v[c] -= delta;
        } else {
          minv[c] -= delta;
        }
      }
      col0 = col1;
    } while (match[col0] != 0);
    do {
      const std::size_t col1 = way[col0];
      match[col0] = match[col1];
      col0 = col1;
    } while (col0 != 0);
  }
  std::vector<std::size_t> result(n);
  for (std::size_t c = 1; c <= n; ++c) result[match[c] - 1] = c - 1;
  return result;
}

std::vector<std::size_t> best_permutation(const Eigen::MatrixXd& agreement) {
  const auto g = static_cast<std::size_t>(agreement.rows());
  if (agreement.cols() != agreement.rows()) throw DimensionError("agreement matrix must be square");
  if (g > 8) {
    const Eigen::MatrixXd cost =
        Eigen::MatrixXd::Constant(agreement.rows(), agreement.cols(), agreement.maxCoeff()) -
        agreement;
    return hungarian_min_cost(cost);
  }
  std::vector<std::size_t> perm(g);
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<std::size_t> best = perm;
  double best_score = -1.0;
  do {
    double s = 0.0;
    for (std::size_t k = 0; k < g; ++k) {
      s += agreement(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(perm[k]));
    }
    if (s > best_score) {
      best_score = s;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

Misclassification misclassification_rate(const Assignment& estimated, const Assignment& truth) {
  if (estimated.size() != truth.size() || estimated.groups() != truth.groups()) {
    throw DimensionError("assignments differ in shape: " + std::to_string(estimated.size()) +
                         "x" + std::to_string(estimated.groups()) + " vs " +
                         std::to_string(truth.size()) + "x" + std::to_string(truth.groups()));
  }
  const auto est = estimated.labels();
  const auto tru = truth.labels();
  const auto g = static_cast<Eigen::Index>(truth.groups());
  Eigen::MatrixXd agreement = Eigen::MatrixXd::Zero(g, g);
  std::size_t n = 0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    if (est[i] == kNoGroup || tru[i] == kNoGroup) continue;
    agreement(static_cast<Eigen::Index>(est[i]), static_cast<Eigen::Index>(tru[i])) += 1.0;
    ++n;
  }
  Misclassification out;
  out.permutation = best_permutation(agreement);
  if (n == 0) return out;
  double matched = 0.0;
  for (Eigen::Index k = 0; k < g; ++k) {
    matched += agreement(k, static_cast<Eigen::Index>(out.permutation[static_cast<std::size_t>(k)]));
  }
  out.rate = (static_cast<double>(n) - matched) / static_cast<double>(n);
  return out;
}

// ---------------------------------------------------------------------------

Eigen::MatrixXd random_unit_upper_covariance(std::size_t p, Rng& rng) {
  std::normal_distribution<double> std_normal(0.0, 1.0);
  const auto dim = static_cast<Eigen::Index>(p);
  Eigen::MatrixXd upper = Eigen::MatrixXd::Identity(dim, dim);
  for (Eigen::Index r = 0; r < dim; ++r) {
    for (Eigen::Index c = r + 1; c < dim; ++c) upper(r, c) = std_normal(rng);
  }
  return upper * upper.transpose();
}

std::vector<MultivariateNormal> draw_group_densities(const ClassificationDgp& dgp, std::size_t p,
                                                     Rng& rng) {
  if (dgp.kind == ClassificationDgp::Kind::Fixed) {
    if (dgp.fixed.size() != dgp.groups) {
      throw DimensionError("fixed DGP must list one density per group");
    }
    for (const auto& d : dgp.fixed) {
      if (static_cast<std::size_t>(d.mu.size()) != p) {
        throw DimensionError("fixed DGP dimension differs from p");
      }
    }
    return dgp.fixed;
  }
  std::normal_distribution<double> std_normal(0.0, 1.0);
  std::vector<MultivariateNormal> out;
  for (std::size_t g = 0; g < dgp.groups; ++g) {
    MultivariateNormal d;
    d.mu.resize(static_cast<Eigen::Index>(p));
    for (auto& m : d.mu) m = std_normal(rng);
    d.sigma = random_unit_upper_covariance(p, rng);
    out.push_back(std::move(d));
  }
  return out;
}

ClassifierErrorEstimate uniform_error_estimate(const ClassifierSpec& rule,
                                               const ClassificationDgp& dgp, std::size_t p,
                                               std::size_t n, std::size_t replications, Rng& rng) {
  if (replications == 0) throw DomainError("replications must be positive");
  const std::size_t groups = dgp.groups;
  Eigen::VectorXd probs = dgp.weights.size() == 0
                              ? Eigen::VectorXd::Constant(static_cast<Eigen::Index>(groups),
                                                          1.0 / static_cast<double>(groups))
                              : dgp.weights;
  std::discrete_distribution<std::size_t> pick(probs.data(), probs.data() + probs.size());
  std::normal_distribution<double> std_normal(0.0, 1.0);

  ClassifierSpec outcome_rule = rule;
  outcome_rule.source = FeatureSource::Outcome;

  std::vector<double> rates;
  rates.reserve(replications);
  std::size_t any_error = 0;
  for (std::size_t r = 0; r < replications; ++r) {
    const auto densities = draw_group_densities(dgp, p, rng);
    MixtureModel model;
    for (const auto& d : densities) model.components.emplace_back(d);
    model.weights = probs;

    std::vector<SpdFactor> factors;
    for (const auto& d : densities) factors.emplace_back(d.sigma);
    std::vector<std::size_t> truth(n);
    Observations data(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(n));
    Eigen::VectorXd z(static_cast<Eigen::Index>(p));
    for (std::size_t i = 0; i < n; ++i) {
      truth[i] = pick(rng);
      for (auto& v : z) v = std_normal(rng);
      data.col(static_cast<Eigen::Index>(i)) =
          densities[truth[i]].mu + factors[truth[i]].lower() * z;
    }
    const auto est = classify_hard(outcome_rule, data, model);
    const double rate = misclassification_rate(est, Assignment::hard(truth, groups)).rate;
    rates.push_back(rate);
    if (rate > 0.0) ++any_error;
  }
  ClassifierErrorEstimate out;
  out.replications = replications;
  out.uniform_error = static_cast<double>(any_error) / static_cast<double>(replications);
  const double mean = std::accumulate(rates.begin(), rates.end(), 0.0) / static_cast<double>(replications);
  double ss = 0.0;
  for (double x : rates) ss += (x - mean) * (x - mean);
  out.mean_rate = mean;
  out.rate_std_error =
      replications > 1 ? std::sqrt(ss / static_cast<double>(replications - 1) /
                                   static_cast<double>(replications))
                       : 0.0;
  return out;
}

// ---------------------------------------------------------------------------

double expected_sq_euclidean(const MultivariateNormal& own, const Eigen::VectorXd& other_mean) {
  if (other_mean.size() != own.mu.size()) throw DimensionError("mean dimensions differ");
  return own.sigma.trace() + (other_mean - own.mu).squaredNorm();
}

namespace {

// Lower-triangular W with Sigma^{-1} = W W'.
Eigen::MatrixXd inverse_factor(const Eigen::MatrixXd& sigma) {
  const SpdFactor factor(sigma);
  const Eigen::MatrixXd precision = factor.inverse();
  return SpdFactor(0.5 * (precision + precision.transpose())).lower();
}

}  // namespace

double expected_sq_mahalanobis(const MultivariateNormal& own, const MultivariateNormal& other) {
  const Eigen::Index p = own.mu.size();
  if (other.mu.size() != p) throw DimensionError("mean dimensions differ");
  const Eigen::MatrixXd w_own = inverse_factor(own.sigma);
  const Eigen::MatrixXd w_other = inverse_factor(other.sigma);
  const Eigen::MatrixXd w_own_inv =
      w_own.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(p, p));
  const Eigen::MatrixXd a_mat = w_own - w_other;
  const Eigen::MatrixXd v = w_own_inv * a_mat;

  double d_sum = 0.0;
  for (Eigen::Index l = 0; l < p; ++l) d_sum += w_own_inv(l, l) * w_other(l, l);
  double v_sum = 0.0;
  for (Eigen::Index l = 0; l < p; ++l) {
    for (Eigen::Index m = 0; m <= l; ++m) v_sum += v(l, m) * v(l, m);
  }
  const Eigen::VectorXd a = other.mu - own.mu;
  const Eigen::RowVectorXd b = a.transpose() * w_other;
  return 2.0 * d_sum + v_sum - static_cast<double>(p) + b.squaredNorm();
}

MarkovBound generalized_markov_bound(std::span<const double> f, std::span<const double> g,
                                     std::span<const double> mass) {
  if (f.size() != g.size() || f.size() != mass.size()) {
    throw DimensionError("f, g and mass must have the same length");
  }
  double ef = 0.0, eg = 0.0, eg2 = 0.0, prob = 0.0, total = 0.0;
  for (std::size_t k = 0; k < f.size(); ++k) {
    if (f[k] < 0.0 || g[k] < 0.0 || mass[k] < 0.0) {
      throw DomainError("functions and masses must be nonnegative");
    }
    total += mass[k];
    ef += mass[k] * f[k];
    eg += mass[k] * g[k];
    eg2 += mass[k] * g[k] * g[k];
    if (f[k] >= g[k]) prob += mass[k];
  }
  if (!(eg > 0.0)) throw DomainError("E[g] must be positive");
  ef /= total;
  eg /= total;
  eg2 /= total;
  prob /= total;
  const double var_g = std::max(eg2 - eg * eg, 0.0);
  MarkovBound out;
  out.probability = prob;
  out.bound = (ef + 0.5 * std::sqrt(var_g)) / eg;
  out.holds = out.probability <= out.bound * (1.0 + 1e-12);
  return out;
}

}  // namespace mixfit
