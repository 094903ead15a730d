#include "mixfit/panel.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <unordered_map>

#include "mixfit/errors.hpp"
#include "mixfit/linalg.hpp"

namespace mixfit {
namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// N x T view of a flat cell vector.
Eigen::MatrixXd as_grid(const Eigen::VectorXd& flat, std::size_t units, std::size_t periods) {
  return Eigen::Map<const RowMajor>(flat.data(), static_cast<Eigen::Index>(units),
                                    static_cast<Eigen::Index>(periods));
}

Eigen::VectorXd as_flat(const Eigen::MatrixXd& grid) {
  const RowMajor r = grid;
  return Eigen::Map<const Eigen::VectorXd>(r.data(), r.size());
}

Eigen::MatrixXd checked_inverse(const Eigen::MatrixXd& q) {
  Eigen::MatrixXd inv(q.rows(), q.cols());
  for (Eigen::Index j = 0; j < q.cols(); ++j) {
    inv.col(j) = solve_normal_equations(q, Eigen::VectorXd::Unit(q.cols(), j));
  }
  return inv;
}

Eigen::VectorXd close_simplex(Eigen::VectorXd pi) {
  const Eigen::Index last = pi.size() - 1;
  if (last > 0) pi(last) = 1.0 - pi.head(last).sum();
  return pi;
}

}  // namespace

Eigen::VectorXd PanelDataset::flat_weights() const { return as_flat(weights); }

void validate_dataset(const PanelDataset& data) {
  const auto n = static_cast<Eigen::Index>(data.units);
  const auto t = static_cast<Eigen::Index>(data.periods);
  if (n == 0 || t == 0) throw DimensionError("panel needs at least one unit and one period");
  if (data.outcome.rows() != n || data.outcome.cols() != t) {
    throw DimensionError("outcome must be N x T");
  }
  if (data.weights.rows() != n || data.weights.cols() != t) {
    throw DimensionError("weights must be N x T");
  }
  if (data.covariates.cols() != n * t || data.covariates.rows() < 1) {
    throw DimensionError("covariates must be p x (N T) with p >= 1");
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index s = 0; s < t; ++s) {
      const double w = data.weights(i, s);
      if (!(w >= 0.0 && w <= 1.0)) throw DomainError("cell weights must lie in [0, 1]");
      if (w > 0.0) {
        if (!std::isfinite(data.outcome(i, s)) || !data.covariates.col(i * t + s).allFinite()) {
          throw DomainError("cell (" + std::to_string(i) + ", " + std::to_string(s) +
                            ") has positive weight but non-finite values");
        }
      }
    }
  }
  if (data.truth_labels && data.truth_labels->size() != data.cells()) {
    throw DimensionError("truth labels must cover every cell");
  }
}

MundlakDesign mundlak_expand(const PanelDataset& data) {
  validate_dataset(data);
  if (data.periods < 2) throw DomainError("the Mundlak design needs T >= 2");
  const std::size_t n = data.units;
  const std::size_t t = data.periods;
  MundlakDesign d;
  d.rows = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n * t), static_cast<Eigen::Index>(2 + t));
  for (std::size_t i = 0; i < n; ++i) {
    double mass = 0.0;
    double sum = 0.0;
    for (std::size_t s = 0; s < t; ++s) {
      const double w = data.weights(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s));
      if (w > 0.0) {
        mass += w;
        sum += w * data.covariates(0, data.cell(i, s));
      }
    }
    double xbar = 0.0;
    if (mass > 0.0) {
      xbar = sum / mass;
    } else {
      d.excluded_units.push_back(i);
      d.warnings.push_back("unit " + std::to_string(i) + " has no period with positive weight");
    }
    for (std::size_t s = 0; s < t; ++s) {
      const Eigen::Index row = data.cell(i, s);
      const bool active =
          data.weights(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s)) > 0.0;
      d.rows(row, 0) = active ? data.covariates(0, row) : 0.0;
      d.rows(row, 1) = xbar;
      d.rows(row, static_cast<Eigen::Index>(2 + s)) = 1.0;
    }
  }
  return d;
}

Observations panel_cells(const PanelDataset& data, const MundlakDesign& design) {
  const auto cells = static_cast<Eigen::Index>(data.cells());
  Observations out(1 + design.columns(), cells);
  const Eigen::VectorXd y = as_flat(data.outcome);
  const Eigen::VectorXd w = data.flat_weights();
  for (Eigen::Index c = 0; c < cells; ++c) out(0, c) = w(c) > 0.0 ? y(c) : 0.0;
  out.bottomRows(design.columns()) = design.rows.transpose();
  return out;
}

Eigen::MatrixXd random_effects_covariance(std::size_t periods, double sigma2_alpha,
                                          double sigma2_eps) {
  const auto t = static_cast<Eigen::Index>(periods);
  return Eigen::MatrixXd::Constant(t, t, sigma2_alpha) +
         sigma2_eps * Eigen::MatrixXd::Identity(t, t);
}

namespace {

struct GlsSystem {
  Eigen::MatrixXd q;
  Eigen::VectorXd b;
};

GlsSystem gls_system(const MundlakDesign& design, const Eigen::MatrixXd& outcome,
                     const Eigen::MatrixXd& weights, const Eigen::MatrixXd& precision) {
  const Eigen::Index n = outcome.rows();
  const Eigen::Index t = outcome.cols();
  const Eigen::Index k = design.columns();
  GlsSystem s{Eigen::MatrixXd::Zero(k, k), Eigen::VectorXd::Zero(k)};
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd w = weights.row(i).transpose();
    if (!(w.array() != 0.0).any()) continue;
    const Eigen::MatrixXd a = w.asDiagonal() * design.rows.middleRows(i * t, t);
    const Eigen::VectorXd y = w.cwiseProduct(outcome.row(i).transpose());
    const Eigen::MatrixXd ak = a.transpose() * precision;
    s.q.noalias() += ak * a;
    s.b.noalias() += ak * y;
  }
  return s;
}

}  // namespace

std::vector<Eigen::VectorXd> iwgls_step(const MundlakDesign& design, const Eigen::MatrixXd& outcome,
                                        const std::vector<Eigen::MatrixXd>& weights,
                                        const std::vector<Eigen::MatrixXd>& omegas) {
  if (weights.size() != omegas.size()) throw DimensionError("one Omega per group is required");
  if (design.rows.rows() != outcome.size()) throw DimensionError("design and outcome differ in cells");
  std::vector<Eigen::VectorXd> out;
  for (std::size_t g = 0; g < weights.size(); ++g) {
    if (weights[g].rows() != outcome.rows() || weights[g].cols() != outcome.cols()) {
      throw DimensionError("group weights must be N x T");
    }
    if (omegas[g].rows() != outcome.cols() || omegas[g].cols() != outcome.cols()) {
      throw DimensionError("Omega must be T x T");
    }
    const Eigen::MatrixXd precision = SpdFactor(omegas[g]).inverse();
    const GlsSystem s = gls_system(design, outcome, weights[g], precision);
    out.push_back(solve_normal_equations(s.q, s.b));
  }
  return out;
}

VarianceComponents variance_components(const Eigen::MatrixXd& residuals,
                                       const Eigen::MatrixXd& weights, std::size_t columns,
                                       bool hard_weights, double floor) {
  if (residuals.rows() != weights.rows() || residuals.cols() != weights.cols()) {
    throw DimensionError("residuals and weights must both be N x T");
  }
  const double total = weights.sum();
  const double denom = total - static_cast<double>(columns);
  if (!(denom > 0.0)) {
    throw InsufficientDataError("weight total " + std::to_string(total) + " leaves no degrees of freedom for " +
                                std::to_string(columns) + " mean parameters");
  }
  VarianceComponents vc;
  vc.sigma2_alpha_eps = (weights.array() * residuals.array().square()).sum() / denom;

  const Eigen::VectorXd unit_mass = weights.rowwise().sum();
  const Eigen::VectorXd unit_sum = (weights.array() * residuals.array()).rowwise().sum();
  double included = 0.0;
  for (Eigen::Index i = 0; i < unit_mass.size(); ++i) {
    const bool keep = hard_weights ? unit_mass(i) > 1.0 : unit_mass(i) > 0.0;
    if (keep) included += unit_mass(i);
  }
  if (included > 0.0) {
    double centre = 0.0;
    for (Eigen::Index i = 0; i < unit_mass.size(); ++i) {
      const bool keep = hard_weights ? unit_mass(i) > 1.0 : unit_mass(i) > 0.0;
      if (keep) centre += unit_mass(i) / included * (unit_sum(i) / unit_mass(i));
    }
    double var = 0.0;
    for (Eigen::Index i = 0; i < unit_mass.size(); ++i) {
      const bool keep = hard_weights ? unit_mass(i) > 1.0 : unit_mass(i) > 0.0;
      if (!keep) continue;
      const double dev = unit_sum(i) / unit_mass(i) - centre;
      var += unit_mass(i) / included * dev * dev;
    }
    vc.sigma2_alpha = var;
  }
  vc.sigma2_eps = std::max(vc.sigma2_alpha_eps - vc.sigma2_alpha, floor);
  return vc;
}

Eigen::MatrixXd cluster_robust_variance(const MundlakDesign& design, const Eigen::MatrixXd& outcome,
                                        const Eigen::MatrixXd& weights, const Eigen::MatrixXd& omega,
                                        const Eigen::VectorXd& beta) {
  const Eigen::Index n = outcome.rows();
  const Eigen::Index t = outcome.cols();
  const Eigen::Index k = design.columns();
  if (beta.size() != k) throw DimensionError("coefficient vector does not match the design");
  const Eigen::MatrixXd precision = SpdFactor(omega).inverse();
  Eigen::MatrixXd q = Eigen::MatrixXd::Zero(k, k);
  Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(k, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd w = weights.row(i).transpose();
    if (!(w.array() != 0.0).any()) continue;
    const Eigen::MatrixXd x = design.rows.middleRows(i * t, t);
    const Eigen::MatrixXd a = w.asDiagonal() * x;
    const Eigen::VectorXd e = w.cwiseProduct(outcome.row(i).transpose() - x * beta);
    const Eigen::MatrixXd ak = a.transpose() * precision;
    q.noalias() += ak * a;
    const Eigen::VectorXd s = ak * e;
    meat.noalias() += s * s.transpose();
  }
  const Eigen::MatrixXd q_inv = checked_inverse(q);
  const Eigen::MatrixXd v = q_inv * meat * q_inv.transpose();
  return 0.5 * (v + v.transpose());
}

Eigen::MatrixXd transition_counts(const PanelDataset& data, const std::vector<std::size_t>& labels,
                                  std::size_t groups) {
  if (labels.size() != data.cells()) throw DimensionError("labels must cover every cell");
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(groups),
                                                 static_cast<Eigen::Index>(groups));
  for (std::size_t i = 0; i < data.units; ++i) {
    for (std::size_t s = 1; s < data.periods; ++s) {
      const auto from = labels[static_cast<std::size_t>(data.cell(i, s - 1))];
      const auto to = labels[static_cast<std::size_t>(data.cell(i, s))];
      if (from == kNoGroup || to == kNoGroup) continue;
      counts(static_cast<Eigen::Index>(from), static_cast<Eigen::Index>(to)) += 1.0;
    }
  }
  return counts;
}

// ---------------------------------------------------------------------------

namespace {

struct GroupUpdate {
  PanelLinearGaussian theta;
  VarianceComponents vc;
  MultivariateNormal psi;
  double mass = 0.0;
};

class PanelFitter {
 public:
  PanelFitter(const PanelDataset& data, std::size_t groups, PanelAlgorithm algorithm,
              const PanelConfig& config)
      : data_(data),
        groups_(groups),
        algorithm_(algorithm),
        config_(config),
        design_(mundlak_expand(data)),
        cells_(panel_cells(data, design_)),
        cell_weights_(data.flat_weights()) {
    for (Eigen::Index c = 0; c < cell_weights_.size(); ++c) {
      if (cell_weights_(c) > 0.0) active_.push_back(c);
    }
    if (active_.empty()) throw InsufficientDataError("no panel cell has positive weight");
    hard_ = algorithm_ == PanelAlgorithm::CEM || groups_ == 1;
  }

  const MundlakDesign& design() const { return design_; }
  bool hard() const { return hard_; }
  bool monotone() const {
    if (config_.m_step != PanelMStep::CellMle) return false;
    if (groups_ == 1 || algorithm_ == PanelAlgorithm::EM) return true;
    return config_.classifier.rule == DiscriminantRule::JointDensity &&
           config_.classifier.source == FeatureSource::Joint;
  }

  // Membership weights (flat, per group) of `model`, the objective and, for
  // hard weights, the labels of the active cells.
  struct Memberships {
    std::vector<Eigen::VectorXd> weights;
    std::vector<std::size_t> labels;  // every cell; kNoGroup when inactive
    Eigen::MatrixXd tau;              // EM only
    double objective = 0.0;
  };

  Memberships memberships(const MixtureModel& model, std::size_t iteration) const {
    Memberships m;
    const Eigen::Index cells = cells_.cols();
    m.labels.assign(static_cast<std::size_t>(cells), kNoGroup);
    if (groups_ == 1) {
      m.weights.push_back(cell_weights_);
      const Eigen::VectorXd lf = log_density_vector(model.components[0], cells_);
      m.objective = cell_weights_.dot(lf);
      for (Eigen::Index c : active_) m.labels[static_cast<std::size_t>(c)] = 0;
      return m;
    }
    if (algorithm_ == PanelAlgorithm::EM) {
      const Eigen::MatrixXd lw = weighted_log_densities(model, cells_);
      const Eigen::VectorXd peak = lw.rowwise().maxCoeff();
      const Eigen::VectorXd lse =
          peak.array() + (lw.colwise() - peak).array().exp().rowwise().sum().log();
      m.tau = (lw.colwise() - lse).array().exp().matrix();
      m.tau.array().colwise() /= m.tau.rowwise().sum().array();
      m.objective = cell_weights_.dot(lse);
      if (config_.penalty == PenaltyKind::NormalChen) {
        m.objective += chen_penalty(model, active_.size());
      }
      for (std::size_t g = 0; g < groups_; ++g) {
        m.weights.push_back(m.tau.col(static_cast<Eigen::Index>(g)).cwiseProduct(cell_weights_));
      }
      for (Eigen::Index c : active_) {
        Eigen::Index best = 0;
        m.tau.row(c).maxCoeff(&best);
        m.labels[static_cast<std::size_t>(c)] = static_cast<std::size_t>(best);
      }
      return m;
    }
    // C-step.
    const Eigen::MatrixXd h =
        discriminant_matrix(config_.classifier, cells_, model, &data_.covariates);
    Eigen::MatrixXd log_joint(cells, static_cast<Eigen::Index>(groups_));
    for (std::size_t g = 0; g < groups_; ++g) {
      log_joint.col(static_cast<Eigen::Index>(g)) =
          log_density_vector(model.components[g], cells_) +
          log_density_vector(model.covariates[g], data_.covariates);
    }
    std::vector<std::size_t> counts(groups_, 0);
    for (std::size_t g = 0; g < groups_; ++g) m.weights.emplace_back(Eigen::VectorXd::Zero(cells));
    for (Eigen::Index c : active_) {
      Eigen::Index best = 0;
      for (Eigen::Index g = 1; g < h.cols(); ++g) {
        if (h(c, g) > h(c, best)) best = g;
      }
      m.labels[static_cast<std::size_t>(c)] = static_cast<std::size_t>(best);
      m.weights[static_cast<std::size_t>(best)](c) = cell_weights_(c);
      m.objective += cell_weights_(c) * log_joint(c, best);
      ++counts[static_cast<std::size_t>(best)];
    }
    for (std::size_t g = 0; g < groups_; ++g) {
      if (counts[g] < config_.min_group_size) {
        throw DegenerateComponentError(g, "group has " + std::to_string(counts[g]) + " cells",
                                       iteration);
      }
    }
    return m;
  }

  GroupUpdate update_group(std::size_t g, const Eigen::VectorXd& flat_w,
                           const PanelLinearGaussian& previous, std::size_t iteration) const {
    const Eigen::MatrixXd w = as_grid(flat_w, data_.units, data_.periods);
    const double mass = flat_w.sum();
    const auto k = static_cast<std::size_t>(design_.columns());
    const double floor = config_.variance_floor;
    if (!(mass >= 1e-6 * static_cast<double>(active_.size()))) {
      throw DegenerateComponentError(g, "membership mass " + std::to_string(mass), iteration);
    }
    GroupUpdate u;
    u.mass = mass;
    Eigen::VectorXd beta;
    if (config_.m_step == PanelMStep::Iwgls) {
      const Eigen::MatrixXd omega = random_effects_covariance(
          data_.periods, previous.sigma2_alpha, previous.sigma2_eps);
      const GlsSystem s = gls_system(design_, data_.outcome, w, SpdFactor(omega).inverse());
      beta = solve_normal_equations(s.q, s.b);
    } else {
      const Eigen::MatrixXd xw = design_.rows.transpose() * flat_w.asDiagonal();
      beta = solve_normal_equations(xw * design_.rows, xw * as_flat(data_.outcome));
    }
    const Eigen::MatrixXd resid =
        data_.outcome - as_grid(design_.rows * beta, data_.units, data_.periods);
    if (config_.m_step == PanelMStep::Iwgls) {
      u.vc = variance_components(resid, w, k, hard_, floor);
    } else {
      const Eigen::VectorXd e = as_flat(resid);
      const double ss = flat_w.dot(e.cwiseProduct(e));
      const bool penalized = algorithm_ == PanelAlgorithm::EM && groups_ > 1 &&
                             config_.penalty == PenaltyKind::NormalChen;
      double s2 = penalized ? penalized_normal_variance(ss, mass, active_.size()) : ss / mass;
      s2 = std::max(s2, floor);
      double between = 0.0;
      try {
        between = variance_components(resid, w, 0, hard_, floor).sigma2_alpha;
      } catch (const InsufficientDataError&) {
      }
      u.vc.sigma2_alpha_eps = s2;
      u.vc.sigma2_alpha = std::clamp(between, 0.0, std::max(s2 - floor, 0.0));
      u.vc.sigma2_eps = s2 - u.vc.sigma2_alpha;
    }
    u.theta = PanelLinearGaussian{beta, u.vc.sigma2_alpha, u.vc.sigma2_eps};

    const Eigen::MatrixXd& x = data_.covariates;
    const Eigen::VectorXd mu = x * flat_w / mass;
    const Eigen::MatrixXd centred = x.colwise() - mu;
    double divisor = mass;
    if (config_.m_step == PanelMStep::Iwgls) divisor -= static_cast<double>(x.rows());
    if (!(divisor > 0.0)) {
      throw InsufficientDataError("group " + std::to_string(g) +
                                  " has too little weight for its covariate covariance");
    }
    const Eigen::MatrixXd sigma = centred * flat_w.asDiagonal() * centred.transpose() / divisor;
    u.psi = MultivariateNormal{mu, floor_eigenvalues(sigma, floor)};
    return u;
  }

  MixtureModel maximize(const Memberships& m, const MixtureModel& previous, std::size_t iteration,
                        std::vector<VarianceComponents>& vcs) const {
    MixtureModel next;
    next.weights.resize(static_cast<Eigen::Index>(groups_));
    vcs.clear();
    const double total = cell_weights_.sum();
    for (std::size_t g = 0; g < groups_; ++g) {
      const GroupUpdate u = update_group(
          g, m.weights[g], std::get<PanelLinearGaussian>(previous.components[g]), iteration);
      next.components.emplace_back(u.theta);
      next.covariates.push_back(u.psi);
      next.weights(static_cast<Eigen::Index>(g)) = u.mass / total;
      vcs.push_back(u.vc);
    }
    // Soft weights keep mass / total so that relabelling groups commutes exactly.
    if (hard_) next.weights = close_simplex(next.weights);
    return next;
  }

  PanelFit run(const MixtureModel& init) const {
    const auto k = design_.columns();
    if (init.size() != groups_) throw DimensionError("init has the wrong number of groups");
    for (const auto& c : init.components) {
      const auto* p = std::get_if<PanelLinearGaussian>(&c);
      if (p == nullptr) throw DomainError("panel fits need panel-linear-gaussian components");
      if (p->beta_tilde.size() != k) {
        throw DimensionError("init coefficients have " + std::to_string(p->beta_tilde.size()) +
                             " entries, the design has " + std::to_string(k));
      }
    }
    if (init.covariates.size() != groups_) throw DomainError("init needs covariate densities");
    for (const auto& psi : init.covariates) {
      if (static_cast<std::size_t>(psi.mu.size()) != data_.dim()) {
        throw DimensionError("init covariate densities do not match the covariate dimension");
      }
    }
    validate_model(init);

    PanelFit fit;
    fit.algorithm = algorithm_;
    fit.warnings = design_.warnings;
    MixtureModel model = init;
    Memberships m = memberships(model, 0);
    fit.report.objective_trace.push_back(m.objective);
    std::vector<VarianceComponents> vcs;
    for (std::size_t g = 0; g < groups_; ++g) {
      const auto& p = std::get<PanelLinearGaussian>(model.components[g]);
      vcs.push_back({p.sigma2_alpha + p.sigma2_eps, p.sigma2_alpha, p.sigma2_eps});
    }
    const bool check = monotone();

    for (std::size_t it = 1; it <= config_.max_iter; ++it) {
      MixtureModel next = maximize(m, model, it, vcs);
      Memberships next_m = memberships(next, it);
      const double previous = fit.report.objective_trace.back();
      if (check && next_m.objective < previous - config_.monotonicity_slack) {
        throw MonotonicityError(it, previous, next_m.objective);
      }
      fit.report.objective_trace.push_back(next_m.objective);
      fit.report.iterations = it;
      model = std::move(next);
      bool done;
      if (groups_ > 1 && algorithm_ == PanelAlgorithm::CEM) {
        done = next_m.labels == m.labels;
      } else {
        done = std::abs(next_m.objective - previous) < config_.rel_tol * std::abs(previous);
      }
      m = std::move(next_m);
      if (done) {
        fit.report.converged = true;
        break;
      }
    }

    fit.report.model = model;
    fit.variances = vcs;
    fit.report.hard_labels = Assignment::hard(m.labels, groups_);
    if (algorithm_ == PanelAlgorithm::EM && groups_ > 1) {
      Eigen::MatrixXd tau = m.tau;
      for (Eigen::Index c = 0; c < tau.rows(); ++c) {
        if (!(cell_weights_(c) > 0.0)) tau.row(c) = model.weights.transpose();
      }
      fit.report.responsibilities = Assignment::soft(std::move(tau));
    }
    for (std::size_t g = 0; g < groups_; ++g) {
      fit.weights.push_back(as_grid(m.weights[g], data_.units, data_.periods));
    }
    if (config_.robust_variance) {
      for (std::size_t g = 0; g < groups_; ++g) {
        const auto& p = std::get<PanelLinearGaussian>(model.components[g]);
        try {
          fit.robust_variance.push_back(cluster_robust_variance(
              design_, data_.outcome, fit.weights[g],
              random_effects_covariance(data_.periods, p.sigma2_alpha, p.sigma2_eps),
              p.beta_tilde));
        } catch (const Error& e) {
          fit.robust_variance.emplace_back();
          fit.warnings.push_back("robust variance of group " + std::to_string(g) + ": " + e.what());
        }
      }
    }
    fit.transition_counts = transition_counts(data_, m.labels, groups_);
    return fit;
  }

 private:
  const PanelDataset& data_;
  std::size_t groups_;
  PanelAlgorithm algorithm_;
  PanelConfig config_;
  MundlakDesign design_;
  Observations cells_;
  Eigen::VectorXd cell_weights_;
  std::vector<Eigen::Index> active_;
  bool hard_ = true;
};

}  // namespace

PanelFit fit_panel(const PanelDataset& data, std::size_t groups, PanelAlgorithm algorithm,
                   const MixtureModel& init, const PanelConfig& config) {
  if (groups == 0) throw DomainError("G must be at least 1");
  if (config.max_iter < 1 || !(config.rel_tol > 0.0)) {
    throw DomainError("panel fits need max_iter >= 1 and rel_tol > 0");
  }
  return PanelFitter(data, groups, algorithm, config).run(init);
}

PanelMultiStart multi_start_panel(const PanelDataset& data, std::size_t groups,
                                  PanelAlgorithm algorithm, const std::vector<MixtureModel>& inits,
                                  const PanelConfig& config) {
  if (inits.empty()) throw DomainError("multi-start needs at least one init");
  const PanelFitter fitter(data, groups, algorithm, config);
  PanelMultiStart out;
  bool have = false;
  std::vector<std::string> causes;
  for (std::size_t s = 0; s < inits.size(); ++s) {
    try {
      PanelFit fit = fitter.run(inits[s]);
      out.objectives.push_back(fit.report.objective());
      if (!have || fit.report.objective() > out.best.report.objective()) {
        out.best = std::move(fit);
        out.best_index = s;
        have = true;
      }
    } catch (const Error& e) {
      out.objectives.push_back(std::numeric_limits<double>::quiet_NaN());
      out.failures.emplace_back(s, e.what());
      causes.push_back("start " + std::to_string(s) + ": " + e.what());
    }
  }
  if (!have) throw AggregateError(std::move(causes));
  return out;
}

std::vector<MixtureModel> random_panel_inits(const PanelDataset& data, std::size_t groups,
                                             std::size_t count, Rng& rng) {
  validate_dataset(data);
  if (groups == 0) throw DomainError("G must be at least 1");
  const Eigen::VectorXd w = data.flat_weights();
  const double mass = w.sum();
  if (!(mass > 0.0)) throw InsufficientDataError("no panel cell has positive weight");
  const Eigen::MatrixXd& x = data.covariates;
  const Eigen::VectorXd mu = x * w / mass;
  const Eigen::MatrixXd centred = x.colwise() - mu;
  const Eigen::MatrixXd sigma =
      floor_eigenvalues(centred * w.asDiagonal() * centred.transpose() / mass, 1e-8);
  const auto k = static_cast<Eigen::Index>(2 + data.periods);

  std::normal_distribution<double> std_normal(0.0, 1.0);
  std::vector<MixtureModel> out;
  for (std::size_t s = 0; s < count; ++s) {
    MixtureModel m;
    m.weights = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(groups),
                                          1.0 / static_cast<double>(groups));
    m.weights = close_simplex(m.weights);
    for (std::size_t g = 0; g < groups; ++g) {
      Eigen::VectorXd beta(k);
      for (auto& b : beta) b = std_normal(rng);
      m.components.emplace_back(PanelLinearGaussian{beta, 0.0, 1.0});
      Eigen::VectorXd centre = mu;
      for (auto& c : centre) c += 0.1 * std_normal(rng);
      m.covariates.push_back(MultivariateNormal{centre, sigma});
    }
    out.push_back(std::move(m));
  }
  return out;
}

Exercise2Draw generate_exercise2(std::size_t units, std::size_t periods, std::size_t groups,
                                 std::size_t dim, Rng& rng) {
  if (units == 0 || periods == 0 || groups == 0 || dim == 0) {
    throw DomainError("N, T, G and p must all be at least 1");
  }
  const auto n = static_cast<Eigen::Index>(units);
  const auto t = static_cast<Eigen::Index>(periods);
  const auto gg = static_cast<Eigen::Index>(groups);
  const auto p = static_cast<Eigen::Index>(dim);
  std::normal_distribution<double> std_normal(0.0, 1.0);

  Exercise2Draw out;
  // Transition rows ~ Dirichlet(1, ..., 1).
  out.transition.resize(gg, gg);
  std::gamma_distribution<double> unit_gamma(1.0, 1.0);
  for (Eigen::Index a = 0; a < gg; ++a) {
    for (Eigen::Index b = 0; b < gg; ++b) out.transition(a, b) = unit_gamma(rng);
    out.transition.row(a) /= out.transition.row(a).sum();
  }
  std::vector<std::size_t> z(units * periods);
  std::uniform_int_distribution<std::size_t> first(0, groups - 1);
  for (std::size_t i = 0; i < units; ++i) {
    z[i * periods] = first(rng);
    for (std::size_t s = 1; s < periods; ++s) {
      const auto prev = static_cast<Eigen::Index>(z[i * periods + s - 1]);
      const Eigen::VectorXd row = out.transition.row(prev).transpose();
      std::discrete_distribution<std::size_t> step(row.data(), row.data() + row.size());
      z[i * periods + s] = step(rng);
    }
  }

  std::vector<MultivariateNormal> psi;
  std::vector<SpdFactor> factors;
  for (std::size_t g = 0; g < groups; ++g) {
    Eigen::VectorXd mu(p);
    for (auto& v : mu) v = std_normal(rng);
    psi.push_back(MultivariateNormal{mu, random_unit_upper_covariance(dim, rng)});
    factors.emplace_back(psi.back().sigma);
  }

  PanelDataset& d = out.data;
  d.units = units;
  d.periods = periods;
  d.covariates.resize(p, n * t);
  Eigen::VectorXd draw(p);
  for (Eigen::Index c = 0; c < n * t; ++c) {
    const std::size_t g = z[static_cast<std::size_t>(c)];
    for (auto& v : draw) v = std_normal(rng);
    d.covariates.col(c) = psi[g].mu + factors[g].lower() * draw;
  }

  Eigen::VectorXd beta(gg), gamma(gg);
  for (Eigen::Index g = 0; g < gg; ++g) {
    beta(g) = std_normal(rng);
    gamma(g) = std_normal(rng);
  }
  // delta_tg ~ N(mean of x_it1 among cells of group g in period t, 1).
  Eigen::MatrixXd delta(t, gg);
  for (Eigen::Index s = 0; s < t; ++s) {
    for (Eigen::Index g = 0; g < gg; ++g) {
      double sum = 0.0;
      double count = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (z[static_cast<std::size_t>(i * t + s)] == static_cast<std::size_t>(g)) {
          sum += d.covariates(0, i * t + s);
          count += 1.0;
        }
      }
      delta(s, g) = (count > 0.0 ? sum / count : 0.0) + std_normal(rng);
    }
  }
  Eigen::MatrixXd alpha(n, gg);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index g = 0; g < gg; ++g) alpha(i, g) = std::sqrt(static_cast<double>(g + 1)) * std_normal(rng);
  }

  d.outcome.resize(n, t);
  d.weights = Eigen::MatrixXd::Ones(n, t);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double xbar = d.covariates.row(0).segment(i * t, t).mean();
    for (Eigen::Index s = 0; s < t; ++s) {
      const auto g = static_cast<Eigen::Index>(z[static_cast<std::size_t>(i * t + s)]);
      d.outcome(i, s) = d.covariates(0, i * t + s) * beta(g) + xbar * gamma(g) + delta(s, g) +
                        alpha(i, g) + std_normal(rng);
    }
  }
  d.truth_labels = z;
  for (std::size_t i = 0; i < units; ++i) d.unit_ids.push_back(std::to_string(i + 1));
  for (std::size_t s = 0; s < periods; ++s) d.period_ids.push_back(std::to_string(s + 1));

  Eigen::VectorXd shares = Eigen::VectorXd::Zero(gg);
  for (auto g : z) shares(static_cast<Eigen::Index>(g)) += 1.0;
  shares /= static_cast<double>(z.size());
  out.truth.weights = shares;
  for (Eigen::Index g = 0; g < gg; ++g) {
    Eigen::VectorXd bt(2 + t);
    bt << beta(g), gamma(g), delta.col(g);
    out.truth.components.emplace_back(
        PanelLinearGaussian{bt, static_cast<double>(g + 1), 1.0});
  }
  out.truth.covariates = psi;
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  fields.push_back(cur);
  for (auto& f : fields) {
    const auto b = f.find_first_not_of(" \t");
    const auto e = f.find_last_not_of(" \t");
    f = b == std::string::npos ? std::string{} : f.substr(b, e - b + 1);
  }
  return fields;
}

bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (*first == '+') ++first;
  const auto res = std::from_chars(first, last, out);
  return res.ec == std::errc{} && res.ptr == last;
}

std::string fmt17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

PanelDataset read_panel_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError(path + ": cannot open file");
  std::string line;
  if (!std::getline(in, line) || line.find_first_not_of(" \t\r") == std::string::npos) {
    throw InputError(path + ": empty file (a header row is required)");
  }
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);
  const auto header = split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t j = 0; j < header.size(); ++j) col[header[j]] = j;
  for (const char* req : {"unit_id", "period", "y", "w"}) {
    if (!col.count(req)) throw InputError(path + ": header lacks column '" + req + "'");
  }
  std::vector<std::size_t> xcols;
  for (std::size_t k = 1;; ++k) {
    auto it = col.find("x" + std::to_string(k));
    if (it == col.end()) break;
    xcols.push_back(it->second);
  }
  if (xcols.empty()) throw InputError(path + ": header needs covariate columns x1..xp");
  const bool has_truth = col.count("true_group") > 0;

  struct Row {
    std::string unit, period;
    double y = 0.0, w = 0.0;
    std::vector<double> x;
    long truth = 0;
    std::size_t line = 0;
  };
  std::vector<Row> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto f = split_csv_line(line);
    if (f.size() != header.size()) {
      throw InputError(path + ": line " + std::to_string(line_no) + " has " +
                       std::to_string(f.size()) + " fields, header has " +
                       std::to_string(header.size()));
    }
    Row r;
    r.line = line_no;
    r.unit = f[col["unit_id"]];
    r.period = f[col["period"]];
    if (r.unit.empty() || r.period.empty()) {
      throw InputError(path + ": line " + std::to_string(line_no) + ": empty unit_id or period");
    }
    if (!parse_double(f[col["w"]], r.w) || !(r.w >= 0.0 && r.w <= 1.0)) {
      throw InputError(path + ": line " + std::to_string(line_no) + ": w must be a number in [0, 1]");
    }
    const bool active = r.w > 0.0;
    auto number = [&](const std::string& field, const std::string& name) {
      double v = 0.0;
      if (parse_double(field, v) && std::isfinite(v)) return v;
      if (!active) return 0.0;
      throw InputError(path + ": line " + std::to_string(line_no) + ": column '" + name +
                       "' is not a finite number");
    };
    r.y = number(f[col["y"]], "y");
    for (std::size_t k = 0; k < xcols.size(); ++k) {
      r.x.push_back(number(f[xcols[k]], "x" + std::to_string(k + 1)));
    }
    if (has_truth) {
      double g = 0.0;
      if (!parse_double(f[col["true_group"]], g) || g < 1.0 || std::floor(g) != g) {
        throw InputError(path + ": line " + std::to_string(line_no) +
                         ": true_group must be a positive integer");
      }
      r.truth = static_cast<long>(g);
    }
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw InputError(path + ": no data rows");

  std::vector<std::string> units, periods;
  std::unordered_map<std::string, std::size_t> unit_index;
  std::vector<std::string> period_seen;
  std::unordered_map<std::string, bool> period_known;
  for (const auto& r : rows) {
    if (unit_index.emplace(r.unit, units.size()).second) units.push_back(r.unit);
    if (!period_known[r.period]) {
      period_known[r.period] = true;
      period_seen.push_back(r.period);
    }
  }
  periods = period_seen;
  bool numeric = true;
  for (const auto& s : periods) {
    double v;
    numeric = numeric && parse_double(s, v);
  }
  if (numeric) {
    std::stable_sort(periods.begin(), periods.end(), [](const std::string& a, const std::string& b) {
      double va = 0.0, vb = 0.0;
      parse_double(a, va);
      parse_double(b, vb);
      return va < vb;
    });
  }
  std::unordered_map<std::string, std::size_t> period_index;
  for (std::size_t s = 0; s < periods.size(); ++s) period_index[periods[s]] = s;

  PanelDataset d;
  d.units = units.size();
  d.periods = periods.size();
  d.unit_ids = units;
  d.period_ids = periods;
  const auto n = static_cast<Eigen::Index>(d.units);
  const auto t = static_cast<Eigen::Index>(d.periods);
  d.outcome = Eigen::MatrixXd::Zero(n, t);
  d.weights = Eigen::MatrixXd::Zero(n, t);
  d.covariates = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(xcols.size()), n * t);
  std::vector<std::size_t> seen(d.cells(), 0);
  std::vector<std::size_t> truth(d.cells(), 0);
  for (const auto& r : rows) {
    const std::size_t i = unit_index[r.unit];
    const std::size_t s = period_index[r.period];
    const Eigen::Index c = d.cell(i, s);
    if (seen[static_cast<std::size_t>(c)] != 0) {
      throw InputError(path + ": line " + std::to_string(r.line) + " repeats unit '" + r.unit +
                       "' period '" + r.period + "' (first seen on line " +
                       std::to_string(seen[static_cast<std::size_t>(c)]) + ")");
    }
    seen[static_cast<std::size_t>(c)] = r.line;
    d.outcome(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s)) = r.y;
    d.weights(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s)) = r.w;
    for (std::size_t k = 0; k < r.x.size(); ++k) d.covariates(static_cast<Eigen::Index>(k), c) = r.x[k];
    truth[static_cast<std::size_t>(c)] = static_cast<std::size_t>(r.truth - 1);
  }
  for (std::size_t c = 0; c < seen.size(); ++c) {
    if (seen[c] == 0) {
      throw InputError(path + ": unbalanced panel, unit '" + units[c / d.periods] +
                       "' has no row for period '" + periods[c % d.periods] +
                       "' (add the row with w = 0)");
    }
  }
  if (has_truth) d.truth_labels = truth;
  validate_dataset(d);
  return d;
}

void write_panel_csv(const PanelDataset& data, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError(path + ": cannot open for writing");
  write_panel_csv(data, out);
  if (!out) throw InputError(path + ": write failed");
}

void write_panel_csv(const PanelDataset& data, std::ostream& out) {
  validate_dataset(data);
  out << "unit_id,period,y,w";
  for (std::size_t k = 0; k < data.dim(); ++k) out << ",x" << (k + 1);
  if (data.truth_labels) out << ",true_group";
  out << '\n';
  for (std::size_t i = 0; i < data.units; ++i) {
    for (std::size_t s = 0; s < data.periods; ++s) {
      const Eigen::Index c = data.cell(i, s);
      out << (i < data.unit_ids.size() ? data.unit_ids[i] : std::to_string(i + 1)) << ','
          << (s < data.period_ids.size() ? data.period_ids[s] : std::to_string(s + 1)) << ','
          << fmt17(data.outcome(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s))) << ','
          << fmt17(data.weights(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s)));
      for (std::size_t k = 0; k < data.dim(); ++k) {
        out << ',' << fmt17(data.covariates(static_cast<Eigen::Index>(k), c));
      }
      if (data.truth_labels) out << ',' << ((*data.truth_labels)[static_cast<std::size_t>(c)] + 1);
      out << '\n';
    }
  }
}

}  // namespace mixfit
