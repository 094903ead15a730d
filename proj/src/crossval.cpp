#include "mixfit/crossval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mixfit/errors.hpp"
#include "mixfit/parallel.hpp"

namespace mixfit {

void validate_plan(const CvPlan& plan, std::size_t units) {
  if (plan.folds < 2) throw DomainError("cross-validation needs at least 2 folds");
  if (plan.repetitions < 1) throw DomainError("cross-validation needs at least 1 repetition");
  if (plan.inits < 1) throw DomainError("cross-validation needs at least 1 init per fit");
  if (plan.warm_start && plan.top_k < 1) throw DomainError("top_k must be at least 1");
  if (units < plan.folds) {
    throw DomainError("cannot split " + std::to_string(units) + " units into " +
                      std::to_string(plan.folds) + " folds");
  }
}

std::vector<FoldSplit> split_units(std::size_t units, const CvPlan& plan, Rng& rng) {
  validate_plan(plan, units);
  std::vector<FoldSplit> out;
  std::vector<std::size_t> order(units);
  for (std::size_t rep = 0; rep < plan.repetitions; ++rep) {
    std::iota(order.begin(), order.end(), 0);
    // Fisher-Yates with explicit draws keeps splits identical across standard libraries.
    for (std::size_t i = units; i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order[i - 1], order[pick(rng)]);
    }
    std::vector<std::size_t> fold_of(units);
    for (std::size_t k = 0; k < units; ++k) fold_of[order[k]] = k % plan.folds;
    for (std::size_t f = 0; f < plan.folds; ++f) {
      FoldSplit s;
      s.repetition = rep;
      s.fold = f;
      for (std::size_t i = 0; i < units; ++i) (fold_of[i] == f ? s.test : s.train).push_back(i);
      out.push_back(std::move(s));
    }
  }
  return out;
}

PanelDataset subset_units(const PanelDataset& data, std::span<const std::size_t> units) {
  validate_dataset(data);
  const auto t = static_cast<Eigen::Index>(data.periods);
  PanelDataset out;
  out.units = units.size();
  out.periods = data.periods;
  out.outcome.resize(static_cast<Eigen::Index>(units.size()), t);
  out.weights.resize(static_cast<Eigen::Index>(units.size()), t);
  out.covariates.resize(data.covariates.rows(), static_cast<Eigen::Index>(units.size()) * t);
  std::vector<std::size_t> truth;
  for (std::size_t k = 0; k < units.size(); ++k) {
    const std::size_t i = units[k];
    if (i >= data.units) throw DimensionError("unit index out of range");
    const auto row = static_cast<Eigen::Index>(k);
    out.outcome.row(row) = data.outcome.row(static_cast<Eigen::Index>(i));
    out.weights.row(row) = data.weights.row(static_cast<Eigen::Index>(i));
    out.covariates.middleCols(row * t, t) = data.covariates.middleCols(data.cell(i, 0), t);
    if (data.truth_labels) {
      for (std::size_t s = 0; s < data.periods; ++s) {
        truth.push_back((*data.truth_labels)[static_cast<std::size_t>(data.cell(i, s))]);
      }
    }
    if (i < data.unit_ids.size()) out.unit_ids.push_back(data.unit_ids[i]);
  }
  if (data.truth_labels) out.truth_labels = std::move(truth);
  out.period_ids = data.period_ids;
  return out;
}

Eigen::MatrixXd covariate_memberships(const MixtureModel& model, const Observations& covariates,
                                      MembershipKind kind) {
  const auto g = static_cast<Eigen::Index>(model.size());
  if (model.covariates.size() != model.size()) {
    throw DomainError("membership prediction needs one covariate density per group");
  }
  const Eigen::Index cells = covariates.cols();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(cells, g);
  if (g == 1) {
    out.setOnes();
    return out;
  }
  Eigen::MatrixXd score(cells, g);
  for (Eigen::Index k = 0; k < g; ++k) {
    if (model.covariates[static_cast<std::size_t>(k)].mu.size() != covariates.rows()) {
      throw DimensionError("test covariates have dimension " + std::to_string(covariates.rows()) +
                           ", the model expects " +
                           std::to_string(model.covariates[static_cast<std::size_t>(k)].mu.size()));
    }
    score.col(k) = log_density_vector(model.covariates[static_cast<std::size_t>(k)], covariates);
    if (kind == MembershipKind::Soft) score.col(k).array() += std::log(model.weights(k));
  }
  for (Eigen::Index c = 0; c < cells; ++c) {
    if (kind == MembershipKind::Hard) {
      Eigen::Index best = 0;
      for (Eigen::Index k = 1; k < g; ++k) {
        if (score(c, k) > score(c, best)) best = k;
      }
      out(c, best) = 1.0;
    } else {
      const double peak = score.row(c).maxCoeff();
      out.row(c) = (score.row(c).array() - peak).exp();
      out.row(c) /= out.row(c).sum();
    }
  }
  return out;
}

Eigen::VectorXd predict_outcome(const MixtureModel& model, const Eigen::MatrixXd& design_rows,
                                const Eigen::MatrixXd& memberships) {
  if (memberships.rows() != design_rows.rows() ||
      memberships.cols() != static_cast<Eigen::Index>(model.size())) {
    throw DimensionError("memberships must be cells x groups");
  }
  Eigen::VectorXd yhat = Eigen::VectorXd::Zero(design_rows.rows());
  for (std::size_t g = 0; g < model.size(); ++g) {
    const auto* p = std::get_if<PanelLinearGaussian>(&model.components[g]);
    if (p == nullptr) throw DomainError("prediction needs panel components");
    if (p->beta_tilde.size() != design_rows.cols()) {
      throw DimensionError("coefficients do not match the design");
    }
    yhat += memberships.col(static_cast<Eigen::Index>(g)).cwiseProduct(design_rows * p->beta_tilde);
  }
  return yhat;
}

Eigen::VectorXd predict_outcome(const MixtureModel& model, const PanelDataset& test,
                                MembershipKind kind) {
  const MundlakDesign design = mundlak_expand(test);
  return predict_outcome(model, design.rows, covariate_memberships(model, test.covariates, kind));
}

FoldResult run_fold(const PanelDataset& data, const FoldSplit& split, std::size_t groups,
                    PanelAlgorithm algorithm, const CvPlan& plan, Rng& rng,
                    const std::vector<MixtureModel>* inits) {
  const PanelDataset train = subset_units(data, split.train);
  const PanelDataset test = subset_units(data, split.test);
  const std::vector<MixtureModel> starts =
      inits != nullptr ? *inits : random_panel_inits(train, groups, plan.inits, rng);
  const PanelMultiStart fit = multi_start_panel(train, groups, algorithm, starts, plan.panel);

  FoldResult out;
  out.repetition = split.repetition;
  out.fold = split.fold;
  out.model = fit.best.report.model;
  const MembershipKind kind =
      algorithm == PanelAlgorithm::CEM ? MembershipKind::Hard : MembershipKind::Soft;
  out.prediction = predict_outcome(out.model, test, kind);
  const Eigen::VectorXd w = test.flat_weights();
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> y = test.outcome;
  for (Eigen::Index c = 0; c < w.size(); ++c) {
    if (!(w(c) > 0.0)) continue;
    const double e = y.data()[c] - out.prediction(c);
    out.sse += w(c) * e * e;
    out.weight += w(c);
  }
  return out;
}

std::vector<double> CvReport::rmse_per_fold() const {
  std::vector<double> out;
  for (const auto& f : folds) {
    if (f.ok) out.push_back(f.rmse);
  }
  return out;
}

CvReport cross_validate(const PanelDataset& data, std::size_t groups, PanelAlgorithm algorithm,
                        const CvPlan& plan, std::size_t threads) {
  validate_dataset(data);
  validate_plan(plan, data.units);
  if (groups == 0) throw DomainError("G must be at least 1");

  CvReport report;
  report.groups = groups;
  report.algorithm = algorithm;

  Rng split_rng = make_stream(plan.seed, 0);
  const std::vector<FoldSplit> splits = split_units(data.units, plan, split_rng);

  // Warm starts: the top_k converged full-data fits, ranked by objective.
  std::optional<std::vector<MixtureModel>> warm;
  if (plan.warm_start) {
    Rng rng = make_stream(plan.seed, 1);
    const auto starts = random_panel_inits(data, groups, plan.inits, rng);
    std::vector<std::pair<double, MixtureModel>> converged;
    for (const auto& s : starts) {
      try {
        PanelFit f = fit_panel(data, groups, algorithm, s, plan.panel);
        if (f.report.converged) converged.emplace_back(f.report.objective(), f.report.model);
      } catch (const Error&) {
      }
    }
    std::stable_sort(converged.begin(), converged.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    if (converged.size() > plan.top_k) converged.resize(plan.top_k);
    if (converged.empty()) {
      report.warnings.push_back("no converged full-data fit; folds use random starts");
    } else {
      warm.emplace();
      for (auto& c : converged) warm->push_back(std::move(c.second));
    }
  }

  struct Slot {
    FoldResult main, baseline;
    std::string error;
  };
  std::vector<Slot> slots(splits.size());
  parallel_for(splits.size(), threads, [&](std::size_t k) {
    Slot& slot = slots[k];
    try {
      Rng rng = make_stream(plan.seed, 2 + k);
      slot.main = run_fold(data, splits[k], groups, algorithm, plan, rng,
                           warm ? &*warm : nullptr);
      if (groups == 1) {
        slot.baseline = slot.main;
      } else {
        Rng base_rng = make_stream(plan.seed, 2 + k);
        slot.baseline = run_fold(data, splits[k], 1, algorithm, plan, base_rng);
      }
    } catch (const Error& e) {
      slot.error = e.what();
    }
  });

  double sse = 0.0, base_sse = 0.0, weight = 0.0;
  std::vector<std::string> causes;
  for (std::size_t k = 0; k < splits.size(); ++k) {
    CvFoldRecord rec;
    rec.repetition = splits[k].repetition;
    rec.fold = splits[k].fold;
    rec.test_units = splits[k].test.size();
    const Slot& s = slots[k];
    if (!s.error.empty() || !(s.main.weight > 0.0)) {
      rec.error = s.error.empty() ? "no test cell with positive weight" : s.error;
      causes.push_back("repetition " + std::to_string(rec.repetition) + " fold " +
                       std::to_string(rec.fold) + ": " + rec.error);
      ++report.skipped;
      report.folds.push_back(std::move(rec));
      continue;
    }
    rec.ok = true;
    rec.test_weight = s.main.weight;
    rec.rmse = std::sqrt(s.main.sse / s.main.weight);
    rec.baseline_rmse = std::sqrt(s.baseline.sse / s.baseline.weight);
    sse += s.main.sse;
    base_sse += s.baseline.sse;
    weight += s.main.weight;
    report.folds.push_back(std::move(rec));
  }
  if (report.skipped == splits.size()) throw AggregateError(std::move(causes));
  report.rmse_overall = std::sqrt(sse / weight);
  report.baseline_rmse = std::sqrt(base_sse / weight);
  report.relative_to_G1 = groups == 1 ? 1.0 : report.rmse_overall / report.baseline_rmse;
  return report;
}

}  // namespace mixfit
