#include "mixfit/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mixfit/errors.hpp"
#include "mixfit/parallel.hpp"

namespace mixfit {

ParameterSummary summarize_parameter(const std::string& name, std::span<const double> estimates,
                                     std::span<const double> truths, PercentileBasis basis) {
  if (estimates.empty()) throw InsufficientDataError(name + ": no successful replications");
  if (truths.size() != estimates.size()) throw DimensionError(name + ": one truth per estimate");
  const auto n = static_cast<double>(estimates.size());
  ParameterSummary s;
  s.name = name;
  s.count = estimates.size();
  std::vector<double> errors(estimates.size());
  for (std::size_t r = 0; r < estimates.size(); ++r) {
    errors[r] = estimates[r] - truths[r];
    s.truth += truths[r];
    s.mean_estimate += estimates[r];
    s.bias += errors[r];
    s.mse += errors[r] * errors[r];
  }
  s.truth /= n;
  s.mean_estimate /= n;
  s.bias /= n;
  s.mse /= n;
  std::vector<double> basis_values = basis == PercentileBasis::Bias
                                         ? errors
                                         : std::vector<double>(estimates.begin(), estimates.end());
  s.p025 = empirical_quantile(basis_values, 0.025);
  s.p975 = empirical_quantile(std::move(basis_values), 0.975);
  return s;
}

Interval bootstrap_mean_interval(std::span<const double> values, std::size_t resamples, double level,
                                 Rng& rng) {
  if (values.empty()) throw InsufficientDataError("bootstrap of an empty sample");
  if (resamples == 0 || !(level > 0.0 && level < 1.0)) {
    throw DomainError("bootstrap needs resamples >= 1 and a level in (0, 1)");
  }
  std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
  std::vector<double> means(resamples);
  for (auto& m : means) {
    double sum = 0.0;
    for (std::size_t k = 0; k < values.size(); ++k) sum += values[pick(rng)];
    m = sum / static_cast<double>(values.size());
  }
  const double tail = 0.5 * (1.0 - level);
  return {empirical_quantile(means, tail), empirical_quantile(means, 1.0 - tail)};
}

FitReport permute_fit(const FitReport& fit, const std::vector<std::size_t>& order) {
  const std::size_t g = fit.model.size();
  if (order.size() != g) throw DimensionError("permutation size differs from the group count");
  std::vector<std::size_t> position(g, kNoGroup);
  for (std::size_t k = 0; k < g; ++k) {
    if (order[k] >= g || position[order[k]] != kNoGroup) throw DomainError("not a permutation");
    position[order[k]] = k;
  }
  FitReport out = fit;
  out.model = permute_model(fit.model, order);
  if (fit.hard_labels) {
    std::vector<std::size_t> labels = fit.hard_labels->labels();
    for (auto& l : labels) {
      if (l != kNoGroup) l = position[l];
    }
    out.hard_labels = Assignment::hard(labels, g);
  }
  if (fit.responsibilities) {
    const Eigen::MatrixXd& m = fit.responsibilities->matrix();
    Eigen::MatrixXd p(m.rows(), m.cols());
    for (std::size_t k = 0; k < g; ++k) {
      p.col(static_cast<Eigen::Index>(k)) = m.col(static_cast<Eigen::Index>(order[k]));
    }
    out.responsibilities = fit.responsibilities->kind() == AssignmentKind::Soft
                               ? Assignment::soft(std::move(p))
                               : Assignment::hard(Assignment::soft(p).labels(), g);
  }
  if (fit.variance_estimates.size() == g) {
    for (std::size_t k = 0; k < g; ++k) out.variance_estimates[k] = fit.variance_estimates[order[k]];
  }
  return out;
}

FitReport align_labels(const FitReport& fit, AlignRule rule, const Assignment* truth) {
  if (rule == AlignRule::SortByMean) return permute_fit(fit, mean_order(fit.model));
  if (truth == nullptr) throw DomainError("MatchTruth alignment needs true labels");
  std::optional<Assignment> estimated = fit.hard_labels;
  if (!estimated && fit.responsibilities) estimated = fit.responsibilities->harden();
  if (!estimated) throw DomainError("fit carries no labels to align");
  const Misclassification mis = misclassification_rate(*estimated, *truth);
  const std::size_t g = fit.model.size();
  if (mis.permutation.size() != g) throw DimensionError("truth and fit differ in group count");
  std::vector<std::size_t> order(g);
  for (std::size_t e = 0; e < g; ++e) order[mis.permutation[e]] = e;
  return permute_fit(fit, order);
}

// ---------------------------------------------------------------------------

namespace {

bool univariate_family(ComponentFamily f) {
  return f == ComponentFamily::UnivariateNormal || f == ComponentFamily::Poisson ||
         f == ComponentFamily::Exponential;
}

void check_abort(std::size_t failures, std::size_t replications, const std::string& where) {
  if (2 * failures > replications) {
    throw ScenarioAbortedError(where + ": " + std::to_string(failures) + " of " +
                               std::to_string(replications) + " replications failed");
  }
}

}  // namespace

void validate_scenario(const Exercise1Scenario& scenario) {
  const MixtureModel& t = scenario.truth;
  if (t.size() != 2) throw DomainError("exercise 1 needs exactly two components");
  validate_model(t);
  if (!univariate_family(t.family())) throw DomainError("exercise 1 needs a univariate family");
  if (scenario.replications < 1) throw DomainError("replications must be at least 1");
  if (scenario.sample_sizes.empty()) throw DomainError("at least one sample size is required");
  for (auto n : scenario.sample_sizes) {
    if (n < 2) throw DomainError("sample sizes must be at least 2");
  }
}

std::vector<std::string> exercise1_parameter_names(const MixtureModel& truth) {
  switch (truth.family()) {
    case ComponentFamily::UnivariateNormal:
      return {"mu1", "mu2", "sigma1", "sigma2", "pi1"};
    case ComponentFamily::Poisson:
      return {"lambda1", "lambda2", "pi1"};
    case ComponentFamily::Exponential:
      return {"mean1", "mean2", "pi1"};
    default:
      throw DomainError("exercise 1 needs a univariate family");
  }
}

std::vector<double> exercise1_parameters(const MixtureModel& model) {
  std::vector<double> location, scale;
  for (const auto& c : model.components) {
    if (const auto* n = std::get_if<UnivariateNormal>(&c)) {
      location.push_back(n->mu);
      scale.push_back(std::sqrt(n->sigma2));
    } else if (const auto* p = std::get_if<Poisson>(&c)) {
      location.push_back(p->lambda);
    } else if (const auto* e = std::get_if<Exponential>(&c)) {
      location.push_back(e->mean);
    } else {
      throw DomainError("exercise 1 needs a univariate family");
    }
  }
  std::vector<double> out = location;
  out.insert(out.end(), scale.begin(), scale.end());
  out.push_back(model.weights(0));
  return out;
}

Observations generate_exercise1(const MixtureModel& truth, std::size_t n, Rng& rng) {
  if (truth.size() != 2) throw DomainError("exercise 1 needs exactly two components");
  const auto n1 = static_cast<std::size_t>(std::floor(truth.weights(0) * static_cast<double>(n)));
  Observations out(1, static_cast<Eigen::Index>(n));
  if (n1 > 0) out.leftCols(static_cast<Eigen::Index>(n1)) = sample(truth.components[0], n1, rng);
  if (n > n1) {
    out.rightCols(static_cast<Eigen::Index>(n - n1)) = sample(truth.components[1], n - n1, rng);
  }
  return out;
}

MixtureModel align_to_truth_order(const MixtureModel& estimate, const MixtureModel& truth) {
  if (estimate.size() != truth.size()) throw DimensionError("estimate and truth differ in size");
  const auto by_truth = mean_order(truth);
  const auto by_estimate = mean_order(estimate);
  std::vector<std::size_t> order(truth.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[by_truth[k]] = by_estimate[k];
  return permute_model(estimate, order);
}

Exercise1Report run_exercise1(const Exercise1Scenario& scenario, std::size_t threads) {
  validate_scenario(scenario);
  const MixtureModel& truth = scenario.truth;
  const ComponentFamily family = truth.family();
  EmConfig em;
  if (scenario.em) {
    em = *scenario.em;
  } else {
    em.rule = ConvergenceRule::Absolute;
    em.penalty = family == ComponentFamily::UnivariateNormal ? PenaltyKind::NormalChen
                                                              : PenaltyKind::None;
  }

  Exercise1Report report;
  report.parameter_names = exercise1_parameter_names(truth);
  report.truth = exercise1_parameters(truth);
  const std::size_t reps = scenario.replications;

  struct Slot {
    std::vector<double> estimates;
    bool converged = false;
    std::string error;
  };
  for (std::size_t n : scenario.sample_sizes) {
    std::vector<Slot> slots(reps);
    parallel_for(reps, threads, [&](std::size_t r) {
      Slot& slot = slots[r];
      try {
        Rng rng = make_stream(stream_seed(scenario.seed, n), r);
        const Observations data = generate_exercise1(truth, n, rng);
        const InitSet inits = quantile_split_inits(
            data, family, scenario.truth_init ? std::optional<MixtureModel>(truth) : std::nullopt);
        if (inits.inits.empty()) throw InsufficientDataError("no usable starting values");
        const MultiStartResult res = multi_start_em(data, inits.inits, em);
        slot.estimates = exercise1_parameters(align_to_truth_order(res.best.model, truth));
        slot.converged = res.best.converged;
      } catch (const Error& e) {
        slot.error = e.what();
      }
    });

    Exercise1Cell cell;
    cell.sample_size = n;
    for (std::size_t r = 0; r < reps; ++r) {
      if (!slots[r].error.empty()) {
        ++cell.failures;
        report.failures.push_back({n, r, "EM", slots[r].error});
        continue;
      }
      ++cell.successes;
      if (!slots[r].converged) ++cell.nonconverged;
      cell.estimates.push_back(std::move(slots[r].estimates));
    }
    check_abort(cell.failures, reps, "N = " + std::to_string(n));
    for (std::size_t j = 0; j < report.parameter_names.size(); ++j) {
      std::vector<double> est, tru(cell.estimates.size(), report.truth[j]);
      for (const auto& e : cell.estimates) est.push_back(e[j]);
      cell.parameters.push_back(
          summarize_parameter(report.parameter_names[j], est, tru, PercentileBasis::Estimate));
    }
    report.cells.push_back(std::move(cell));
  }
  return report;
}

// ---------------------------------------------------------------------------

void validate_scenario(const Exercise2Scenario& s) {
  if (s.units < 1 || s.groups < 1 || s.dim < 1) throw DomainError("N, G and p must be at least 1");
  if (s.periods < 2) throw DomainError("T must be at least 2");
  if (s.replications < 1) throw DomainError("replications must be at least 1");
  if (s.inits < 1) throw DomainError("at least one init is required");
  if (!s.run_em && !s.run_cem) throw DomainError("enable at least one algorithm");
}

std::vector<std::string> exercise2_parameter_names(std::size_t periods, std::size_t groups) {
  std::vector<std::string> names;
  for (std::size_t g = 1; g <= groups; ++g) {
    const std::string sfx = "_" + std::to_string(g);
    names.push_back("beta" + sfx);
    names.push_back("gamma" + sfx);
    for (std::size_t t = 1; t <= periods; ++t) names.push_back("time" + std::to_string(t) + sfx);
    names.push_back("sigma2_alpha" + sfx);
    names.push_back("sigma2_eps" + sfx);
    names.push_back("pi" + sfx);
  }
  return names;
}

std::vector<double> exercise2_parameters(const MixtureModel& model) {
  std::vector<double> out;
  for (std::size_t g = 0; g < model.size(); ++g) {
    const auto* p = std::get_if<PanelLinearGaussian>(&model.components[g]);
    if (p == nullptr) throw DomainError("exercise 2 needs panel components");
    out.insert(out.end(), p->beta_tilde.data(), p->beta_tilde.data() + p->beta_tilde.size());
    out.push_back(p->sigma2_alpha);
    out.push_back(p->sigma2_eps);
    out.push_back(model.weights(static_cast<Eigen::Index>(g)));
  }
  return out;
}

double Exercise2Algorithm::zero_misclassification_share() const {
  if (misclassification.empty()) return 0.0;
  const auto zeros = std::count(misclassification.begin(), misclassification.end(), 0.0);
  return static_cast<double>(zeros) / static_cast<double>(misclassification.size());
}

double Exercise2Algorithm::mean_misclassification() const {
  if (misclassification.empty()) return 0.0;
  return std::accumulate(misclassification.begin(), misclassification.end(), 0.0) /
         static_cast<double>(misclassification.size());
}

std::string algorithm_name(PanelAlgorithm algorithm) {
  return algorithm == PanelAlgorithm::EM ? "EM" : "CEM";
}

Exercise2Report run_exercise2(const Exercise2Scenario& scenario, std::size_t threads) {
  validate_scenario(scenario);
  std::vector<PanelAlgorithm> algorithms;
  if (scenario.run_em) algorithms.push_back(PanelAlgorithm::EM);
  if (scenario.run_cem) algorithms.push_back(PanelAlgorithm::CEM);
  const std::size_t reps = scenario.replications;

  struct Outcome {
    std::vector<double> estimates;
    double misclassification = 0.0;
    bool converged = false;
    std::string error;
  };
  struct Slot {
    std::vector<double> truth;
    std::vector<Outcome> outcomes;
  };
  std::vector<Slot> slots(reps);
  parallel_for(reps, threads, [&](std::size_t r) {
    Slot& slot = slots[r];
    slot.outcomes.resize(algorithms.size());
    try {
      Rng rng = make_stream(scenario.seed, r);
      const Exercise2Draw draw = generate_exercise2(scenario.units, scenario.periods,
                                                    scenario.groups, scenario.dim, rng);
      const auto inits = random_panel_inits(draw.data, scenario.groups, scenario.inits, rng);
      const Assignment truth = Assignment::hard(*draw.data.truth_labels, scenario.groups);
      slot.truth = exercise2_parameters(draw.truth);
      for (std::size_t a = 0; a < algorithms.size(); ++a) {
        Outcome& out = slot.outcomes[a];
        try {
          const PanelMultiStart res =
              multi_start_panel(draw.data, scenario.groups, algorithms[a], inits, scenario.config);
          const FitReport aligned = align_labels(res.best.report, AlignRule::MatchTruth, &truth);
          out.misclassification = misclassification_rate(*aligned.hard_labels, truth).rate;
          out.estimates = exercise2_parameters(aligned.model);
          out.converged = aligned.converged;
        } catch (const Error& e) {
          out.error = e.what();
        }
      }
    } catch (const Error& e) {
      for (auto& out : slot.outcomes) out.error = e.what();
    }
  });

  Exercise2Report report;
  report.parameter_names = exercise2_parameter_names(scenario.periods, scenario.groups);
  for (std::size_t a = 0; a < algorithms.size(); ++a) {
    Exercise2Algorithm alg;
    alg.algorithm = algorithms[a];
    for (std::size_t r = 0; r < reps; ++r) {
      Outcome& out = slots[r].outcomes[a];
      if (!out.error.empty()) {
        ++alg.failures;
        report.failures.push_back({scenario.units, r, algorithm_name(algorithms[a]), out.error});
        continue;
      }
      ++alg.successes;
      if (!out.converged) ++alg.nonconverged;
      alg.estimates.push_back(std::move(out.estimates));
      alg.truths.push_back(slots[r].truth);
      alg.misclassification.push_back(out.misclassification);
    }
    check_abort(alg.failures, reps, algorithm_name(algorithms[a]));
    for (std::size_t j = 0; j < report.parameter_names.size(); ++j) {
      std::vector<double> est, tru;
      for (std::size_t r = 0; r < alg.estimates.size(); ++r) {
        est.push_back(alg.estimates[r][j]);
        tru.push_back(alg.truths[r][j]);
      }
      alg.parameters.push_back(
          summarize_parameter(report.parameter_names[j], est, tru, PercentileBasis::Bias));
    }
    report.algorithms.push_back(std::move(alg));
  }
  return report;
}

}  // namespace mixfit
