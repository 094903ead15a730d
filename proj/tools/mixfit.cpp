// mixfit command-line tool: Monte Carlo scenarios, panel fits on CSV data,
// cross-validation and synthetic data generation. Every command validates
// its whole configuration before computing, keeps results in memory until
// the computation succeeds, then writes data files and finally manifest.json.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "config.hpp"
#include "mixfit/crossval.hpp"
#include "mixfit/errors.hpp"
#include "mixfit/parallel.hpp"
#include "mixfit/panel.hpp"
#include "mixfit/simulate.hpp"

namespace fs = std::filesystem;
using mixfit::cli::Config;
using mixfit::cli::ConfigError;
using mixfit::cli::Json;

namespace {

constexpr const char* kVersion = "1.0.0";
constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitBadInput = 2;
constexpr int kExitAborted = 3;
constexpr std::int64_t kMaxCount = 100'000'000;

struct Options {
  std::string config;
  std::string out_dir = ".";
  std::string data;
  std::string kind;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::optional<std::size_t> replications;
};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

/// Files produced by a command, held until the run has succeeded.
class Outputs {
 public:
  void add(std::string name, std::string content) {
    files_.emplace_back(std::move(name), std::move(content));
  }
  void add_json(std::string name, const Json& j) { add(std::move(name), j.dump(2) + "\n"); }

  /// Writes every file and then the manifest, which marks the run complete.
  void commit(const Options& opt, const std::string& command, std::uint64_t seed,
              const std::string& started) const {
    fs::create_directories(opt.out_dir);
    const fs::path manifest = fs::path(opt.out_dir) / "manifest.json";
    fs::remove(manifest);
    Json outputs = Json::array();
    for (const auto& [name, content] : files_) {
      const fs::path p = fs::path(opt.out_dir) / name;
      std::ofstream out(p, std::ios::binary);
      out << content;
      if (!out) throw mixfit::InputError(p.string() + ": write failed");
      outputs.push_back(p.string());
    }
    Json m;
    m["command"] = command;
    m["config_path"] = opt.config;
    if (!opt.data.empty()) m["data_path"] = opt.data;
    m["seed"] = seed;
    m["version"] = kVersion;
    m["started_at"] = started;
    m["finished_at"] = utc_now();
    m["outputs"] = outputs;
    std::ofstream out(manifest, std::ios::binary);
    out << m.dump(2) << "\n";
    if (!out) throw mixfit::InputError(manifest.string() + ": write failed");
  }

 private:
  std::vector<std::pair<std::string, std::string>> files_;
};

std::size_t thread_count(const Options& opt) {
  return opt.threads && *opt.threads > 0 ? *opt.threads : mixfit::default_threads();
}

void check_command(Config& c, const std::string& command) {
  if (c.has("command")) {
    const std::string declared = c.string("command", command);
    if (declared != command) c.problem("command", "config is for '" + declared + "', not '" + command + "'");
  }
}

std::uint64_t seed_of(Config& c, const Options& opt) {
  const auto s = c.integer("seed", 1, 0, std::numeric_limits<std::int64_t>::max());
  return opt.seed ? *opt.seed : static_cast<std::uint64_t>(s);
}

mixfit::PanelAlgorithm algorithm_of(const std::string& s) {
  return s == "EM" ? mixfit::PanelAlgorithm::EM : mixfit::PanelAlgorithm::CEM;
}

void panel_settings(Config& c, mixfit::PanelConfig& cfg) {
  cfg.max_iter = static_cast<std::size_t>(c.integer("max_iter", 100, 1, 100000));
  cfg.rel_tol = c.number("rel_tol", 1e-4, 1e-15, 1.0);
  const std::string m = c.choice("m_step", "iwgls", {"iwgls", "cell_mle"});
  cfg.m_step = m == "iwgls" ? mixfit::PanelMStep::Iwgls : mixfit::PanelMStep::CellMle;
}

const std::set<std::string> kPanelKeys = {"max_iter", "rel_tol", "m_step"};

std::set<std::string> with(std::set<std::string> a, const std::set<std::string>& b) {
  a.insert(b.begin(), b.end());
  return a;
}

Json summary_json(const mixfit::ParameterSummary& p) {
  Json j;
  j["name"] = p.name;
  j["truth"] = p.truth;
  j["mean_estimate"] = p.mean_estimate;
  j["bias"] = p.bias;
  j["mse"] = p.mse;
  j["p2.5"] = p.p025;
  j["p97.5"] = p.p975;
  j["count"] = p.count;
  return j;
}

Json failures_json(const std::vector<mixfit::ReplicationFailure>& failures) {
  Json arr = Json::array();
  for (const auto& f : failures) {
    arr.push_back({{"N", f.sample_size}, {"replication", f.replication}, {"algorithm", f.algorithm},
                   {"cause", f.cause}});
  }
  return arr;
}

// ---------------------------------------------------------------------------
// sim1

struct Sim1Plan {
  mixfit::Exercise1Scenario scenario;
};

Sim1Plan parse_sim1(Config& c, const Options& opt) {
  check_command(c, "sim1");
  c.allow_only({"command", "seed", "replications", "sample_sizes", "family", "pi1", "components",
                "truth_init", "max_iter", "tolerance", "penalty"});
  Sim1Plan plan;
  auto& s = plan.scenario;
  s.seed = seed_of(c, opt);
  s.replications = static_cast<std::size_t>(c.integer("replications", 1000, 1, kMaxCount));
  if (opt.replications) s.replications = *opt.replications;
  const auto sizes = c.integers("sample_sizes", {100, 1000, 10000}, 2, kMaxCount);
  s.sample_sizes.assign(sizes.begin(), sizes.end());
  const std::string family = c.choice("family", "normal", {"normal", "poisson", "exponential"});
  const double pi1 = c.number("pi1", 0.5, 1e-12, 1.0 - 1e-12);
  s.truth_init = c.boolean("truth_init", true);
  const auto comps = c.tables("components");
  if (comps.size() != 2 && c.has("components")) c.problem("components", "exactly two components are required");
  for (std::size_t k = 0; k < comps.size() && k < 2; ++k) {
    const std::string at = "components[" + std::to_string(k) + "]";
    Config sub = Config::from_json(comps[k], c.path());
    auto num = [&](const char* key) -> std::optional<double> {
      if (!sub.has(key)) {
        c.problem(at + "." + key, "is required for the " + family + " family");
        return std::nullopt;
      }
      const auto& v = comps[k][key];
      if (!v.is_number() || !std::isfinite(v.get<double>())) {
        c.problem(at + "." + key, "expected a finite number");
        return std::nullopt;
      }
      return v.get<double>();
    };
    if (family == "normal") {
      auto mu = num("mu");
      auto sd = num("sigma");
      if (sd && !(*sd > 0.0)) c.problem(at + ".sigma", "must be positive");
      s.truth.components.emplace_back(mixfit::UnivariateNormal{mu.value_or(0.0), std::pow(sd.value_or(1.0), 2)});
    } else if (family == "poisson") {
      auto l = num("lambda");
      if (l && !(*l > 0.0)) c.problem(at + ".lambda", "must be positive");
      s.truth.components.emplace_back(mixfit::Poisson{l.value_or(1.0)});
    } else {
      auto m = num("mean");
      if (m && !(*m > 0.0)) c.problem(at + ".mean", "must be positive");
      s.truth.components.emplace_back(mixfit::Exponential{m.value_or(1.0)});
    }
  }
  s.truth.weights = Eigen::Vector2d(pi1, 1.0 - pi1);
  mixfit::EmConfig em;
  em.max_iter = static_cast<std::size_t>(c.integer("max_iter", 100, 1, 100000));
  em.loglik_tol = c.number("tolerance", 1e-10, 1e-300, 1.0);
  const std::string penalty =
      c.choice("penalty", family == "normal" ? "chen" : "none", {"chen", "none"});
  if (penalty == "chen" && family != "normal") c.problem("penalty", "applies to the normal family only");
  em.penalty = penalty == "chen" ? mixfit::PenaltyKind::NormalChen : mixfit::PenaltyKind::None;
  s.em = em;
  c.finish();
  return plan;
}

int run_sim1(Config& c, const Options& opt) {
  const std::string started = utc_now();
  const Sim1Plan plan = parse_sim1(c, opt);
  const auto report = mixfit::run_exercise1(plan.scenario, thread_count(opt));

  std::ostringstream csv;
  csv << "parameter,N,mean_estimate,bias,mse,p2.5,p97.5\n";
  Json cells = Json::array();
  for (const auto& cell : report.cells) {
    Json params = Json::array();
    for (const auto& p : cell.parameters) {
      csv << p.name << ',' << cell.sample_size << ',' << fmt(p.mean_estimate) << ','
          << fmt(p.bias) << ',' << fmt(p.mse) << ',' << fmt(p.p025) << ',' << fmt(p.p975) << '\n';
      params.push_back(summary_json(p));
    }
    cells.push_back({{"N", cell.sample_size},
                     {"successes", cell.successes},
                     {"failures", cell.failures},
                     {"nonconverged", cell.nonconverged},
                     {"parameters", params},
                     {"estimates", cell.estimates}});
  }
  Json j;
  j["command"] = "sim1";
  j["seed"] = plan.scenario.seed;
  j["replications"] = plan.scenario.replications;
  j["family"] = std::string(mixfit::family_name(plan.scenario.truth.family()));
  j["parameter_names"] = report.parameter_names;
  j["truth"] = report.truth;
  j["cells"] = cells;
  j["failures"] = failures_json(report.failures);

  Outputs out;
  out.add_json("sim1_report.json", j);
  out.add("sim1_parameters.csv", csv.str());
  out.commit(opt, "sim1", plan.scenario.seed, started);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// sim2

mixfit::Exercise2Scenario parse_sim2(Config& c, const Options& opt) {
  check_command(c, "sim2");
  c.allow_only(with({"command", "seed", "replications", "units", "periods", "groups", "dim",
                     "inits", "algorithms"},
                    kPanelKeys));
  mixfit::Exercise2Scenario s;
  s.seed = seed_of(c, opt);
  s.replications = static_cast<std::size_t>(c.integer("replications", 250, 1, kMaxCount));
  if (opt.replications) s.replications = *opt.replications;
  s.units = static_cast<std::size_t>(c.integer("units", 500, 2, kMaxCount));
  s.periods = static_cast<std::size_t>(c.integer("periods", 5, 2, 10000));
  s.groups = static_cast<std::size_t>(c.integer("groups", 2, 1, 64));
  s.dim = static_cast<std::size_t>(c.integer("dim", 1, 1, 10000));
  s.inits = static_cast<std::size_t>(c.integer("inits", 25, 1, 100000));
  const auto algs = c.strings("algorithms", {"EM", "CEM"}, {"EM", "CEM"});
  s.run_em = std::find(algs.begin(), algs.end(), "EM") != algs.end();
  s.run_cem = std::find(algs.begin(), algs.end(), "CEM") != algs.end();
  panel_settings(c, s.config);
  c.finish();
  return s;
}

int run_sim2(Config& c, const Options& opt) {
  const std::string started = utc_now();
  const auto scenario = parse_sim2(c, opt);
  const auto report = mixfit::run_exercise2(scenario, thread_count(opt));

  std::ostringstream params, mis;
  params << "parameter";
  mis << "statistic";
  for (const auto& a : report.algorithms) {
    const std::string n = mixfit::algorithm_name(a.algorithm);
    params << ',' << n << "_mean_truth," << n << "_mean_estimate," << n << "_bias," << n << "_mse,"
           << n << "_p2.5," << n << "_p97.5";
    mis << ',' << n;
  }
  params << '\n';
  mis << '\n';
  for (std::size_t j = 0; j < report.parameter_names.size(); ++j) {
    params << report.parameter_names[j];
    for (const auto& a : report.algorithms) {
      const auto& p = a.parameters[j];
      params << ',' << fmt(p.truth) << ',' << fmt(p.mean_estimate) << ',' << fmt(p.bias) << ','
             << fmt(p.mse) << ',' << fmt(p.p025) << ',' << fmt(p.p975);
    }
    params << '\n';
  }
  auto row = [&](const std::string& name, auto value) {
    mis << name;
    for (const auto& a : report.algorithms) mis << ',' << value(a);
    mis << '\n';
  };
  using Alg = mixfit::Exercise2Algorithm;
  row("successes", [](const Alg& a) { return std::to_string(a.successes); });
  row("failures", [](const Alg& a) { return std::to_string(a.failures); });
  row("nonconverged", [](const Alg& a) { return std::to_string(a.nonconverged); });
  row("mean_misclassification", [](const Alg& a) { return fmt(a.mean_misclassification()); });
  row("p2.5_misclassification",
      [](const Alg& a) { return fmt(mixfit::empirical_quantile(a.misclassification, 0.025)); });
  row("p97.5_misclassification",
      [](const Alg& a) { return fmt(mixfit::empirical_quantile(a.misclassification, 0.975)); });
  row("zero_misclassification_share", [](const Alg& a) { return fmt(a.zero_misclassification_share()); });

  Json algs = Json::array();
  for (const auto& a : report.algorithms) {
    Json ps = Json::array();
    for (const auto& p : a.parameters) ps.push_back(summary_json(p));
    algs.push_back({{"algorithm", mixfit::algorithm_name(a.algorithm)},
                    {"successes", a.successes},
                    {"failures", a.failures},
                    {"nonconverged", a.nonconverged},
                    {"misclassification", a.misclassification},
                    {"zero_misclassification_share", a.zero_misclassification_share()},
                    {"parameters", ps}});
  }
  Json j;
  j["command"] = "sim2";
  j["seed"] = scenario.seed;
  j["scenario"] = {{"units", scenario.units},        {"periods", scenario.periods},
                   {"groups", scenario.groups},      {"dim", scenario.dim},
                   {"replications", scenario.replications}, {"inits", scenario.inits}};
  j["parameter_names"] = report.parameter_names;
  j["algorithms"] = algs;
  j["failures"] = failures_json(report.failures);

  Outputs out;
  out.add_json("sim2_report.json", j);
  out.add("sim2_parameters.csv", params.str());
  out.add("sim2_misclassification.csv", mis.str());
  out.commit(opt, "sim2", scenario.seed, started);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// fit

std::string data_path(Config& c, const Options& opt) {
  if (!opt.data.empty()) return opt.data;
  if (!c.has("data")) {
    c.problem("data", "is required (or pass --data)");
    return {};
  }
  const fs::path p = c.string("data", "");
  return p.is_absolute() ? p.string() : (fs::path(c.directory()) / p).string();
}

std::vector<std::string> coefficient_names(std::size_t periods) {
  std::vector<std::string> n{"beta", "gamma"};
  for (std::size_t t = 1; t <= periods; ++t) n.push_back("time" + std::to_string(t));
  return n;
}

int run_fit(Config& c, Options opt) {
  const std::string started = utc_now();
  check_command(c, "fit");
  c.allow_only(with({"command", "data", "seed", "groups", "algorithm", "inits"}, kPanelKeys));
  const std::string path = data_path(c, opt);
  const auto groups = static_cast<std::size_t>(c.required_integer("groups", 1, 64));
  const auto algorithm = algorithm_of(c.choice("algorithm", "CEM", {"EM", "CEM"}));
  const auto inits = static_cast<std::size_t>(c.integer("inits", 25, 1, 100000));
  const std::uint64_t seed = seed_of(c, opt);
  mixfit::PanelConfig cfg;
  panel_settings(c, cfg);
  c.finish();
  opt.data = path;

  const mixfit::PanelDataset data = mixfit::read_panel_csv(path);
  mixfit::Rng rng = mixfit::make_stream(seed, 0);
  const auto starts = mixfit::random_panel_inits(data, groups, inits, rng);
  const auto res = mixfit::multi_start_panel(data, groups, algorithm, starts, cfg);
  const mixfit::PanelFit& fit = res.best;
  const auto names = coefficient_names(data.periods);

  Json groups_json = Json::array();
  for (std::size_t g = 0; g < groups; ++g) {
    const auto& p = std::get<mixfit::PanelLinearGaussian>(fit.report.model.components[g]);
    Json coef, se;
    for (std::size_t k = 0; k < names.size(); ++k) {
      coef[names[k]] = p.beta_tilde(static_cast<Eigen::Index>(k));
      if (g < fit.robust_variance.size() && fit.robust_variance[g].size() > 0) {
        se[names[k]] = std::sqrt(std::max(0.0, fit.robust_variance[g](static_cast<Eigen::Index>(k),
                                                                      static_cast<Eigen::Index>(k))));
      }
    }
    const auto& psi = fit.report.model.covariates[g];
    std::vector<double> mu(psi.mu.data(), psi.mu.data() + psi.mu.size());
    std::vector<std::vector<double>> sigma;
    for (Eigen::Index r = 0; r < psi.sigma.rows(); ++r) {
      sigma.emplace_back();
      for (Eigen::Index q = 0; q < psi.sigma.cols(); ++q) sigma.back().push_back(psi.sigma(r, q));
    }
    groups_json.push_back({{"group", g + 1},
                           {"pi", fit.report.model.weights(static_cast<Eigen::Index>(g))},
                           {"coefficients", coef},
                           {"robust_se", se.is_null() ? Json::object() : se},
                           {"sigma2_alpha", p.sigma2_alpha},
                           {"sigma2_eps", p.sigma2_eps},
                           {"covariate_mean", mu},
                           {"covariate_covariance", sigma}});
  }
  std::vector<std::vector<double>> transitions;
  for (Eigen::Index a = 0; a < fit.transition_counts.rows(); ++a) {
    transitions.emplace_back();
    for (Eigen::Index b = 0; b < fit.transition_counts.cols(); ++b) {
      transitions.back().push_back(fit.transition_counts(a, b));
    }
  }
  Json failures = Json::array();
  for (const auto& [s, why] : res.failures) failures.push_back({{"start", s}, {"cause", why}});

  Json j;
  j["command"] = "fit";
  j["data"] = path;
  j["seed"] = seed;
  j["algorithm"] = mixfit::algorithm_name(algorithm);
  j["groups"] = groups;
  j["converged"] = fit.report.converged;
  j["iterations"] = fit.report.iterations;
  j["objective"] = fit.report.objective();
  j["objective_trace"] = fit.report.objective_trace;
  j["best_start"] = res.best_index;
  j["start_objectives"] = res.objectives;
  j["start_failures"] = failures;
  j["estimates"] = groups_json;
  j["transition_counts"] = transitions;
  j["warnings"] = fit.warnings;
  if (data.truth_labels) {
    std::size_t truth_groups = 0;
    for (auto l : *data.truth_labels) truth_groups = std::max(truth_groups, l + 1);
    if (truth_groups == groups) {
      const auto mis = mixfit::misclassification_rate(
          *fit.report.hard_labels, mixfit::Assignment::hard(*data.truth_labels, groups));
      Json perm = Json::array();
      for (auto v : mis.permutation) perm.push_back(v + 1);
      j["misclassification"] = {{"rate", mis.rate}, {"permutation", perm}};
    } else {
      j["misclassification"] = {{"rate", nullptr},
                                {"note", "true_group has " + std::to_string(truth_groups) +
                                             " groups, the fit has " + std::to_string(groups)}};
    }
  }

  std::ostringstream mem;
  mem << "unit_id,period,w,label";
  for (std::size_t g = 1; g <= groups; ++g) mem << ",weight_g" << g;
  mem << '\n';
  const auto labels = fit.report.hard_labels->labels();
  for (std::size_t i = 0; i < data.units; ++i) {
    for (std::size_t s = 0; s < data.periods; ++s) {
      const auto cell = data.cell(i, s);
      const double w = data.weights(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s));
      mem << csv_field(data.unit_ids[i]) << ',' << csv_field(data.period_ids[s]) << ',' << fmt(w) << ',';
      const auto l = labels[static_cast<std::size_t>(cell)];
      if (l != mixfit::kNoGroup) mem << (l + 1);
      for (std::size_t g = 0; g < groups; ++g) {
        const double share = w > 0.0 ? fit.weights[g](static_cast<Eigen::Index>(i),
                                                      static_cast<Eigen::Index>(s)) / w
                                      : 0.0;
        mem << ',' << fmt(share);
      }
      mem << '\n';
    }
  }

  Outputs out;
  out.add_json("fit_report.json", j);
  out.add("fit_memberships.csv", mem.str());
  out.commit(opt, "fit", seed, started);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// cv

int run_cv(Config& c, Options opt) {
  const std::string started = utc_now();
  check_command(c, "cv");
  c.allow_only(with({"command", "data", "seed", "groups", "algorithm", "inits", "folds",
                     "repetitions", "warm_start", "top_k"},
                    kPanelKeys));
  const std::string path = data_path(c, opt);
  std::vector<std::int64_t> groups;
  if (c.has("groups") && c.root()["groups"].is_number_integer()) {
    groups = {c.integer("groups", 1, 1, 64)};
  } else {
    groups = c.integers("groups", {1, 2}, 1, 64);
  }
  const auto algorithm = algorithm_of(c.choice("algorithm", "CEM", {"EM", "CEM"}));
  mixfit::CvPlan plan;
  plan.seed = seed_of(c, opt);
  plan.folds = static_cast<std::size_t>(c.integer("folds", 2, 2, kMaxCount));
  plan.repetitions = static_cast<std::size_t>(c.integer("repetitions", 10, 1, kMaxCount));
  if (opt.replications) plan.repetitions = *opt.replications;
  plan.warm_start = c.boolean("warm_start", false);
  plan.top_k = static_cast<std::size_t>(c.integer("top_k", 15, 1, 100000));
  plan.inits = static_cast<std::size_t>(c.integer("inits", 25, 1, 100000));
  panel_settings(c, plan.panel);
  c.finish();
  opt.data = path;

  const mixfit::PanelDataset data = mixfit::read_panel_csv(path);
  std::ostringstream folds, rel;
  folds << "groups,repetition,fold,test_units,rmse,baseline_rmse,status\n";
  rel << "groups,algorithm,rmse,baseline_rmse,relative_to_G1\n";
  Json reports = Json::array();
  for (auto g : groups) {
    const auto r = mixfit::cross_validate(data, static_cast<std::size_t>(g), algorithm, plan,
                                          thread_count(opt));
    Json fold_json = Json::array();
    for (const auto& f : r.folds) {
      folds << g << ',' << (f.repetition + 1) << ',' << (f.fold + 1) << ',' << f.test_units << ','
            << (f.ok ? fmt(f.rmse) : "") << ',' << (f.ok ? fmt(f.baseline_rmse) : "") << ','
            << (f.ok ? "ok" : csv_field("skipped: " + f.error)) << '\n';
      fold_json.push_back({{"repetition", f.repetition + 1},
                           {"fold", f.fold + 1},
                           {"test_units", f.test_units},
                           {"ok", f.ok},
                           {"rmse", f.ok ? Json(f.rmse) : Json(nullptr)},
                           {"baseline_rmse", f.ok ? Json(f.baseline_rmse) : Json(nullptr)},
                           {"error", f.error}});
    }
    folds << g << ",summary,," << data.units << ',' << fmt(r.rmse_overall) << ','
          << fmt(r.baseline_rmse) << ",skipped=" << r.skipped << '\n';
    rel << g << ',' << mixfit::algorithm_name(algorithm) << ',' << fmt(r.rmse_overall) << ','
        << fmt(r.baseline_rmse) << ',' << fmt(r.relative_to_G1) << '\n';
    reports.push_back({{"groups", g},
                       {"rmse_overall", r.rmse_overall},
                       {"baseline_rmse", r.baseline_rmse},
                       {"relative_to_G1", r.relative_to_G1},
                       {"rmse_per_fold", r.rmse_per_fold()},
                       {"skipped", r.skipped},
                       {"warnings", r.warnings},
                       {"folds", fold_json}});
  }
  Json j;
  j["command"] = "cv";
  j["data"] = path;
  j["seed"] = plan.seed;
  j["algorithm"] = mixfit::algorithm_name(algorithm);
  j["folds"] = plan.folds;
  j["repetitions"] = plan.repetitions;
  j["warm_start"] = plan.warm_start;
  j["results"] = reports;

  Outputs out;
  out.add_json("cv_report.json", j);
  out.add("cv_folds.csv", folds.str());
  out.add("cv_relative_rmse.csv", rel.str());
  out.commit(opt, "cv", plan.seed, started);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// generate

int run_generate(Config& c, const Options& opt) {
  const std::string started = utc_now();
  check_command(c, "generate");
  c.allow_only({"command", "seed", "units", "periods", "groups", "dim"});
  const std::uint64_t seed = seed_of(c, opt);
  const auto units = static_cast<std::size_t>(c.integer("units", 500, 2, kMaxCount));
  const auto periods = static_cast<std::size_t>(c.integer("periods", 5, 2, 10000));
  const auto groups = static_cast<std::size_t>(c.integer("groups", 2, 1, 64));
  const auto dim = static_cast<std::size_t>(c.integer("dim", 1, 1, 10000));
  c.finish();

  mixfit::Rng rng = mixfit::make_stream(seed, 0);
  const auto draw = mixfit::generate_exercise2(units, periods, groups, dim, rng);
  std::ostringstream csv;
  mixfit::write_panel_csv(draw.data, csv);

  const auto names = mixfit::exercise2_parameter_names(periods, groups);
  const auto values = mixfit::exercise2_parameters(draw.truth);
  Json params;
  for (std::size_t k = 0; k < names.size(); ++k) params[names[k]] = values[k];
  Json j;
  j["seed"] = seed;
  j["units"] = units;
  j["periods"] = periods;
  j["groups"] = groups;
  j["dim"] = dim;
  j["parameters"] = params;
  std::vector<std::vector<double>> trans;
  for (Eigen::Index a = 0; a < draw.transition.rows(); ++a) {
    trans.emplace_back();
    for (Eigen::Index b = 0; b < draw.transition.cols(); ++b) trans.back().push_back(draw.transition(a, b));
  }
  j["transition"] = trans;

  Outputs out;
  out.add("panel.csv", csv.str());
  out.add_json("truth.json", j);
  out.commit(opt, "generate", seed, started);
  return kExitOk;
}

// ---------------------------------------------------------------------------

int validate(Config& c, const Options& opt) {
  std::string kind = opt.kind;
  if (kind.empty()) kind = c.string("command", "");
  Options o = opt;
  if (kind == "sim1") {
    parse_sim1(c, o);
  } else if (kind == "sim2") {
    parse_sim2(c, o);
  } else if (kind == "fit" || kind == "cv") {
    check_command(c, kind);
    if (kind == "fit") {
      c.allow_only(with({"command", "data", "seed", "groups", "algorithm", "inits"}, kPanelKeys));
      c.required_integer("groups", 1, 64);
    } else {
      c.allow_only(with({"command", "data", "seed", "groups", "algorithm", "inits", "folds",
                         "repetitions", "warm_start", "top_k"},
                        kPanelKeys));
      c.integer("folds", 2, 2, kMaxCount);
      c.integer("repetitions", 10, 1, kMaxCount);
      c.boolean("warm_start", false);
      c.integer("top_k", 15, 1, 100000);
    }
    data_path(c, o);
    c.choice("algorithm", "CEM", {"EM", "CEM"});
    c.integer("inits", 25, 1, 100000);
    seed_of(c, o);
    mixfit::PanelConfig cfg;
    panel_settings(c, cfg);
    c.finish();
  } else if (kind == "generate") {
    check_command(c, kind);
    c.allow_only({"command", "seed", "units", "periods", "groups", "dim"});
    c.integer("units", 500, 2, kMaxCount);
    c.integer("periods", 5, 2, 10000);
    c.integer("groups", 2, 1, 64);
    c.integer("dim", 1, 1, 10000);
    seed_of(c, o);
    c.finish();
  } else {
    throw ConfigError({c.path() + ": set 'command' in the file or pass --kind "
                                  "(sim1, sim2, fit, cv, generate)"});
  }
  std::cout << c.path() << ": valid " << kind << " configuration\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Finite mixtures by EM and classification EM: simulations, panel fits and "
               "cross-validation"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  Options opt;
  std::uint64_t seed = 0;
  std::size_t threads = 0, replications = 0;

  auto add_common = [&](CLI::App* sub, bool needs_out) {
    sub->add_option("--config", opt.config, "TOML or JSON configuration file")->required();
    if (needs_out) {
      sub->add_option("--out-dir", opt.out_dir, "Directory for outputs and manifest.json");
      sub->add_option("--seed", seed, "Root seed (overrides the config)");
      sub->add_option("--threads", threads, "Worker threads (default: all cores)");
    }
  };
  auto* sim1 = app.add_subcommand("sim1", "Finite-sample bias of mixture MLE (univariate)");
  add_common(sim1, true);
  sim1->add_option("--replications", replications, "Override the replication count");
  auto* sim2 = app.add_subcommand("sim2", "EM versus C-EM on latent-group panels");
  add_common(sim2, true);
  sim2->add_option("--replications", replications, "Override the replication count");
  auto* fit = app.add_subcommand("fit", "Fit a latent-group panel model to a CSV file");
  add_common(fit, true);
  fit->add_option("--data", opt.data, "Panel CSV (overrides 'data' in the config)");
  auto* cv = app.add_subcommand("cv", "Repeated K-fold cross-validation over units");
  add_common(cv, true);
  cv->add_option("--data", opt.data, "Panel CSV (overrides 'data' in the config)");
  cv->add_option("--replications", replications, "Override the repetition count");
  auto* gen = app.add_subcommand("generate", "Write a simulated latent-group panel as CSV");
  add_common(gen, true);
  auto* val = app.add_subcommand("validate-config", "Check a configuration without running it");
  add_common(val, false);
  val->add_option("--kind", opt.kind, "Command the file is meant for")
      ->check(CLI::IsMember({"sim1", "sim2", "fit", "cv", "generate"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitBadInput;
  }
  for (auto* sub : {sim1, sim2, fit, cv, gen}) {
    if (sub->count("--seed")) opt.seed = seed;
    if (sub->count("--threads")) opt.threads = threads;
    if (sub->get_option_no_throw("--replications") && sub->count("--replications")) {
      if (replications < 1) {
        std::cerr << "error: --replications must be at least 1\n";
        return kExitBadInput;
      }
      opt.replications = replications;
    }
  }

  try {
    Config config = Config::load(opt.config);
    if (*sim1) return run_sim1(config, opt);
    if (*sim2) return run_sim2(config, opt);
    if (*fit) return run_fit(config, opt);
    if (*cv) return run_cv(config, opt);
    if (*gen) return run_generate(config, opt);
    return validate(config, opt);
  } catch (const ConfigError& e) {
    std::cerr << "invalid configuration:\n" << e.what() << "\n";
    return kExitBadInput;
  } catch (const mixfit::InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitBadInput;
  } catch (const mixfit::ScenarioAbortedError& e) {
    std::cerr << "scenario aborted: " << e.what() << "\n";
    return kExitAborted;
  } catch (const mixfit::DomainError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kExitBadInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}
