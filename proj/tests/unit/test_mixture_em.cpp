#include <doctest.h>

#include <cmath>
#include <random>

#include <boost/multiprecision/cpp_dec_float.hpp>

#include "helpers.hpp"
#include "mixfit/errors.hpp"
#include "mixfit/mixture_em.hpp"

using namespace mixfit;
using Big = boost::multiprecision::cpp_dec_float_50;

namespace {

Big big_normal_pdf(Big y, Big mu, Big s2) {
  const Big pi = boost::math::constants::pi<Big>();
  return exp(-(y - mu) * (y - mu) / (2 * s2)) / sqrt(2 * pi * s2);
}

MixtureModel random_normal_init(Rng& rng, std::size_t g) {
  std::normal_distribution<double> z(0.0, 1.5);
  std::uniform_real_distribution<double> u(0.3, 2.0);
  MixtureModel m;
  Eigen::VectorXd w(static_cast<Eigen::Index>(g));
  for (std::size_t k = 0; k < g; ++k) {
    m.components.emplace_back(UnivariateNormal{z(rng), u(rng)});
    w(static_cast<Eigen::Index>(k)) = u(rng);
  }
  m.weights = w / w.sum();
  return m;
}

}  // namespace

TEST_SUITE("mixture_em") {
  TEST_CASE("mixture loglik special cases") {
    Rng rng(1);
    const Observations y = testing::normal_draws(30, 0.0, 1.0, rng);
    const MixtureModel one = testing::normal_mixture({{0.2, 1.3}}, {1.0});
    double direct = 0.0;
    for (Eigen::Index i = 0; i < y.cols(); ++i) direct += testing::normal_logpdf(y(0, i), 0.2, 1.3);
    CHECK(mixture_loglik(one, y) == doctest::Approx(direct).epsilon(1e-13));
    for (double p : {0.1, 0.5, 0.93}) {
      const MixtureModel twin = testing::normal_mixture({{0.2, 1.3}, {0.2, 1.3}}, {p, 1.0 - p});
      CHECK(mixture_loglik(twin, y) == doctest::Approx(direct).epsilon(1e-13));
    }
  }

  TEST_CASE("mixture loglik against a 50-digit oracle") {
    const std::vector<double> y{-1.25, 0.5, 3.75};
    const MixtureModel m = testing::normal_mixture({{-1.0, 0.5}, {2.0, 2.25}}, {0.375, 0.625});
    Big oracle = 0;
    for (double v : y) {
      oracle += log(Big("0.375") * big_normal_pdf(Big(v), Big(-1), Big("0.5")) +
                    Big("0.625") * big_normal_pdf(Big(v), Big(2), Big("2.25")));
    }
    CHECK(std::abs(mixture_loglik(m, univariate(y)) - oracle.convert_to<double>()) < 1e-12);
  }

  TEST_CASE("chen penalty") {
    const MixtureModel unit = testing::normal_mixture({{0, 1}, {1, 1}}, {0.5, 0.5});
    CHECK(chen_penalty(unit, 100) == doctest::Approx(-0.2).epsilon(1e-15));
    CHECK(std::abs(chen_penalty(unit, std::size_t{1} << 62)) < 1e-8);
    const MixtureModel m = testing::normal_mixture({{0, 2.0}, {1, 0.5}}, {0.5, 0.5});
    CHECK(chen_penalty(m, 4) == doctest::Approx(-1.25).epsilon(1e-15));
    const std::vector<double> bad{1.0, 0.0};
    CHECK_THROWS_AS(chen_penalty(bad, 10), DomainError);
  }

  TEST_CASE("e-step") {
    Rng rng(2);
    const Observations y = testing::normal_draws(20, 0.0, 2.0, rng);
    const auto twin = e_step(testing::normal_mixture({{1, 1}, {1, 1}}, {0.3, 0.7}), y);
    for (Eigen::Index i = 0; i < y.cols(); ++i) {
      CHECK(twin.matrix()(i, 0) == doctest::Approx(0.3).epsilon(1e-14));
      CHECK(twin.matrix().row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
    }
    const auto single = e_step(testing::normal_mixture({{1, 1}}, {1.0}), y);
    CHECK((single.matrix().array() == 1.0).all());

    const std::vector<double> zero{0.0};
    const auto far = e_step(testing::normal_mixture({{0, 1}, {10, 1}}, {0.5, 0.5}), univariate(zero));
    const Big e50 = exp(Big(-50));
    const Big tau1 = 1 / (1 + e50), tau2 = e50 / (1 + e50);
    CHECK(far.matrix()(0, 0) == doctest::Approx(tau1.convert_to<double>()).epsilon(1e-15));
    CHECK(far.matrix()(0, 1) == doctest::Approx(tau2.convert_to<double>()).epsilon(1e-12));
  }

  TEST_CASE("m-step") {
    Rng rng(3);
    const Observations y = testing::normal_draws(40, 1.0, 2.0, rng);
    const auto ones = Assignment::soft(Eigen::MatrixXd::Ones(40, 1));
    const MixtureModel single = m_step(ComponentFamily::UnivariateNormal, y, ones);
    const auto mle = std::get<UnivariateNormal>(
        weighted_mle(ComponentFamily::UnivariateNormal, y, Eigen::VectorXd::Ones(40)));
    CHECK(std::get<UnivariateNormal>(single.components[0]).mu == mle.mu);
    CHECK(std::get<UnivariateNormal>(single.components[0]).sigma2 == mle.sigma2);
    CHECK(single.weights(0) == 1.0);

    std::vector<std::size_t> labels(40);
    for (std::size_t i = 0; i < 40; ++i) labels[i] = i < 15 ? 0 : 1;
    const MixtureModel split = m_step(ComponentFamily::UnivariateNormal, y, Assignment::hard(labels, 2));
    const auto first = std::get<UnivariateNormal>(weighted_mle(
        ComponentFamily::UnivariateNormal, y.leftCols(15), Eigen::VectorXd::Ones(15)));
    CHECK(std::get<UnivariateNormal>(split.components[0]).mu == doctest::Approx(first.mu));
    CHECK(std::get<UnivariateNormal>(split.components[0]).sigma2 == doctest::Approx(first.sigma2));
    CHECK(split.weights(0) == doctest::Approx(15.0 / 40.0));

    Eigen::MatrixXd empty = Eigen::MatrixXd::Zero(40, 2);
    empty.col(0).setOnes();
    try {
      m_step(ComponentFamily::UnivariateNormal, y, Assignment::soft(empty));
      FAIL("expected DegenerateComponentError");
    } catch (const DegenerateComponentError& e) {
      CHECK(e.group() == 1);
    }
  }

  TEST_CASE("penalized variance update matches a grid search") {
    // N = 100, unit sample variance: mass 100, weighted sum of squares 100.
    const std::size_t n = 100;
    const double mass = 100.0, ss = 100.0, a = 1.0 / std::sqrt(100.0);
    auto objective = [&](double s2) {
      return -0.5 * mass * std::log(s2) - ss / (2.0 * s2) - a * (1.0 / s2 + std::log(s2));
    };
    double lo = 0.5, hi = 2.0;
    for (int level = 0; level < 4; ++level) {
      double best = lo, top = -1e300;
      const double h = (hi - lo) / 1000.0;
      for (double s2 = lo; s2 <= hi; s2 += h) {
        if (objective(s2) > top) top = objective(s2), best = s2;
      }
      lo = best - h;
      hi = best + h;
    }
    CHECK(std::abs(penalized_normal_variance(ss, mass, n) - 0.5 * (lo + hi)) < 1e-6);
    // Off-centre case: mass and residuals from a subgroup of a larger sample.
    const double grid_best = [&] {
      auto f = [&](double s2) {
        const double b = 1.0 / std::sqrt(1000.0);
        return -0.5 * 12.5 * std::log(s2) - 3.0 / (2.0 * s2) - b * (1.0 / s2 + std::log(s2));
      };
      double best = 0.0, top = -1e300;
      for (double s2 = 0.01; s2 < 2.0; s2 += 1e-7) {
        if (f(s2) > top) top = f(s2), best = s2;
      }
      return best;
    }();
    CHECK(std::abs(penalized_normal_variance(3.0, 12.5, 1000) - grid_best) < 1e-6);
  }

  TEST_CASE("EM fixed points") {
    Rng rng(4);
    const Observations y = testing::normal_draws(300, 0.0, 1.0, rng);
    const auto mle = weighted_mle(ComponentFamily::UnivariateNormal, y, Eigen::VectorXd::Ones(300));
    MixtureModel init;
    init.components = {mle};
    init.weights = Eigen::VectorXd::Ones(1);
    EmConfig cfg;
    const FitReport one = fit_em(y, init, cfg);
    CHECK(one.converged);
    CHECK(one.iterations == 1);

    // A G = 1 fit from any start is the unit-weight MLE, exactly.
    init.components = {UnivariateNormal{5.0, 9.0}};
    const FitReport g1 = fit_em(y, init, cfg);
    CHECK(std::get<UnivariateNormal>(g1.model.components[0]).mu ==
          std::get<UnivariateNormal>(mle).mu);
    CHECK(std::get<UnivariateNormal>(g1.model.components[0]).sigma2 ==
          std::get<UnivariateNormal>(mle).sigma2);

    // Re-running on a converged two-component output stops after one iteration.
    Observations mix(1, 400);
    mix << testing::normal_draws(200, -2.0, 1.0, rng), testing::normal_draws(200, 2.0, 1.0, rng);
    cfg.penalty = PenaltyKind::NormalChen;
    cfg.max_iter = 2000;
    const FitReport first = fit_em(mix, testing::normal_mixture({{-1, 1}, {1, 1}}, {0.5, 0.5}), cfg);
    REQUIRE(first.converged);
    const FitReport again = fit_em(mix, first.model, cfg);
    CHECK(again.iterations <= 1);
  }

  TEST_CASE("separated normal scenario from the truth") {
    Rng rng(5);
    const MixtureModel truth = testing::normal_mixture({{0.75, 1}, {-0.75, 1}}, {0.5, 0.5});
    Observations y(1, 10000);
    y << testing::normal_draws(5000, 0.75, 1.0, rng), testing::normal_draws(5000, -0.75, 1.0, rng);
    EmConfig cfg;
    cfg.penalty = PenaltyKind::NormalChen;
    const FitReport fit = fit_em(y, truth, cfg);
    CHECK(std::abs(std::get<UnivariateNormal>(fit.model.components[0]).mu - 0.75) < 0.1);
    CHECK(std::abs(std::get<UnivariateNormal>(fit.model.components[1]).mu + 0.75) < 0.1);
  }

  TEST_CASE("monotone ascent over random datasets and starts") {
    Rng rng(6);
    std::uniform_int_distribution<int> size(20, 120);
    std::normal_distribution<double> z(0.0, 1.0);
    int violations = 0, runs = 0;
    for (int rep = 0; rep < 200; ++rep) {
      const int n = size(rng);
      Observations y(1, n);
      for (int i = 0; i < n; ++i) y(0, i) = z(rng) + (i % 2 ? 1.5 : -1.0) * (rep % 3);
      EmConfig cfg;
      cfg.penalty = rep % 2 ? PenaltyKind::NormalChen : PenaltyKind::None;
      cfg.max_iter = 200;
      cfg.monotonicity_slack = 1e300;  // record rather than throw
      try {
        const FitReport fit = fit_em(y, random_normal_init(rng, 2 + rep % 2), cfg);
        ++runs;
        for (std::size_t k = 1; k < fit.objective_trace.size(); ++k) {
          violations += fit.objective_trace[k] < fit.objective_trace[k - 1] - 1e-8;
        }
      } catch (const DegenerateComponentError&) {
      }
    }
    CHECK(runs > 150);
    CHECK(violations == 0);
  }

  TEST_CASE("permuting the init permutes the output") {
    Rng rng(7);
    Observations y(1, 300);
    y << testing::normal_draws(100, -3, 1, rng), testing::normal_draws(100, 0, 0.5, rng),
        testing::normal_draws(100, 3, 1, rng);
    const MixtureModel init = testing::normal_mixture({{-2, 1}, {0.5, 1}, {2, 2}}, {0.3, 0.3, 0.4});
    const std::vector<std::size_t> order{2, 0, 1};
    EmConfig cfg;
    const FitReport a = fit_em(y, init, cfg);
    const FitReport b = fit_em(y, permute_model(init, order), cfg);
    CHECK(a.iterations == b.iterations);
    for (std::size_t k = 0; k < 3; ++k) {
      const auto& pa = std::get<UnivariateNormal>(a.model.components[order[k]]);
      const auto& pb = std::get<UnivariateNormal>(b.model.components[k]);
      CHECK(pa.mu == doctest::Approx(pb.mu).epsilon(1e-10));
      CHECK(pa.sigma2 == doctest::Approx(pb.sigma2).epsilon(1e-10));
      CHECK(a.model.weights(static_cast<Eigen::Index>(order[k])) ==
            doctest::Approx(b.model.weights(static_cast<Eigen::Index>(k))).epsilon(1e-10));
    }
  }

  TEST_CASE("responsibility and weight sums") {
    Rng rng(8);
    const Observations y = testing::normal_draws(500, 0, 2, rng);
    const MixtureModel m = testing::normal_mixture({{-1, 1}, {0, 3}, {2, 0.5}}, {0.2, 0.5, 0.3});
    const Assignment tau = e_step(m, y);
    CHECK(((tau.matrix().rowwise().sum().array() - 1.0).abs() < 1e-12).all());
    CHECK(tau.matrix().colwise().sum().sum() == doctest::Approx(500.0).epsilon(1e-12));
    const MixtureModel next = m_step(ComponentFamily::UnivariateNormal, y, tau);
    CHECK(next.weights.sum() == doctest::Approx(1.0).epsilon(1e-12));
  }

  TEST_CASE("quantile split inits") {
    Rng rng(9);
    const Observations y = testing::normal_draws(1000, 0, 1, rng);
    CHECK(quantile_split_inits(y, ComponentFamily::UnivariateNormal).inits.size() == 16);
    const MixtureModel truth = testing::normal_mixture({{0, 1}, {1, 1}}, {0.5, 0.5});
    const auto with_truth = quantile_split_inits(y, ComponentFamily::UnivariateNormal, truth);
    REQUIRE(with_truth.inits.size() == 17);
    CHECK(std::get<UnivariateNormal>(with_truth.inits.back().components[1]).mu == 1.0);
    // Order follows the quantile list: index 7 is the 0.95 split.
    CHECK(std::abs(with_truth.inits[7].weights(0) - 0.95) <= 1.0 / 1000.0);

    Observations counts(1, 200);
    for (Eigen::Index i = 0; i < 200; ++i) counts(0, i) = static_cast<double>(i % 9);
    CHECK(quantile_split_inits(counts, ComponentFamily::Poisson).inits.size() <= 8);

    const Observations constant = Observations::Constant(1, 50, 2.0);
    const auto none = quantile_split_inits(constant, ComponentFamily::UnivariateNormal);
    CHECK(none.inits.empty());
    CHECK(!none.warnings.empty());
  }

  TEST_CASE("sandwich variances") {
    Rng rng(10);
    const std::size_t n = 20000;
    const Observations y = testing::normal_draws(n, 1.0, 2.0, rng);
    MixtureModel m;
    m.components = {weighted_mle(ComponentFamily::UnivariateNormal, y, Eigen::VectorXd::Ones(n))};
    m.weights = Eigen::VectorXd::Ones(1);
    const std::vector<std::size_t> labels(n, 0);
    const auto v = sandwich_variance(m, y, Assignment::hard(labels, 1));
    CHECK(v[0](0, 0) == doctest::Approx(4.0 / n).epsilon(0.1));
    const auto sh = score_and_hessian(m.components[0], y);
    CHECK(sh.scores.colwise().sum().cwiseAbs().maxCoeff() < 1e-8);

    const Observations c = sample(Poisson{3.0}, 10000, rng);
    MixtureModel pm;
    pm.components = {weighted_mle(ComponentFamily::Poisson, c, Eigen::VectorXd::Ones(10000))};
    pm.weights = Eigen::VectorXd::Ones(1);
    const std::vector<std::size_t> pl(10000, 0);
    const double lambda = std::get<Poisson>(pm.components[0]).lambda;
    CHECK(sandwich_variance(pm, c, Assignment::hard(pl, 1))[0](0, 0) ==
          doctest::Approx(lambda / 10000.0).epsilon(0.1));
  }

  TEST_CASE("multi-start keeps the best objective and tolerates failures") {
    Rng rng(11);
    Observations y(1, 200);
    y << testing::normal_draws(100, -2, 1, rng), testing::normal_draws(100, 2, 1, rng);
    EmConfig cfg;
    const MixtureModel good = testing::normal_mixture({{-2, 1}, {2, 1}}, {0.5, 0.5});
    const MixtureModel poor = testing::normal_mixture({{30, 1}, {31, 1}}, {0.5, 0.5});
    const auto r = multi_start_em(y, {poor, good}, cfg);
    CHECK(r.best_index == 1);
    CHECK(r.failures.size() == 1);
    CHECK_THROWS_AS(multi_start_em(y, {poor}, cfg), AggregateError);
  }
}
