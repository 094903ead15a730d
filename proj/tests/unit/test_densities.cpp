#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>

#include "helpers.hpp"
#include "mixfit/densities.hpp"
#include "mixfit/errors.hpp"

using namespace mixfit;

namespace {

Eigen::VectorXd obs1(double y) { return Eigen::VectorXd::Constant(1, y); }

// log(n!) from an exact integer product; exact for n <= 20.
double log_factorial_exact(unsigned n) {
  std::uint64_t f = 1;
  for (unsigned k = 2; k <= n; ++k) f *= k;
  return std::log(static_cast<long double>(f));
}

double golden_max(const std::function<double(double)>& f, double lo, double hi) {
  const double r = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double c = b - r * (b - a), d = a + r * (b - a);
  while (b - a > 1e-11) {
    if (f(c) > f(d)) {
      b = d;
    } else {
      a = c;
    }
    c = b - r * (b - a);
    d = a + r * (b - a);
  }
  return 0.5 * (a + b);
}

}  // namespace

TEST_SUITE("densities") {
  TEST_CASE("log density at documented points") {
    CHECK(log_density(UnivariateNormal{0.0, 1.0}, obs1(0.0)) ==
          doctest::Approx(-0.91893853320467274).epsilon(1e-14));
    CHECK(log_density(Exponential{1.0}, obs1(0.0)) == 0.0);
    const double oracle = 3.0 * std::log(5.0) - 5.0 - log_factorial_exact(3);
    CHECK(log_density(Poisson{5.0}, obs1(3.0)) == doctest::Approx(oracle).epsilon(1e-14));
    CHECK(log_density(Poisson{2.5}, obs1(17.0)) ==
          doctest::Approx(17.0 * std::log(2.5) - 2.5 - log_factorial_exact(17)).epsilon(1e-13));
  }

  TEST_CASE("multivariate normal density matches the explicit formula") {
    MultivariateNormal p{Eigen::Vector2d(1.0, -1.0), Eigen::Matrix2d{{2.0, 0.5}, {0.5, 1.0}}};
    const Eigen::Vector2d y(0.3, 0.7);
    const Eigen::Matrix2d s = p.sigma;
    const double det = s(0, 0) * s(1, 1) - s(0, 1) * s(1, 0);
    Eigen::Matrix2d inv;
    inv << s(1, 1), -s(0, 1), -s(1, 0), s(0, 0);
    inv /= det;
    const Eigen::Vector2d r = y - p.mu;
    const double oracle = -std::log(2.0 * M_PI) - 0.5 * std::log(det) - 0.5 * r.dot(inv * r);
    CHECK(log_density(p, y) == doctest::Approx(oracle).epsilon(1e-13));
  }

  TEST_CASE("vectorized evaluation agrees with the scalar path") {
    Rng rng(3);
    const Observations y = testing::normal_draws(50, 1.0, 2.0, rng);
    const UnivariateNormal p{0.4, 1.7};
    const Eigen::VectorXd v = log_density_vector(p, y);
    for (Eigen::Index i = 0; i < y.cols(); ++i) {
      CHECK(v(i) == doctest::Approx(testing::normal_logpdf(y(0, i), 0.4, 1.7)).epsilon(1e-13));
    }
  }

  TEST_CASE("out of support observations name family and value") {
    try {
      log_density(Poisson{1.0}, obs1(2.5));
      FAIL("expected DomainError");
    } catch (const DomainError& e) {
      CHECK(std::string(e.what()).find("poisson") != std::string::npos);
      CHECK(std::string(e.what()).find("2.5") != std::string::npos);
    }
    CHECK_THROWS_AS(log_density(Poisson{1.0}, obs1(-1.0)), DomainError);
    CHECK_THROWS_AS(log_density(Exponential{1.0}, obs1(-0.1)), DomainError);
    MultivariateNormal bad{Eigen::Vector2d::Zero(), Eigen::Matrix2d{{1.0, 2.0}, {2.0, 1.0}}};
    CHECK_THROWS_AS(log_density(bad, Eigen::Vector2d::Zero()), DecompositionError);
  }

  TEST_CASE("weighted MLE closed forms") {
    const std::vector<double> y{1.0, 2.0, 3.0};
    auto n = std::get<UnivariateNormal>(
        weighted_mle(ComponentFamily::UnivariateNormal, univariate(y), Eigen::Vector3d::Ones()));
    CHECK(n.mu == doctest::Approx(2.0));
    CHECK(n.sigma2 == doctest::Approx(2.0 / 3.0));

    const std::vector<double> c{0.0, 2.0, 4.0};
    auto p = std::get<Poisson>(
        weighted_mle(ComponentFamily::Poisson, univariate(c), Eigen::Vector3d(1.0, 0.0, 1.0)));
    CHECK(p.lambda == doctest::Approx(2.0));

    auto e = std::get<Exponential>(
        weighted_mle(ComponentFamily::Exponential, univariate(c), Eigen::Vector3d(1, 1, 2)));
    CHECK(e.mean == doctest::Approx(2.5));
  }

  TEST_CASE("weighted normal MLE agrees with a golden-section optimizer") {
    const std::vector<double> y{0.0, 1.0};
    const Eigen::Vector2d w(0.25, 0.75);
    auto fit = std::get<UnivariateNormal>(
        weighted_mle(ComponentFamily::UnivariateNormal, univariate(y), w));
    auto ll = [&](double mu, double s2) {
      return w(0) * testing::normal_logpdf(y[0], mu, s2) + w(1) * testing::normal_logpdf(y[1], mu, s2);
    };
    // Coordinate ascent; the objective is separable enough to converge quickly.
    double mu = 0.0, s2 = 1.0;
    for (int sweep = 0; sweep < 60; ++sweep) {
      mu = golden_max([&](double m) { return ll(m, s2); }, -2.0, 3.0);
      s2 = golden_max([&](double v) { return ll(mu, v); }, 1e-4, 5.0);
    }
    CHECK(fit.mu == doctest::Approx(mu).epsilon(1e-6));
    CHECK(fit.sigma2 == doctest::Approx(s2).epsilon(1e-6));
  }

  TEST_CASE("degenerate weights carry the group index") {
    const std::vector<double> y{1.0, 1.0, 1.0};
    try {
      weighted_mle(ComponentFamily::UnivariateNormal, univariate(y), Eigen::Vector3d::Ones(), 4);
      FAIL("expected DegenerateComponentError");
    } catch (const DegenerateComponentError& e) {
      CHECK(e.group() == 4);
    }
    const std::vector<double> z{1.0, 2.0, 3.0};
    CHECK_THROWS_AS(weighted_mle(ComponentFamily::UnivariateNormal, univariate(z),
                                 Eigen::Vector3d(0.0, 1.0, 0.0), 1),
                    DegenerateComponentError);
    CHECK_THROWS_AS(weighted_mle(ComponentFamily::Poisson, univariate(z), Eigen::Vector3d::Zero()),
                    DegenerateComponentError);
  }

  TEST_CASE("sampling") {
    Rng a(11), b(11);
    CHECK(sample(UnivariateNormal{0, 1}, 0, a).cols() == 0);
    const Observations x = sample(UnivariateNormal{0, 1}, 100000, a);
    CHECK(std::abs(x.mean()) < 4.0 / std::sqrt(1e5));
    Rng c(11);
    sample(UnivariateNormal{0, 1}, 0, c);
    const Observations y = sample(UnivariateNormal{0, 1}, 100000, c);
    CHECK(x == y);
    CHECK_THROWS_AS(sample(MultivariateNormal{Eigen::Vector2d::Zero(),
                                              Eigen::Matrix2d{{1.0, 3.0}, {3.0, 1.0}}},
                           5, b),
                    DecompositionError);
  }

  TEST_CASE("densities normalize on a truncated grid") {
    Rng rng(5);
    std::uniform_real_distribution<double> u(0.3, 3.0);
    for (int rep = 0; rep < 5; ++rep) {
      const double mu = u(rng) - 1.5, s2 = u(rng), lambda = 4.0 * u(rng), mean = u(rng);
      {
        const double sd = std::sqrt(s2), h = sd / 200.0;
        double total = 0.0;
        for (double y = mu - 12 * sd; y <= mu + 12 * sd; y += h) {
          total += std::exp(log_density(UnivariateNormal{mu, s2}, obs1(y))) * h;
        }
        CHECK(std::abs(total - 1.0) < 1e-3);
      }
      {
        double total = 0.0;
        for (int k = 0; k < 200; ++k) total += std::exp(log_density(Poisson{lambda}, obs1(k)));
        CHECK(std::abs(total - 1.0) < 1e-3);
      }
      {
        const double h = mean / 2000.0;
        double total = 0.0;
        for (double y = 0.5 * h; y < 60.0 * mean; y += h) {
          total += std::exp(log_density(Exponential{mean}, obs1(y))) * h;
        }
        CHECK(std::abs(total - 1.0) < 1e-3);
      }
      {
        MultivariateNormal p{Eigen::Vector2d(mu, -mu), Eigen::Matrix2d{{s2, 0.3}, {0.3, 1.0}}};
        if (s2 * 1.0 - 0.09 <= 0.05) continue;
        const double h = 0.05;
        double total = 0.0;
        for (double a = p.mu(0) - 10 * std::sqrt(s2); a <= p.mu(0) + 10 * std::sqrt(s2); a += h) {
          for (double b = p.mu(1) - 10; b <= p.mu(1) + 10; b += h) {
            total += std::exp(log_density(p, Eigen::Vector2d(a, b))) * h * h;
          }
        }
        CHECK(std::abs(total - 1.0) < 1e-3);
      }
    }
  }

  TEST_CASE("weighted MLE is a local maximum") {
    Rng rng(17);
    const Observations y = testing::normal_draws(200, 0.5, 1.3, rng);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Eigen::VectorXd w(200);
    for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = u(rng);
    const auto fit = std::get<UnivariateNormal>(weighted_mle(ComponentFamily::UnivariateNormal, y, w));
    const double best = weighted_loglik(fit, y, w);
    std::normal_distribution<double> step(0.0, 1e-2);
    int worse = 0;
    for (int k = 0; k < 100; ++k) {
      const UnivariateNormal q{fit.mu + step(rng), fit.sigma2 + step(rng)};
      worse += weighted_loglik(q, y, w) <= best;
    }
    CHECK(worse == 100);

    // Same property for the multivariate family.
    Observations x(2, 300);
    std::normal_distribution<double> z(0.0, 1.0);
    for (Eigen::Index i = 0; i < x.cols(); ++i) x.col(i) << z(rng), 0.5 * x(0, i) + z(rng);
    Eigen::VectorXd v = Eigen::VectorXd::Ones(300);
    const auto mv = std::get<MultivariateNormal>(weighted_mle(ComponentFamily::MultivariateNormal, x, v));
    const double top = weighted_loglik(mv, x, v);
    worse = 0;
    for (int k = 0; k < 100; ++k) {
      MultivariateNormal q = mv;
      q.mu += Eigen::Vector2d(step(rng), step(rng));
      const double off = step(rng);
      q.sigma(0, 0) += step(rng);
      q.sigma(1, 1) += step(rng);
      q.sigma(0, 1) += off;
      q.sigma(1, 0) += off;
      worse += weighted_loglik(q, x, v) <= top;
    }
    CHECK(worse == 100);
  }

  TEST_CASE("weighted MLE ignores a common rescaling of the weights") {
    Rng rng(23);
    const Observations y = testing::normal_draws(100, 3.0, 1.0, rng);
    Eigen::VectorXd w = Eigen::VectorXd::LinSpaced(100, 0.1, 2.0);
    for (const double c : {1e-3, 0.5, 7.0, 1e4}) {
      const auto a = std::get<UnivariateNormal>(weighted_mle(ComponentFamily::UnivariateNormal, y, w));
      const auto b =
          std::get<UnivariateNormal>(weighted_mle(ComponentFamily::UnivariateNormal, y, c * w));
      CHECK(a.mu == doctest::Approx(b.mu).epsilon(1e-12));
      CHECK(a.sigma2 == doctest::Approx(b.sigma2).epsilon(1e-12));
      const auto e = std::get<Exponential>(weighted_mle(ComponentFamily::Exponential, y.cwiseAbs(), w));
      const auto f =
          std::get<Exponential>(weighted_mle(ComponentFamily::Exponential, y.cwiseAbs(), c * w));
      CHECK(e.mean == doctest::Approx(f.mean).epsilon(1e-12));
    }
  }

  TEST_CASE("sample then fit recovers parameters within five standard errors") {
    const std::size_t n = 100000;
    const double rn = std::sqrt(static_cast<double>(n));
    Rng rng(29);
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(n));
    {
      const auto f = std::get<UnivariateNormal>(
          weighted_mle(ComponentFamily::UnivariateNormal, sample(UnivariateNormal{1.5, 4.0}, n, rng), ones));
      CHECK(std::abs(f.mu - 1.5) < 5.0 * 2.0 / rn);
      CHECK(std::abs(f.sigma2 - 4.0) < 5.0 * std::sqrt(2.0) * 4.0 / rn);
    }
    {
      const auto f = std::get<Poisson>(weighted_mle(ComponentFamily::Poisson, sample(Poisson{3.0}, n, rng), ones));
      CHECK(std::abs(f.lambda - 3.0) < 5.0 * std::sqrt(3.0) / rn);
    }
    {
      const auto f =
          std::get<Exponential>(weighted_mle(ComponentFamily::Exponential, sample(Exponential{2.0}, n, rng), ones));
      CHECK(std::abs(f.mean - 2.0) < 5.0 * 2.0 / rn);
    }
    {
      MultivariateNormal truth{Eigen::Vector2d(1.0, -2.0), Eigen::Matrix2d{{2.0, 0.6}, {0.6, 1.0}}};
      const auto f = std::get<MultivariateNormal>(
          weighted_mle(ComponentFamily::MultivariateNormal, sample(truth, n, rng), ones));
      for (int j = 0; j < 2; ++j) {
        CHECK(std::abs(f.mu(j) - truth.mu(j)) < 5.0 * std::sqrt(truth.sigma(j, j)) / rn);
        for (int k = 0; k < 2; ++k) {
          const double se = std::sqrt(truth.sigma(j, k) * truth.sigma(j, k) +
                                      truth.sigma(j, j) * truth.sigma(k, k)) / rn;
          CHECK(std::abs(f.sigma(j, k) - truth.sigma(j, k)) < 5.0 * se);
        }
      }
    }
  }

  TEST_CASE("mixture validation") {
    MixtureModel m = testing::normal_mixture({{0, 1}, {1, 1}}, {0.5, 0.5});
    CHECK(validate_model(m).empty());
    m.components[1] = m.components[0];
    CHECK(validate_model(m).size() == 1);  // identical components warn only
    m.weights << 0.6, 0.6;
    CHECK_THROWS_AS(validate_model(m), DomainError);
    m.weights << 1.0, 0.0;
    CHECK_THROWS_AS(validate_model(m), DomainError);
    m.components[1] = Poisson{1.0};
    m.weights << 0.5, 0.5;
    CHECK_THROWS_AS(validate_model(m), DomainError);
  }
}
