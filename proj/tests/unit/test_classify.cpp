#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "helpers.hpp"
#include "mixfit/classify.hpp"
#include "mixfit/errors.hpp"

using namespace mixfit;

namespace {

const ClassifierSpec kJoint{DiscriminantRule::JointDensity, FeatureSource::Outcome};
const ClassifierSpec kEuclid{DiscriminantRule::Euclidean, FeatureSource::Outcome};
const ClassifierSpec kMahal{DiscriminantRule::Mahalanobis, FeatureSource::Outcome};

// Rate from Eq.-style counting over every permutation, written independently.
double brute_force_rate(const std::vector<std::size_t>& est, const std::vector<std::size_t>& truth,
                        std::size_t g) {
  std::vector<std::size_t> perm(g);
  std::iota(perm.begin(), perm.end(), 0);
  double best = 1e300;
  do {
    double wrong = 0.0;
    for (std::size_t i = 0; i < est.size(); ++i) wrong += perm[est[i]] != truth[i] ? 2.0 : 0.0;
    best = std::min(best, wrong / (2.0 * static_cast<double>(est.size())));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

double assignment_cost(const Eigen::MatrixXd& c, const std::vector<std::size_t>& perm) {
  double s = 0.0;
  for (std::size_t r = 0; r < perm.size(); ++r) s += c(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(perm[r]));
  return s;
}

}  // namespace

TEST_SUITE("classify") {
  TEST_CASE("discriminants at documented points") {
    MultivariateNormal id{Eigen::Vector2d(1.0, 2.0), Eigen::Matrix2d::Identity()};
    CHECK(discriminant(kMahal, id.mu, id) == 0.0);

    MultivariateNormal s{Eigen::Vector2d::Zero(), Eigen::Matrix2d{{2.0, 1.0}, {1.0, 2.0}}};
    // Hand inverse: adj / det with det = 3.
    Eigen::Matrix2d inv{{2.0 / 3.0, -1.0 / 3.0}, {-1.0 / 3.0, 2.0 / 3.0}};
    const Eigen::Vector2d d(1.0, 1.0);
    CHECK(d.dot(inv * d) == doctest::Approx(2.0 / 3.0));
    CHECK(discriminant(kMahal, d, s) == doctest::Approx(-2.0 / 3.0).epsilon(1e-14));

    MultivariateNormal origin{Eigen::Vector2d::Zero(), Eigen::Matrix2d::Identity()};
    CHECK(discriminant(kEuclid, Eigen::Vector2d(3.0, 4.0), origin) == -25.0);

    CHECK(discriminant(kJoint, Eigen::VectorXd::Constant(1, 0.5), UnivariateNormal{0.0, 2.0}) ==
          doctest::Approx(testing::normal_logpdf(0.5, 0.0, 2.0)));
    MultivariateNormal singular{Eigen::Vector2d::Zero(), Eigen::Matrix2d{{1.0, 1.0}, {1.0, 1.0}}};
    CHECK_THROWS_AS(discriminant(kMahal, d, singular), DecompositionError);
  }

  TEST_CASE("hard classification examples") {
    const std::vector<double> y{-5.0, 5.0, 0.1};
    const Observations data = univariate(y);
    MixtureModel one = testing::normal_mixture({{0, 1}}, {1.0});
    for (auto l : classify_hard(kJoint, data, one).labels()) CHECK(l == 0);

    MixtureModel two = testing::normal_mixture({{-5, 1}, {5, 1}}, {0.5, 0.5});
    for (const auto& spec : {kJoint, kEuclid, kMahal}) {
      const auto labels = classify_hard(spec, data, two).labels();
      CHECK(labels[0] == 0);
      CHECK(labels[1] == 1);
    }
    MixtureModel same = testing::normal_mixture({{1, 2}, {1, 2}}, {0.5, 0.5});
    for (const auto& spec : {kJoint, kEuclid, kMahal}) {
      for (auto l : classify_hard(spec, data, same).labels()) CHECK(l == 0);
    }
  }

  TEST_CASE("argmax is invariant to increasing transforms of the discriminants") {
    Rng rng(41);
    std::normal_distribution<double> z(0.0, 3.0);
    Eigen::MatrixXd s(200, 4);
    for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = z(rng);
    s(7, 2) = s(7, 1);  // a tie
    const auto a = argmax_assignment(s).labels();
    const auto b = argmax_assignment((s.array() * 0.25 + 9.0).matrix()).labels();
    const auto c = argmax_assignment(s.unaryExpr([](double v) { return std::atan(v); })).labels();
    CHECK(a == b);
    CHECK(a == c);
  }

  TEST_CASE("mahalanobis with identity covariances equals euclidean") {
    Rng rng(43);
    std::normal_distribution<double> z(0.0, 1.0);
    for (int rep = 0; rep < 20; ++rep) {
      MixtureModel m;
      for (int g = 0; g < 3; ++g) {
        m.components.emplace_back(MultivariateNormal{Eigen::Vector3d(z(rng), z(rng), z(rng)),
                                                     Eigen::Matrix3d::Identity()});
      }
      m.weights = Eigen::Vector3d::Constant(1.0 / 3.0);
      Observations x(3, 100);
      for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = 1.5 * z(rng);
      CHECK(classify_hard(kMahal, x, m).labels() == classify_hard(kEuclid, x, m).labels());
    }
  }

  TEST_CASE("misclassification rate examples") {
    const std::vector<std::size_t> truth{0, 0, 1, 1};
    auto t = Assignment::hard(truth, 2);
    auto same = misclassification_rate(t, t);
    CHECK(same.rate == 0.0);
    CHECK(same.permutation == std::vector<std::size_t>{0, 1});

    const std::vector<std::size_t> swapped{1, 1, 0, 0};
    auto sw = misclassification_rate(Assignment::hard(swapped, 2), t);
    CHECK(sw.rate == 0.0);
    CHECK(sw.permutation == std::vector<std::size_t>{1, 0});

    const std::vector<std::size_t> est{0, 0, 1, 0};
    CHECK(misclassification_rate(Assignment::hard(est, 2), t).rate == doctest::Approx(0.25));

    const std::vector<std::size_t> short_labels{0, 1};
    CHECK_THROWS_AS(misclassification_rate(Assignment::hard(short_labels, 2), t), DimensionError);
  }

  TEST_CASE("misclassification rate agrees with brute force and is symmetric") {
    Rng rng(47);
    for (std::size_t g = 2; g <= 5; ++g) {
      std::uniform_int_distribution<std::size_t> lab(0, g - 1);
      for (int rep = 0; rep < 30; ++rep) {
        std::vector<std::size_t> a(40), b(40);
        for (auto& v : a) v = lab(rng);
        for (auto& v : b) v = lab(rng);
        const auto ha = Assignment::hard(a, g), hb = Assignment::hard(b, g);
        const double rate = misclassification_rate(ha, hb).rate;
        CHECK(rate == doctest::Approx(brute_force_rate(a, b, g)));
        CHECK(rate == doctest::Approx(misclassification_rate(hb, ha).rate));
        // Relabel one argument by a random permutation.
        std::vector<std::size_t> perm(g);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<std::size_t> pa(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) pa[i] = perm[a[i]];
        CHECK(rate == doctest::Approx(misclassification_rate(Assignment::hard(pa, g), hb).rate));
      }
    }
  }

  TEST_CASE("hungarian matching attains the brute-force optimum") {
    Rng rng(53);
    std::uniform_real_distribution<double> u(0.0, 10.0);
    for (std::size_t g = 1; g <= 7; ++g) {
      for (int rep = 0; rep < 10; ++rep) {
        Eigen::MatrixXd c(g, g);
        for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = std::floor(u(rng));
        std::vector<std::size_t> perm(g);
        std::iota(perm.begin(), perm.end(), 0);
        double best = 1e300;
        do {
          best = std::min(best, assignment_cost(c, perm));
        } while (std::next_permutation(perm.begin(), perm.end()));
        const auto h = hungarian_min_cost(c);
        CHECK(assignment_cost(c, h) == doctest::Approx(best));
        auto sorted = h;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t k = 0; k < g; ++k) CHECK(sorted[k] == k);
      }
    }
  }

  TEST_CASE("large G uses the assignment solver and recovers a relabeling") {
    const std::size_t g = 11;
    Rng rng(59);
    std::vector<std::size_t> truth(500), perm(g);
    std::uniform_int_distribution<std::size_t> lab(0, g - 1);
    for (auto& v : truth) v = lab(rng);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::size_t> est(truth.size());
    for (std::size_t i = 0; i < truth.size(); ++i) est[i] = perm[truth[i]];
    est[0] = (est[0] + 1) % g;
    const auto m = misclassification_rate(Assignment::hard(est, g), Assignment::hard(truth, g));
    CHECK(m.rate == doctest::Approx(1.0 / 500.0));
    for (std::size_t k = 0; k < g; ++k) CHECK(m.permutation[perm[k]] == k);
  }

  TEST_CASE("uniform error estimate at the extremes") {
    ClassificationDgp far;
    far.kind = ClassificationDgp::Kind::Fixed;
    far.fixed = {MultivariateNormal{Eigen::Vector2d(0.0, 0.0), Eigen::Matrix2d::Identity()},
                 MultivariateNormal{Eigen::Vector2d(1e6, 0.0), Eigen::Matrix2d::Identity()}};
    Rng rng(61);
    CHECK(uniform_error_estimate(kMahal, far, 2, 50, 20, rng).uniform_error == 0.0);

    ClassificationDgp same = far;
    same.fixed[1] = same.fixed[0];
    CHECK(uniform_error_estimate(kEuclid, same, 2, 50, 20, rng).uniform_error == 1.0);
  }

  TEST_CASE("random covariances are positive definite") {
    Rng rng(67);
    for (int k = 0; k < 10000; ++k) {
      const Eigen::MatrixXd s = random_unit_upper_covariance(1 + static_cast<std::size_t>(k % 6), rng);
      CHECK_NOTHROW(SpdFactor{s});
    }
  }

  TEST_CASE("squared euclidean distance to a foreign mean matches its closed form") {
    Rng rng(71);
    std::normal_distribution<double> z(0.0, 1.0);
    for (std::size_t p : {2, 5}) {
      MultivariateNormal own{Eigen::VectorXd(p), random_unit_upper_covariance(p, rng)};
      for (auto& v : own.mu) v = z(rng);
      Eigen::VectorXd other(p);
      for (auto& v : other) v = z(rng);
      const int n = 50000;
      const Observations x = sample(own, n, rng);
      const Eigen::VectorXd d = (x.colwise() - other).colwise().squaredNorm().transpose();
      const double mean = d.mean();
      const double se = std::sqrt((d.array() - mean).square().sum() / (n - 1) / n);
      // Independent oracle: E||x - m||^2 = tr(S) + ||mu - m||^2.
      const double oracle = own.sigma.trace() + (own.mu - other).squaredNorm();
      CHECK(expected_sq_euclidean(own, other) == doctest::Approx(oracle));
      CHECK(std::abs(mean - oracle) < 3.0 * se);
    }
  }

  TEST_CASE("squared mahalanobis distance moments") {
    Rng rng(73);
    std::normal_distribution<double> z(0.0, 1.0);
    for (std::size_t p : {2, 5}) {
      MultivariateNormal own{Eigen::VectorXd(p), random_unit_upper_covariance(p, rng)};
      MultivariateNormal other{Eigen::VectorXd(p), random_unit_upper_covariance(p, rng)};
      for (auto& v : own.mu) v = z(rng);
      for (auto& v : other.mu) v = z(rng);
      // Trace formula: tr(S_j^-1 S_g) + (mu_g - mu_j)' S_j^-1 (mu_g - mu_j).
      const Eigen::MatrixXd inv = other.sigma.inverse();
      const Eigen::VectorXd a = own.mu - other.mu;
      const double oracle = (inv * own.sigma).trace() + a.dot(inv * a);
      CHECK(expected_sq_mahalanobis(own, other) == doctest::Approx(oracle).epsilon(1e-10));
      CHECK(expected_sq_mahalanobis(own, own) == doctest::Approx(static_cast<double>(p)));

      const int n = 50000;
      const Observations x = sample(own, n, rng);
      const SpdFactor fo(own.sigma), fj(other.sigma);
      Eigen::VectorXd self(n), cross(n);
      for (int i = 0; i < n; ++i) {
        self(i) = fo.squared_mahalanobis(x.col(i) - own.mu);
        cross(i) = fj.squared_mahalanobis(x.col(i) - other.mu);
      }
      for (const auto& [v, target] : {std::pair{self, static_cast<double>(p)}, std::pair{cross, oracle}}) {
        const double mean = v.mean();
        const double se = std::sqrt((v.array() - mean).square().sum() / (n - 1) / n);
        CHECK(std::abs(mean - target) < 3.0 * se);
      }
    }
  }

  TEST_CASE("generalized markov bound on exhaustive finite grids") {
    Rng rng(79);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> size(2, 30);
    for (int rep = 0; rep < 300; ++rep) {
      const int k = size(rng);
      std::vector<double> f(k), g(k), m(k);
      for (int i = 0; i < k; ++i) {
        f[i] = u(rng) * (rep % 3 == 0 ? 0.1 : 2.0);
        g[i] = u(rng) * 3.0 + (i == 0 ? 0.01 : 0.0);
        m[i] = u(rng);
      }
      double total = 0, ef = 0, eg = 0, eg2 = 0, prob = 0;
      for (int i = 0; i < k; ++i) {
        total += m[i];
        ef += m[i] * f[i];
        eg += m[i] * g[i];
        eg2 += m[i] * g[i] * g[i];
        prob += f[i] >= g[i] ? m[i] : 0.0;
      }
      ef /= total, eg /= total, eg2 /= total, prob /= total;
      const double bound = (ef + 0.5 * std::sqrt(std::max(0.0, eg2 - eg * eg))) / eg;
      const auto r = generalized_markov_bound(f, g, m);
      CHECK(r.probability == doctest::Approx(prob));
      CHECK(r.bound == doctest::Approx(bound));
      CHECK(prob <= bound);
      CHECK(r.holds);
    }
  }
}
