#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <random>

#include "circuitlab/stats.hpp"
#include "doctest.h"

using namespace circuitlab;
using namespace circuitlab::stats;

namespace {

// independent oracle: enumerate every size-Kb subset by bitmask and count
// intersections with the fixed top-Ka set {0..Ka-1}
double hypergeom_tail_enumerated(int N, int Ka, int Kb, int k) {
  const uint32_t a_mask = (Ka == 32) ? 0xffffffffu : ((1u << Ka) - 1u);
  uint64_t total = 0, at_least = 0;
  for (uint32_t m = 0; m < (1u << N); ++m) {
    if (std::popcount(m) != Kb) continue;
    ++total;
    if (std::popcount(m & a_mask) >= k) ++at_least;
  }
  return double(at_least) / double(total);
}

// independent oracle: O(n^2) pairwise comparison count
double auroc_pairwise(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0;
  long pairs = 0;
  for (size_t i = 0; i < s.size(); ++i)
    for (size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      ++pairs;
      if (s[i] > s[j])
        wins += 1.0;
      else if (s[i] == s[j])
        wins += 0.5;
    }
  return wins / double(pairs);
}

}  // namespace

TEST_SUITE_BEGIN("stats");

TEST_CASE("hypergeometric tail matches exhaustive enumeration for all N <= 12") {
  for (int N = 1; N <= 12; ++N)
    for (int Ka = 0; Ka <= N; ++Ka)
      for (int Kb = 0; Kb <= N; ++Kb)
        for (int k = 0; k <= std::min(Ka, Kb) + 1; ++k) {
          const double expect = hypergeom_tail_enumerated(N, Ka, Kb, k);
          const double got = hypergeom_tail(N, Ka, Kb, k);
          if (expect == 0.0)
            CHECK(got == 0.0);
          else
            CHECK(got == doctest::Approx(expect).epsilon(1e-12));
        }
}

TEST_CASE("hypergeometric tail reference values") {
  // frozen against an independent implementation
  CHECK(hypergeom_tail(8, 3, 3, 3) == doctest::Approx(1.7857142857142856e-02).epsilon(1e-12));
  CHECK(hypergeom_tail(64, 8, 8, 5) == doctest::Approx(3.6055792482085148e-04).epsilon(1e-10));
  CHECK(hypergeom_tail(1000, 31, 31, 4) == doctest::Approx(1.3240130482819770e-02).epsilon(1e-10));
  CHECK(hypergeom_tail(25, 5, 5, 5) == doctest::Approx(1.8821757952192734e-05).epsilon(1e-10));
  CHECK(hypergeom_tail(208, 15, 15, 13) == doctest::Approx(7.2398267086838545e-17).epsilon(1e-9));
  // k = 1 with K = 2 of N = 4: 1 - C(2,2)/C(4,2) = 5/6
  CHECK(hypergeom_tail(4, 2, 2, 1) == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
  // tail at k <= support minimum is exactly 1
  CHECK(hypergeom_tail(10, 7, 8, 5) == 1.0);
  CHECK(log_hypergeom_tail(10, 7, 8, 5) == 0.0);
  // k above support is impossible
  CHECK(hypergeom_tail(10, 3, 3, 4) == 0.0);
  CHECK(std::isinf(log_hypergeom_tail(10, 3, 3, 4)));
  CHECK_THROWS_AS((void)hypergeom_tail(5, 6, 2, 1), Error);
}

TEST_CASE("log-space tail survives scales where factorials overflow") {
  const double lp = log_hypergeom_tail(65536, 100, 100, 100);
  CHECK(std::isfinite(lp));
  CHECK(lp < -500.0);  // astronomically small but representable in log space
}

TEST_CASE("wilson interval") {
  const Ci ci = wilson_ci(41, 100);
  CHECK(ci.lower == doctest::Approx(0.318673130211365).epsilon(1e-9));
  CHECK(ci.upper == doctest::Approx(0.507985699465892).epsilon(1e-9));
  // rounded to 2 decimals: [0.32, 0.51]
  CHECK(std::round(ci.lower * 100) / 100 == doctest::Approx(0.32));
  CHECK(std::round(ci.upper * 100) / 100 == doctest::Approx(0.51));

  const Ci zero = wilson_ci(0, 10);
  CHECK(zero.lower == 0.0);
  CHECK(zero.upper > 0.0);
  CHECK(zero.upper < 1.0);
  const Ci full = wilson_ci(10, 10);
  CHECK(full.upper == 1.0);
  CHECK(full.lower > 0.0);
  CHECK_THROWS_AS((void)wilson_ci(1, 0), Error);
  CHECK_THROWS_AS((void)wilson_ci(5, 4), Error);
}

TEST_CASE("benjamini-hochberg step-up") {
  SUBCASE("hand-computed case") {
    const auto q = bh_adjust({0.01, 0.04, 0.03, 0.002});
    REQUIRE(q.size() == 4);
    CHECK(q[0] == doctest::Approx(0.02).epsilon(1e-12));
    CHECK(q[1] == doctest::Approx(0.04).epsilon(1e-12));
    CHECK(q[2] == doctest::Approx(0.04).epsilon(1e-12));
    CHECK(q[3] == doctest::Approx(0.008).epsilon(1e-12));
  }
  SUBCASE("all-equal p values stay unchanged") {
    const auto q = bh_adjust(std::vector<double>(10, 0.02));
    for (double v : q) CHECK(v == doctest::Approx(0.02).epsilon(1e-12));
  }
  SUBCASE("never decreases any p and preserves order") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int rep = 0; rep < 50; ++rep) {
      std::vector<double> p(20);
      for (auto& v : p) v = u(rng);
      const auto q = bh_adjust(p);
      for (size_t i = 0; i < p.size(); ++i) {
        CHECK(q[i] >= p[i]);
        CHECK(q[i] <= 1.0);
        for (size_t j = 0; j < p.size(); ++j)
          if (p[i] <= p[j]) CHECK(q[i] <= q[j] + 1e-15);
      }
    }
  }
  SUBCASE("empty input") { CHECK(bh_adjust({}).empty()); }
}

TEST_CASE("permutation p-value uses the add-one rule") {
  std::vector<double> null_draws(99, 0.0);
  CHECK(permutation_pvalue(1.0, null_draws) == doctest::Approx(0.01));
  CHECK(permutation_pvalue(-1.0, null_draws) == doctest::Approx(1.0));
  // ties count toward the tail
  CHECK(permutation_pvalue(0.0, null_draws) == doctest::Approx(1.0));
  CHECK_THROWS_AS((void)permutation_pvalue(0.0, {}), Error);
}

TEST_CASE("rank correlation") {
  SUBCASE("three-point case") {
    const auto r = rank_corr({1, 2, 3}, {3, 5, 4});
    CHECK(r.spearman == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(r.spearman_defined);
  }
  SUBCASE("reference values with ties") {
    const std::vector<double> x = {3.1, -1.2, 0.5, 7.8, 2.2, 2.2, -0.4, 5.5, 1.0, 9.9, -3.3, 4.4};
    const std::vector<double> y = {1.0, 0.2, 0.9, 6.1, 3.3, 2.1, 0.1, 4.0, 1.5, 8.8, -2.0, 2.9};
    const auto r = rank_corr(x, y);
    CHECK(r.spearman == doctest::Approx(0.931700202890001).epsilon(1e-9));
    CHECK(r.pearson == doctest::Approx(0.961404549315686).epsilon(1e-9));
    REQUIRE(r.spearman_p.has_value());
    REQUIRE(r.pearson_p.has_value());
    CHECK(*r.spearman_p == doctest::Approx(0.000010429359329).epsilon(1e-4));
    CHECK(*r.pearson_p == doctest::Approx(0.000000632102768).epsilon(1e-4));
  }
  SUBCASE("perfect monotone map") {
    const auto r = rank_corr({1, 2, 3, 4, 5}, {10, 20, 30, 40, 50});
    CHECK(r.spearman == doctest::Approx(1.0));
    CHECK(r.spearman_p.has_value());
    CHECK(*r.spearman_p == 0.0);
  }
  SUBCASE("constant input is flagged undefined") {
    const auto r = rank_corr({1, 1, 1, 1}, {1, 2, 3, 4});
    CHECK_FALSE(r.spearman_defined);
    CHECK_FALSE(r.pearson_defined);
    CHECK_FALSE(r.spearman_p.has_value());
  }
  CHECK_THROWS_AS((void)rank_corr({1, 2}, {1, 2, 3}), Error);
}

TEST_CASE("auroc matches pairwise oracle on random score sets") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> coin(0, 1);
  std::uniform_int_distribution<int> quant(0, 9);
  for (int rep = 0; rep < 100; ++rep) {
    const int n = 10 + int(rng() % 40);
    std::vector<double> s(n);
    std::vector<int> y(n);
    int n_pos = 0;
    for (int i = 0; i < n; ++i) {
      // coarse quantisation forces plenty of ties
      s[size_t(i)] = quant(rng) / 10.0;
      y[size_t(i)] = coin(rng);
      n_pos += y[size_t(i)];
    }
    if (n_pos == 0) y[0] = 1;
    if (n_pos == n) y[0] = 0;
    CHECK(auroc(s, y) == doctest::Approx(auroc_pairwise(s, y)).epsilon(1e-12));
  }
  (void)u;
}

TEST_CASE("auroc endpoints and errors") {
  CHECK(auroc({0.9, 0.8, 0.3, 0.2}, {1, 1, 0, 0}) == doctest::Approx(1.0));
  CHECK(auroc({0.1, 0.2, 0.8, 0.9}, {1, 1, 0, 0}) == doctest::Approx(0.0));
  CHECK(auroc({0.5, 0.5, 0.5, 0.5}, {1, 1, 0, 0}) == doctest::Approx(0.5));
  CHECK_THROWS_AS((void)auroc({0.5, 0.5}, {1, 1}), Error);
}

TEST_CASE("hanley-mcneil interval") {
  const Ci perfect = hanley_mcneil_ci(1.0, 50, 50);
  CHECK(perfect.lower == doctest::Approx(1.0));
  CHECK(perfect.upper == 1.0);
  const Ci mid = hanley_mcneil_ci(0.8, 100, 100);
  CHECK(mid.lower > 0.7);
  CHECK(mid.upper < 0.9);
  CHECK(mid.lower < 0.8);
  CHECK(mid.upper > 0.8);
  // more data shrinks the interval
  const Ci big = hanley_mcneil_ci(0.8, 1000, 1000);
  CHECK(big.upper - big.lower < mid.upper - mid.lower);
}

TEST_CASE("logistic regression reaches the regularised optimum") {
  Eigen::MatrixXd X(8, 2);
  X << 0.5, 1.2, 1.1, -0.3, 2.0, 0.8, 1.4, 1.9, -0.7, -1.1, -1.3, 0.4, -2.2, -0.6, -0.9, -1.8;
  const std::vector<int> y = {1, 1, 1, 1, 0, 0, 0, 0};
  const auto fit = fit_logistic(X, y, 1.0);
  CHECK(fit.converged);
  CHECK(fit.grad_norm <= 1e-8);
  // frozen independently-optimised solution (lambda = 1, bias unpenalised)
  CHECK(fit.w(0) == doctest::Approx(1.172510879278).epsilon(1e-6));
  CHECK(fit.w(1) == doctest::Approx(0.637268620015).epsilon(1e-6));
  CHECK(fit.b == doctest::Approx(0.019166496579).epsilon(1e-5));

  // independent KKT check with gradient recomputed here
  Eigen::VectorXd z = X * fit.w;
  z.array() += fit.b;
  Eigen::VectorXd g = Eigen::VectorXd::Zero(2);
  double gb = 0.0;
  for (int i = 0; i < 8; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-z(i)));
    g += (p - double(y[size_t(i)])) * X.row(i).transpose();
    gb += p - double(y[size_t(i)]);
  }
  g += fit.w;  // lambda = 1
  CHECK(g.lpNorm<Eigen::Infinity>() <= 1e-7);
  CHECK(std::abs(gb) <= 1e-7);
}

TEST_CASE("logistic regression stays finite on separable data and rejects single-class input") {
  Eigen::MatrixXd X(6, 1);
  X << -3, -2, -1, 1, 2, 3;
  const auto fit = fit_logistic(X, {0, 0, 0, 1, 1, 1}, 1.0);
  CHECK(std::isfinite(fit.w(0)));
  CHECK(fit.w(0) > 0.0);
  CHECK(fit.converged);
  CHECK_THROWS_AS((void)fit_logistic(X, {1, 1, 1, 1, 1, 1}, 1.0), Error);
}

TEST_CASE("probe kfold reports fold spread and is seed-deterministic") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 1.0);
  const int n = 60;
  Eigen::MatrixXd X(n, 3);
  std::vector<int> y(n);
  for (int i = 0; i < n; ++i) {
    y[size_t(i)] = i % 2;
    const double mu = y[size_t(i)] == 1 ? 1.5 : -1.5;
    for (int j = 0; j < 3; ++j) X(i, j) = g(rng) + (j == 0 ? mu : 0.0);
  }
  const auto a = probe_kfold(X, y, 5, 1.0, 42);
  const auto b = probe_kfold(X, y, 5, 1.0, 42);
  CHECK(a.ci_method == "fold_spread");
  CHECK(a.fold_aurocs.size() == 5);
  CHECK(a.auroc_point == b.auroc_point);
  CHECK(a.ci.lower == b.ci.lower);
  CHECK(a.auroc_point > 0.8);
  CHECK(a.ci.lower <= a.auroc_point);
  CHECK(a.ci.upper >= a.auroc_point);
  const auto c = probe_kfold(X, y, 5, 1.0, 43);
  CHECK(c.auroc_point > 0.8);  // different split, same signal
}

TEST_CASE("probe holdout uses hanley-mcneil") {
  Eigen::MatrixXd xtr(8, 1), xte(6, 1);
  xtr << -3, -2.5, -2, -1.5, 1.5, 2, 2.5, 3;
  xte << -2.2, -1.8, -1.2, 1.2, 1.8, 2.2;
  const auto rep = probe_holdout(xtr, {0, 0, 0, 0, 1, 1, 1, 1}, xte, {0, 0, 0, 1, 1, 1});
  CHECK(rep.ci_method == "hanley_mcneil");
  CHECK(rep.auroc_point == doctest::Approx(1.0));
  CHECK(rep.n_pos_eval == 3);
  CHECK(rep.n_neg_eval == 3);
}

TEST_CASE("equivalence verdicts") {
  SUBCASE("identical tight estimates are equivalent") {
    const auto r = equivalence_test(0.90, {0.89, 0.91}, 0.905, {0.895, 0.915}, 0.05);
    CHECK(r.verdict == EquivalenceVerdict::equivalent);
    CHECK(r.delta_ci_method == "variance_addition");
  }
  SUBCASE("clearly separated estimates are different") {
    const auto r = equivalence_test(0.95, {0.94, 0.96}, 0.70, {0.69, 0.71}, 0.05);
    CHECK(r.verdict == EquivalenceVerdict::different);
  }
  SUBCASE("wide intervals show nothing") {
    const auto r = equivalence_test(0.80, {0.60, 1.00}, 0.81, {0.61, 1.00}, 0.05);
    CHECK(r.verdict == EquivalenceVerdict::not_shown);
  }
  SUBCASE("supplied delta CI wins over derivation") {
    const auto r =
        equivalence_test(0.90, {0.70, 1.00}, 0.905, {0.705, 1.00}, 0.05, Ci{-0.01, 0.01});
    CHECK(r.verdict == EquivalenceVerdict::equivalent);
    CHECK(r.delta_ci_method == "supplied");
  }
}

TEST_CASE("mcnemar exact binomial") {
  auto build = [](int n01, int n10, int both) {
    std::vector<int> a, b;
    for (int i = 0; i < n01; ++i) {
      a.push_back(0);
      b.push_back(1);
    }
    for (int i = 0; i < n10; ++i) {
      a.push_back(1);
      b.push_back(0);
    }
    for (int i = 0; i < both; ++i) {
      a.push_back(1);
      b.push_back(1);
    }
    return std::pair{a, b};
  };
  {
    auto [a, b] = build(2, 8, 5);
    const auto r = mcnemar_test(a, b);
    CHECK(r.n01 == 2);
    CHECK(r.n10 == 8);
    // 2 * sum_{i<=2} C(10,i)/2^10 = 2 * 56/1024
    CHECK(r.p == doctest::Approx(0.109375).epsilon(1e-12));
  }
  {
    auto [a, b] = build(5, 5, 0);
    CHECK(mcnemar_test(a, b).p == doctest::Approx(1.0));
  }
  {
    auto [a, b] = build(0, 0, 4);
    CHECK(mcnemar_test(a, b).p == doctest::Approx(1.0));
  }
  CHECK_THROWS_AS((void)mcnemar_test({0, 1}, {0}), Error);
}

TEST_CASE("bootstrap percentile interval") {
  SUBCASE("constant sample collapses to a point") {
    const auto r = bootstrap_mean_ci(std::vector<double>(20, 3.5), 500, 9);
    CHECK(r.point == doctest::Approx(3.5));
    CHECK(r.ci.lower == doctest::Approx(3.5));
    CHECK(r.ci.upper == doctest::Approx(3.5));
    CHECK_FALSE(r.point_outside);
  }
  SUBCASE("same seed reproduces bytes, different seed differs") {
    std::vector<double> v = {1.2, 3.4, -0.5, 2.2, 0.1, 4.4, 2.0, -1.0, 0.3, 1.1};
    const auto a = bootstrap_mean_ci(v, 2000, 5);
    const auto b = bootstrap_mean_ci(v, 2000, 5);
    CHECK(a.ci.lower == b.ci.lower);
    CHECK(a.ci.upper == b.ci.upper);
    const auto c = bootstrap_mean_ci(v, 2000, 6);
    CHECK((c.ci.lower != a.ci.lower || c.ci.upper != a.ci.upper));
  }
  SUBCASE("interval brackets the sample mean for a well-behaved sample") {
    std::mt19937_64 rng(17);
    std::normal_distribution<double> g(2.0, 1.0);
    std::vector<double> v(200);
    for (auto& x : v) x = g(rng);
    const auto r = bootstrap_mean_ci(v, 2000, 21);
    CHECK(r.ci.lower < r.point);
    CHECK(r.ci.upper > r.point);
    CHECK(r.ci.upper - r.ci.lower < 0.5);
  }
  CHECK_THROWS_AS((void)bootstrap_mean_ci({}, 100, 0), Error);
}

TEST_CASE("numeric helpers") {
  CHECK(inverse_normal_cdf(0.975) == doctest::Approx(1.959963984540054).epsilon(1e-8));
  CHECK(inverse_normal_cdf(0.5) == doctest::Approx(0.0));
  CHECK(inverse_normal_cdf(0.025) == doctest::Approx(-1.959963984540054).epsilon(1e-8));
  CHECK_THROWS_AS((void)inverse_normal_cdf(0.0), Error);

  CHECK(student_t_two_sided_p(2.5, 10) == doctest::Approx(0.031446844236609).epsilon(1e-9));
  CHECK(student_t_two_sided_p(0.7, 3) == doctest::Approx(0.534326998304764).epsilon(1e-9));
  CHECK(student_t_two_sided_p(0.0, 5) == doctest::Approx(1.0));

  CHECK(quantile_type7({1, 2, 3, 4}, 0.5) == doctest::Approx(2.5));
  CHECK(quantile_type7({1, 2, 3, 4}, 0.0) == doctest::Approx(1.0));
  CHECK(quantile_type7({1, 2, 3, 4}, 1.0) == doctest::Approx(4.0));
  CHECK(quantile_type7({5}, 0.3) == doctest::Approx(5.0));
}

TEST_SUITE_END();
