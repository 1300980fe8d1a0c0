#include "circuitlab/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace circuitlab::stats {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

double softplus(double z) {
  // log(1 + e^z) without overflow
  if (z > 30.0) return z + std::exp(-z);
  if (z < -30.0) return std::exp(z);
  return std::log1p(std::exp(z));
}

// average ranks, 1-based; ties share the mean of their rank block
std::vector<double> average_ranks(const std::vector<double>& v) {
  const size_t n = v.size();
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    double r = 0.5 * double(i + j) + 1.0;  // mean of ranks i+1 .. j+1
    for (size_t t = i; t <= j; ++t) ranks[idx[t]] = r;
    i = j + 1;
  }
  return ranks;
}

struct PearsonParts {
  double r = 0.0;
  bool defined = false;
};

PearsonParts pearson_of(const std::vector<double>& x, const std::vector<double>& y) {
  const size_t n = x.size();
  double mx = std::accumulate(x.begin(), x.end(), 0.0) / double(n);
  double my = std::accumulate(y.begin(), y.end(), 0.0) / double(n);
  double sxx = 0, syy = 0, sxy = 0;
  for (size_t i = 0; i < n; ++i) {
    double dx = x[i] - mx, dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) return {0.0, false};
  return {sxy / std::sqrt(sxx * syy), true};
}

}  // namespace

double quantile_type7(std::vector<double> v, double q) {
  require(!v.empty(), ErrorKind::degenerate, "quantile of empty vector");
  require(q >= 0.0 && q <= 1.0, ErrorKind::validation, "quantile level outside [0,1]");
  std::sort(v.begin(), v.end());
  const double h = (double(v.size()) - 1.0) * q;
  const size_t lo = size_t(std::floor(h));
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] + (h - double(lo)) * (v[lo + 1] - v[lo]);
}

BootstrapCi bootstrap_ci(const std::vector<double>& values,
                         const std::function<double(const std::vector<double>&)>& statistic,
                         int n_resamples, uint64_t seed, double level) {
  require(!values.empty(), ErrorKind::degenerate, "bootstrap over empty sample");
  require(n_resamples >= 1, ErrorKind::validation, "bootstrap needs >= 1 resample");
  require(level > 0.0 && level < 1.0, ErrorKind::validation, "bootstrap level outside (0,1)");

  BootstrapCi out;
  out.point = statistic(values);
  out.n_resamples = n_resamples;
  out.level = level;

  auto rng = seeded_rng(seed, rng_stream::bootstrap);
  std::uniform_int_distribution<size_t> pick(0, values.size() - 1);
  std::vector<double> resample(values.size());
  std::vector<double> draws;
  draws.reserve(size_t(n_resamples));
  for (int r = 0; r < n_resamples; ++r) {
    for (auto& v : resample) v = values[pick(rng)];
    draws.push_back(statistic(resample));
  }
  const double alpha = 1.0 - level;
  out.ci.lower = quantile_type7(draws, alpha / 2.0);
  out.ci.upper = quantile_type7(draws, 1.0 - alpha / 2.0);
  out.point_outside = out.point < out.ci.lower || out.point > out.ci.upper;
  return out;
}

BootstrapCi bootstrap_mean_ci(const std::vector<double>& values, int n_resamples, uint64_t seed,
                              double level) {
  return bootstrap_ci(
      values,
      [](const std::vector<double>& v) {
        return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
      },
      n_resamples, seed, level);
}

double permutation_pvalue(double observed, const std::vector<double>& null_values) {
  require(!null_values.empty(), ErrorKind::degenerate, "permutation p with empty null");
  size_t ge = 0;
  for (double v : null_values)
    if (v >= observed) ++ge;
  return double(1 + ge) / double(null_values.size() + 1);
}

std::vector<double> bh_adjust(const std::vector<double>& p_values) {
  const size_t m = p_values.size();
  if (m == 0) return {};
  for (double p : p_values)
    require(p >= 0.0 && p <= 1.0, ErrorKind::validation, "p-value outside [0,1]");
  std::vector<size_t> idx(m);
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](size_t a, size_t b) { return p_values[a] < p_values[b]; });
  std::vector<double> q(m);
  double running = 1.0;
  for (size_t r = m; r-- > 0;) {  // largest rank first
    double cand = p_values[idx[r]] * double(m) / double(r + 1);
    running = std::min(running, cand);
    // p * m / rank >= p holds mathematically; max() only wipes float dust
    q[idx[r]] = std::max(std::min(running, 1.0), p_values[idx[r]]);
  }
  return q;
}

Ci wilson_ci(int successes, int n, double level) {
  require(n > 0, ErrorKind::validation, "wilson_ci with n = 0");
  require(successes >= 0 && successes <= n, ErrorKind::validation, "wilson_ci successes outside [0,n]");
  const double z = inverse_normal_cdf(0.5 + level / 2.0);
  const double p = double(successes) / double(n);
  const double z2n = z * z / double(n);
  const double denom = 1.0 + z2n;
  const double center = (p + z2n / 2.0) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / double(n) + z2n / (4.0 * double(n))) / denom;
  return {std::max(0.0, center - half), std::min(1.0, center + half)};
}

RankCorrResult rank_corr(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size(), ErrorKind::validation, "rank_corr length mismatch");
  require(x.size() >= 2, ErrorKind::degenerate, "rank_corr needs >= 2 points");
  RankCorrResult out;
  out.n = int(x.size());

  auto rho = pearson_of(average_ranks(x), average_ranks(y));
  out.spearman = rho.r;
  out.spearman_defined = rho.defined;
  auto r = pearson_of(x, y);
  out.pearson = r.r;
  out.pearson_defined = r.defined;

  auto t_approx_p = [&](double corr) -> std::optional<double> {
    if (out.n < 4) return std::nullopt;
    const double denom = 1.0 - corr * corr;
    if (denom <= 0.0) return 0.0;
    const double t = corr * std::sqrt(double(out.n - 2) / denom);
    return student_t_two_sided_p(t, out.n - 2);
  };
  if (out.spearman_defined) out.spearman_p = t_approx_p(out.spearman);
  if (out.pearson_defined) out.pearson_p = t_approx_p(out.pearson);
  return out;
}

double log_choose(int n, int k) {
  if (k < 0 || k > n) return -kInf;
  return std::lgamma(double(n) + 1.0) - std::lgamma(double(k) + 1.0) -
         std::lgamma(double(n - k) + 1.0);
}

double log_hypergeom_tail(int N, int Ka, int Kb, int k) {
  require(N >= 1, ErrorKind::validation, "hypergeom N < 1");
  require(Ka >= 0 && Ka <= N && Kb >= 0 && Kb <= N, ErrorKind::validation,
          "hypergeom draw sizes outside [0,N]");
  const int lo = std::max(0, Ka + Kb - N);
  const int hi = std::min(Ka, Kb);
  if (k <= lo) return 0.0;  // certain
  if (k > hi) return -kInf;

  // log-sum-exp over the upper tail, anchored at its largest term
  const double denom = log_choose(N, Kb);
  std::vector<double> terms;
  terms.reserve(size_t(hi - k + 1));
  for (int j = k; j <= hi; ++j)
    terms.push_back(log_choose(Ka, j) + log_choose(N - Ka, Kb - j) - denom);
  const double peak = *std::max_element(terms.begin(), terms.end());
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - peak);
  return std::min(0.0, peak + std::log(acc));
}

double hypergeom_tail(int N, int Ka, int Kb, int k) {
  return std::exp(log_hypergeom_tail(N, Ka, Kb, k));
}

// ---------------------------------------------------------------------------
// probes

LogisticFit fit_logistic(const Eigen::MatrixXd& X, const std::vector<int>& y, double C) {
  const Eigen::Index n = X.rows(), d = X.cols();
  require(n > 0 && d > 0, ErrorKind::validation, "fit_logistic on empty data");
  require(size_t(n) == y.size(), ErrorKind::validation, "fit_logistic label count mismatch");
  require(C > 0.0, ErrorKind::validation, "fit_logistic C must be positive");
  int n_pos = 0;
  for (int v : y) {
    require(v == 0 || v == 1, ErrorKind::validation, "fit_logistic labels must be 0/1");
    n_pos += v;
  }
  require(n_pos > 0 && n_pos < n, ErrorKind::degenerate, "fit_logistic needs both classes");

  const double lambda = 1.0 / C;
  Eigen::VectorXd yv(n);
  for (Eigen::Index i = 0; i < n; ++i) yv(i) = double(y[size_t(i)]);

  Eigen::VectorXd w = Eigen::VectorXd::Zero(d);
  double b = 0.0;

  auto loss_at = [&](const Eigen::VectorXd& wv, double bv) {
    Eigen::VectorXd z = X * wv;
    z.array() += bv;
    double s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) s += softplus(z(i)) - yv(i) * z(i);
    return s + 0.5 * lambda * wv.squaredNorm();
  };

  constexpr double kTol = 1e-8;
  constexpr int kMaxIter = 100;
  LogisticFit out;
  double loss = loss_at(w, b);
  for (int it = 0; it < kMaxIter; ++it) {
    Eigen::VectorXd z = X * w;
    z.array() += b;
    Eigen::VectorXd p(n), s(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      p(i) = sigmoid(z(i));
      s(i) = std::max(p(i) * (1.0 - p(i)), 1e-12);
    }
    Eigen::VectorXd resid = p - yv;
    Eigen::VectorXd gw = X.transpose() * resid + lambda * w;
    double gb = resid.sum();
    out.grad_norm = std::max(gw.lpNorm<Eigen::Infinity>(), std::abs(gb));
    out.n_iter = it;
    if (out.grad_norm <= kTol) {
      out.converged = true;
      break;
    }

    Eigen::MatrixXd H(d + 1, d + 1);
    H.topLeftCorner(d, d) = X.transpose() * s.asDiagonal() * X;
    H.topLeftCorner(d, d).diagonal().array() += lambda;
    Eigen::VectorXd xs = X.transpose() * s;
    H.topRightCorner(d, 1) = xs;
    H.bottomLeftCorner(1, d) = xs.transpose();
    H(d, d) = s.sum();

    Eigen::VectorXd g(d + 1);
    g.head(d) = gw;
    g(d) = gb;
    Eigen::VectorXd step = H.ldlt().solve(g);

    double scale = 1.0;
    for (int halve = 0; halve < 50; ++halve) {
      Eigen::VectorXd w_new = w - scale * step.head(d);
      double b_new = b - scale * step(d);
      double l_new = loss_at(w_new, b_new);
      if (l_new <= loss + 1e-12) {
        w = w_new;
        b = b_new;
        loss = l_new;
        break;
      }
      scale *= 0.5;
    }
  }
  out.w = w;
  out.b = b;
  return out;
}

std::vector<double> logistic_scores(const LogisticFit& fit, const Eigen::MatrixXd& X) {
  require(X.cols() == fit.w.size(), ErrorKind::shape, "logistic_scores feature width mismatch");
  std::vector<double> out(size_t(X.rows()));
  Eigen::VectorXd z = X * fit.w;
  for (Eigen::Index i = 0; i < X.rows(); ++i) out[size_t(i)] = z(i) + fit.b;
  return out;
}

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  require(scores.size() == labels.size(), ErrorKind::validation, "auroc length mismatch");
  size_t n_pos = 0, n_neg = 0;
  for (int l : labels) {
    require(l == 0 || l == 1, ErrorKind::validation, "auroc labels must be 0/1");
    (l == 1 ? n_pos : n_neg) += 1;
  }
  require(n_pos > 0 && n_neg > 0, ErrorKind::degenerate, "auroc needs both classes");
  const auto ranks = average_ranks(scores);
  double rank_sum_pos = 0.0;
  for (size_t i = 0; i < scores.size(); ++i)
    if (labels[i] == 1) rank_sum_pos += ranks[i];
  return (rank_sum_pos - double(n_pos) * double(n_pos + 1) / 2.0) /
         (double(n_pos) * double(n_neg));
}

Ci hanley_mcneil_ci(double auc, int n_pos, int n_neg, double level) {
  require(n_pos > 0 && n_neg > 0, ErrorKind::validation, "hanley_mcneil needs both class counts");
  const double z = inverse_normal_cdf(0.5 + level / 2.0);
  const double q1 = auc / (2.0 - auc);
  const double q2 = 2.0 * auc * auc / (1.0 + auc);
  const double var = (auc * (1.0 - auc) + double(n_pos - 1) * (q1 - auc * auc) +
                      double(n_neg - 1) * (q2 - auc * auc)) /
                     (double(n_pos) * double(n_neg));
  const double se = std::sqrt(std::max(var, 0.0));
  return {std::max(0.0, auc - z * se), std::min(1.0, auc + z * se)};
}

ProbeReport probe_holdout(const Eigen::MatrixXd& x_train, const std::vector<int>& y_train,
                          const Eigen::MatrixXd& x_test, const std::vector<int>& y_test,
                          double C, double level) {
  ProbeReport out;
  out.fit = fit_logistic(x_train, y_train, C);
  const auto scores = logistic_scores(out.fit, x_test);
  out.auroc_point = auroc(scores, y_test);
  for (int l : y_test) (l == 1 ? out.n_pos_eval : out.n_neg_eval) += 1;
  out.ci = hanley_mcneil_ci(out.auroc_point, out.n_pos_eval, out.n_neg_eval, level);
  out.ci_method = "hanley_mcneil";
  return out;
}

ProbeReport probe_kfold(const Eigen::MatrixXd& X, const std::vector<int>& y, int k, double C,
                        uint64_t seed) {
  require(k >= 2, ErrorKind::validation, "probe_kfold needs k >= 2");
  const Eigen::Index n = X.rows();
  require(size_t(n) == y.size(), ErrorKind::validation, "probe_kfold label count mismatch");

  // stratified folds: shuffle within class, deal contiguous chunks
  std::vector<size_t> pos, neg;
  for (size_t i = 0; i < y.size(); ++i) (y[i] == 1 ? pos : neg).push_back(i);
  require(int(pos.size()) >= k && int(neg.size()) >= k, ErrorKind::degenerate,
          "probe_kfold needs >= k examples per class");
  auto rng = seeded_rng(seed, rng_stream::kfold);
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);

  std::vector<int> fold_of(static_cast<size_t>(n), 0);
  auto deal = [&](const std::vector<size_t>& idx) {
    for (size_t i = 0; i < idx.size(); ++i) fold_of[idx[i]] = int(i % size_t(k));
  };
  deal(pos);
  deal(neg);

  ProbeReport out;
  for (int f = 0; f < k; ++f) {
    std::vector<size_t> tr, te;
    for (size_t i = 0; i < size_t(n); ++i) (fold_of[i] == f ? te : tr).push_back(i);
    Eigen::MatrixXd xtr(tr.size(), X.cols()), xte(te.size(), X.cols());
    std::vector<int> ytr(tr.size()), yte(te.size());
    for (size_t i = 0; i < tr.size(); ++i) {
      xtr.row(Eigen::Index(i)) = X.row(Eigen::Index(tr[i]));
      ytr[i] = y[tr[i]];
    }
    for (size_t i = 0; i < te.size(); ++i) {
      xte.row(Eigen::Index(i)) = X.row(Eigen::Index(te[i]));
      yte[i] = y[te[i]];
    }
    auto fit = fit_logistic(xtr, ytr, C);
    out.fold_aurocs.push_back(auroc(logistic_scores(fit, xte), yte));
  }
  out.auroc_point = std::accumulate(out.fold_aurocs.begin(), out.fold_aurocs.end(), 0.0) /
                    double(out.fold_aurocs.size());
  out.ci = {*std::min_element(out.fold_aurocs.begin(), out.fold_aurocs.end()),
            *std::max_element(out.fold_aurocs.begin(), out.fold_aurocs.end())};
  out.ci_method = "fold_spread";
  out.fit = fit_logistic(X, y, C);
  for (int l : y) (l == 1 ? out.n_pos_eval : out.n_neg_eval) += 1;
  return out;
}

EquivalenceResult equivalence_test(double point_a, Ci ci_a, double point_b, Ci ci_b, double margin,
                                   std::optional<Ci> delta_ci, double level) {
  require(margin > 0.0, ErrorKind::validation, "equivalence margin must be positive");
  EquivalenceResult out;
  out.margin = margin;
  out.delta = point_a - point_b;
  if (delta_ci.has_value()) {
    out.delta_ci = *delta_ci;
    out.delta_ci_method = "supplied";
  } else {
    const double z = inverse_normal_cdf(0.5 + level / 2.0);
    const double se_a = (ci_a.upper - ci_a.lower) / (2.0 * z);
    const double se_b = (ci_b.upper - ci_b.lower) / (2.0 * z);
    const double se = std::sqrt(se_a * se_a + se_b * se_b);
    out.delta_ci = {out.delta - z * se, out.delta + z * se};
    out.delta_ci_method = "variance_addition";
  }
  const bool inside = out.delta_ci.lower >= -margin && out.delta_ci.upper <= margin;
  const bool excludes_zero = out.delta_ci.lower > 0.0 || out.delta_ci.upper < 0.0;
  if (std::abs(out.delta) <= margin && inside)
    out.verdict = EquivalenceVerdict::equivalent;
  else if (excludes_zero && std::abs(out.delta) > margin)
    out.verdict = EquivalenceVerdict::different;
  else
    out.verdict = EquivalenceVerdict::not_shown;
  return out;
}

McNemarResult mcnemar_test(const std::vector<int>& a, const std::vector<int>& b) {
  require(a.size() == b.size(), ErrorKind::validation, "mcnemar_test length mismatch");
  require(!a.empty(), ErrorKind::degenerate, "mcnemar_test on empty data");
  McNemarResult out;
  for (size_t i = 0; i < a.size(); ++i) {
    require((a[i] == 0 || a[i] == 1) && (b[i] == 0 || b[i] == 1), ErrorKind::validation,
            "mcnemar_test outcomes must be 0/1");
    if (a[i] == 0 && b[i] == 1) ++out.n01;
    if (a[i] == 1 && b[i] == 0) ++out.n10;
  }
  const int n = out.n01 + out.n10;
  if (n == 0) {
    out.p = 1.0;
    return out;
  }
  // exact two-sided binomial: 2 * P(X <= min) under Bin(n, 1/2), capped at 1
  const int lo = std::min(out.n01, out.n10);
  const double log_half_n = double(n) * std::log(0.5);
  double tail = 0.0;
  for (int i = 0; i <= lo; ++i) tail += std::exp(log_choose(n, i) + log_half_n);
  out.p = std::min(1.0, 2.0 * tail);
  return out;
}

// ---------------------------------------------------------------------------
// numeric helpers

double inverse_normal_cdf(double p) {
  require(p > 0.0 && p < 1.0, ErrorKind::validation, "inverse_normal_cdf domain is (0,1)");
  // Acklam's rational approximation, |relative error| < 1.15e-9
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425, phigh = 1.0 - plow;
  double q, r;
  if (p < plow) {
    q = std::sqrt(-2.0 * std::log(p));
    return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  if (p > phigh) {
    q = std::sqrt(-2.0 * std::log(1.0 - p));
    return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  q = p - 0.5;
  r = q * q;
  return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
         (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

namespace {

// continued fraction for the regularized incomplete beta (Lentz)
double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-15, kFpMin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
  require(a > 0.0 && b > 0.0, ErrorKind::validation, "incomplete beta needs a,b > 0");
  require(x >= 0.0 && x <= 1.0, ErrorKind::validation, "incomplete beta x outside [0,1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

double student_t_two_sided_p(double t, int df) {
  require(df >= 1, ErrorKind::validation, "student t needs df >= 1");
  const double x = double(df) / (double(df) + t * t);
  return regularized_incomplete_beta(double(df) / 2.0, 0.5, x);
}

}  // namespace circuitlab::stats
