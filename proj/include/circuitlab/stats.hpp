#pragma once

// Statistical kernels used across the analysis passes. All accumulation is in
// double regardless of the float32 activations upstream, and every resampling
// routine is deterministic given (seed) via common.hpp seed derivation.

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "circuitlab/common.hpp"

namespace circuitlab::stats {

struct Ci {
  double lower = 0.0;
  double upper = 0.0;
};

struct BootstrapCi {
  double point = 0.0;  // statistic on the original sample
  Ci ci;
  int n_resamples = 0;
  double level = 0.95;
  // Percentile intervals can exclude the point estimate for skewed statistics.
  // Flagged rather than clamped.
  bool point_outside = false;
};

// Percentile bootstrap over rows of `values`. `statistic` sees the resampled
// vector (same length, drawn with replacement).
BootstrapCi bootstrap_ci(const std::vector<double>& values,
                         const std::function<double(const std::vector<double>&)>& statistic,
                         int n_resamples = 2000, uint64_t seed = 0, double level = 0.95);

BootstrapCi bootstrap_mean_ci(const std::vector<double>& values, int n_resamples = 2000,
                              uint64_t seed = 0, double level = 0.95);

// (1 + #{null >= observed}) / (n + 1); never returns 0.
double permutation_pvalue(double observed, const std::vector<double>& null_values);

// Benjamini-Hochberg step-up. Returns q-values in input order, each >= its p.
std::vector<double> bh_adjust(const std::vector<double>& p_values);

// Score interval; always inside [0, 1]; valid at k = 0 and k = n.
Ci wilson_ci(int successes, int n, double level = 0.95);

struct RankCorrResult {
  double spearman = 0.0;  // average-rank Spearman
  double pearson = 0.0;
  // t-approximation p-values (two-sided); unset when n < 4 or the statistic is
  // undefined (constant input).
  std::optional<double> spearman_p;
  std::optional<double> pearson_p;
  bool spearman_defined = false;
  bool pearson_defined = false;
  int n = 0;
};

RankCorrResult rank_corr(const std::vector<double>& x, const std::vector<double>& y);

// log P(overlap >= k) for top-Ka and top-Kb draws from N items,
// computed term by term in log space (no factorial overflow, no cancellation).
double log_hypergeom_tail(int N, int Ka, int Kb, int k);
double hypergeom_tail(int N, int Ka, int Kb, int k);

// ---------------------------------------------------------------------------
// probes

struct LogisticFit {
  Eigen::VectorXd w;
  double b = 0.0;
  int n_iter = 0;
  double grad_norm = 0.0;  // max-norm at exit
  bool converged = false;
};

// L2-regularised logistic regression, bias unpenalised, lambda = 1/C.
// Deterministic damped-Newton from w = 0; gradient tolerance 1e-8.
LogisticFit fit_logistic(const Eigen::MatrixXd& X, const std::vector<int>& y, double C = 1.0);

std::vector<double> logistic_scores(const LogisticFit& fit, const Eigen::MatrixXd& X);

// Rank-based AUROC with average ranks (ties contribute 1/2). Errors if either
// class is empty.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

// Analytic AUROC interval (Hanley-McNeil), clamped to [0, 1].
Ci hanley_mcneil_ci(double auc, int n_pos, int n_neg, double level = 0.95);

struct ProbeReport {
  double auroc_point = 0.0;
  Ci ci;
  std::string ci_method;  // "hanley_mcneil" or "fold_spread"
  std::vector<double> fold_aurocs;
  LogisticFit fit;  // holdout: train fit; kfold: fit on the full data
  int n_pos_eval = 0;
  int n_neg_eval = 0;
};

ProbeReport probe_holdout(const Eigen::MatrixXd& x_train, const std::vector<int>& y_train,
                          const Eigen::MatrixXd& x_test, const std::vector<int>& y_test,
                          double C = 1.0, double level = 0.95);

ProbeReport probe_kfold(const Eigen::MatrixXd& X, const std::vector<int>& y, int k = 5,
                        double C = 1.0, uint64_t seed = 0);

enum class EquivalenceVerdict { equivalent, different, not_shown };

struct EquivalenceResult {
  double delta = 0.0;
  Ci delta_ci;
  EquivalenceVerdict verdict = EquivalenceVerdict::not_shown;
  std::string delta_ci_method;  // "supplied" or "variance_addition"
  double margin = 0.05;
};

// Equivalent iff |delta| <= margin and the delta CI sits inside [-margin, margin].
// "Different" iff the delta CI excludes 0 and |delta| > margin. Otherwise not shown.
// When no delta CI is supplied one is derived from the two CIs by variance addition.
EquivalenceResult equivalence_test(double point_a, Ci ci_a, double point_b, Ci ci_b,
                                   double margin = 0.05, std::optional<Ci> delta_ci = std::nullopt,
                                   double level = 0.95);

struct McNemarResult {
  int n01 = 0;  // a = 0, b = 1
  int n10 = 0;  // a = 1, b = 0
  double p = 1.0;
};

// Exact two-sided binomial McNemar on paired binary outcomes.
McNemarResult mcnemar_test(const std::vector<int>& a, const std::vector<int>& b);

// ---------------------------------------------------------------------------
// small numeric helpers (exposed for reuse and direct testing)

double inverse_normal_cdf(double p);              // Acklam's rational approximation
double quantile_type7(std::vector<double> v, double q);
double regularized_incomplete_beta(double a, double b, double x);
double student_t_two_sided_p(double t, int df);
double log_choose(int n, int k);

}  // namespace circuitlab::stats
