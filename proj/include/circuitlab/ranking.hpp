#pragma once

// Per-head (and per-SAE-feature) importance maps, top-K overlap with exact
// hypergeometric and stratified permutation nulls, sweeps, reliabilities, and
// triple intersections.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "circuitlab/contrast.hpp"
#include "circuitlab/model.hpp"
#include "circuitlab/stats.hpp"

namespace circuitlab::ranking {

enum class Unit { write_norm, patch_effect, feature_activation_diff, probe_alignment };

const char* unit_name(Unit u);

// Scalar importance per (layer, head) in layer-major order, or per feature
// index when n_heads == 0. write_norm entries must be finite and nonnegative.
struct ImportanceMap {
  std::string task;
  Unit unit = Unit::write_norm;
  int n_layers = 0;  // 0 for feature maps
  int n_heads = 0;
  std::vector<double> values;

  int size() const { return int(values.size()); }
  bool head_shaped() const { return n_layers > 0 && n_heads > 0; }
  double at(int layer, int head) const;
  void validate() const;
};

// Per-pair per-head write differences at the measure position. Retained so
// bootstrap resamples and half-splits can rebuild importance maps without new
// forward passes (the map is a norm of a mean over pairs).
struct WriteStats {
  int n_layers = 0;
  int n_heads = 0;
  int d_model = 0;
  std::vector<model::MatF> pair_diffs;  // one per pair: (n_layers*n_heads) x d_model
};

// Rebuild a write-norm map from a subset of pairs (all pairs when empty).
ImportanceMap map_from_write_stats(const WriteStats& stats, const std::string& task,
                                   const std::vector<int>& pair_subset = {});

// Per head: L2 norm of the mean over pairs of (positive-run write - negative-
// run write) at each pair's measure position. One forward per side per pair.
ImportanceMap write_norm_importance(const model::ModelWeights& w,
                                    const contrast::TaskContrast& tc,
                                    WriteStats* stats = nullptr);

struct TopK {
  std::vector<int> indices;  // flattened indices in rank order (best first)
  bool tie_at_boundary = false;
};

// Descending by value; ties broken by ascending flattened index. The boundary
// flag marks a value tie straddling the K-th rank.
TopK top_k_indices(const ImportanceMap& m, int K);

struct OverlapReport {
  int K = 0;
  int N = 0;
  std::vector<int> set_a;  // rank order
  std::vector<int> set_b;
  int overlap = 0;
  double fraction = 0.0;      // overlap / K
  double chance = 0.0;        // K*K/N
  double ratio = 0.0;         // overlap / chance
  double hypergeom_p = 1.0;   // P(X >= overlap), exact
  double log_hypergeom_p = 0.0;
  std::optional<double> spearman;  // over all entries; unset for constant maps
  std::optional<double> pearson;
  bool tie_at_boundary_a = false;
  bool tie_at_boundary_b = false;
};

// K < 0 selects the default K = ceil(sqrt(N)).
OverlapReport overlap_report(const ImportanceMap& a, const ImportanceMap& b, int K = -1);

struct StratifiedNullReport {
  double p = 1.0;
  int observed_overlap = 0;
  double null_mean = 0.0;
  int n_perm = 0;
  bool single_layer = false;  // stratification degenerated to a plain shuffle
};

// Permutes head labels within each layer of map b, preserving per-layer
// marginals, and counts permuted top-K overlaps >= the observed one.
StratifiedNullReport layer_stratified_null(const ImportanceMap& a, const ImportanceMap& b,
                                           int K = -1, int n_perm = 10000, uint64_t seed = 0);

struct KSweepReport {
  std::vector<OverlapReport> reports;
  // Top-K sets are nested, so overlap must be non-decreasing in K whenever the
  // requested K values are sorted; recorded as a diagnostic.
  bool overlap_monotone = true;
};

KSweepReport k_sweep(const ImportanceMap& a, const ImportanceMap& b, const std::vector<int>& ks);

struct SplitHalfReport {
  double mean_r = 0.0;
  stats::Ci ci;  // bootstrap CI over the per-split correlations
  std::vector<double> split_rs;
  int n_splits = 0;
};

// Pearson correlation between write-norm maps built from disjoint random
// halves of the pair set, averaged over splits. Needs at least 4 pairs.
SplitHalfReport split_half_reliability(const model::ModelWeights& w,
                                       const contrast::TaskContrast& tc, int n_splits = 50,
                                       uint64_t seed = 0);

struct TripleReport {
  int K = 0;
  int N = 0;
  int overlap = 0;     // |A ∩ B ∩ C|
  double chance = 0.0;  // K^3 / N^2
  double ratio = 0.0;
  double p = 1.0;  // permutation p via independent label shuffles of b and c
  int n_perm = 0;
};

TripleReport triple_intersection(const ImportanceMap& a, const ImportanceMap& b,
                                 const ImportanceMap& c, int K = -1, int n_perm = 10000,
                                 uint64_t seed = 0);

struct RatioCi {
  double point = 0.0;
  stats::Ci ci;
  int n_boot = 0;
};

// Percentile bootstrap over pairs (resampled independently per task) of the
// top-K overlap ratio between the two write-norm maps.
RatioCi overlap_ratio_bootstrap(const WriteStats& a, const WriteStats& b, int K = -1,
                                int n_boot = 2000, uint64_t seed = 0);

// features(x) = max(0, W_enc (x - b_dec) + b_enc); decoder defaults to the
// tied transpose of the encoder.
struct SaeEncoder {
  model::MatF w_enc;  // n_features x d_model
  model::VecF b_enc;  // n_features
  model::VecF b_dec;  // d_model
  std::optional<model::MatF> w_dec;  // d_model x n_features

  int n_features() const { return int(w_enc.rows()); }
  void validate(int d_model) const;
  model::MatF decoder() const;
};

// Rows of acts are samples; returns samples x n_features rectified codes.
model::MatF sae_features(const SaeEncoder& enc, const model::MatF& acts);

struct SaeOverlapReport {
  OverlapReport report;
  double jaccard = 0.0;
  ImportanceMap map_a;  // per-feature |mean positive - mean negative| per task
  ImportanceMap map_b;
  std::optional<double> probe_alignment_rho_a;
  std::optional<double> probe_alignment_rho_b;
};

// Ranks features by within-task mean activation difference between the
// positive and negative condition caches, then overlaps the two rankings.
// Optional probe weight vectors are projected onto decoder columns and
// rank-correlated with the activation-difference ranking of their task.
SaeOverlapReport sae_feature_overlap(const SaeEncoder& enc, const model::MatF& a_pos,
                                     const model::MatF& a_neg, const model::MatF& b_pos,
                                     const model::MatF& b_neg, int K,
                                     const std::optional<Eigen::VectorXd>& probe_a = std::nullopt,
                                     const std::optional<Eigen::VectorXd>& probe_b = std::nullopt);

}  // namespace circuitlab::ranking
