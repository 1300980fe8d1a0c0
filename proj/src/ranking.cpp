#include "circuitlab/ranking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <unordered_set>

namespace circuitlab::ranking {

using model::MatF;
using model::VecF;

const char* unit_name(Unit u) {
  switch (u) {
    case Unit::write_norm: return "write_norm";
    case Unit::patch_effect: return "patch_effect";
    case Unit::feature_activation_diff: return "feature_activation_diff";
    case Unit::probe_alignment: return "probe_alignment";
  }
  return "unknown";
}

double ImportanceMap::at(int layer, int head) const {
  require(head_shaped(), ErrorKind::validation, "importance map is not head-shaped");
  require(layer >= 0 && layer < n_layers && head >= 0 && head < n_heads, ErrorKind::validation,
          "head (" + std::to_string(layer) + "," + std::to_string(head) + ") out of range");
  return values[size_t(layer) * size_t(n_heads) + size_t(head)];
}

void ImportanceMap::validate() const {
  require(!values.empty(), ErrorKind::validation, "importance map is empty");
  if (head_shaped()) {
    require(int(values.size()) == n_layers * n_heads, ErrorKind::shape,
            "importance map length does not match layers x heads");
  } else {
    require(n_layers == 0 && n_heads == 0, ErrorKind::shape,
            "feature map must not carry a partial head shape");
  }
  for (double v : values) {
    require(std::isfinite(v), ErrorKind::non_finite, "importance map has a non-finite entry");
    if (unit == Unit::write_norm)
      require(v >= 0.0, ErrorKind::validation, "write-norm importance must be nonnegative");
  }
}

ImportanceMap map_from_write_stats(const WriteStats& stats, const std::string& task,
                                   const std::vector<int>& pair_subset) {
  require(!stats.pair_diffs.empty(), ErrorKind::validation, "write stats hold no pairs");
  int n_entries = stats.n_layers * stats.n_heads;
  MatF mean = MatF::Zero(n_entries, stats.d_model);
  int used = 0;
  if (pair_subset.empty()) {
    for (const MatF& d : stats.pair_diffs) mean += d;
    used = int(stats.pair_diffs.size());
  } else {
    for (int idx : pair_subset) {
      require(idx >= 0 && idx < int(stats.pair_diffs.size()), ErrorKind::validation,
              "pair index out of range in write-stats subset");
      mean += stats.pair_diffs[size_t(idx)];
      ++used;
    }
  }
  mean /= float(used);

  ImportanceMap m;
  m.task = task;
  m.unit = Unit::write_norm;
  m.n_layers = stats.n_layers;
  m.n_heads = stats.n_heads;
  m.values.resize(size_t(n_entries));
  for (int i = 0; i < n_entries; ++i) m.values[size_t(i)] = mean.row(i).cast<double>().norm();
  m.validate();
  return m;
}

ImportanceMap write_norm_importance(const model::ModelWeights& w,
                                    const contrast::TaskContrast& tc, WriteStats* stats) {
  require(!tc.pairs.empty(), ErrorKind::validation, "contrast has no pairs");
  int L = w.config.n_layers, H = w.config.n_heads;

  WriteStats local;
  local.n_layers = L;
  local.n_heads = H;
  local.d_model = w.config.d_model;
  local.pair_diffs.reserve(tc.pairs.size());

  auto spec = model::CaptureSpec::of({{model::SiteKind::head_write, -1, -1}});
  for (const auto& pr : tc.pairs) {
    auto pos = model::forward(w, pr.pos_tokens, spec);
    auto neg = model::forward(w, pr.neg_tokens, spec);
    MatF diff(L * H, w.config.d_model);
    for (int l = 0; l < L; ++l)
      for (int h = 0; h < H; ++h)
        diff.row(l * H + h) = pos.cache.head_write(l, h).row(pr.measure_pos_pos) -
                              neg.cache.head_write(l, h).row(pr.measure_pos_neg);
    local.pair_diffs.push_back(std::move(diff));
  }

  ImportanceMap m = map_from_write_stats(local, tc.name);
  if (stats) *stats = std::move(local);
  return m;
}

namespace {

// Top-K flattened indices of a value vector, descending, ties by ascending
// index (a strict weak order, so partial_sort needs no stability).
std::vector<int> top_k_of(const std::vector<double>& v, int K) {
  std::vector<int> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + K, order.end(), [&](int x, int y) {
    return v[size_t(x)] > v[size_t(y)] || (v[size_t(x)] == v[size_t(y)] && x < y);
  });
  order.resize(size_t(K));
  return order;
}

int overlap_count(const std::unordered_set<int>& a, const std::vector<int>& b) {
  int c = 0;
  for (int i : b) c += a.count(i) ? 1 : 0;
  return c;
}

int default_k(int N) { return int(std::ceil(std::sqrt(double(N)))); }

int resolve_k(int K, int N) {
  if (K < 0) K = default_k(N);
  require(K >= 1 && K <= N, ErrorKind::validation,
          "K must lie in [1, N]; got K=" + std::to_string(K) + " with N=" + std::to_string(N));
  return K;
}

}  // namespace

TopK top_k_indices(const ImportanceMap& m, int K) {
  m.validate();
  K = resolve_k(K, m.size());
  TopK out;
  out.indices = top_k_of(m.values, K);
  if (K < m.size()) {
    // The boundary value straddles the cut iff it also appears at rank K.
    std::vector<double> sorted = m.values;
    std::nth_element(sorted.begin(), sorted.begin() + K, sorted.end(), std::greater<>());
    out.tie_at_boundary = (m.values[size_t(out.indices.back())] == sorted[size_t(K)]);
  }
  return out;
}

OverlapReport overlap_report(const ImportanceMap& a, const ImportanceMap& b, int K) {
  a.validate();
  b.validate();
  require(a.size() == b.size(), ErrorKind::shape, "importance maps differ in length");
  int N = a.size();
  K = resolve_k(K, N);

  TopK ta = top_k_indices(a, K);
  TopK tb = top_k_indices(b, K);
  std::unordered_set<int> sa(ta.indices.begin(), ta.indices.end());

  OverlapReport r;
  r.K = K;
  r.N = N;
  r.set_a = ta.indices;
  r.set_b = tb.indices;
  r.tie_at_boundary_a = ta.tie_at_boundary;
  r.tie_at_boundary_b = tb.tie_at_boundary;
  r.overlap = overlap_count(sa, tb.indices);
  r.fraction = double(r.overlap) / double(K);
  r.chance = double(K) * double(K) / double(N);
  r.ratio = double(r.overlap) / r.chance;
  r.log_hypergeom_p = stats::log_hypergeom_tail(N, K, K, r.overlap);
  r.hypergeom_p = stats::hypergeom_tail(N, K, K, r.overlap);

  auto rc = stats::rank_corr(a.values, b.values);
  if (rc.spearman_defined) r.spearman = rc.spearman;
  if (rc.pearson_defined) r.pearson = rc.pearson;
  return r;
}

StratifiedNullReport layer_stratified_null(const ImportanceMap& a, const ImportanceMap& b, int K,
                                           int n_perm, uint64_t seed) {
  a.validate();
  b.validate();
  require(a.head_shaped() && b.head_shaped(), ErrorKind::validation,
          "stratified null needs head-shaped maps");
  require(a.n_layers == b.n_layers && a.n_heads == b.n_heads, ErrorKind::shape,
          "importance maps differ in head shape");
  require(n_perm >= 1000, ErrorKind::validation, "stratified null needs n_perm >= 1000");
  int N = a.size();
  K = resolve_k(K, N);

  std::unordered_set<int> set_a;
  for (int i : top_k_of(a.values, K)) set_a.insert(i);
  int observed = overlap_count(set_a, top_k_of(b.values, K));

  StratifiedNullReport rep;
  rep.observed_overlap = observed;
  rep.n_perm = n_perm;
  rep.single_layer = (a.n_layers == 1);

  int H = a.n_heads;
  std::vector<double> permuted = b.values;
  long at_least = 0;
  double sum = 0.0;
  for (int it = 0; it < n_perm; ++it) {
    auto rng = seeded_rng(seed, rng_stream::permutation, uint64_t(it));
    permuted = b.values;
    for (int l = 0; l < a.n_layers; ++l)
      std::shuffle(permuted.begin() + l * H, permuted.begin() + (l + 1) * H, rng);
    int ov = overlap_count(set_a, top_k_of(permuted, K));
    sum += ov;
    if (ov >= observed) ++at_least;
  }
  rep.null_mean = sum / double(n_perm);
  rep.p = double(1 + at_least) / double(n_perm + 1);
  return rep;
}

KSweepReport k_sweep(const ImportanceMap& a, const ImportanceMap& b, const std::vector<int>& ks) {
  require(!ks.empty(), ErrorKind::validation, "k sweep needs at least one K");
  KSweepReport sweep;
  sweep.reports.reserve(ks.size());
  for (int k : ks) sweep.reports.push_back(overlap_report(a, b, k));

  std::vector<std::pair<int, int>> by_k;
  for (const auto& r : sweep.reports) by_k.emplace_back(r.K, r.overlap);
  std::sort(by_k.begin(), by_k.end());
  for (size_t i = 1; i < by_k.size(); ++i)
    if (by_k[i].second < by_k[i - 1].second) sweep.overlap_monotone = false;
  return sweep;
}

SplitHalfReport split_half_reliability(const model::ModelWeights& w,
                                       const contrast::TaskContrast& tc, int n_splits,
                                       uint64_t seed) {
  require(int(tc.pairs.size()) >= 4, ErrorKind::validation,
          "split-half reliability needs at least 4 pairs");
  require(n_splits >= 1, ErrorKind::validation, "n_splits must be positive");

  WriteStats stats;
  write_norm_importance(w, tc, &stats);
  int n = int(stats.pair_diffs.size());

  SplitHalfReport rep;
  rep.n_splits = n_splits;
  std::vector<int> idx(static_cast<size_t>(n), 0);
  for (int s = 0; s < n_splits; ++s) {
    std::iota(idx.begin(), idx.end(), 0);
    auto rng = seeded_rng(seed, rng_stream::split_half, uint64_t(s));
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<int> half_a(idx.begin(), idx.begin() + n / 2);
    std::vector<int> half_b(idx.begin() + n / 2, idx.end());
    ImportanceMap ma = map_from_write_stats(stats, tc.name, half_a);
    ImportanceMap mb = map_from_write_stats(stats, tc.name, half_b);
    auto rc = stats::rank_corr(ma.values, mb.values);
    if (rc.pearson_defined) rep.split_rs.push_back(rc.pearson);
  }
  require(!rep.split_rs.empty(), ErrorKind::degenerate,
          "every half-split produced a constant importance map");

  auto boot = stats::bootstrap_mean_ci(rep.split_rs, 2000, seed);
  rep.mean_r = boot.point;
  rep.ci = boot.ci;
  return rep;
}

TripleReport triple_intersection(const ImportanceMap& a, const ImportanceMap& b,
                                 const ImportanceMap& c, int K, int n_perm, uint64_t seed) {
  a.validate();
  b.validate();
  c.validate();
  require(a.size() == b.size() && b.size() == c.size(), ErrorKind::shape,
          "importance maps differ in length");
  require(n_perm >= 1000, ErrorKind::validation, "triple intersection needs n_perm >= 1000");
  int N = a.size();
  K = resolve_k(K, N);

  auto set_of = [](const std::vector<int>& v) {
    return std::unordered_set<int>(v.begin(), v.end());
  };
  auto triple_count = [&](const std::unordered_set<int>& sa, const std::vector<int>& tb,
                          const std::vector<int>& tc_set) {
    std::unordered_set<int> sb(tb.begin(), tb.end());
    int cnt = 0;
    for (int i : tc_set) cnt += (sa.count(i) && sb.count(i)) ? 1 : 0;
    return cnt;
  };

  auto sa = set_of(top_k_of(a.values, K));
  int observed = triple_count(sa, top_k_of(b.values, K), top_k_of(c.values, K));

  long at_least = 0;
  std::vector<double> pb = b.values, pc = c.values;
  for (int it = 0; it < n_perm; ++it) {
    auto rng = seeded_rng(seed, rng_stream::triple, uint64_t(it));
    pb = b.values;
    pc = c.values;
    std::shuffle(pb.begin(), pb.end(), rng);
    std::shuffle(pc.begin(), pc.end(), rng);
    int ov = triple_count(sa, top_k_of(pb, K), top_k_of(pc, K));
    if (ov >= observed) ++at_least;
  }

  TripleReport rep;
  rep.K = K;
  rep.N = N;
  rep.overlap = observed;
  rep.chance = double(K) * double(K) * double(K) / (double(N) * double(N));
  rep.ratio = double(observed) / rep.chance;
  rep.p = double(1 + at_least) / double(n_perm + 1);
  rep.n_perm = n_perm;
  return rep;
}

RatioCi overlap_ratio_bootstrap(const WriteStats& a, const WriteStats& b, int K, int n_boot,
                                uint64_t seed) {
  require(a.n_layers == b.n_layers && a.n_heads == b.n_heads, ErrorKind::shape,
          "write stats differ in head shape");
  require(!a.pair_diffs.empty() && !b.pair_diffs.empty(), ErrorKind::validation,
          "write stats hold no pairs");
  require(n_boot >= 100, ErrorKind::validation, "ratio bootstrap needs n_boot >= 100");
  int N = a.n_layers * a.n_heads;
  K = resolve_k(K, N);

  auto ratio_of = [&](const ImportanceMap& ma, const ImportanceMap& mb) {
    return overlap_report(ma, mb, K).ratio;
  };

  RatioCi out;
  out.n_boot = n_boot;
  out.point = ratio_of(map_from_write_stats(a, "a"), map_from_write_stats(b, "b"));

  int na = int(a.pair_diffs.size()), nb = int(b.pair_diffs.size());
  std::vector<double> ratios;
  ratios.reserve(size_t(n_boot));
  std::vector<int> ia(static_cast<size_t>(na), 0), ib(static_cast<size_t>(nb), 0);
  for (int it = 0; it < n_boot; ++it) {
    auto rng = seeded_rng(seed, rng_stream::bootstrap, uint64_t(it));
    std::uniform_int_distribution<int> da(0, na - 1), db(0, nb - 1);
    for (auto& v : ia) v = da(rng);
    for (auto& v : ib) v = db(rng);
    ratios.push_back(ratio_of(map_from_write_stats(a, "a", ia), map_from_write_stats(b, "b", ib)));
  }
  out.ci.lower = stats::quantile_type7(ratios, 0.025);
  out.ci.upper = stats::quantile_type7(ratios, 0.975);
  return out;
}

void SaeEncoder::validate(int d_model) const {
  require(w_enc.rows() >= 1, ErrorKind::validation, "encoder has no features");
  require(int(w_enc.cols()) == d_model, ErrorKind::shape, "encoder width mismatch");
  require(int(b_enc.size()) == n_features(), ErrorKind::shape, "encoder bias length mismatch");
  require(int(b_dec.size()) == d_model, ErrorKind::shape, "decoder bias length mismatch");
  if (w_dec) {
    require(int(w_dec->rows()) == d_model && int(w_dec->cols()) == n_features(), ErrorKind::shape,
            "decoder shape mismatch");
    require(w_dec->allFinite(), ErrorKind::non_finite, "decoder has non-finite entries");
  }
  require(w_enc.allFinite() && b_enc.allFinite() && b_dec.allFinite(), ErrorKind::non_finite,
          "encoder has non-finite entries");
}

MatF SaeEncoder::decoder() const { return w_dec ? *w_dec : MatF(w_enc.transpose()); }

MatF sae_features(const SaeEncoder& enc, const MatF& acts) {
  enc.validate(int(acts.cols()));
  MatF centered = acts.rowwise() - enc.b_dec.transpose();
  MatF pre = centered * enc.w_enc.transpose();
  pre.rowwise() += enc.b_enc.transpose();
  return pre.cwiseMax(0.0f);
}

namespace {

ImportanceMap feature_diff_map(const SaeEncoder& enc, const MatF& pos, const MatF& neg,
                               const std::string& task) {
  require(pos.rows() >= 1 && neg.rows() >= 1, ErrorKind::validation,
          "feature ranking needs at least one activation row per condition");
  MatF fp = sae_features(enc, pos);
  MatF fn = sae_features(enc, neg);
  Eigen::VectorXd mp = fp.cast<double>().colwise().mean();
  Eigen::VectorXd mn = fn.cast<double>().colwise().mean();

  ImportanceMap m;
  m.task = task;
  m.unit = Unit::feature_activation_diff;
  m.values.resize(size_t(enc.n_features()));
  for (int f = 0; f < enc.n_features(); ++f) m.values[size_t(f)] = std::abs(mp[f] - mn[f]);
  m.validate();
  return m;
}

std::optional<double> probe_alignment_rho(const SaeEncoder& enc, const Eigen::VectorXd& probe,
                                          const ImportanceMap& diff_map) {
  MatF dec = enc.decoder();
  require(int(probe.size()) == int(dec.rows()), ErrorKind::shape, "probe width mismatch");
  std::vector<double> align(size_t(enc.n_features()));
  for (int f = 0; f < enc.n_features(); ++f)
    align[size_t(f)] = std::abs(dec.col(f).cast<double>().dot(probe));
  auto rc = stats::rank_corr(align, diff_map.values);
  if (!rc.spearman_defined) return std::nullopt;
  return rc.spearman;
}

}  // namespace

SaeOverlapReport sae_feature_overlap(const SaeEncoder& enc, const MatF& a_pos, const MatF& a_neg,
                                     const MatF& b_pos, const MatF& b_neg, int K,
                                     const std::optional<Eigen::VectorXd>& probe_a,
                                     const std::optional<Eigen::VectorXd>& probe_b) {
  require(a_pos.cols() == a_neg.cols() && a_pos.cols() == b_pos.cols() &&
              a_pos.cols() == b_neg.cols(),
          ErrorKind::shape, "activation caches differ in width");
  enc.validate(int(a_pos.cols()));

  SaeOverlapReport rep;
  rep.map_a = feature_diff_map(enc, a_pos, a_neg, "sae_a");
  rep.map_b = feature_diff_map(enc, b_pos, b_neg, "sae_b");
  rep.report = overlap_report(rep.map_a, rep.map_b, K);
  rep.jaccard = double(rep.report.overlap) / double(2 * rep.report.K - rep.report.overlap);
  if (probe_a) rep.probe_alignment_rho_a = probe_alignment_rho(enc, *probe_a, rep.map_a);
  if (probe_b) rep.probe_alignment_rho_b = probe_alignment_rho(enc, *probe_b, rep.map_b);
  return rep;
}

}  // namespace circuitlab::ranking
