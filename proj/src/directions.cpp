#include "circuitlab/directions.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "circuitlab/stats.hpp"

namespace circuitlab::directions {

using model::MatF;
using model::VecF;

void Direction::validate() const {
  require(n_layers >= 1, ErrorKind::validation, "direction has no layers");
  require(d_model >= 1, ErrorKind::validation, "direction has no width");
  require(int(raw.size()) == points() && int(unit.size()) == points() &&
              int(norms.size()) == points(),
          ErrorKind::shape, "direction point count mismatch");
  for (int p = 0; p < points(); ++p) {
    require(raw[p].size() == d_model && unit[p].size() == d_model, ErrorKind::shape,
            "direction width mismatch at point " + std::to_string(p));
    if (norms[p] > 0.0) {
      double u = unit[p].cast<double>().norm();
      require(std::abs(u - 1.0) <= 1e-6, ErrorKind::validation,
              "unit copy not normalized at point " + std::to_string(p));
    }
  }
}

namespace {

// Stream-point activations for one sequence: resid_pre rows at measure_pos for
// every layer, then the final-residual row.
MatF stream_rows(const model::ModelWeights& w, const std::vector<int>& tokens, int measure_pos) {
  std::vector<model::HookSite> sites;
  int L = w.config.n_layers;
  sites.reserve(size_t(L) + 1);
  for (int l = 0; l < L; ++l) sites.push_back({model::SiteKind::resid_pre, l, -1});
  sites.push_back({model::SiteKind::resid_final, -1, -1});
  auto res = model::forward(w, tokens, model::CaptureSpec::of(sites));

  MatF rows(L + 1, w.config.d_model);
  for (int l = 0; l < L; ++l) rows.row(l) = res.cache.resid_pre(l).row(measure_pos);
  rows.row(L) = res.cache.resid_final().row(measure_pos);
  return rows;
}

void finalize_from_diffs(Direction& d) {
  int pts = d.points();
  MatF mean = MatF::Zero(pts, d.d_model);
  for (const MatF& pd : d.pair_diffs) mean += pd;
  mean /= float(d.n_pairs);

  d.raw.assign(size_t(pts), VecF::Zero(d.d_model));
  d.unit.assign(size_t(pts), VecF::Zero(d.d_model));
  d.norms.assign(size_t(pts), 0.0);
  for (int p = 0; p < pts; ++p) {
    d.raw[p] = mean.row(p).transpose();
    double n = d.raw[p].cast<double>().norm();
    d.norms[p] = n;
    if (n > 0.0) d.unit[p] = (d.raw[p].cast<double>() / n).cast<float>();
  }
}

}  // namespace

Direction extract_direction(const model::ModelWeights& w, const contrast::TaskContrast& tc) {
  require(int(tc.pairs.size()) >= 2, ErrorKind::validation,
          "direction extraction needs at least 2 pairs, got " + std::to_string(tc.pairs.size()));

  Direction d;
  d.task = tc.name;
  d.n_pairs = int(tc.pairs.size());
  d.n_layers = w.config.n_layers;
  d.d_model = w.config.d_model;
  d.pair_diffs.reserve(tc.pairs.size());
  for (const auto& pr : tc.pairs) {
    MatF pos = stream_rows(w, pr.pos_tokens, pr.measure_pos_pos);
    MatF neg = stream_rows(w, pr.neg_tokens, pr.measure_pos_neg);
    d.pair_diffs.push_back(pos - neg);
  }
  finalize_from_diffs(d);
  d.validate();
  return d;
}

namespace {

// Cosine between the p-th rows of two mean matrices; nullopt when either row
// has zero norm.
std::optional<double> row_cosine(const MatF& a, const MatF& b, int p) {
  Eigen::VectorXd va = a.row(p).transpose().cast<double>();
  Eigen::VectorXd vb = b.row(p).transpose().cast<double>();
  double na = va.norm(), nb = vb.norm();
  if (na == 0.0 || nb == 0.0) return std::nullopt;
  return va.dot(vb) / (na * nb);
}

MatF signed_mean(const std::vector<MatF>& diffs, const std::vector<int>& signs) {
  MatF m = MatF::Zero(diffs[0].rows(), diffs[0].cols());
  for (size_t i = 0; i < diffs.size(); ++i) m += float(signs[i]) * diffs[i];
  return m / float(diffs.size());
}

}  // namespace

CosineProfile cosine_profile(const Direction& a, const Direction& b, int n_perm, uint64_t seed,
                             double ortho_threshold) {
  a.validate();
  b.validate();
  require(a.points() == b.points() && a.d_model == b.d_model, ErrorKind::shape,
          "cosine profile needs directions over the same stream");
  require(n_perm >= 100, ErrorKind::validation, "cosine profile needs n_perm >= 100");
  require(int(a.pair_diffs.size()) == a.n_pairs && int(b.pair_diffs.size()) == b.n_pairs,
          ErrorKind::validation, "directions are missing their per-pair differences");

  int pts = a.points();
  CosineProfile prof;
  prof.n_perm = n_perm;
  prof.ortho_threshold = ortho_threshold;
  prof.points.resize(size_t(pts));

  std::vector<std::vector<double>> null_cos(static_cast<size_t>(pts));
  std::vector<int> sa(static_cast<size_t>(a.n_pairs), 0), sb(static_cast<size_t>(b.n_pairs), 0);
  for (int it = 0; it < n_perm; ++it) {
    auto rng = seeded_rng(seed, rng_stream::permutation, uint64_t(it));
    for (auto& s : sa) s = (rng() & 1u) ? 1 : -1;
    for (auto& s : sb) s = (rng() & 1u) ? 1 : -1;
    MatF ma = signed_mean(a.pair_diffs, sa);
    MatF mb = signed_mean(b.pair_diffs, sb);
    for (int p = 0; p < pts; ++p) {
      auto c = row_cosine(ma, mb, p);
      null_cos[size_t(p)].push_back(c.value_or(0.0));
    }
  }

  for (int p = 0; p < pts; ++p) {
    CosinePoint& cp = prof.points[size_t(p)];
    cp.point = p;
    cp.null_p95 = stats::quantile_type7(null_cos[size_t(p)], 0.95);
    if (a.norms[size_t(p)] == 0.0 || b.norms[size_t(p)] == 0.0) {
      cp.defined = false;
      continue;
    }
    cp.defined = true;
    cp.cosine = a.unit[size_t(p)].cast<double>().dot(b.unit[size_t(p)].cast<double>());
    cp.cosine = std::clamp(cp.cosine, -1.0, 1.0);
    cp.margin = cp.cosine - cp.null_p95;
    cp.orthogonal = std::abs(cp.cosine) < ortho_threshold;
  }
  return prof;
}

TokenRanking unembed_top_tokens(const model::ModelWeights& w, const Direction& dir, int point,
                                int k) {
  dir.validate();
  require(point >= 0 && point < dir.points(), ErrorKind::validation,
          "stream point out of range: " + std::to_string(point));
  require(dir.d_model == w.config.d_model, ErrorKind::shape, "direction width mismatch");
  require(k >= 1 && k <= w.config.d_vocab, ErrorKind::validation,
          "k must lie in [1, d_vocab], got " + std::to_string(k));
  require(dir.norms[size_t(point)] > 0.0, ErrorKind::degenerate,
          "undefined ranking: zero direction at point " + std::to_string(point));

  // Frozen-layernorm readout of a displacement is linear: center, apply the
  // final scale, and a positive inverse-std factor that cannot reorder tokens.
  Eigen::VectorXd v = dir.unit[size_t(point)].cast<double>();
  v.array() -= v.mean();
  Eigen::VectorXd scaled = v.cwiseProduct(w.ln_f.scale.cast<double>());
  Eigen::VectorXd scores = w.unembed.cast<double>().transpose() * scaled;

  std::vector<int> order(size_t(w.config.d_vocab));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int x, int y) { return scores[x] > scores[y]; });

  TokenRanking out;
  out.positive.assign(order.begin(), order.begin() + k);
  out.negative.assign(order.rbegin(), order.rbegin() + k);
  for (int t : out.positive) out.positive_scores.push_back(scores[t]);
  for (int t : out.negative) out.negative_scores.push_back(scores[t]);
  return out;
}

nlohmann::json direction_to_json(const Direction& dir) {
  nlohmann::ordered_json j;
  j["task"] = dir.task;
  j["n_pairs"] = dir.n_pairs;
  j["layers"] = nlohmann::ordered_json::array();
  for (int p = 0; p < dir.points(); ++p) {
    nlohmann::ordered_json row;
    row["layer"] = p;
    row["norm"] = dir.norms[size_t(p)];
    std::vector<double> u(dir.unit[size_t(p)].data(),
                          dir.unit[size_t(p)].data() + dir.d_model);
    row["unit_vector"] = u;
    j["layers"].push_back(std::move(row));
  }
  return j;
}

}  // namespace circuitlab::directions
