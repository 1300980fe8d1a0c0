#pragma once

// Mean-difference residual directions: extraction at every stream point,
// cosine comparison against sign-flip permutation nulls, and projection
// through the unembedding.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "circuitlab/contrast.hpp"
#include "circuitlab/model.hpp"

namespace circuitlab::directions {

// A direction sampled at every stream point: the residual entering each block
// (points 0..n_layers-1) plus the final residual (point n_layers). Raw and
// unit copies are kept per point; the per-pair differences are retained so
// permutation nulls and bootstrap resamples can re-take the mean under
// relabeling without new forward passes.
struct Direction {
  std::string task;
  int n_pairs = 0;
  int n_layers = 0;
  int d_model = 0;
  std::vector<model::VecF> raw;       // one vector per stream point
  std::vector<model::VecF> unit;      // zero vector where the raw norm is zero
  std::vector<double> norms;          // raw L2 norm per point
  std::vector<model::MatF> pair_diffs;  // one (points() x d_model) matrix per pair

  int points() const { return n_layers + 1; }
  void validate() const;
};

// Mean over pairs of (positive run - negative run) residual activations at
// each pair's measure position. Needs at least two pairs.
Direction extract_direction(const model::ModelWeights& w, const contrast::TaskContrast& tc);

struct CosinePoint {
  int point = 0;
  bool defined = false;  // false when either direction has zero norm here
  double cosine = 0.0;
  double null_p95 = 0.0;
  double margin = 0.0;    // cosine - null_p95
  bool orthogonal = false;  // |cosine| < threshold; only meaningful when defined
};

struct CosineProfile {
  std::vector<CosinePoint> points;
  int n_perm = 0;
  double ortho_threshold = 0.14;
};

// Per-point cosine between two directions plus a permutation null built by
// re-extracting both means under random per-pair sign flips (flipping a pair's
// label negates its difference). Zero-norm points are reported as undefined,
// never as cosine 0.
CosineProfile cosine_profile(const Direction& a, const Direction& b, int n_perm = 500,
                             uint64_t seed = 0, double ortho_threshold = 0.14);

struct TokenRanking {
  std::vector<int> positive;  // token ids, most aligned first
  std::vector<int> negative;  // token ids, most anti-aligned first
  std::vector<double> positive_scores;
  std::vector<double> negative_scores;
};

// Ranks vocabulary tokens by the dot product of their unembedding columns
// with the direction at one stream point, after applying the final-layernorm
// scale to a mean-centered copy (the inverse-std factor is a positive scalar
// and cannot change the ranking, so it is left out). A zero direction has no
// defined ranking and is rejected.
TokenRanking unembed_top_tokens(const model::ModelWeights& w, const Direction& dir, int point,
                                int k);

// {task, n_pairs, layers: [{layer, norm, unit_vector}]}
nlohmann::json direction_to_json(const Direction& dir);

}  // namespace circuitlab::directions
