#pragma once

// Hookable decoder-only transformer at desk scale. Pre-layernorm blocks, GELU
// MLPs, learned absolute positional embeddings, untied unembedding. Forward
// math is float32 and single-threaded; identical inputs give bit-identical
// logits within one build. Downstream statistics accumulate in double.

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "circuitlab/common.hpp"

namespace circuitlab::model {

using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VecF = Eigen::VectorXf;

inline constexpr float kLnEps = 1e-5f;

struct ModelConfig {
  int n_layers = 0;
  int n_heads = 0;
  int d_model = 0;
  int d_head = 0;
  int d_mlp = 0;
  int d_vocab = 0;
  bool use_biases = false;
  uint64_t seed = 0;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct LayerNormParams {
  VecF scale;   // d_model
  VecF offset;  // d_model
};

struct AttentionParams {
  // per head: w_q/w_k/w_v are d_model x d_head, w_o is d_head x d_model
  std::vector<MatF> w_q, w_k, w_v, w_o;
  std::vector<VecF> b_q, b_k, b_v;  // per head, d_head; present iff use_biases
  VecF b_o;                         // d_model; present iff use_biases
};

struct MlpParams {
  MatF w_in;   // d_model x d_mlp
  MatF w_out;  // d_mlp x d_model
  VecF b_in, b_out;  // present iff use_biases
};

struct BlockParams {
  LayerNormParams ln1, ln2;
  AttentionParams attn;
  MlpParams mlp;
};

struct ModelWeights {
  ModelConfig config;
  MatF embed;      // d_vocab x d_model
  MatF pos_embed;  // n_ctx x d_model; n_ctx is discovered from this tensor
  std::vector<BlockParams> blocks;
  LayerNormParams ln_f;
  MatF unembed;  // d_model x d_vocab
  std::string fingerprint;

  int n_ctx() const { return int(pos_embed.rows()); }
  void validate() const;  // shapes + finiteness
  void refresh_fingerprint();
};

// Manifest (JSON: config + tensor table) plus a raw little-endian float32
// row-major blob. Distinct error kinds for missing tensors, shape mismatches,
// short blobs and non-finite values.
ModelWeights load_weights(const std::string& manifest_path);
void save_weights(const ModelWeights& w, const std::string& manifest_path,
                  const std::string& blob_path);

// ---------------------------------------------------------------------------
// hooks

enum class SiteKind { resid_pre, head_value, head_write, attn_pattern, mlp_out, resid_final, logits };

struct HookSite {
  SiteKind kind{};
  int layer = -1;
  int head = -1;
};

struct CaptureSpec {
  bool everything = false;
  std::vector<HookSite> sites;

  static CaptureSpec all() {
    CaptureSpec c;
    c.everything = true;
    return c;
  }
  static CaptureSpec none() { return {}; }
  static CaptureSpec of(std::vector<HookSite> s) {
    CaptureSpec c;
    c.sites = std::move(s);
    return c;
  }
  bool wants(SiteKind kind, int layer = -1, int head = -1) const;
};

// Full-sequence arrays per captured site. Accessors throw cache_miss for
// anything the producing forward did not capture.
struct ActivationCache {
  std::vector<int> tokens;
  std::string model_fingerprint;
  int n_layers = 0;
  int n_heads = 0;

  std::vector<std::optional<MatF>> resid_pre_store;     // [L], T x d_model
  std::optional<MatF> resid_final_store;                // T x d_model
  std::vector<std::optional<MatF>> head_value_store;    // [L*H], T x d_head
  std::vector<std::optional<MatF>> head_write_store;    // [L*H], T x d_model
  std::vector<std::optional<MatF>> attn_pattern_store;  // [L*H], T x T
  std::vector<std::optional<MatF>> mlp_out_store;       // [L], T x d_model
  std::optional<MatF> logits_store;                     // T x d_vocab

  int seq_len() const { return int(tokens.size()); }
  const MatF& resid_pre(int layer) const;
  const MatF& resid_final() const;
  const MatF& head_value(int layer, int head) const;
  const MatF& head_write(int layer, int head) const;
  const MatF& attn_pattern(int layer, int head) const;
  const MatF& mlp_out(int layer) const;
  const MatF& logits() const;
  bool has(SiteKind kind, int layer = -1, int head = -1) const;
};

// One head's additive residual contribution at one position.
VecF head_write_vector(const ActivationCache& cache, int layer, int head, int position);

// ---------------------------------------------------------------------------
// interventions

struct HeadRef {
  int layer = -1;
  int head = -1;
  bool operator==(const HeadRef&) const = default;
  auto operator<=>(const HeadRef&) const = default;
};

enum class InterventionKind {
  zero_heads,
  mean_replace_heads,
  patch_heads,
  project_out_direction,
  zero_mlp,
  patch_residual,
  sender_freeze,
};

struct Receiver {
  bool unembed = true;
  HeadRef head{};  // used when !unembed
};

// Interventions are applied in list order at each site they touch. Head-level
// edits operate on the per-head value mix z (the write z @ W_O follows).
// Stream points index the residual stream: 0..n_layers-1 are the block inputs,
// n_layers is the final residual entering ln_f.
struct Intervention {
  InterventionKind kind{};

  // zero_heads / mean_replace_heads / patch_heads
  std::vector<HeadRef> heads;
  std::vector<VecF> head_means;             // mean_replace: parallel to heads, d_head
  const ActivationCache* source = nullptr;  // patch_heads donor / sender_freeze clean run
  bool single_position = false;             // patch_heads: splice one position only
  int source_pos = -1;
  int target_pos = -1;

  // project_out_direction
  int stream_lo = 0;
  int stream_hi = 0;
  std::vector<VecF> directions;  // unit vectors, parallel to stream_lo..stream_hi

  // zero_mlp / patch_residual
  int layer = -1;     // zero_mlp layer, or patch_residual stream point
  int position = -1;  // patch_residual row
  VecF residual_row;

  // sender_freeze: propagate the sender's clean-minus-current write difference
  // only into the receiver; every other path keeps this run's values.
  HeadRef sender{};
  Receiver receiver{};
  // receiver = unembed: pinned final-layernorm inverse std (applied to every
  // row); defaults to each row's own delta-free scale.
  std::optional<float> frozen_inv_std;

  static Intervention zero(std::vector<HeadRef> h);
  static Intervention mean_replace(std::vector<HeadRef> h, std::vector<VecF> means);
  static Intervention patch(std::vector<HeadRef> h, const ActivationCache& src);
  static Intervention patch_at(std::vector<HeadRef> h, const ActivationCache& src, int source_pos,
                               int target_pos);
  static Intervention project_out(int lo, int hi, std::vector<VecF> unit_dirs);
  static Intervention zero_mlp_at(int l);
  static Intervention patch_resid(int stream_point, int pos, VecF row);
  static Intervention freeze_path(HeadRef sender, Receiver recv, const ActivationCache& clean,
                                  std::optional<float> frozen_inv_std = std::nullopt);
};

struct ForwardResult {
  MatF logits;  // T x d_vocab
  ActivationCache cache;
};

ForwardResult forward(const ModelWeights& w, std::span<const int> tokens,
                      const CaptureSpec& capture = CaptureSpec::all(),
                      const std::vector<Intervention>& interventions = {});

double logit_diff(const MatF& logits, int position, int tok_a, int tok_b);

// ---------------------------------------------------------------------------
// layernorm helpers shared with lens / attribution code

float ln_inv_std(const VecF& x);  // 1 / sqrt(pop-var + eps)
VecF layernorm_row(const VecF& x, const LayerNormParams& p);
// Centering stays live; only the 1/sigma scale is pinned. Affine in x.
VecF frozen_ln_row(const VecF& x, const LayerNormParams& p, float inv_std);

}  // namespace circuitlab::model
