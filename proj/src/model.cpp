#include "circuitlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace circuitlab::model {

void ModelConfig::validate() const {
  require(n_layers >= 1, ErrorKind::validation, "config: n_layers must be >= 1");
  require(n_heads >= 1, ErrorKind::validation, "config: n_heads must be >= 1");
  require(d_model >= 1, ErrorKind::validation, "config: d_model must be >= 1");
  require(d_head >= 1, ErrorKind::validation, "config: d_head must be >= 1");
  require(d_mlp >= 1, ErrorKind::validation, "config: d_mlp must be >= 1");
  require(d_vocab >= 2, ErrorKind::validation, "config: d_vocab must be >= 2");
}

namespace {

void check_mat(const MatF& m, Eigen::Index rows, Eigen::Index cols, const char* name) {
  require(m.rows() == rows && m.cols() == cols, ErrorKind::shape,
          std::string("weights: bad shape for ") + name);
  require(m.allFinite(), ErrorKind::non_finite, std::string("weights: non-finite ") + name);
}

void check_vec(const VecF& v, Eigen::Index size, const char* name) {
  require(v.size() == size, ErrorKind::shape, std::string("weights: bad shape for ") + name);
  require(v.allFinite(), ErrorKind::non_finite, std::string("weights: non-finite ") + name);
}

}  // namespace

void ModelWeights::validate() const {
  config.validate();
  const auto& c = config;
  check_mat(embed, c.d_vocab, c.d_model, "embed");
  require(pos_embed.rows() >= 1, ErrorKind::shape, "weights: pos_embed must have >= 1 row");
  require(pos_embed.cols() == c.d_model, ErrorKind::shape, "weights: pos_embed width != d_model");
  require(pos_embed.allFinite(), ErrorKind::non_finite, "weights: non-finite pos_embed");
  require(int(blocks.size()) == c.n_layers, ErrorKind::shape, "weights: block count != n_layers");
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& b = blocks[size_t(l)];
    check_vec(b.ln1.scale, c.d_model, "ln1.scale");
    check_vec(b.ln1.offset, c.d_model, "ln1.offset");
    check_vec(b.ln2.scale, c.d_model, "ln2.scale");
    check_vec(b.ln2.offset, c.d_model, "ln2.offset");
    require(int(b.attn.w_q.size()) == c.n_heads && int(b.attn.w_k.size()) == c.n_heads &&
                int(b.attn.w_v.size()) == c.n_heads && int(b.attn.w_o.size()) == c.n_heads,
            ErrorKind::shape, "weights: per-head matrix count != n_heads");
    for (int h = 0; h < c.n_heads; ++h) {
      check_mat(b.attn.w_q[size_t(h)], c.d_model, c.d_head, "attn.W_Q");
      check_mat(b.attn.w_k[size_t(h)], c.d_model, c.d_head, "attn.W_K");
      check_mat(b.attn.w_v[size_t(h)], c.d_model, c.d_head, "attn.W_V");
      check_mat(b.attn.w_o[size_t(h)], c.d_head, c.d_model, "attn.W_O");
    }
    if (c.use_biases) {
      require(int(b.attn.b_q.size()) == c.n_heads, ErrorKind::shape, "weights: missing b_Q");
      for (int h = 0; h < c.n_heads; ++h) {
        check_vec(b.attn.b_q[size_t(h)], c.d_head, "attn.b_Q");
        check_vec(b.attn.b_k[size_t(h)], c.d_head, "attn.b_K");
        check_vec(b.attn.b_v[size_t(h)], c.d_head, "attn.b_V");
      }
      check_vec(b.attn.b_o, c.d_model, "attn.b_O");
      check_vec(b.mlp.b_in, c.d_mlp, "mlp.b_in");
      check_vec(b.mlp.b_out, c.d_model, "mlp.b_out");
    }
    check_mat(b.mlp.w_in, c.d_model, c.d_mlp, "mlp.W_in");
    check_mat(b.mlp.w_out, c.d_mlp, c.d_model, "mlp.W_out");
  }
  check_vec(ln_f.scale, c.d_model, "ln_f.scale");
  check_vec(ln_f.offset, c.d_model, "ln_f.offset");
  check_mat(unembed, c.d_model, c.d_vocab, "unembed");
}

// ---------------------------------------------------------------------------
// capture / cache

bool CaptureSpec::wants(SiteKind kind, int layer, int head) const {
  if (everything) return true;
  for (const auto& s : sites) {
    if (s.kind != kind) continue;
    if (s.layer != -1 && s.layer != layer) continue;
    if (s.head != -1 && s.head != head) continue;
    return true;
  }
  return false;
}

namespace {

[[noreturn]] void miss(const char* what) {
  fail(ErrorKind::cache_miss, std::string("activation cache did not capture ") + what);
}

}  // namespace

const MatF& ActivationCache::resid_pre(int layer) const {
  require(layer >= 0 && layer < n_layers, ErrorKind::validation, "resid_pre layer out of range");
  if (!resid_pre_store[size_t(layer)]) miss("resid_pre");
  return *resid_pre_store[size_t(layer)];
}

const MatF& ActivationCache::resid_final() const {
  if (!resid_final_store) miss("resid_final");
  return *resid_final_store;
}

const MatF& ActivationCache::head_value(int layer, int head) const {
  require(layer >= 0 && layer < n_layers && head >= 0 && head < n_heads, ErrorKind::validation,
          "head_value ref out of range");
  const auto& slot = head_value_store[size_t(layer * n_heads + head)];
  if (!slot) miss("head_value");
  return *slot;
}

const MatF& ActivationCache::head_write(int layer, int head) const {
  require(layer >= 0 && layer < n_layers && head >= 0 && head < n_heads, ErrorKind::validation,
          "head_write ref out of range");
  const auto& slot = head_write_store[size_t(layer * n_heads + head)];
  if (!slot) miss("head_write");
  return *slot;
}

const MatF& ActivationCache::attn_pattern(int layer, int head) const {
  require(layer >= 0 && layer < n_layers && head >= 0 && head < n_heads, ErrorKind::validation,
          "attn_pattern ref out of range");
  const auto& slot = attn_pattern_store[size_t(layer * n_heads + head)];
  if (!slot) miss("attn_pattern");
  return *slot;
}

const MatF& ActivationCache::mlp_out(int layer) const {
  require(layer >= 0 && layer < n_layers, ErrorKind::validation, "mlp_out layer out of range");
  if (!mlp_out_store[size_t(layer)]) miss("mlp_out");
  return *mlp_out_store[size_t(layer)];
}

const MatF& ActivationCache::logits() const {
  if (!logits_store) miss("logits");
  return *logits_store;
}

bool ActivationCache::has(SiteKind kind, int layer, int head) const {
  switch (kind) {
    case SiteKind::resid_pre:
      return layer >= 0 && layer < n_layers && resid_pre_store[size_t(layer)].has_value();
    case SiteKind::resid_final:
      return resid_final_store.has_value();
    case SiteKind::head_value:
    case SiteKind::head_write:
    case SiteKind::attn_pattern: {
      if (layer < 0 || layer >= n_layers || head < 0 || head >= n_heads) return false;
      const size_t i = size_t(layer * n_heads + head);
      if (kind == SiteKind::head_value) return head_value_store[i].has_value();
      if (kind == SiteKind::head_write) return head_write_store[i].has_value();
      return attn_pattern_store[i].has_value();
    }
    case SiteKind::mlp_out:
      return layer >= 0 && layer < n_layers && mlp_out_store[size_t(layer)].has_value();
    case SiteKind::logits:
      return logits_store.has_value();
  }
  return false;
}

VecF head_write_vector(const ActivationCache& cache, int layer, int head, int position) {
  const MatF& w = cache.head_write(layer, head);
  require(position >= 0 && position < int(w.rows()), ErrorKind::validation,
          "head_write_vector position out of range");
  return w.row(position).transpose();
}

// ---------------------------------------------------------------------------
// intervention factories

Intervention Intervention::zero(std::vector<HeadRef> h) {
  Intervention iv;
  iv.kind = InterventionKind::zero_heads;
  iv.heads = std::move(h);
  return iv;
}

Intervention Intervention::mean_replace(std::vector<HeadRef> h, std::vector<VecF> means) {
  Intervention iv;
  iv.kind = InterventionKind::mean_replace_heads;
  iv.heads = std::move(h);
  iv.head_means = std::move(means);
  return iv;
}

Intervention Intervention::patch(std::vector<HeadRef> h, const ActivationCache& src) {
  Intervention iv;
  iv.kind = InterventionKind::patch_heads;
  iv.heads = std::move(h);
  iv.source = &src;
  return iv;
}

Intervention Intervention::patch_at(std::vector<HeadRef> h, const ActivationCache& src,
                                    int source_pos, int target_pos) {
  Intervention iv = patch(std::move(h), src);
  iv.single_position = true;
  iv.source_pos = source_pos;
  iv.target_pos = target_pos;
  return iv;
}

Intervention Intervention::project_out(int lo, int hi, std::vector<VecF> unit_dirs) {
  Intervention iv;
  iv.kind = InterventionKind::project_out_direction;
  iv.stream_lo = lo;
  iv.stream_hi = hi;
  iv.directions = std::move(unit_dirs);
  return iv;
}

Intervention Intervention::zero_mlp_at(int l) {
  Intervention iv;
  iv.kind = InterventionKind::zero_mlp;
  iv.layer = l;
  return iv;
}

Intervention Intervention::patch_resid(int stream_point, int pos, VecF row) {
  Intervention iv;
  iv.kind = InterventionKind::patch_residual;
  iv.layer = stream_point;
  iv.position = pos;
  iv.residual_row = std::move(row);
  return iv;
}

Intervention Intervention::freeze_path(HeadRef sender, Receiver recv, const ActivationCache& clean,
                                       std::optional<float> frozen_inv_std) {
  Intervention iv;
  iv.kind = InterventionKind::sender_freeze;
  iv.sender = sender;
  iv.receiver = recv;
  iv.source = &clean;
  iv.frozen_inv_std = frozen_inv_std;
  return iv;
}

// ---------------------------------------------------------------------------
// layernorm helpers

float ln_inv_std(const VecF& x) {
  const float mean = x.mean();
  const float var = (x.array() - mean).matrix().squaredNorm() / float(x.size());
  return 1.0f / std::sqrt(var + kLnEps);
}

VecF layernorm_row(const VecF& x, const LayerNormParams& p) {
  return frozen_ln_row(x, p, ln_inv_std(x));
}

VecF frozen_ln_row(const VecF& x, const LayerNormParams& p, float inv_std) {
  const float mean = x.mean();
  return (((x.array() - mean) * inv_std) * p.scale.array() + p.offset.array()).matrix();
}

// ---------------------------------------------------------------------------
// forward

namespace {

MatF ln_rows(const MatF& x, const LayerNormParams& p) {
  MatF out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    out.row(r) = frozen_ln_row(x.row(r).transpose(), p, ln_inv_std(x.row(r).transpose()));
  return out;
}

float gelu(float v) { return 0.5f * v * (1.0f + std::erf(v * 0.70710678118654752f)); }

void check_head_ref(const ModelConfig& c, HeadRef h, const char* what) {
  require(h.layer >= 0 && h.layer < c.n_layers && h.head >= 0 && h.head < c.n_heads,
          ErrorKind::validation, std::string(what) + ": head ref out of range");
}

void check_patch_source(const ModelWeights& w, const ActivationCache* src, int T,
                        bool single_position, int source_pos, int target_pos) {
  require(src != nullptr, ErrorKind::validation, "patch intervention without a source cache");
  require(!w.fingerprint.empty(), ErrorKind::validation,
          "refresh_fingerprint() before patching against this model");
  require(src->model_fingerprint == w.fingerprint, ErrorKind::mismatch,
          "patch source cache came from a different model");
  if (single_position) {
    require(source_pos >= 0 && source_pos < src->seq_len(), ErrorKind::validation,
            "patch source position out of range");
    require(target_pos >= 0 && target_pos < T, ErrorKind::validation,
            "patch target position out of range");
  } else {
    require(src->seq_len() == T, ErrorKind::mismatch,
            "whole-sequence patch needs equal sequence lengths; use the single-position form");
  }
}

}  // namespace

ForwardResult forward(const ModelWeights& w, std::span<const int> tokens,
                      const CaptureSpec& capture, const std::vector<Intervention>& interventions) {
  const auto& c = w.config;
  const int T = int(tokens.size());
  require(T >= 1, ErrorKind::validation, "forward: empty token sequence");
  require(T <= w.n_ctx(), ErrorKind::validation, "forward: sequence longer than n_ctx");
  for (int t : tokens)
    require(t >= 0 && t < c.d_vocab, ErrorKind::validation, "forward: token id outside vocab");

  // validate interventions before any compute
  const Intervention* freeze = nullptr;
  for (const auto& iv : interventions) {
    switch (iv.kind) {
      case InterventionKind::zero_heads:
        for (auto h : iv.heads) check_head_ref(c, h, "zero_heads");
        break;
      case InterventionKind::mean_replace_heads:
        require(iv.head_means.size() == iv.heads.size(), ErrorKind::validation,
                "mean_replace_heads: one mean per head required");
        for (size_t i = 0; i < iv.heads.size(); ++i) {
          check_head_ref(c, iv.heads[i], "mean_replace_heads");
          require(iv.head_means[i].size() == c.d_head, ErrorKind::shape,
                  "mean_replace_heads: mean has wrong width");
        }
        break;
      case InterventionKind::patch_heads:
        for (auto h : iv.heads) check_head_ref(c, h, "patch_heads");
        check_patch_source(w, iv.source, T, iv.single_position, iv.source_pos, iv.target_pos);
        for (auto h : iv.heads)
          require(iv.source->has(SiteKind::head_value, h.layer, h.head), ErrorKind::cache_miss,
                  "patch_heads: source cache lacks head_value for a requested head");
        break;
      case InterventionKind::project_out_direction: {
        require(iv.stream_lo >= 0 && iv.stream_hi <= c.n_layers && iv.stream_lo <= iv.stream_hi,
                ErrorKind::validation, "project_out_direction: bad stream range");
        require(int(iv.directions.size()) == iv.stream_hi - iv.stream_lo + 1,
                ErrorKind::validation, "project_out_direction: one direction per stream point");
        for (const auto& d : iv.directions) {
          require(d.size() == c.d_model, ErrorKind::shape,
                  "project_out_direction: direction width != d_model");
          require(std::abs(d.norm() - 1.0f) < 1e-3f, ErrorKind::validation,
                  "project_out_direction: direction must be unit norm");
        }
        break;
      }
      case InterventionKind::zero_mlp:
        require(iv.layer >= 0 && iv.layer < c.n_layers, ErrorKind::validation,
                "zero_mlp: layer out of range");
        break;
      case InterventionKind::patch_residual:
        require(iv.layer >= 0 && iv.layer <= c.n_layers, ErrorKind::validation,
                "patch_residual: stream point out of range");
        require(iv.position >= 0 && iv.position < T, ErrorKind::validation,
                "patch_residual: position out of range");
        require(iv.residual_row.size() == c.d_model, ErrorKind::shape,
                "patch_residual: row width != d_model");
        break;
      case InterventionKind::sender_freeze:
        require(freeze == nullptr, ErrorKind::validation,
                "at most one sender_freeze per forward");
        freeze = &iv;
        check_head_ref(c, iv.sender, "sender_freeze sender");
        if (!iv.receiver.unembed) {
          check_head_ref(c, iv.receiver.head, "sender_freeze receiver");
          require(iv.receiver.head.layer > iv.sender.layer, ErrorKind::validation,
                  "sender_freeze: receiver must sit in a later layer than the sender");
        }
        check_patch_source(w, iv.source, T, false, -1, -1);
        require(iv.source->has(SiteKind::head_value, iv.sender.layer, iv.sender.head),
                ErrorKind::cache_miss, "sender_freeze: source cache lacks the sender's values");
        break;
    }
  }

  ActivationCache cache;
  cache.tokens.assign(tokens.begin(), tokens.end());
  cache.model_fingerprint = w.fingerprint;
  cache.n_layers = c.n_layers;
  cache.n_heads = c.n_heads;
  cache.resid_pre_store.resize(size_t(c.n_layers));
  cache.mlp_out_store.resize(size_t(c.n_layers));
  cache.head_value_store.resize(size_t(c.n_layers * c.n_heads));
  cache.head_write_store.resize(size_t(c.n_layers * c.n_heads));
  cache.attn_pattern_store.resize(size_t(c.n_layers * c.n_heads));

  MatF resid(T, c.d_model);
  for (int t = 0; t < T; ++t)
    resid.row(t) = w.embed.row(tokens[size_t(t)]) + w.pos_embed.row(t);

  MatF delta;  // sender_freeze rider, kept out of the live stream
  bool delta_active = false;

  auto apply_stream_interventions = [&](int point) {
    for (const auto& iv : interventions) {
      if (iv.kind == InterventionKind::project_out_direction && point >= iv.stream_lo &&
          point <= iv.stream_hi) {
        const VecF& d = iv.directions[size_t(point - iv.stream_lo)];
        resid.noalias() -= (resid * d) * d.transpose();
      } else if (iv.kind == InterventionKind::patch_residual && iv.layer == point) {
        resid.row(iv.position) = iv.residual_row.transpose();
      }
    }
  };

  const float attn_scale = 1.0f / std::sqrt(float(c.d_head));

  for (int l = 0; l < c.n_layers; ++l) {
    const auto& blk = w.blocks[size_t(l)];
    apply_stream_interventions(l);
    if (capture.wants(SiteKind::resid_pre, l)) cache.resid_pre_store[size_t(l)] = resid;

    const MatF x = ln_rows(resid, blk.ln1);
    const bool receiver_here =
        freeze && delta_active && !freeze->receiver.unembed && freeze->receiver.head.layer == l;
    MatF x_recv;
    if (receiver_here) x_recv = ln_rows(resid + delta, blk.ln1);

    std::vector<MatF> z(size_t(c.n_heads));
    for (int h = 0; h < c.n_heads; ++h) {
      const bool is_receiver = receiver_here && freeze->receiver.head.head == h;
      const MatF& xin = is_receiver ? x_recv : x;
      MatF q = xin * blk.attn.w_q[size_t(h)];
      MatF k = xin * blk.attn.w_k[size_t(h)];
      MatF v = xin * blk.attn.w_v[size_t(h)];
      if (c.use_biases) {
        q.rowwise() += blk.attn.b_q[size_t(h)].transpose();
        k.rowwise() += blk.attn.b_k[size_t(h)].transpose();
        v.rowwise() += blk.attn.b_v[size_t(h)].transpose();
      }
      MatF pattern = MatF::Zero(T, T);
      for (int i = 0; i < T; ++i) {
        // causal span only; softmax over equal scores is exactly uniform
        float best = -std::numeric_limits<float>::infinity();
        for (int j = 0; j <= i; ++j) {
          const float s = q.row(i).dot(k.row(j)) * attn_scale;
          pattern(i, j) = s;
          best = std::max(best, s);
        }
        float denom = 0.0f;
        for (int j = 0; j <= i; ++j) {
          pattern(i, j) = std::exp(pattern(i, j) - best);
          denom += pattern(i, j);
        }
        for (int j = 0; j <= i; ++j) pattern(i, j) /= denom;
      }
      z[size_t(h)] = pattern * v;
      if (capture.wants(SiteKind::attn_pattern, l, h))
        cache.attn_pattern_store[size_t(l * c.n_heads + h)] = std::move(pattern);
    }

    if (receiver_here) delta_active = false;  // consumed by the receiver's recompute

    // head-level edits, in list order
    for (const auto& iv : interventions) {
      const bool z_edit = iv.kind == InterventionKind::zero_heads ||
                          iv.kind == InterventionKind::mean_replace_heads ||
                          iv.kind == InterventionKind::patch_heads;
      if (!z_edit) continue;
      for (size_t hi = 0; hi < iv.heads.size(); ++hi) {
        const HeadRef ref = iv.heads[hi];
        if (ref.layer != l) continue;
        MatF& zh = z[size_t(ref.head)];
        switch (iv.kind) {
          case InterventionKind::zero_heads:
            zh.setZero();
            break;
          case InterventionKind::mean_replace_heads:
            zh = iv.head_means[hi].transpose().replicate(T, 1);
            break;
          case InterventionKind::patch_heads: {
            const MatF& src = iv.source->head_value(ref.layer, ref.head);
            if (iv.single_position)
              zh.row(iv.target_pos) = src.row(iv.source_pos);
            else
              zh = src;
            break;
          }
          default:
            break;
        }
      }
    }

    if (freeze && freeze->sender.layer == l) {
      const MatF& clean_z = freeze->source->head_value(l, freeze->sender.head);
      delta.noalias() = (clean_z - z[size_t(freeze->sender.head)]) *
                        blk.attn.w_o[size_t(freeze->sender.head)];
      delta_active = true;
    }

    for (int h = 0; h < c.n_heads; ++h) {
      MatF write = z[size_t(h)] * blk.attn.w_o[size_t(h)];
      resid += write;
      if (capture.wants(SiteKind::head_write, l, h))
        cache.head_write_store[size_t(l * c.n_heads + h)] = std::move(write);
      if (capture.wants(SiteKind::head_value, l, h))
        cache.head_value_store[size_t(l * c.n_heads + h)] = std::move(z[size_t(h)]);
    }
    if (c.use_biases) resid.rowwise() += blk.attn.b_o.transpose();

    MatF x2 = ln_rows(resid, blk.ln2);
    MatF hidden = x2 * blk.mlp.w_in;
    if (c.use_biases) hidden.rowwise() += blk.mlp.b_in.transpose();
    hidden = hidden.unaryExpr([](float v) { return gelu(v); });
    MatF m = hidden * blk.mlp.w_out;
    if (c.use_biases) m.rowwise() += blk.mlp.b_out.transpose();
    for (const auto& iv : interventions)
      if (iv.kind == InterventionKind::zero_mlp && iv.layer == l) m.setZero();
    resid += m;
    if (capture.wants(SiteKind::mlp_out, l)) cache.mlp_out_store[size_t(l)] = std::move(m);
  }

  apply_stream_interventions(c.n_layers);
  if (capture.wants(SiteKind::resid_final)) cache.resid_final_store = resid;

  ForwardResult out;
  out.logits.resize(T, c.d_vocab);
  const bool frozen_readout = freeze && freeze->receiver.unembed && delta_active;
  for (int t = 0; t < T; ++t) {
    const VecF row = resid.row(t).transpose();
    VecF pre;
    if (frozen_readout) {
      const float inv = freeze->frozen_inv_std.value_or(ln_inv_std(row));
      pre = frozen_ln_row(row + delta.row(t).transpose(), w.ln_f, inv);
    } else {
      pre = layernorm_row(row, w.ln_f);
    }
    out.logits.row(t) = pre.transpose() * w.unembed;
  }
  require(out.logits.allFinite(), ErrorKind::non_finite, "forward: non-finite logits");
  if (capture.wants(SiteKind::logits)) cache.logits_store = out.logits;

  out.cache = std::move(cache);
  return out;
}

double logit_diff(const MatF& logits, int position, int tok_a, int tok_b) {
  require(position >= 0 && position < int(logits.rows()), ErrorKind::validation,
          "logit_diff: position out of range");
  require(tok_a >= 0 && tok_a < int(logits.cols()) && tok_b >= 0 && tok_b < int(logits.cols()),
          ErrorKind::validation, "logit_diff: token out of range");
  return double(logits(position, tok_a)) - double(logits(position, tok_b));
}

}  // namespace circuitlab::model
