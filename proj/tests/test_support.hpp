#pragma once

// Shared helpers for unit tests: a small random model with reproducible
// weights, plus literal-friendly constructors.

#include <random>

#include "circuitlab/model.hpp"

namespace testsupport {

using circuitlab::model::MatF;
using circuitlab::model::ModelConfig;
using circuitlab::model::ModelWeights;
using circuitlab::model::VecF;

inline MatF random_mat(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, float scale) {
  std::normal_distribution<float> g(0.0f, scale);
  MatF m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = g(rng);
  return m;
}

inline VecF random_vec(std::mt19937_64& rng, Eigen::Index n, float scale) {
  std::normal_distribution<float> g(0.0f, scale);
  VecF v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = g(rng);
  return v;
}

inline ModelWeights build_test_model(uint64_t seed, bool use_biases = false, int n_layers = 2,
                                     int n_heads = 2, int d_model = 8, int d_head = 4,
                                     int d_mlp = 16, int d_vocab = 11, int n_ctx = 10) {
  std::mt19937_64 rng(seed);
  ModelWeights w;
  w.config = ModelConfig{n_layers, n_heads, d_model, d_head, d_mlp, d_vocab, use_biases, seed};
  const float s = 0.4f / std::sqrt(float(d_model));
  w.embed = random_mat(rng, d_vocab, d_model, 0.6f);
  w.pos_embed = random_mat(rng, n_ctx, d_model, 0.2f);
  std::uniform_real_distribution<float> ln_scale(0.8f, 1.2f);
  for (int l = 0; l < n_layers; ++l) {
    circuitlab::model::BlockParams b;
    b.ln1.scale = VecF::Constant(d_model, ln_scale(rng));
    b.ln1.offset = random_vec(rng, d_model, 0.02f);
    b.ln2.scale = VecF::Constant(d_model, ln_scale(rng));
    b.ln2.offset = random_vec(rng, d_model, 0.02f);
    for (int h = 0; h < n_heads; ++h) {
      b.attn.w_q.push_back(random_mat(rng, d_model, d_head, s));
      b.attn.w_k.push_back(random_mat(rng, d_model, d_head, s));
      b.attn.w_v.push_back(random_mat(rng, d_model, d_head, s));
      b.attn.w_o.push_back(random_mat(rng, d_head, d_model, s));
      if (use_biases) {
        b.attn.b_q.push_back(random_vec(rng, d_head, 0.05f));
        b.attn.b_k.push_back(random_vec(rng, d_head, 0.05f));
        b.attn.b_v.push_back(random_vec(rng, d_head, 0.05f));
      }
    }
    if (use_biases) b.attn.b_o = random_vec(rng, d_model, 0.05f);
    b.mlp.w_in = random_mat(rng, d_model, d_mlp, s);
    b.mlp.w_out = random_mat(rng, d_mlp, d_model, s);
    if (use_biases) {
      b.mlp.b_in = random_vec(rng, d_mlp, 0.05f);
      b.mlp.b_out = random_vec(rng, d_model, 0.05f);
    }
    w.blocks.push_back(std::move(b));
  }
  w.ln_f.scale = VecF::Constant(d_model, 1.0f);
  w.ln_f.offset = VecF::Zero(d_model);
  w.unembed = random_mat(rng, d_model, d_vocab, 0.5f);
  w.refresh_fingerprint();
  w.validate();
  return w;
}

}  // namespace testsupport
