#include "circuitlab/fixture.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"

#include "circuitlab/ranking.hpp"

namespace circuitlab::fixture {
namespace {

using contrast::ContrastPair;
using contrast::TaskContrast;
using model::ActivationCache;
using model::CaptureSpec;
using model::HeadRef;
using model::MatF;
using model::ModelWeights;
using model::SiteKind;
using model::VecF;

// Residual coordinate layout. Coords 0..5 hold three +/- carrier pairs (each
// zero-sum, so layernorm centering ignores them), 6..19 hold the four circuit
// axes, and everything from 20 up is filler, split into three spans:
//   A  per-pair content: only content-token embedding rows live here;
//   B  scratch: the mlp banks write here and the planted carry dims ferry it;
//   C  common: the shared ballast vector plus marker/template/positional rows.
// Every embedding row carries the ballast, so the layernorm scale at every
// position is pinned by it and per-pair material stays a small perturbation.
// Nothing reads A except the layer-0 banks and nothing reads B except the
// carry dims and the deep bank, which keeps the scratch traffic one-way.
constexpr int kCircuitLo = 6;
constexpr int kCircuitHi = 20;
constexpr int kFillerLo = 20;
constexpr int kContentLo = 33;  // first token id usable as per-pair content

constexpr float kSignalAmp = 4.0f;
constexpr float kCommonNorm = 16.0f;  // ballast shared by every embedding row
constexpr float kReadGain = 1.5f;
constexpr float kLeakLo = 0.001f, kLeakHi = 0.004f;

// Per-pair variability plumbing. Head rankings, patching and the behavior
// margins all key off the circuit axes, which these knobs never touch; they
// exist so that pair differences are not all the same vector, which is what
// sign-flip permutation nulls need to spread below 1.
constexpr float kContentSd = 0.5f;   // content-token embedding noise, span A
constexpr float kBcastRead = 2.0f;   // broadcast head carrier read
constexpr float kBcastWrite = 1.5f;  // broadcast head carrier write-back
constexpr float kCarryRead = 11.0f;  // planted value dims 2.. read of span B
constexpr float kCarryWrite = 1.0f;  // planted write rows 2.., as a fraction of amp
constexpr float kBankKeyGain = 1.0f;      // bank read of its keying direction
constexpr float kBankReadNorm = 2.2f;     // layer-0 bank read of span A
constexpr float kBankReadDeep = 0.5f;     // deep bank read of span B
constexpr float kBankWriteNorm0 = 9.0f;   // layer-0 bank write rows
constexpr float kBankWriteNormDeep = 12.0f;  // deep bank write rows

constexpr double kTruthGain = 1.5;
constexpr double kBiasGain = 0.75;
constexpr double kOpinionGain = 1.5;

constexpr int kDHead = 8;
constexpr int kDMlp = 48;

// rng counters inside the fixture stream; the draw order is part of the format
constexpr uint64_t cAxes = 0;
constexpr uint64_t cCommon = 1;
constexpr uint64_t cEmbed = 2;
constexpr uint64_t cPosEmbed = 3;
constexpr uint64_t cHeads = 4;
constexpr uint64_t cUnembed = 5;
constexpr uint64_t cNormTargets = 6;
constexpr uint64_t cCorpusBase = 8;    // + task index
constexpr uint64_t cMlpBase = 0x40;    // + layer
constexpr uint64_t cNoiseBase = 0x100; // noise fixtures use their own block

VecF carrier(int d_model, int lo) {
  VecF v = VecF::Zero(d_model);
  v[lo] = 1.0f;
  v[lo + 1] = -1.0f;
  return v;
}

// split of the filler block: [a_lo,a_hi) content, [b_lo,b_hi) scratch,
// [c_lo,c_hi) common. The scratch span gets half the width: it has to hold
// as many independent pair-difference directions as possible, since the
// permutation nulls only spread out when the carried noise is high rank.
struct Spans {
  int a_lo, a_hi, b_lo, b_hi, c_lo, c_hi;
};

Spans filler_spans(int d_model) {
  int quarter = (d_model - kFillerLo) / 4;
  Spans s;
  s.a_lo = kFillerLo;
  s.a_hi = kFillerLo + quarter;
  s.b_lo = s.a_hi;
  s.b_hi = kFillerLo + 3 * quarter;
  s.c_lo = s.b_hi;
  s.c_hi = d_model;
  return s;
}

void fill_span_gauss(std::mt19937_64& rng, VecF& v, int lo, int hi, float sd) {
  std::normal_distribution<float> g(0.0f, sd);
  for (int i = lo; i < hi; ++i) v[i] = g(rng);
}

// Unit vector on [lo, hi) with zero coordinate sum. Layernorm subtracts the
// coordinate mean, so a sign-keyed write with nonzero sum would shift that
// mean differently on the two contrast sides and every read would pick up
// the shift; zero-sum writes keep the normalized stream exactly
// antisymmetric between sides.
VecF span_unit(std::mt19937_64& rng, int d_model, int lo, int hi) {
  std::normal_distribution<float> g(0.0f, 1.0f);
  for (int attempt = 0; attempt < 16; ++attempt) {
    VecF v = VecF::Zero(d_model);
    for (int i = lo; i < hi; ++i) v[i] = g(rng);
    float mean = v.segment(lo, hi - lo).mean();
    for (int i = lo; i < hi; ++i) v[i] -= mean;
    float n = v.norm();
    if (n > 1e-3f) return v / n;
  }
  fail(ErrorKind::degenerate, "span sampling collapsed in 16 attempts");
}

// Unit vector on the circuit block, orthogonal to the ones vector and to all
// previously drawn axes.
VecF zero_sum_unit(std::mt19937_64& rng, int d_model, const std::vector<VecF>& prev) {
  std::normal_distribution<float> g(0.0f, 1.0f);
  for (int attempt = 0; attempt < 16; ++attempt) {
    VecF v = VecF::Zero(d_model);
    for (int i = kCircuitLo; i < kCircuitHi; ++i) v[i] = g(rng);
    float mean = v.segment(kCircuitLo, kCircuitHi - kCircuitLo).mean();
    for (int i = kCircuitLo; i < kCircuitHi; ++i) v[i] -= mean;
    for (const VecF& p : prev) v -= p * v.dot(p);
    float n = v.norm();
    if (n > 1e-2f) return v / n;
  }
  fail(ErrorKind::degenerate, "axis sampling found no independent direction in 16 attempts");
}

model::LayerNormParams unit_ln(int d) { return {VecF::Ones(d), VecF::Zero(d)}; }

void alloc_zero_attention(model::AttentionParams& a, int n_heads, int d_model) {
  a.w_q.assign(n_heads, MatF::Zero(d_model, kDHead));
  a.w_k.assign(n_heads, MatF::Zero(d_model, kDHead));
  a.w_v.assign(n_heads, MatF::Zero(d_model, kDHead));
  a.w_o.assign(n_heads, MatF::Zero(kDHead, d_model));
}

void filler_mlp(std::mt19937_64& rng, model::MlpParams& m, int d_model) {
  m.w_in = MatF::Zero(d_model, kDMlp);
  m.w_out = MatF::Zero(kDMlp, d_model);
  std::normal_distribution<float> gin(0.0f, 0.3f), gout(0.0f, 0.1f);
  for (int j = 0; j < kDMlp; ++j)
    for (int i = kFillerLo; i < d_model; ++i) m.w_in(i, j) = gin(rng);
  for (int j = 0; j < kDMlp; ++j)
    for (int i = kFillerLo; i < d_model; ++i) m.w_out(j, i) = gout(rng);
}

struct BankKey {
  const VecF* key;
  int n_pairs;
};

// Mlp block for the planted-circuit layers: four-unit cells reading
// key_gain*key +/- r, and the same two reads with the key negated, with
// output rows +w/-w/-w/+w, plus leftover filler units on the common span.
// With key content s and cell content a = r.x the cell emits
//   [g(s+a) - g(s-a) - g(-s+a) + g(-s-a)] w = 2[C(a) - a] w,
// where C(a) = g(s+a) - g(s-a) and g(x) - g(-x) = x was used. On the other
// contrast side s flips sign and the output is exactly -2[C(a) - a] w, so
// the two sides fire with identical magnitude and the side difference
// 4[C(a) - a] w is odd in a: over sign-symmetric content the coupling has
// exactly zero mean while its per-pair value moves with the prompt. A cell
// is exactly silent when its key is absent (s = 0 makes C(a) = a) and at
// positions with no content (a = 0). Reads come from read_span, writes go
// to span B, so stacking banks never feeds one's output into its own input.
void bank_mlp(std::mt19937_64& rng, model::MlpParams& m, int d_model,
              const std::vector<BankKey>& keys, int read_lo, int read_hi, float read_norm,
              float write_norm) {
  m.w_in = MatF::Zero(d_model, kDMlp);
  m.w_out = MatF::Zero(kDMlp, d_model);
  const Spans sp = filler_spans(d_model);
  // per-cell key gain: cells sit at different points on the gelu saturation
  // curve, so their couplings decorrelate across positions instead of all
  // tracking one shared response profile
  std::uniform_real_distribution<float> key_jitter(0.7f, 1.5f);
  int u = 0;
  for (const auto& bk : keys) {
    for (int p = 0; p < bk.n_pairs; ++p) {
      require(u + 3 < kDMlp, ErrorKind::validation, "mlp bank does not fit in d_mlp");
      VecF r = read_norm * span_unit(rng, d_model, read_lo, read_hi);
      VecF w = write_norm * span_unit(rng, d_model, sp.b_lo, sp.b_hi);
      VecF k = (kBankKeyGain * key_jitter(rng)) * (*bk.key);
      m.w_in.col(u) = k + r;
      m.w_in.col(u + 1) = k - r;
      m.w_in.col(u + 2) = -k + r;
      m.w_in.col(u + 3) = -k - r;
      m.w_out.row(u) = w.transpose();
      m.w_out.row(u + 1) = -w.transpose();
      m.w_out.row(u + 2) = -w.transpose();
      m.w_out.row(u + 3) = w.transpose();
      u += 4;
    }
  }
  std::normal_distribution<float> gin(0.0f, 0.3f), gout(0.0f, 0.1f);
  for (; u < kDMlp; ++u) {
    for (int i = sp.c_lo; i < sp.c_hi; ++i) m.w_in(i, u) = gin(rng);
    for (int i = sp.c_lo; i < sp.c_hi; ++i) m.w_out(u, i) = gout(rng);
  }
}

struct PlantedSpec {
  HeadRef ref;
  float amp = 0.0f;
};

// Planted heads: dims 0/1 do the task (carrier in, circuit axis out) and set
// the head's ranking; dims 2.. ferry the scratch span along, scaled with amp
// so every planted head keeps the same signal-to-carry proportion. The carry
// dims' side difference is exactly the transported layer-0 bank coupling,
// which is what keeps pair differences from collapsing onto a single vector.
void planted_head(std::mt19937_64& rng, model::AttentionParams& a, int h, int d_model,
                  const VecF& c_truth, const VecF& c_op, const VecF& truth_axis,
                  const VecF& opinion_axis, float amp, float carry_read) {
  const Spans sp = filler_spans(d_model);
  a.w_v[h].col(0) = kReadGain * c_truth;
  a.w_v[h].col(1) = kReadGain * c_op;
  a.w_o[h].row(0) = amp * truth_axis.transpose();
  a.w_o[h].row(1) = amp * opinion_axis.transpose();
  for (int c = 2; c < kDHead; ++c) {
    a.w_v[h].col(c) = carry_read * span_unit(rng, d_model, sp.b_lo, sp.b_hi);
    a.w_o[h].row(c) = (kCarryWrite * amp) * span_unit(rng, d_model, sp.b_lo, sp.b_hi).transpose();
  }
}

// Layer-0 broadcast: reads both signal carriers and writes them back, so the
// signal at position 1 becomes visible to every later position, where the
// layer-0 banks key on it against that position's own content. Attention is
// uniform, so the rebroadcast amplitude falls off as 1/(pos+1).
void broadcast_head(model::AttentionParams& a, int h, const VecF& c_truth, const VecF& c_op) {
  a.w_v[h].col(0) = kBcastRead * c_truth;
  a.w_v[h].col(1) = kBcastRead * c_op;
  a.w_o[h].row(0) = kBcastWrite * c_truth.transpose();
  a.w_o[h].row(1) = kBcastWrite * c_op.transpose();
}

// Non-planted heads: a tiny leak of both carriers (so rankings have a
// deterministic tail) plus filler reads and writes scaled to a Frobenius
// target, which gives the norm-matched control pool something to match.
void background_head(std::mt19937_64& rng, model::AttentionParams& a, int h, int d_model,
                     const VecF& c_truth, const VecF& c_op, const VecF& truth_axis,
                     const VecF& opinion_axis, float frob_target) {
  std::uniform_real_distribution<float> leak(kLeakLo, kLeakHi);
  // filler reads stay near-silent: the write rows can be large (their norms
  // are matched against planted heads), so even modest content-dependent
  // values would jitter the layernorm scale at the signal slot and with it
  // the planted heads' signal
  std::normal_distribution<float> read(0.0f, 0.01f), row(0.0f, 1.0f);
  // filler traffic is confined to the common span: the shared-scratch spans
  // carry sign-keyed content, and a head that reads the (side-equal) ballast
  // and writes into them would plant a side-keyed constant in every pair
  Spans sp = filler_spans(d_model);
  a.w_v[h].col(0) = leak(rng) * c_truth;
  a.w_v[h].col(1) = leak(rng) * c_op;
  for (int c = 2; c < kDHead; ++c)
    for (int i = sp.c_lo; i < sp.c_hi; ++i) a.w_v[h](i, c) = read(rng);
  a.w_o[h].row(0) = truth_axis.transpose();
  a.w_o[h].row(1) = opinion_axis.transpose();
  MatF filler = MatF::Zero(kDHead, d_model);
  for (int r = 2; r < kDHead; ++r)
    for (int i = sp.c_lo; i < sp.c_hi; ++i) filler(r, i) = row(rng);
  float want = std::sqrt(std::max(frob_target * frob_target - 2.0f, 0.25f));
  float have = filler.norm();
  if (have > 1e-6f) filler *= want / have;
  a.w_o[h].bottomRows(kDHead - 2) = filler.bottomRows(kDHead - 2);
}

struct Core {
  ModelWeights w;
  VecF truth, opinion, bias, control;
  VecF common;
  std::vector<PlantedSpec> planted;
  std::vector<double> planted_truth;  // truth-axis write of each planted head
  double total_truth = 0.0;           // truth-axis content of the final residual
  double beta = 0.0;                  // query-token bias amplitude
};

// scratch_scale damps the pair-specific scratch traffic (bank writes and the
// carry reads) without touching the signal path. The planted fixture wants
// that traffic loud so permutation nulls spread out; the trajectory fixtures
// want per-trial readouts tightly grouped around their calibrated margins.
Core build_core(uint64_t seed, int n_layers, int n_heads, int d_model, int d_vocab,
                bool with_override, float scratch_scale = 1.0f) {
  require(n_layers >= 2, ErrorKind::validation, "fixture needs n_layers >= 2");
  require(n_heads >= 2, ErrorKind::validation, "fixture needs n_heads >= 2 per layer");
  require(d_model >= kFillerLo + 9, ErrorKind::validation, "fixture needs d_model >= 29");
  require(d_vocab >= kContentLo + 12, ErrorKind::validation, "fixture needs d_vocab >= 45");
  require(!with_override || n_layers >= 3, ErrorKind::validation,
          "override fixture needs n_layers >= 3");

  Core core;
  core.w.config.n_layers = n_layers;
  core.w.config.n_heads = n_heads;
  core.w.config.d_model = d_model;
  core.w.config.d_head = kDHead;
  core.w.config.d_mlp = kDMlp;
  core.w.config.d_vocab = d_vocab;
  core.w.config.use_biases = false;
  core.w.config.seed = seed;

  VecF c1 = carrier(d_model, 0), c2 = carrier(d_model, 2), c3 = carrier(d_model, 4);

  {
    auto rng = seeded_rng(seed, rng_stream::fixture, cAxes);
    std::vector<VecF> prev;
    core.truth = zero_sum_unit(rng, d_model, prev);
    prev.push_back(core.truth);
    core.opinion = zero_sum_unit(rng, d_model, prev);
    prev.push_back(core.opinion);
    core.bias = zero_sum_unit(rng, d_model, prev);
    prev.push_back(core.bias);
    core.control = zero_sum_unit(rng, d_model, prev);
  }
  const Spans sp = filler_spans(d_model);
  {
    auto rng = seeded_rng(seed, rng_stream::fixture, cCommon);
    core.common = VecF::Zero(d_model);
    fill_span_gauss(rng, core.common, sp.c_lo, sp.c_hi, 1.0f);
    core.common *= kCommonNorm / core.common.norm();
  }

  // Every row carries the common ballast, so layernorm sees roughly the same
  // scale at every position. Content-pool tokens add their per-pair material
  // on span A and nothing else touches that span, so the banks' content reads
  // see a zero-mean, pair-specific vector and not a fixed offset.
  core.w.embed = MatF::Zero(d_vocab, d_model);
  {
    auto rng = seeded_rng(seed, rng_stream::fixture, cEmbed);
    for (int t = tok::reserved_lo; t < kContentLo; ++t) {
      VecF v = core.common;
      fill_span_gauss(rng, v, sp.c_lo, sp.c_hi, 0.3f);
      core.w.embed.row(t) = v.transpose();
    }
    // The content pool is sign-symmetric: tokens come in +/- twins, so for
    // any odd function of a content read the pool average is exactly zero.
    // The banks' side couplings are odd in the content read, which makes
    // their across-pair means vanish instead of accumulating a fixed offset
    // that every task would share. An odd leftover slot carries no content.
    for (int t = kContentLo; t + 1 < d_vocab; t += 2) {
      VecF a = VecF::Zero(d_model);
      fill_span_gauss(rng, a, sp.a_lo, sp.a_hi, kContentSd);
      core.w.embed.row(t) = (core.common + a).transpose();
      core.w.embed.row(t + 1) = (core.common - a).transpose();
    }
    if ((d_vocab - kContentLo) % 2 != 0)
      core.w.embed.row(d_vocab - 1) = core.common.transpose();
    for (int t : {tok::agree, tok::disagree, tok::op_yes, tok::op_no}) {
      VecF v = core.common;
      fill_span_gauss(rng, v, sp.c_lo, sp.c_hi, 0.3f);
      core.w.embed.row(t) = v.transpose();
    }
  }
  core.w.embed.row(tok::sig_true) = (kSignalAmp * c1 + core.common).transpose();
  core.w.embed.row(tok::sig_false) = (-kSignalAmp * c1 + core.common).transpose();
  core.w.embed.row(tok::opinion_a) = (kSignalAmp * c2 + core.common).transpose();
  core.w.embed.row(tok::opinion_b) = (-kSignalAmp * c2 + core.common).transpose();
  core.w.embed.row(tok::pressure) = (kSignalAmp * c3 + core.common).transpose();
  core.w.embed.row(tok::neutral) = core.common.transpose();
  core.w.embed.row(tok::sig_weak) = (-2.0f * c1 + core.common).transpose();
  // ballast only for now; calibrate_bias adds the bias pull on top
  core.w.embed.row(tok::query) = core.common.transpose();

  core.w.pos_embed = MatF::Zero(kSeqLen, d_model);
  {
    auto rng = seeded_rng(seed, rng_stream::fixture, cPosEmbed);
    for (int p = 0; p < kSeqLen; ++p) {
      VecF v = VecF::Zero(d_model);
      fill_span_gauss(rng, v, sp.c_lo, sp.c_hi, 0.2f);
      core.w.pos_embed.row(p) = v.transpose();
    }
  }

  // All planted heads sit in layer 1, downstream of the layer-0 broadcast and
  // the layer-0 banks; a strong head plus one or two weaker ones. The
  // amplitudes put the strong head's solo contribution just below the bias
  // pull and the top-two sum just above it; calibrate_bias pins that down.
  // Minimal configs get a louder second head and calmer scratch traffic:
  // with so few background heads the per-prompt content swing is larger
  // relative to the layernorm scale, and every calibration margin has to fit
  // inside the second head's contribution.
  if (n_heads >= 4) {
    core.planted = {{{1, 0}, 3.2f}, {{1, 1}, 9.6f}, {{1, 3}, 3.85f}};
  } else {
    core.planted = {{{1, 0}, 4.8f}, {{1, 1}, 9.6f}};
    scratch_scale *= 0.7f;
  }

  std::vector<float> planted_frob;
  for (const auto& ps : core.planted)
    planted_frob.push_back(ps.amp * std::sqrt(2.0f + float(kDHead - 2) * kCarryWrite * kCarryWrite));

  {
    auto rng = seeded_rng(seed, rng_stream::fixture, cHeads);
    auto trng = seeded_rng(seed, rng_stream::fixture, cNormTargets);
    std::uniform_real_distribution<float> jitter(0.98f, 1.02f), spread(3.0f, 15.0f);
    core.w.blocks.resize(n_layers);
    int background_index = 0;
    for (int l = 0; l < n_layers; ++l) {
      auto& blk = core.w.blocks[l];
      blk.ln1 = unit_ln(d_model);
      blk.ln2 = unit_ln(d_model);
      alloc_zero_attention(blk.attn, n_heads, d_model);
      for (int h = 0; h < n_heads; ++h) {
        const PlantedSpec* ps = nullptr;
        for (const auto& cand : core.planted)
          if (cand.ref == HeadRef{l, h}) ps = &cand;
        if (ps) {
          planted_head(rng, blk.attn, h, d_model, c1, c2, core.truth, core.opinion, ps->amp,
                       kCarryRead * scratch_scale);
          continue;
        }
        if (l == 0 && h == n_heads - 1) {
          broadcast_head(blk.attn, h, c1, c2);
          continue;
        }
        if (with_override && l == n_layers - 1 && h == 0) {
          // late override: reads the pressure carrier, writes the truth axis;
          // the row is rescaled once the base signal has been measured
          blk.attn.w_v[h].col(0) = kReadGain * c3;
          blk.attn.w_o[h].row(0) = core.truth.transpose();
          continue;
        }
        float target = background_index < int(planted_frob.size())
                           ? planted_frob[background_index] * jitter(trng)
                           : spread(trng);
        ++background_index;
        background_head(rng, blk.attn, h, d_model, c1, c2, core.truth, core.opinion, target);
      }
      auto mrng = seeded_rng(seed, rng_stream::fixture, cMlpBase + uint64_t(l));
      if (l == 0) {
        // keyed on the rebroadcast carriers: the banks fire only where the
        // key meets span-A material, i.e. at the content positions
        bank_mlp(mrng, blk.mlp, d_model, {{&c1, 5}, {&c2, 5}}, sp.a_lo, sp.a_hi,
                 kBankReadNorm, kBankWriteNorm0 * scratch_scale);
      } else if (l == 1) {
        // keyed on the truth axis, reading the carry traffic the planted
        // heads just wrote; adds pair-specific spread right after the
        // planted layer
        bank_mlp(mrng, blk.mlp, d_model, {{&core.truth, 7}}, sp.b_lo, sp.b_hi,
                 kBankReadDeep, kBankWriteNormDeep * scratch_scale);
      } else {
        // plain filler: deeper layers add no new pair-specific material, the
        // residual stream already carries it forward
        bank_mlp(mrng, blk.mlp, d_model, {}, sp.c_lo, sp.c_hi, 0.0f, 0.0f);
      }
    }
  }

  core.w.ln_f = unit_ln(d_model);

  core.w.unembed = MatF::Zero(d_model, d_vocab);
  {
    auto rng = seeded_rng(seed, rng_stream::fixture, cUnembed);
    std::normal_distribution<float> g(0.0f, 0.2f);
    for (int t = 0; t < d_vocab; ++t)
      for (int i = kFillerLo; i < d_model; ++i) core.w.unembed(i, t) = g(rng);
  }
  VecF answer = float(kTruthGain) * core.truth + float(kBiasGain) * core.bias;
  core.w.unembed.col(tok::agree) = answer;
  core.w.unembed.col(tok::disagree) = -answer;
  core.w.unembed.col(tok::op_yes) = float(kOpinionGain) * core.opinion;
  core.w.unembed.col(tok::op_no) = -float(kOpinionGain) * core.opinion;

  core.w.refresh_fingerprint();
  core.w.validate();
  return core;
}

std::string idx3(int i) {
  std::ostringstream s;
  s << std::setw(3) << std::setfill('0') << i;
  return s.str();
}

struct CorpusSpec {
  std::string name;
  int task_index = 0;
  int n_pairs = 0;
  int sig_pos = tok::sig_true;
  int sig_neg = tok::sig_false;
  int answer_a = tok::agree;
  int answer_b = tok::disagree;
  std::vector<int> pressured;  // pair indices with the pressure token in slot 10
  std::vector<int> weak;       // pair indices whose negative side reads the weak signal
};

// Prompt layout: marker, signal, four per-pair content fillers, four task
// template tokens, pressure/neutral, query. The signal comes first so every
// later position can see it under causal attention; the two sides differ only
// in the signal slot.
TaskContrast make_corpus(uint64_t seed, const CorpusSpec& spec, int d_vocab) {
  auto rng = seeded_rng(seed, rng_stream::fixture, cCorpusBase + uint64_t(spec.task_index));
  std::uniform_int_distribution<int> pick(kContentLo, d_vocab - 1);
  std::set<int> pressured(spec.pressured.begin(), spec.pressured.end());
  std::set<int> weak(spec.weak.begin(), spec.weak.end());

  TaskContrast tc;
  tc.name = spec.name;
  for (int i = 0; i < spec.n_pairs; ++i) {
    ContrastPair p;
    p.pair_id = spec.name + "_p" + idx3(i);
    p.content_key = spec.name + "_c" + idx3(i);
    std::vector<int> base(kSeqLen, tok::pad);
    base[0] = tok::reserved_lo + spec.task_index;
    for (int s = 2; s <= 5; ++s) base[s] = pick(rng);
    for (int s = 6; s <= 9; ++s) base[s] = 17 + 4 * spec.task_index + (s - 6);
    base[10] = pressured.count(i) ? tok::pressure : tok::neutral;
    base[11] = tok::query;
    p.pos_tokens = base;
    p.pos_tokens[kSignalPos] = spec.sig_pos;
    p.neg_tokens = base;
    p.neg_tokens[kSignalPos] = weak.count(i) ? tok::sig_weak : spec.sig_neg;
    p.answer_pos = spec.answer_a;
    p.answer_neg = spec.answer_b;
    p.measure_last = true;
    p.measure_pos_pos = kMeasurePos;
    p.measure_pos_neg = kMeasurePos;
    tc.pairs.push_back(std::move(p));
  }
  return tc;
}

CorpusSpec basic_spec(const std::string& name, int task_index, int n_pairs) {
  CorpusSpec s;
  s.name = name;
  s.task_index = task_index;
  s.n_pairs = n_pairs;
  return s;
}

// Measures each planted head's truth-axis write and the total truth content
// of the final residual, averaged over real corpus prompts, then sets the
// query token's bias so the strongest head alone cannot outweigh it but the
// top two can. The margins scale with the final layernorm width (what a
// truth excess is worth after normalization) plus twice the spread observed
// across the calibration prompts, so no corpus prompt lands inside them.
// The query embedding cannot feed back into these measurements: no carrier
// content ever sits at the query position.
void calibrate_bias(Core& core, const std::vector<std::vector<int>>& prompts) {
  require(prompts.size() >= 3, ErrorKind::validation,
          "bias calibration needs at least 3 prompts");
  const int np = int(core.planted.size());
  std::vector<double> t(np, 0.0);
  double total = 0.0, sig = 0.0;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& toks : prompts) {
    auto res = model::forward(core.w, toks,
                              CaptureSpec::of({{SiteKind::head_write, -1, -1},
                                               {SiteKind::resid_final, -1, -1}}));
    for (int i = 0; i < np; ++i) {
      VecF wr = model::head_write_vector(res.cache, core.planted[i].ref.layer,
                                         core.planted[i].ref.head, kMeasurePos);
      t[i] += double(wr.dot(core.truth));
    }
    VecF xf = res.cache.resid_final().row(kMeasurePos).transpose();
    double tot = double(xf.dot(core.truth));
    total += tot;
    lo = std::min(lo, tot);
    hi = std::max(hi, tot);
    sig += 1.0 / double(model::ln_inv_std(xf));
  }
  const double n = double(prompts.size());
  for (double& v : t) v /= n;
  core.planted_truth = t;
  core.total_truth = total / n;
  sig /= n;

  std::sort(t.begin(), t.end(), std::greater<>());
  core.beta = kTruthGain * (t[0] + 0.5 * t[1]) / kBiasGain;
  core.w.embed.row(tok::query) = (float(core.beta) * core.bias + core.common).transpose();
  core.w.refresh_fingerprint();

  double pull = kBiasGain * core.beta;
  double margin = 0.175 * sig + 2.0 * kTruthGain * (hi - lo);
  bool ok = t.back() > 0.05 && kTruthGain * t[0] < pull - margin &&
            kTruthGain * (t[0] + t[1]) > pull + margin &&
            kTruthGain * core.total_truth > pull + margin;
  if (!ok) {
    std::ostringstream d;
    d << "bias calibration margins failed: strongest=" << t[0] << " second=" << t[1]
      << " weakest=" << t.back() << " total=" << core.total_truth << " pull=" << pull
      << " required margin=" << margin;
    fail(ErrorKind::degenerate, d.str());
  }
}

double run_ld(const ModelWeights& w, const std::vector<int>& toks, int a, int b) {
  auto res = model::forward(w, toks, CaptureSpec::none());
  return model::logit_diff(res.logits, kMeasurePos, a, b);
}

// truth/bias axis content of the final residual at the measure position
std::pair<double, double> run_content(const ModelWeights& w, const std::vector<int>& toks,
                                      const VecF& truth, const VecF& bias) {
  auto res = model::forward(w, toks, CaptureSpec::of({{SiteKind::resid_final, -1, -1}}));
  VecF xf = res.cache.resid_final().row(kMeasurePos).transpose();
  return {double(xf.dot(truth)), double(xf.dot(bias))};
}

void check_behaviors(const ModelWeights& w, const TaskContrast& tc, double margin,
                     const VecF& truth, const VecF& bias, std::vector<PairSigns>* out) {
  for (size_t i = 0; i < tc.pairs.size(); ++i) {
    const auto& p = tc.pairs[i];
    double lp = run_ld(w, p.pos_tokens, p.answer_pos, p.answer_neg);
    double ln = run_ld(w, p.neg_tokens, p.answer_pos, p.answer_neg);
    if (!(lp > margin) || !(ln < -margin)) {
      auto [tp, bp] = run_content(w, p.pos_tokens, truth, bias);
      auto [tn, bn] = run_content(w, p.neg_tokens, truth, bias);
      std::ostringstream d;
      d << tc.name << " pair " << p.pair_id << " readout out of band: +side=" << lp
        << " -side=" << ln << " required margin=" << margin << " (+truth=" << tp
        << " +bias=" << bp << " -truth=" << tn << " -bias=" << bn << ")";
      fail(ErrorKind::degenerate, d.str());
    }
    if (out) out->push_back({int(i), 1, -1});
  }
}

void check_importance(const ModelWeights& w, const TaskContrast& tc,
                      const std::vector<PlantedSpec>& planted, double min_ratio) {
  auto imp = ranking::write_norm_importance(w, tc);
  std::set<int> flat;
  for (const auto& ps : planted) flat.insert(ps.ref.layer * w.config.n_heads + ps.ref.head);

  double min_planted = std::numeric_limits<double>::infinity();
  double max_other = 0.0;
  for (int l = 0; l < w.config.n_layers; ++l)
    for (int h = 0; h < w.config.n_heads; ++h) {
      double v = imp.at(l, h);
      if (flat.count(l * w.config.n_heads + h))
        min_planted = std::min(min_planted, v);
      else
        max_other = std::max(max_other, v);
    }
  auto top = ranking::top_k_indices(imp, int(planted.size()));
  std::set<int> top_set(top.indices.begin(), top.indices.end());
  if (top_set != flat || !(min_planted >= min_ratio * max_other)) {
    std::ostringstream d;
    d << tc.name << " importance separation failed: min planted=" << min_planted
      << " max background=" << max_other << " required ratio=" << min_ratio;
    fail(ErrorKind::degenerate, d.str());
  }
}

void check_axes(const Core& core) {
  const VecF* axes[] = {&core.truth, &core.opinion, &core.bias, &core.control};
  const char* names[] = {"truth", "opinion", "bias", "control"};
  for (int i = 0; i < 4; ++i) {
    require(std::abs(axes[i]->norm() - 1.0f) < 1e-4f, ErrorKind::degenerate,
            std::string("axis not unit: ") + names[i]);
    require(std::abs(axes[i]->sum()) < 1e-3f, ErrorKind::degenerate,
            std::string("axis not zero-sum: ") + names[i]);
    for (int j = i + 1; j < 4; ++j) {
      float c = axes[i]->dot(*axes[j]);
      if (std::abs(c) >= 0.01f) {
        std::ostringstream d;
        d << "axes not orthogonal: " << names[i] << " vs " << names[j] << " cosine=" << c;
        fail(ErrorKind::degenerate, d.str());
      }
    }
  }
}

// Group-difference trajectory computed straight from caches (the run's own
// final-layernorm scale at every row), used to certify the shape the lens
// module is expected to recover.
void check_trajectory(const ModelWeights& w, const TaskContrast& trials,
                      const std::vector<int>& expected_agree, bool peak_at_final,
                      const VecF& truth, const VecF& bias) {
  std::set<int> agree_set(expected_agree.begin(), expected_agree.end());
  int L = w.config.n_layers;
  std::vector<double> sum_agr(L + 1, 0.0), sum_dis(L + 1, 0.0);
  int n_agr = 0, n_dis = 0;

  for (size_t i = 0; i < trials.pairs.size(); ++i) {
    const auto& p = trials.pairs[i];
    double lp = run_ld(w, p.pos_tokens, p.answer_pos, p.answer_neg);
    require(lp > 0.25, ErrorKind::degenerate, "positive-side readout too weak: " + p.pair_id);

    auto res = model::forward(w, p.neg_tokens,
                              CaptureSpec::of({{SiteKind::resid_pre, -1, -1},
                                               {SiteKind::resid_final, -1, -1}}));
    double lf = model::logit_diff(res.logits, kMeasurePos, p.answer_pos, p.answer_neg);
    if (!(std::abs(lf) > 0.25)) {
      VecF xfd = res.cache.resid_final().row(kMeasurePos).transpose();
      std::ostringstream d;
      d << "trial readout too close to zero: " << p.pair_id << " ld=" << lf
        << " truth=" << xfd.dot(truth) << " bias=" << xfd.dot(bias);
      fail(ErrorKind::degenerate, d.str());
    }
    bool agrees = lf > 0.0;
    require(agrees == bool(agree_set.count(int(i))), ErrorKind::degenerate,
            "trial landed in the wrong outcome group: " + p.pair_id);

    double sgn = agrees ? 1.0 : -1.0;
    VecF dir = w.unembed.col(p.answer_pos) - w.unembed.col(p.answer_neg);
    VecF xf = res.cache.resid_final().row(kMeasurePos).transpose();
    float inv = model::ln_inv_std(xf);
    for (int l = 0; l <= L; ++l) {
      VecF x = l < L ? VecF(res.cache.resid_pre(l).row(kMeasurePos).transpose()) : xf;
      VecF row = model::frozen_ln_row(x, w.ln_f, inv);
      double v = sgn * dir.cast<double>().dot(row.cast<double>());
      (agrees ? sum_agr : sum_dis)[l] += v;
    }
    (agrees ? n_agr : n_dis)++;
  }
  require(n_agr > 0 && n_dis > 0, ErrorKind::degenerate, "one trial outcome group is empty");

  std::vector<double> diff(L + 1);
  for (int l = 0; l <= L; ++l) diff[l] = sum_dis[l] / n_dis - sum_agr[l] / n_agr;
  int peak = int(std::max_element(diff.begin(), diff.end()) - diff.begin());
  require(diff[L] > 0.1, ErrorKind::degenerate, "final group difference too small");
  if (peak_at_final) {
    require(peak == L, ErrorKind::degenerate, "group difference peaked before the final layer");
    for (int l = 0; l < L; ++l)
      require(diff[l] <= diff[l + 1] + 1e-6, ErrorKind::degenerate,
              "group difference not monotone");
  } else {
    require(peak != L && diff[peak] > diff[L] + 0.5, ErrorKind::degenerate,
            "no mid-layer excess in the group difference");
  }
}

void check_disjoint(const TaskContrast& a, const TaskContrast& b) {
  auto rep = contrast::split_disjoint(a, b);
  if (!rep.disjoint) {
    std::ostringstream d;
    d << "content keys overlap between " << a.name << " and " << b.name << ":";
    for (const auto& k : rep.shared_keys) d << " " << k;
    fail(ErrorKind::degenerate, d.str());
  }
}

}  // namespace

const contrast::TaskContrast& PlantedFixture::task(const std::string& name) const {
  if (name == "syc") return syc;
  if (name == "lie") return lie;
  if (name == "instructed") return instructed;
  if (name == "opinion") return opinion;
  fail(ErrorKind::validation, "unknown task name: " + name);
}

PlantedFixture build_planted_fixture(uint64_t seed, int n_layers, int n_heads, int d_model,
                                     int d_vocab, int n_pairs) {
  require(n_pairs >= 8, ErrorKind::validation, "fixture needs n_pairs >= 8");
  Core core = build_core(seed, n_layers, n_heads, d_model, d_vocab, false);

  PlantedFixture fx;
  fx.syc = make_corpus(seed, basic_spec("syc", 0, n_pairs), d_vocab);
  {
    std::vector<std::vector<int>> calib;
    for (int i = 0; i < 6; ++i) calib.push_back(fx.syc.pairs[i].pos_tokens);
    calibrate_bias(core, calib);
  }
  check_axes(core);

  fx.truth_axis = core.truth;
  fx.opinion_axis = core.opinion;
  fx.bias_axis = core.bias;
  fx.control_axis = core.control;
  for (const auto& ps : core.planted) fx.planted_heads.push_back(ps.ref);
  fx.planted_truth_content = core.planted_truth;
  fx.total_truth_content = core.total_truth;
  fx.bias_strength = kBiasGain * core.beta;
  fx.truth_gain = kTruthGain;
  fx.opinion_gain = kOpinionGain;

  fx.lie = make_corpus(seed, basic_spec("lie", 1, n_pairs), d_vocab);
  fx.instructed = make_corpus(seed, basic_spec("instructed", 2, n_pairs), d_vocab);
  CorpusSpec op;
  op.name = "opinion";
  op.task_index = 3;
  op.n_pairs = n_pairs;
  op.sig_pos = tok::opinion_a;
  op.sig_neg = tok::opinion_b;
  op.answer_a = tok::op_yes;
  op.answer_b = tok::op_no;
  fx.opinion = make_corpus(seed, op, d_vocab);

  const TaskContrast* all[] = {&fx.syc, &fx.lie, &fx.instructed, &fx.opinion};
  for (const auto* tc : all) {
    require(tc->equal_lengths(), ErrorKind::degenerate, tc->name + ": side lengths differ");
    check_behaviors(core.w, *tc, 0.25, core.truth, core.bias, &fx.expected_signs[tc->name]);
  }
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j) check_disjoint(*all[i], *all[j]);

  check_importance(core.w, fx.syc, core.planted, 3.0);
  check_importance(core.w, fx.lie, core.planted, 3.0);

  fx.weights = std::move(core.w);
  return fx;
}

Oracle oracle_expectations(const PlantedFixture& fx) {
  require(!fx.planted_heads.empty() && fx.total_truth_content > 0.0, ErrorKind::validation,
          "fixture carries no planted measurements");
  Oracle o;
  o.expected_top = fx.planted_heads;
  std::sort(o.expected_top.begin(), o.expected_top.end());
  for (size_t i = 0; i < fx.planted_heads.size(); ++i) {
    double r = fx.planted_truth_content[i] / fx.total_truth_content;
    o.restoration.push_back(
        {fx.planted_heads[i], std::max(0.02, 0.7 * r), std::min(1.0, 1.3 * r + 0.03)});
  }
  o.planted_layer = 1;

  std::vector<double> t = fx.planted_truth_content;
  std::sort(t.begin(), t.end(), std::greater<>());
  double acc = 0.0;
  int k = 0;
  for (double v : t) {
    acc += v;
    ++k;
    if (fx.truth_gain * acc > fx.bias_strength) break;
  }
  require(fx.truth_gain * acc > fx.bias_strength, ErrorKind::degenerate,
          "planted heads cannot outweigh the bias pull");
  o.expected_faithful_k = k;
  return o;
}

NoiseFixture build_noise_fixture(uint64_t seed, int n_layers, int n_heads, int d_model,
                                 int d_vocab, int n_pairs) {
  require(n_layers >= 2, ErrorKind::validation, "fixture needs n_layers >= 2");
  require(n_heads >= 2, ErrorKind::validation, "fixture needs n_heads >= 2 per layer");
  require(d_model >= kFillerLo + 6, ErrorKind::validation, "fixture needs d_model >= 26");
  require(d_vocab >= kContentLo + 12, ErrorKind::validation, "fixture needs d_vocab >= 45");
  require(n_pairs >= 8, ErrorKind::validation, "fixture needs n_pairs >= 8");

  NoiseFixture fx;
  fx.weights.config.n_layers = n_layers;
  fx.weights.config.n_heads = n_heads;
  fx.weights.config.d_model = d_model;
  fx.weights.config.d_head = kDHead;
  fx.weights.config.d_mlp = kDMlp;
  fx.weights.config.d_vocab = d_vocab;
  fx.weights.config.use_biases = false;
  fx.weights.config.seed = seed;

  VecF c1 = carrier(d_model, 0), c2 = carrier(d_model, 2);
  VecF common = VecF::Zero(d_model);
  {
    auto rng = seeded_rng(seed, rng_stream::fixture, cNoiseBase + 0);
    fill_span_gauss(rng, common, kFillerLo, d_model, 1.0f);
    common *= kCommonNorm / common.norm();
  }

  fx.weights.embed = MatF::Zero(d_vocab, d_model);
  {
    auto rng = seeded_rng(seed, rng_stream::fixture, cNoiseBase + 1);
    for (int t = 1; t < d_vocab; ++t) {
      VecF v = VecF::Zero(d_model);
      fill_span_gauss(rng, v, kFillerLo, d_model, 0.3f);
      fx.weights.embed.row(t) = v.transpose();
    }
  }
  // weak carrier swings: rankings stay genuine, but no direction dominates
  // the residual stream, so probes trained on one task say nothing about the
  // other
  fx.weights.embed.row(tok::sig_true) = (1.0f * c1 + common).transpose();
  fx.weights.embed.row(tok::sig_false) = (-1.0f * c1 + common).transpose();
  fx.weights.embed.row(tok::opinion_a) = (1.0f * c2 + common).transpose();
  fx.weights.embed.row(tok::opinion_b) = (-1.0f * c2 + common).transpose();
  fx.weights.embed.row(tok::neutral) = common.transpose();
  fx.weights.embed.row(tok::pressure) = common.transpose();
  fx.weights.embed.row(tok::sig_weak) = common.transpose();

  fx.weights.pos_embed = MatF::Zero(kSeqLen, d_model);
  {
    auto rng = seeded_rng(seed, rng_stream::fixture, cNoiseBase + 2);
    for (int p = 0; p < kSeqLen; ++p) {
      VecF v = VecF::Zero(d_model);
      fill_span_gauss(rng, v, kFillerLo, d_model, 0.2f);
      fx.weights.pos_embed.row(p) = v.transpose();
    }
  }

  {
    auto rng = seeded_rng(seed, rng_stream::fixture, cNoiseBase + 3);
    std::normal_distribution<float> gain(0.0f, 0.4f), read(0.0f, 0.3f), unit(0.0f, 1.0f);
    std::uniform_real_distribution<float> scale(1.0f, 2.5f), frob(2.5f, 6.0f);
    fx.weights.blocks.resize(n_layers);
    for (int l = 0; l < n_layers; ++l) {
      auto& blk = fx.weights.blocks[l];
      blk.ln1 = unit_ln(d_model);
      blk.ln2 = unit_ln(d_model);
      alloc_zero_attention(blk.attn, n_heads, d_model);
      for (int h = 0; h < n_heads; ++h) {
        // independent read gains per carrier make the two task rankings
        // genuinely unrelated
        blk.attn.w_v[h].col(0) = gain(rng) * c1;
        blk.attn.w_v[h].col(1) = gain(rng) * c2;
        for (int c = 2; c < kDHead; ++c)
          for (int i = kFillerLo; i < d_model; ++i) blk.attn.w_v[h](i, c) = read(rng);
        for (int r : {0, 1}) {
          VecF v = VecF::Zero(d_model);
          for (int i = kCircuitLo; i < d_model; ++i) v[i] = unit(rng);
          v.normalize();
          blk.attn.w_o[h].row(r) = scale(rng) * v.transpose();
        }
        MatF filler = MatF::Zero(kDHead, d_model);
        for (int r = 2; r < kDHead; ++r)
          for (int i = kFillerLo; i < d_model; ++i) filler(r, i) = unit(rng);
        float target = frob(rng);
        float base2 = blk.attn.w_o[h].squaredNorm();
        float want = std::sqrt(std::max(target * target - base2, 0.25f));
        float have = filler.norm();
        if (have > 1e-6f) filler *= want / have;
        blk.attn.w_o[h].bottomRows(kDHead - 2) = filler.bottomRows(kDHead - 2);
      }
      auto mrng = seeded_rng(seed, rng_stream::fixture, cNoiseBase + 16 + uint64_t(l));
      filler_mlp(mrng, blk.mlp, d_model);
    }
  }

  fx.weights.ln_f = unit_ln(d_model);
  fx.weights.unembed = MatF::Zero(d_model, d_vocab);
  {
    auto rng = seeded_rng(seed, rng_stream::fixture, cNoiseBase + 4);
    std::normal_distribution<float> g(0.0f, 0.2f), ans(0.0f, 0.5f);
    for (int t = 0; t < d_vocab; ++t)
      for (int i = kFillerLo; i < d_model; ++i) fx.weights.unembed(i, t) = g(rng);
    for (int t : {tok::agree, tok::disagree})
      for (int i = kCircuitLo; i < d_model; ++i) fx.weights.unembed(i, t) = ans(rng);
  }
  fx.weights.refresh_fingerprint();
  fx.weights.validate();

  fx.syc = make_corpus(seed, basic_spec("syc", 0, n_pairs), d_vocab);
  CorpusSpec lie;
  lie.name = "lie";
  lie.task_index = 1;
  lie.n_pairs = n_pairs;
  lie.sig_pos = tok::opinion_a;
  lie.sig_neg = tok::opinion_b;
  fx.lie = make_corpus(seed, lie, d_vocab);

  for (const auto* tc : {&fx.syc, &fx.lie}) {
    auto imp = ranking::write_norm_importance(fx.weights, *tc);
    double mx = *std::max_element(imp.values.begin(), imp.values.end());
    require(std::isfinite(mx) && mx > 1e-8, ErrorKind::degenerate,
            tc->name + ": noise fixture produced an all-zero importance map");
  }
  return fx;
}

TrajectoryFixture build_override_fixture(uint64_t seed, int n_pairs) {
  require(n_pairs >= 8 && n_pairs % 2 == 0, ErrorKind::validation,
          "override fixture needs even n_pairs >= 8");
  Core core = build_core(seed, 3, 4, 48, 64, true, 0.5f);

  std::vector<int> pressured;
  for (int i = 0; i < n_pairs; i += 2) pressured.push_back(i);
  CorpusSpec spec;
  spec.name = "override";
  spec.n_pairs = n_pairs;
  spec.pressured = pressured;
  TaskContrast trials = make_corpus(seed, spec, 64);
  {
    // calibrate on unpressured trials: the override head is still unscaled
    std::vector<std::vector<int>> calib;
    for (int i : {1, 3, 5, 7}) calib.push_back(trials.pairs[i].pos_tokens);
    calibrate_bias(core, calib);
  }

  // scale the override head so pressured wrong-claim runs land just past
  // zero: strong enough to flip, weak enough to keep the final group
  // difference positive. Calibrating against a synthetic probe prompt leaves
  // a systematic content offset, so measure the mean over actual pressured
  // trials. The final truth content is exactly affine in the output-row
  // scale (the write is the last layer, nothing downstream), so two probes
  // determine it; the margin a pre-normalization truth excess buys shrinks
  // with the final layernorm scale, so size it off the measured scale and
  // refine once against the realized one.
  double pull = kBiasGain * core.beta;
  auto probe_state = [&](float s) {
    core.w.blocks[2].attn.w_o[0].row(0) = s * core.truth.transpose();
    double t_sum = 0.0, sig_sum = 0.0;
    for (int i : {0, 2, 4, 6}) {
      auto r = model::forward(core.w, trials.pairs[i].neg_tokens,
                              CaptureSpec::of({{SiteKind::resid_final, -1, -1}}));
      VecF xf = r.cache.resid_final().row(kMeasurePos).transpose();
      t_sum += double(xf.dot(core.truth));
      sig_sum += 1.0 / double(model::ln_inv_std(xf));
    }
    return std::pair<double, double>(t_sum / 4.0, sig_sum / 4.0);
  };
  auto [t_off, sig_off] = probe_state(0.0f);
  auto [t_on, sig_on] = probe_state(1.0f);
  double gain = t_on - t_off;
  require(gain > 1e-6, ErrorKind::degenerate, "override head writes nothing");
  double desired = (0.35 * sig_off - pull) / kTruthGain;
  float s_star = float((desired - t_off) / gain);
  require(s_star > 0.05f, ErrorKind::degenerate, "override target collapsed");
  auto [t_hit, sig_hit] = probe_state(s_star);
  s_star += float(((0.35 * sig_hit - pull) / kTruthGain - t_hit) / gain);
  probe_state(s_star);
  core.w.refresh_fingerprint();

  check_trajectory(core.w, trials, pressured, false, core.truth, core.bias);

  TrajectoryFixture out;
  out.weights = std::move(core.w);
  out.trials = std::move(trials);
  out.expected_agree = std::move(pressured);
  return out;
}

TrajectoryFixture build_monotone_fixture(uint64_t seed, int n_pairs) {
  require(n_pairs >= 8, ErrorKind::validation, "monotone fixture needs n_pairs >= 8");
  Core core = build_core(seed, 2, 4, 48, 64, false, 0.5f);

  std::vector<int> weak;
  for (int i = 0; i < n_pairs; ++i)
    if (i % 8 < 3) weak.push_back(i);
  CorpusSpec spec;
  spec.name = "monotone";
  spec.n_pairs = n_pairs;
  spec.weak = weak;
  TaskContrast trials = make_corpus(seed, spec, 64);
  {
    std::vector<std::vector<int>> calib;
    for (int i = 0; i < 4; ++i) calib.push_back(trials.pairs[i].pos_tokens);
    calibrate_bias(core, calib);
  }

  double pull = kBiasGain * core.beta;
  VecF c1 = carrier(core.w.config.d_model, 0);
  // mean weak-trial truth content at a given weak-signal amplitude, measured
  // on actual weak trials so no probe-content offset creeps in
  auto measure = [&](float amp) {
    core.w.embed.row(tok::sig_weak) = (-amp * c1 + core.common).transpose();
    double t_sum = 0.0, sig_sum = 0.0;
    for (int i : {0, 1, 2}) {
      auto r = model::forward(core.w, trials.pairs[i].neg_tokens,
                              CaptureSpec::of({{SiteKind::resid_final, -1, -1}}));
      VecF xf = r.cache.resid_final().row(kMeasurePos).transpose();
      t_sum += double(-xf.dot(core.truth));
      sig_sum += 1.0 / double(model::ln_inv_std(xf));
    }
    return std::pair<double, double>(t_sum / 3.0, sig_sum / 3.0);
  };
  // weak-evidence truth content target, margin sized off the final
  // layernorm scale like the override fixture does
  auto [t_init, sig_init] = measure(1.2f);
  double want = (pull - 0.35 * sig_init) / kTruthGain;
  require(want > 0.2, ErrorKind::degenerate, "weak-signal target collapsed");

  // the truth content is monotone in the amplitude but bends with the
  // layernorm scale, so solve for it by secant
  float w0 = 1.2f, w1 = 2.6f;
  double f0 = t_init - want, f1 = measure(w1).first - want;
  for (int it = 0; it < 6 && std::abs(f1 - f0) > 1e-9; ++it) {
    float w2 = std::clamp(w1 - float(f1 * double(w1 - w0) / (f1 - f0)), 0.4f, 3.9f);
    w0 = w1;
    f0 = f1;
    w1 = w2;
    f1 = measure(w2).first - want;
  }
  require(std::abs(f1) <= 0.05, ErrorKind::degenerate,
          "weak-signal calibration did not converge");
  core.w.refresh_fingerprint();

  check_trajectory(core.w, trials, weak, true, core.truth, core.bias);

  TrajectoryFixture out;
  out.weights = std::move(core.w);
  out.trials = std::move(trials);
  out.expected_agree = std::move(weak);
  return out;
}

void save_fixture(const PlantedFixture& fx, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorKind::io, "cannot create fixture directory: " + dir);

  model::save_weights(fx.weights, dir + "/model.json", dir + "/model.bin");
  contrast::save_contrast_jsonl(fx.syc, dir + "/syc.jsonl");
  contrast::save_contrast_jsonl(fx.lie, dir + "/lie.jsonl");
  contrast::save_contrast_jsonl(fx.instructed, dir + "/instructed.jsonl");
  contrast::save_contrast_jsonl(fx.opinion, dir + "/opinion.jsonl");

  auto vec = [](const VecF& v) { return std::vector<float>(v.data(), v.data() + v.size()); };
  nlohmann::ordered_json j;
  j["planted_heads"] = nlohmann::ordered_json::array();
  for (const auto& h : fx.planted_heads)
    j["planted_heads"].push_back({{"layer", h.layer}, {"head", h.head}});
  j["signal_pos"] = fx.signal_pos;
  j["measure_pos"] = fx.measure_pos;
  j["truth_axis"] = vec(fx.truth_axis);
  j["opinion_axis"] = vec(fx.opinion_axis);
  j["bias_axis"] = vec(fx.bias_axis);
  j["control_axis"] = vec(fx.control_axis);
  j["gains"] = {{"truth", fx.truth_gain},
                {"opinion", fx.opinion_gain},
                {"bias_strength", fx.bias_strength}};
  j["planted_truth_content"] = fx.planted_truth_content;
  j["total_truth_content"] = fx.total_truth_content;
  nlohmann::ordered_json signs;
  for (const auto& [task, rows] : fx.expected_signs) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& r : rows) arr.push_back({r.pair_index, r.pos_sign, r.neg_sign});
    signs[task] = arr;
  }
  j["expected_signs"] = signs;

  std::ofstream out(dir + "/fixture.json");
  out << j.dump(2) << "\n";
  require(out.good(), ErrorKind::io, "cannot write fixture.json in " + dir);
}

}  // namespace circuitlab::fixture
