#pragma once

// Synthetic models with known circuits, used as ground truth by the test and
// acceptance suites. A planted fixture routes a "truth" signal and an
// orthogonal "opinion" signal through a fixed set of attention heads into two
// known residual-stream axes; every other head carries either a tiny leak or
// pure filler. Construction measures its own signal strengths and calibrates
// the agreement bias so that downstream behavior flips are guaranteed by
// margin, then verifies the result by running the library's own readouts.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "circuitlab/contrast.hpp"
#include "circuitlab/model.hpp"

namespace circuitlab::fixture {

// Fixed token ids shared by every generated corpus. Ids >= reserved_lo are
// task markers, template tokens and per-pair content fillers.
namespace tok {
inline constexpr int pad = 0;
inline constexpr int agree = 1;
inline constexpr int disagree = 2;
inline constexpr int op_yes = 3;
inline constexpr int op_no = 4;
inline constexpr int sig_true = 5;
inline constexpr int sig_false = 6;
inline constexpr int opinion_a = 7;
inline constexpr int opinion_b = 8;
inline constexpr int pressure = 9;
inline constexpr int neutral = 10;
inline constexpr int query = 11;
inline constexpr int sig_weak = 12;
inline constexpr int reserved_lo = 13;
}  // namespace tok

inline constexpr int kSignalPos = 1;   // signal token slot in every prompt
inline constexpr int kMeasurePos = 11; // query token; answers read out here
inline constexpr int kSeqLen = 12;

struct PairSigns {
  int pair_index = 0;
  int pos_sign = 0;  // expected sign of the answer logit difference, + run
  int neg_sign = 0;  // expected sign on the - run
};

struct PlantedFixture {
  model::ModelWeights weights;

  // heads that carry the signal; everything else is leak or filler
  std::vector<model::HeadRef> planted_heads;

  // unit, zero-sum residual axes; truth/opinion/bias/control are mutually
  // orthogonal so layernorm centering never mixes them
  model::VecF truth_axis, opinion_axis, bias_axis, control_axis;

  contrast::TaskContrast syc, lie, instructed, opinion;
  std::map<std::string, std::vector<PairSigns>> expected_signs;

  // construction-time measurements backing oracle_expectations
  std::vector<double> planted_truth_content;  // parallel to planted_heads
  double total_truth_content = 0.0;  // truth-axis projection of the final residual
  double bias_strength = 0.0;        // agreement pull through the answer columns
  double truth_gain = 0.0;           // truth-axis weight of the answer columns
  double opinion_gain = 0.0;

  int signal_pos = kSignalPos;
  int measure_pos = kMeasurePos;

  const contrast::TaskContrast& task(const std::string& name) const;
};

struct RestorationBand {
  model::HeadRef head;
  double lo = 0.0, hi = 0.0;
};

// Expectations derived from how the fixture was built, never from running the
// analysis pipeline. Used to cross-check pipeline output.
struct Oracle {
  std::vector<model::HeadRef> expected_top;  // the planted set, every task
  std::vector<RestorationBand> restoration;  // single-head patch bands
  double syc_lie_cos_min = 0.9;
  double opinion_lie_abs_cos_max = 0.05;
  int planted_layer = 1;        // stream point where both axes are readable
  int expected_faithful_k = 0;  // heads needed before behavior matches again
};

// Planted-circuit model plus four contrast corpora with disjoint content keys.
// Throws validation on undersized configs (n_heads == 1 in particular) and
// degenerate with diagnostics if any generation self-check fails. The same
// seed always reproduces bit-identical weights and corpora.
PlantedFixture build_planted_fixture(uint64_t seed, int n_layers = 2, int n_heads = 4,
                                     int d_model = 48, int d_vocab = 64, int n_pairs = 64);

Oracle oracle_expectations(const PlantedFixture& fx);

// Matched control: same architecture and corpus layout, but every head reads
// the two signal carriers with independent random gains, so the two tasks
// produce genuine yet unrelated importance rankings and nothing is planted.
struct NoiseFixture {
  model::ModelWeights weights;
  contrast::TaskContrast syc, lie;
};

NoiseFixture build_noise_fixture(uint64_t seed, int n_layers = 2, int n_heads = 4,
                                 int d_model = 48, int d_vocab = 64, int n_pairs = 64);

// Corpora for layer-trajectory analyses. `expected_agree` lists pair indices
// whose negative-side run ends in agreement (the pressured or weak-evidence
// trials); the rest end in disagreement.
struct TrajectoryFixture {
  model::ModelWeights weights;
  contrast::TaskContrast trials;
  std::vector<int> expected_agree;
};

// Three-layer variant: a late head reads a pressure token and overwrites the
// truth axis, so pressured wrong-claim runs flip to agreement at the last
// layer while mid layers still hold the correct answer.
TrajectoryFixture build_override_fixture(uint64_t seed, int n_pairs = 64);

// Two-layer variant with no late override: weak-evidence trials agree and
// strong-evidence trials disagree from the start, so the group difference
// grows monotonically into the final layer.
TrajectoryFixture build_monotone_fixture(uint64_t seed, int n_pairs = 64);

// Writes model.json/model.bin, one JSONL per corpus, and fixture.json with
// the planted metadata.
void save_fixture(const PlantedFixture& fx, const std::string& dir);

}  // namespace circuitlab::fixture
