#include "doctest.h"

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "circuitlab/directions.hpp"
#include "test_support.hpp"

using namespace circuitlab;
using directions::Direction;

namespace {

contrast::ContrastPair make_pair(std::string id, std::vector<int> pos, std::vector<int> neg) {
  contrast::ContrastPair p;
  p.pair_id = std::move(id);
  p.content_key = p.pair_id;
  p.pos_tokens = std::move(pos);
  p.neg_tokens = std::move(neg);
  p.answer_pos = 1;
  p.answer_neg = 2;
  p.measure_last = true;
  p.measure_pos_pos = int(p.pos_tokens.size()) - 1;
  p.measure_pos_neg = int(p.neg_tokens.size()) - 1;
  return p;
}

// Pairs whose sides differ at one mid-sequence token, with per-pair contexts.
contrast::TaskContrast varied_contrast(uint64_t seed, int n_pairs, int d_vocab) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(0, d_vocab - 1);
  contrast::TaskContrast tc;
  tc.name = "varied";
  for (int i = 0; i < n_pairs; ++i) {
    std::vector<int> pos(8), neg(8);
    for (int t = 0; t < 8; ++t) pos[t] = neg[t] = tok(rng);
    int a = tok(rng), b = tok(rng);
    if (a == b) b = (b + 1) % d_vocab;
    pos[3] = a;
    neg[3] = b;
    tc.pairs.push_back(make_pair("p" + std::to_string(i), pos, neg));
  }
  return tc;
}

ErrorKind thrown_kind(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::io;
}

}  // namespace

TEST_SUITE("directions") {
  TEST_CASE("identical sides give a zero direction at every stream point") {
    auto w = testsupport::build_test_model(11);
    contrast::TaskContrast tc;
    tc.name = "null";
    tc.pairs.push_back(make_pair("a", {1, 2, 3, 4}, {1, 2, 3, 4}));
    tc.pairs.push_back(make_pair("b", {5, 6, 7, 8}, {5, 6, 7, 8}));

    auto d = directions::extract_direction(w, tc);
    CHECK(d.points() == w.config.n_layers + 1);
    for (int p = 0; p < d.points(); ++p) {
      CHECK(d.norms[size_t(p)] == 0.0);
      CHECK(d.raw[size_t(p)].isZero(0.0f));
      CHECK(d.unit[size_t(p)].isZero(0.0f));
    }
  }

  TEST_CASE("extraction matches a hand-computed mean of per-pair differences") {
    auto w = testsupport::build_test_model(12);
    auto tc = varied_contrast(7, 2, w.config.d_vocab);

    auto d = directions::extract_direction(w, tc);

    int L = w.config.n_layers;
    for (int p = 0; p <= L; ++p) {
      Eigen::VectorXf expect = Eigen::VectorXf::Zero(w.config.d_model);
      for (const auto& pr : tc.pairs) {
        auto rp = model::forward(w, pr.pos_tokens);
        auto rn = model::forward(w, pr.neg_tokens);
        auto row = [&](const model::ActivationCache& c, int mpos) -> Eigen::VectorXf {
          if (p < L) return c.resid_pre(p).row(mpos).transpose();
          return c.resid_final().row(mpos).transpose();
        };
        expect += row(rp.cache, pr.measure_pos_pos) - row(rn.cache, pr.measure_pos_neg);
      }
      expect /= float(tc.pairs.size());
      CHECK((d.raw[size_t(p)] - expect).cwiseAbs().maxCoeff() <= 1e-6f);
      if (d.norms[size_t(p)] > 0)
        CHECK(std::abs(d.unit[size_t(p)].cast<double>().norm() - 1.0) <= 1e-6);
    }
  }

  TEST_CASE("duplicating the dataset leaves the direction unchanged") {
    auto w = testsupport::build_test_model(13);
    auto tc = varied_contrast(8, 4, w.config.d_vocab);
    auto doubled = tc;
    for (auto pr : tc.pairs) {
      pr.pair_id += "_dup";
      doubled.pairs.push_back(pr);
    }

    auto d1 = directions::extract_direction(w, tc);
    auto d2 = directions::extract_direction(w, doubled);
    REQUIRE(d1.points() == d2.points());
    for (int p = 0; p < d1.points(); ++p)
      CHECK((d1.raw[size_t(p)] - d2.raw[size_t(p)]).cwiseAbs().maxCoeff() <= 1e-5f);
  }

  TEST_CASE("extraction requires at least two pairs") {
    auto w = testsupport::build_test_model(14);
    contrast::TaskContrast tc;
    tc.name = "tiny";
    tc.pairs.push_back(make_pair("only", {1, 2, 3}, {1, 2, 4}));
    CHECK(thrown_kind([&] { directions::extract_direction(w, tc); }) == ErrorKind::validation);
  }

  TEST_CASE("cosine of a direction with itself is 1 with a positive margin") {
    auto w = testsupport::build_test_model(15);
    auto tc = varied_contrast(9, 16, w.config.d_vocab);
    auto d = directions::extract_direction(w, tc);

    auto prof = directions::cosine_profile(d, d, 200, 42);
    REQUIRE(int(prof.points.size()) == d.points());
    // Before any attention the measure position cannot see the differing
    // token, so stream point 0 is a genuine zero direction.
    CHECK(!prof.points[0].defined);
    for (size_t p = 1; p < prof.points.size(); ++p) {
      const auto& cp = prof.points[p];
      REQUIRE(cp.defined);
      CHECK(cp.cosine == doctest::Approx(1.0).epsilon(1e-6));
      // Independent sign flips on the two copies push the null below 1.
      CHECK(cp.margin > 0.0);
      CHECK(!cp.orthogonal);
    }
  }

  TEST_CASE("cosine against the negated direction is -1") {
    auto w = testsupport::build_test_model(16);
    auto tc = varied_contrast(10, 6, w.config.d_vocab);
    auto flipped = tc;
    for (auto& pr : flipped.pairs) {
      std::swap(pr.pos_tokens, pr.neg_tokens);
      std::swap(pr.measure_pos_pos, pr.measure_pos_neg);
    }

    auto d = directions::extract_direction(w, tc);
    auto nd = directions::extract_direction(w, flipped);
    auto prof = directions::cosine_profile(d, nd, 100, 3);
    for (size_t p = 1; p < prof.points.size(); ++p) {
      REQUIRE(prof.points[p].defined);
      CHECK(prof.points[p].cosine == doctest::Approx(-1.0).epsilon(1e-6));
    }
  }

  TEST_CASE("zero-norm points are undefined, not zero") {
    auto w = testsupport::build_test_model(17);
    auto tc = varied_contrast(11, 4, w.config.d_vocab);
    contrast::TaskContrast same;
    same.name = "same";
    same.pairs.push_back(make_pair("a", {1, 2, 3, 4}, {1, 2, 3, 4}));
    same.pairs.push_back(make_pair("b", {2, 3, 4, 5}, {2, 3, 4, 5}));

    auto d = directions::extract_direction(w, tc);
    auto z = directions::extract_direction(w, same);
    auto prof = directions::cosine_profile(d, z, 100, 5);
    for (const auto& cp : prof.points) CHECK(!cp.defined);
  }

  TEST_CASE("cosine profile input checks") {
    auto w = testsupport::build_test_model(18);
    auto tc = varied_contrast(12, 4, w.config.d_vocab);
    auto d = directions::extract_direction(w, tc);

    CHECK(thrown_kind([&] { directions::cosine_profile(d, d, 99, 0); }) == ErrorKind::validation);

    auto other = d;
    other.n_layers += 1;
    other.raw.push_back(other.raw.back());
    other.unit.push_back(other.unit.back());
    other.norms.push_back(other.norms.back());
    CHECK(thrown_kind([&] { directions::cosine_profile(d, other, 100, 0); }) == ErrorKind::shape);

    auto hollow = d;
    hollow.pair_diffs.clear();
    CHECK(thrown_kind([&] { directions::cosine_profile(d, hollow, 100, 0); }) ==
          ErrorKind::validation);
  }

  TEST_CASE("unembedding ranking puts a planted column token on top") {
    auto w = testsupport::build_test_model(19, false, 1, 2, 4, 8, 8, 6, 10);
    // Zero-sum unembedding columns make mean-centering a no-op; only token 3
    // aligns with the planted direction.
    w.unembed.setZero();
    Eigen::VectorXf v(4);
    v << 1.0f, -0.5f, 0.25f, -0.75f;
    w.unembed.col(3) = v;
    w.ln_f.scale.setOnes();
    w.ln_f.offset.setZero();
    w.refresh_fingerprint();

    Direction dir;
    dir.task = "manual";
    dir.n_pairs = 2;
    dir.n_layers = 1;
    dir.d_model = 4;
    dir.raw = {v, v};
    dir.unit = {v.normalized(), v.normalized()};
    dir.norms = {v.norm(), v.norm()};

    auto rank = directions::unembed_top_tokens(w, dir, 1, 3);
    REQUIRE(int(rank.positive.size()) == 3);
    CHECK(rank.positive[0] == 3);
    CHECK(rank.positive_scores[0] > 0.0);
    // Every other column is zero, so the negative end scores are all 0.
    CHECK(rank.negative_scores[0] == doctest::Approx(0.0));

    SUBCASE("k and point range checks") {
      CHECK(thrown_kind([&] { directions::unembed_top_tokens(w, dir, 2, 3); }) ==
            ErrorKind::validation);
      CHECK(thrown_kind([&] { directions::unembed_top_tokens(w, dir, 0, 7); }) ==
            ErrorKind::validation);
    }

    SUBCASE("zero direction has no defined ranking") {
      Direction zero = dir;
      zero.raw = {Eigen::VectorXf::Zero(4), Eigen::VectorXf::Zero(4)};
      zero.unit = zero.raw;
      zero.norms = {0.0, 0.0};
      try {
        directions::unembed_top_tokens(w, zero, 0, 2);
        FAIL("expected an error");
      } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::degenerate);
        CHECK(std::string(e.what()).find("undefined ranking") != std::string::npos);
      }
    }
  }

  TEST_CASE("final-layernorm scale reweights the ranking") {
    auto w = testsupport::build_test_model(20, false, 1, 2, 4, 8, 8, 6, 10);
    w.unembed.setZero();
    // Two zero-sum columns reading different coordinates.
    w.unembed.col(1) << 1.0f, -1.0f, 0.0f, 0.0f;
    w.unembed.col(2) << 0.0f, 0.0f, 1.0f, -1.0f;
    w.ln_f.scale.setOnes();
    w.ln_f.offset.setZero();
    w.refresh_fingerprint();

    Direction dir;
    dir.task = "manual";
    dir.n_pairs = 2;
    dir.n_layers = 1;
    dir.d_model = 4;
    Eigen::VectorXf v(4);
    v << 1.0f, -1.0f, 0.9f, -0.9f;  // favors token 1 under a uniform scale
    dir.raw = {v, v};
    dir.unit = {v.normalized(), v.normalized()};
    dir.norms = {v.norm(), v.norm()};

    auto flat = directions::unembed_top_tokens(w, dir, 0, 1);
    CHECK(flat.positive[0] == 1);

    w.ln_f.scale << 1.0f, 1.0f, 4.0f, 4.0f;  // boost the coordinates token 2 reads
    w.refresh_fingerprint();
    auto scaled = directions::unembed_top_tokens(w, dir, 0, 1);
    CHECK(scaled.positive[0] == 2);
  }

  TEST_CASE("json export carries one row per stream point") {
    auto w = testsupport::build_test_model(21);
    auto tc = varied_contrast(13, 3, w.config.d_vocab);
    auto d = directions::extract_direction(w, tc);

    auto j = directions::direction_to_json(d);
    CHECK(j["task"] == "varied");
    CHECK(j["n_pairs"] == 3);
    REQUIRE(int(j["layers"].size()) == d.points());
    for (int p = 0; p < d.points(); ++p) {
      CHECK(j["layers"][size_t(p)]["layer"] == p);
      CHECK(int(j["layers"][size_t(p)]["unit_vector"].size()) == d.d_model);
      CHECK(double(j["layers"][size_t(p)]["norm"]) == doctest::Approx(d.norms[size_t(p)]));
    }
  }
}
