#include <filesystem>
#include <fstream>
#include <functional>

#include "circuitlab/contrast.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace circuitlab;
using namespace circuitlab::contrast;

namespace {

ErrorKind thrown_kind(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an Error");
  return ErrorKind::io;
}

std::string message_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  FAIL("expected an Error");
  return {};
}

std::filesystem::path scratch_dir() {
  auto dir = std::filesystem::temp_directory_path() / "circuitlab_contrast_tests";
  std::filesystem::create_directories(dir);
  return dir;
}

std::string write_file(const std::string& name, const std::string& body) {
  const auto path = (scratch_dir() / name).string();
  std::ofstream f(path, std::ios::trunc);
  f << body;
  return path;
}

}  // namespace

TEST_SUITE("contrast") {

TEST_CASE("loads pairs and resolves LAST per side") {
  const auto path = write_file(
      "ok.jsonl",
      R"({"pair_id":"p0","content_key":"k0","pos_tokens":[1,2,3,4,5,6,7],"neg_tokens":[1,2,3,4,5,6,7,8,9],"answer_pos":2,"answer_neg":3,"measure_pos":"LAST"})"
      "\n"
      R"({"pair_id":"p1","content_key":"k1","pos_tokens":[4,5,6],"neg_tokens":[4,5,7],"answer_pos":1,"answer_neg":2,"measure_pos":1})"
      "\n");
  const auto t = load_contrast_jsonl(path, "demo");
  CHECK(t.name == "demo");
  REQUIRE(t.pairs.size() == 2);

  const auto& p0 = t.pairs[0];
  CHECK(p0.pair_id == "p0");
  CHECK(p0.content_key == "k0");
  CHECK(p0.pos_tokens.size() == 7);
  CHECK(p0.neg_tokens.size() == 9);
  CHECK(p0.measure_last);
  CHECK(p0.measure_pos_pos == 6);
  CHECK(p0.measure_pos_neg == 8);
  CHECK(p0.answer_pos == 2);
  CHECK(p0.answer_neg == 3);

  const auto& p1 = t.pairs[1];
  CHECK_FALSE(p1.measure_last);
  CHECK(p1.measure_pos_pos == 1);
  CHECK(p1.measure_pos_neg == 1);

  CHECK_FALSE(t.equal_lengths());
}

TEST_CASE("equal_lengths holds when both sides match") {
  const auto path = write_file(
      "eq.jsonl",
      R"({"pair_id":"a","content_key":"k","pos_tokens":[1,2],"neg_tokens":[1,3],"answer_pos":0,"answer_neg":1,"measure_pos":"LAST"})"
      "\n");
  CHECK(load_contrast_jsonl(path, "t").equal_lengths());
}

TEST_CASE("blank lines are skipped but keep line numbering") {
  const auto path = write_file(
      "blank.jsonl",
      R"({"pair_id":"a","content_key":"k","pos_tokens":[1],"neg_tokens":[1],"answer_pos":0,"answer_neg":1,"measure_pos":0})"
      "\n"
      "   \n"
      "{bad json\n");
  const auto msg = message_of([&] { load_contrast_jsonl(path, "t"); });
  CHECK(msg.find("line 3") != std::string::npos);
  CHECK(msg.find("invalid JSON") != std::string::npos);
}

TEST_CASE("malformed rows report their line and field") {
  auto expect_format = [&](const std::string& name, const std::string& line,
                           const std::string& needle) {
    const auto path = write_file(name, line + "\n");
    CHECK(thrown_kind([&] { load_contrast_jsonl(path, "t"); }) == ErrorKind::format);
    const auto msg = message_of([&] { load_contrast_jsonl(path, "t"); });
    CHECK(msg.find("line 1") != std::string::npos);
    CHECK(msg.find(needle) != std::string::npos);
  };

  expect_format("m1.jsonl",
                R"({"content_key":"k","pos_tokens":[1],"neg_tokens":[1],"answer_pos":0,"answer_neg":1,"measure_pos":0})",
                "pair_id");
  expect_format("m2.jsonl",
                R"({"pair_id":"a","pos_tokens":[1],"neg_tokens":[1],"answer_pos":0,"answer_neg":1,"measure_pos":0})",
                "content_key");
  expect_format("m3.jsonl",
                R"({"pair_id":"a","content_key":"k","neg_tokens":[1],"answer_pos":0,"answer_neg":1,"measure_pos":0})",
                "pos_tokens");
  expect_format("m4.jsonl",
                R"({"pair_id":"a","content_key":"k","pos_tokens":[],"neg_tokens":[1],"answer_pos":0,"answer_neg":1,"measure_pos":0})",
                "pos_tokens is empty");
  expect_format("m5.jsonl",
                R"({"pair_id":"a","content_key":"k","pos_tokens":[1],"neg_tokens":["x"],"answer_pos":0,"answer_neg":1,"measure_pos":0})",
                "array of integers");
  expect_format("m6.jsonl",
                R"({"pair_id":"a","content_key":"k","pos_tokens":[1],"neg_tokens":[1],"answer_pos":0.5,"answer_neg":1,"measure_pos":0})",
                "answer_pos");
  expect_format("m7.jsonl",
                R"({"pair_id":"a","content_key":"k","pos_tokens":[1],"neg_tokens":[1],"answer_pos":0,"answer_neg":1})",
                "measure_pos");
  expect_format("m8.jsonl",
                R"({"pair_id":"a","content_key":"k","pos_tokens":[1,2],"neg_tokens":[1],"answer_pos":0,"answer_neg":1,"measure_pos":1})",
                "measure_pos outside");
  expect_format("m9.jsonl",
                R"({"pair_id":"a","content_key":"k","pos_tokens":[1],"neg_tokens":[1],"answer_pos":0,"answer_neg":1,"measure_pos":"FIRST"})",
                "LAST");
}

TEST_CASE("duplicate pair ids are rejected with the offending line") {
  const auto one =
      R"({"pair_id":"dup","content_key":"k1","pos_tokens":[1],"neg_tokens":[1],"answer_pos":0,"answer_neg":1,"measure_pos":0})";
  const auto two =
      R"({"pair_id":"dup","content_key":"k2","pos_tokens":[2],"neg_tokens":[2],"answer_pos":0,"answer_neg":1,"measure_pos":0})";
  const auto path = write_file("dup.jsonl", std::string(one) + "\n" + two + "\n");
  const auto msg = message_of([&] { load_contrast_jsonl(path, "t"); });
  CHECK(msg.find("line 2") != std::string::npos);
  CHECK(msg.find("duplicate pair_id") != std::string::npos);
}

TEST_CASE("a config range-checks tokens and answers") {
  const auto w = testsupport::build_test_model(50);  // d_vocab = 11
  const auto good = write_file(
      "vocab_ok.jsonl",
      R"({"pair_id":"a","content_key":"k","pos_tokens":[10],"neg_tokens":[0],"answer_pos":10,"answer_neg":0,"measure_pos":0})"
      "\n");
  CHECK_NOTHROW(load_contrast_jsonl(good, "t", &w.config));

  const auto bad_tok = write_file(
      "vocab_tok.jsonl",
      R"({"pair_id":"a","content_key":"k","pos_tokens":[11],"neg_tokens":[0],"answer_pos":0,"answer_neg":1,"measure_pos":0})"
      "\n");
  CHECK(thrown_kind([&] { load_contrast_jsonl(bad_tok, "t", &w.config); }) == ErrorKind::format);

  const auto bad_ans = write_file(
      "vocab_ans.jsonl",
      R"({"pair_id":"a","content_key":"k","pos_tokens":[1],"neg_tokens":[0],"answer_pos":0,"answer_neg":-2,"measure_pos":0})"
      "\n");
  const auto msg = message_of([&] { load_contrast_jsonl(bad_ans, "t", &w.config); });
  CHECK(msg.find("answer token outside vocab") != std::string::npos);
}

TEST_CASE("missing and empty files are distinct failures") {
  CHECK(thrown_kind([&] {
          load_contrast_jsonl((scratch_dir() / "nope.jsonl").string(), "t");
        }) == ErrorKind::io);
  const auto empty = write_file("empty.jsonl", "\n\n");
  CHECK(thrown_kind([&] { load_contrast_jsonl(empty, "t"); }) == ErrorKind::format);
}

TEST_CASE("save round-trips including the LAST marker") {
  const auto path = write_file(
      "rt_src.jsonl",
      R"({"pair_id":"p0","content_key":"k0","pos_tokens":[1,2,3],"neg_tokens":[1,2,4,5],"answer_pos":2,"answer_neg":3,"measure_pos":"LAST"})"
      "\n"
      R"({"pair_id":"p1","content_key":"k1","pos_tokens":[4,5],"neg_tokens":[4,6],"answer_pos":1,"answer_neg":2,"measure_pos":0})"
      "\n");
  const auto t = load_contrast_jsonl(path, "demo");
  const auto out = (scratch_dir() / "rt_out.jsonl").string();
  save_contrast_jsonl(t, out);
  const auto t2 = load_contrast_jsonl(out, "demo");
  REQUIRE(t2.pairs.size() == t.pairs.size());
  for (size_t i = 0; i < t.pairs.size(); ++i) {
    CHECK(t2.pairs[i].pair_id == t.pairs[i].pair_id);
    CHECK(t2.pairs[i].content_key == t.pairs[i].content_key);
    CHECK(t2.pairs[i].pos_tokens == t.pairs[i].pos_tokens);
    CHECK(t2.pairs[i].neg_tokens == t.pairs[i].neg_tokens);
    CHECK(t2.pairs[i].answer_pos == t.pairs[i].answer_pos);
    CHECK(t2.pairs[i].answer_neg == t.pairs[i].answer_neg);
    CHECK(t2.pairs[i].measure_last == t.pairs[i].measure_last);
    CHECK(t2.pairs[i].measure_pos_pos == t.pairs[i].measure_pos_pos);
    CHECK(t2.pairs[i].measure_pos_neg == t.pairs[i].measure_pos_neg);
  }
}

TEST_CASE("split_disjoint flags shared content keys") {
  TaskContrast a, b;
  a.pairs.resize(3);
  a.pairs[0].content_key = "alpha";
  a.pairs[1].content_key = "beta";
  a.pairs[2].content_key = "gamma";
  b.pairs.resize(2);
  b.pairs[0].content_key = "delta";
  b.pairs[1].content_key = "beta";

  const auto r = split_disjoint(a, b);
  CHECK_FALSE(r.disjoint);
  REQUIRE(r.shared_keys.size() == 1);
  CHECK(r.shared_keys[0] == "beta");

  b.pairs[1].content_key = "epsilon";
  const auto r2 = split_disjoint(a, b);
  CHECK(r2.disjoint);
  CHECK(r2.shared_keys.empty());
}

}  // TEST_SUITE
