#include "circuitlab/contrast.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "json.hpp"

namespace circuitlab::contrast {

using nlohmann::json;
using nlohmann::ordered_json;

bool TaskContrast::equal_lengths() const {
  return std::all_of(pairs.begin(), pairs.end(), [](const ContrastPair& p) {
    return p.pos_tokens.size() == p.neg_tokens.size();
  });
}

namespace {

std::vector<int> get_tokens(const json& j, const char* field, int line) {
  require(j.contains(field), ErrorKind::format,
          "line " + std::to_string(line) + ": missing " + field);
  std::vector<int> out;
  try {
    out = j[field].get<std::vector<int>>();
  } catch (const json::exception&) {
    fail(ErrorKind::format, "line " + std::to_string(line) + ": " + field +
                                " must be an array of integers");
  }
  require(!out.empty(), ErrorKind::format,
          "line " + std::to_string(line) + ": " + field + " is empty");
  return out;
}

}  // namespace

TaskContrast load_contrast_jsonl(const std::string& path, const std::string& name,
                                 const model::ModelConfig* config) {
  std::ifstream f(path);
  require(f.good(), ErrorKind::io, "cannot open contrast file: " + path);

  TaskContrast out;
  out.name = name;
  std::set<std::string> seen_ids;
  std::string raw;
  int line = 0;
  while (std::getline(f, raw)) {
    ++line;
    if (raw.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(raw);
    } catch (const json::exception& e) {
      fail(ErrorKind::format,
           "line " + std::to_string(line) + ": invalid JSON: " + e.what());
    }

    ContrastPair p;
    require(j.contains("pair_id") && j["pair_id"].is_string(), ErrorKind::format,
            "line " + std::to_string(line) + ": missing string pair_id");
    p.pair_id = j["pair_id"].get<std::string>();
    require(seen_ids.insert(p.pair_id).second, ErrorKind::format,
            "line " + std::to_string(line) + ": duplicate pair_id " + p.pair_id);
    require(j.contains("content_key") && j["content_key"].is_string(), ErrorKind::format,
            "line " + std::to_string(line) + ": missing string content_key");
    p.content_key = j["content_key"].get<std::string>();

    p.pos_tokens = get_tokens(j, "pos_tokens", line);
    p.neg_tokens = get_tokens(j, "neg_tokens", line);

    for (const char* field : {"answer_pos", "answer_neg"})
      require(j.contains(field) && j[field].is_number_integer(), ErrorKind::format,
              "line " + std::to_string(line) + ": missing integer " + field);
    p.answer_pos = j["answer_pos"].get<int>();
    p.answer_neg = j["answer_neg"].get<int>();

    require(j.contains("measure_pos"), ErrorKind::format,
            "line " + std::to_string(line) + ": missing measure_pos");
    const json& mp = j["measure_pos"];
    if (mp.is_string()) {
      require(mp.get<std::string>() == "LAST", ErrorKind::format,
              "line " + std::to_string(line) + ": measure_pos must be an index or \"LAST\"");
      p.measure_last = true;
      p.measure_pos_pos = int(p.pos_tokens.size()) - 1;
      p.measure_pos_neg = int(p.neg_tokens.size()) - 1;
    } else {
      require(mp.is_number_integer(), ErrorKind::format,
              "line " + std::to_string(line) + ": measure_pos must be an index or \"LAST\"");
      const int idx = mp.get<int>();
      require(idx >= 0 && idx < int(p.pos_tokens.size()) && idx < int(p.neg_tokens.size()),
              ErrorKind::format,
              "line " + std::to_string(line) + ": measure_pos outside both sequences");
      p.measure_pos_pos = idx;
      p.measure_pos_neg = idx;
    }

    if (config) {
      auto in_vocab = [&](int t) { return t >= 0 && t < config->d_vocab; };
      for (int t : p.pos_tokens)
        require(in_vocab(t), ErrorKind::format,
                "line " + std::to_string(line) + ": pos token outside vocab");
      for (int t : p.neg_tokens)
        require(in_vocab(t), ErrorKind::format,
                "line " + std::to_string(line) + ": neg token outside vocab");
      require(in_vocab(p.answer_pos) && in_vocab(p.answer_neg), ErrorKind::format,
              "line " + std::to_string(line) + ": answer token outside vocab");
    }
    out.pairs.push_back(std::move(p));
  }
  require(!out.pairs.empty(), ErrorKind::format, "contrast file has no pairs: " + path);
  return out;
}

void save_contrast_jsonl(const TaskContrast& t, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  require(f.good(), ErrorKind::io, "cannot open contrast file for writing: " + path);
  for (const auto& p : t.pairs) {
    ordered_json j;
    j["pair_id"] = p.pair_id;
    j["content_key"] = p.content_key;
    j["pos_tokens"] = p.pos_tokens;
    j["neg_tokens"] = p.neg_tokens;
    j["answer_pos"] = p.answer_pos;
    j["answer_neg"] = p.answer_neg;
    if (p.measure_last)
      j["measure_pos"] = "LAST";
    else
      j["measure_pos"] = p.measure_pos_pos;
    f << j.dump() << "\n";
  }
  f.close();
  require(f.good(), ErrorKind::io, "short write to contrast file: " + path);
}

DisjointReport split_disjoint(const TaskContrast& a, const TaskContrast& b) {
  std::set<std::string> keys_a;
  for (const auto& p : a.pairs) keys_a.insert(p.content_key);
  std::set<std::string> hits;
  for (const auto& p : b.pairs)
    if (keys_a.count(p.content_key)) hits.insert(p.content_key);
  DisjointReport r;
  r.disjoint = hits.empty();
  r.shared_keys.assign(hits.begin(), hits.end());
  return r;
}

}  // namespace circuitlab::contrast
