#pragma once

// Contrast corpora: paired token sequences that differ only in the manipulated
// condition, with per-pair answer tokens and a measurement position. Loaded
// from JSONL, one pair per line.

#include <optional>
#include <string>
#include <vector>

#include "circuitlab/model.hpp"

namespace circuitlab::contrast {

struct ContrastPair {
  std::string pair_id;
  std::string content_key;
  std::vector<int> pos_tokens;
  std::vector<int> neg_tokens;
  int answer_pos = -1;
  int answer_neg = -1;
  bool measure_last = false;  // schema had "LAST"; kept for round-tripping
  int measure_pos_pos = -1;   // resolved per side at load time
  int measure_pos_neg = -1;
};

struct TaskContrast {
  std::string name;
  std::vector<ContrastPair> pairs;

  bool equal_lengths() const;  // every pair's two sides same length
};

// Malformed lines carry their 1-based line number in the error message.
// When a config is supplied, token ids (including answers) are range-checked.
TaskContrast load_contrast_jsonl(const std::string& path, const std::string& name,
                                 const model::ModelConfig* config = nullptr);

void save_contrast_jsonl(const TaskContrast& t, const std::string& path);

struct DisjointReport {
  bool disjoint = true;
  std::vector<std::string> shared_keys;
};

DisjointReport split_disjoint(const TaskContrast& a, const TaskContrast& b);

}  // namespace circuitlab::contrast
