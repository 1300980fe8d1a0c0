#pragma once

// Shared error type and deterministic RNG derivation. Every stochastic routine
// in the library takes (root_seed, stream, counter) rather than a shared RNG so
// results do not depend on call order.

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace circuitlab {

enum class ErrorKind {
  io,             // file missing / unreadable / short read
  format,         // malformed manifest, blob, JSONL or config
  validation,     // semantic precondition violated by the caller
  shape,          // tensor shape disagrees with the config
  missing_tensor, // manifest lacks a required tensor
  non_finite,     // NaN/Inf in weights or activations
  cache_miss,     // requested a site the cache did not capture
  degenerate,     // statistic undefined on this input (empty group, zero norm, ...)
  mismatch,       // cache/model fingerprint or sequence-length disagreement
};

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) { throw Error(kind, msg); }

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
  if (!cond) fail(kind, msg);
}

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Named streams keep independent analyses independent even under one root seed.
namespace rng_stream {
inline constexpr uint64_t bootstrap = 0x01;
inline constexpr uint64_t permutation = 0x02;
inline constexpr uint64_t split_half = 0x03;
inline constexpr uint64_t fixture = 0x04;
inline constexpr uint64_t control_sample = 0x05;
inline constexpr uint64_t kfold = 0x06;
inline constexpr uint64_t lens_shuffle = 0x07;
inline constexpr uint64_t noise = 0x08;
inline constexpr uint64_t sae = 0x09;
inline constexpr uint64_t triple = 0x0a;
}  // namespace rng_stream

inline std::mt19937_64 seeded_rng(uint64_t root, uint64_t stream, uint64_t counter = 0) {
  return std::mt19937_64(splitmix64(splitmix64(splitmix64(root) ^ stream) ^ counter));
}

}  // namespace circuitlab
