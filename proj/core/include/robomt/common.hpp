#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace robomt {

// Error categories map one-to-one onto CLI exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const { return 1; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 2; }
};

class DataError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 3; }
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long step) : Error(what), step_(step) {}
  int exit_code() const override { return 4; }
  long step() const { return step_; }

 private:
  long step_;
};

/// A tokenized, lowercased sentence. Tokens are non-empty and contain no
/// whitespace.
using TokenSeq = std::vector<std::string>;
using Corpus = std::vector<TokenSeq>;

/// Splits on single spaces. Throws DataError on empty tokens (double spaces,
/// leading/trailing blanks) or an empty line.
TokenSeq tokenize(std::string_view line);
std::string detokenize(const TokenSeq& tokens);
bool is_valid_token(std::string_view tok);

Corpus read_corpus(const std::string& path);
void write_corpus(const std::string& path, const Corpus& corpus);

// ---------------------------------------------------------------------------
// Random numbers. Everything stochastic in the project goes through these so
// results do not depend on the standard library's distribution algorithms.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Keyed hash used to derive independent streams, e.g. (seed, sentence index).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t key) {
  return splitmix64(splitmix64(seed) ^ (key * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL));
}

/// xoshiro256** generator.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& s : s_) {
      x += 0x9e3779b97f4a7c15ULL;
      s = splitmix64(x);
    }
  }

  std::uint64_t next() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n); n must be positive. Unbiased (rejection).
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v;
    do {
      v = next();
    } while (v >= limit);
    return v % n;
  }

  /// Standard normal via Box-Muller (one value per call).
  double normal();

  bool bernoulli(double p) { return uniform() < p; }

  /// k distinct indices from [0, n) in draw order (partial Fisher-Yates).
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::uint64_t s_[4];
};

/// FNV-1a 64-bit, hex-encoded. Used for config and vocabulary digests.
std::string fnv1a_hex(std::string_view data);

}  // namespace robomt
