#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmt {

// Error taxonomy, mapped to CLI exit codes: usage=1, data=2, numeric=3.
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : DataError {
  explicit ShapeError(const std::string& msg) : DataError(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Deterministic RNG used everywhere (init, sampling, synthesis). Thin xoshiro256++
// wrapper so sequences are stable across platforms and stdlib versions.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    // splitmix64 seeding
    uint64_t x = seed;
    for (auto& s : state_) {
      x += 0x9e3779b97f4a7c15ULL;
      uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      s = z ^ (z >> 31);
    }
  }

  uint64_t next_u64() {
    auto rotl = [](uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
    uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // uniform in [0,1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // integer in [0, n)
  uint64_t next_below(uint64_t n) { return n ? next_u64() % n : 0; }

  double normal() {
    // Box-Muller; one value per draw keeps call sequences easy to reason about.
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // normal truncated to +-2 sigma, the conv-weight init distribution
  double trunc_normal(double sigma) {
    for (;;) {
      double v = normal();
      if (std::fabs(v) <= 2.0) return v * sigma;
    }
  }

  // derive an independent stream, e.g. one per modality extractor
  Rng fork(uint64_t salt) const {
    return Rng(state_[0] ^ (salt * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL));
  }

  std::string serialize() const {
    std::string out;
    for (uint64_t s : state_) {
      if (!out.empty()) out += ":";
      out += std::to_string(s);
    }
    return out;
  }

  static Rng deserialize(const std::string& text) {
    Rng rng(0);
    size_t pos = 0;
    for (auto& s : rng.state_) {
      const size_t next = text.find(':', pos);
      s = std::stoull(text.substr(pos, next - pos));
      pos = next == std::string::npos ? text.size() : next + 1;
    }
    return rng;
  }

 private:
  uint64_t state_[4];
};

inline std::string shape_str(const std::vector<int64_t>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

}  // namespace cmt
