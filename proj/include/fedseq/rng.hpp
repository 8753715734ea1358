#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace fedseq {

// All randomness in the project flows through this wrapper so that every
// draw is reproducible bit-for-bit across platforms. std::mt19937_64 has a
// standard-defined sequence; the distribution helpers below avoid the
// implementation-defined std::*_distribution classes.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Named sub-stream tags. Mixing a tag into a seed yields independent streams
// for unrelated purposes (splitting, epochs, evaluation masking, ...).
enum class Stream : std::uint64_t {
  kInit = 0xA1,
  kSplit = 0xB2,
  kEpoch = 0xC3,
  kSelect = 0xD4,
  kEval = 0xE5,
  kPivot = 0xF6,
  kSynth = 0x17,
  kMask = 0x28,
};

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                              std::uint64_t c = 0) {
  std::uint64_t s = seed;
  splitmix64(s);
  s ^= a;
  splitmix64(s);
  s ^= b;
  splitmix64(s);
  s ^= c;
  return splitmix64(s);
}

inline std::uint64_t substream(std::uint64_t seed, Stream tag, std::uint64_t a = 0,
                               std::uint64_t b = 0) {
  return mix_seed(seed, static_cast<std::uint64_t>(tag), a, b);
}

// FNV-1a 64 over the string bytes; used to fold identifiers into seeds.
inline std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed_from(seed)) {}

  std::uint64_t next() { return engine_(); }

  // Uniform double in [0, 1) with 53 random bits.
  double u01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Multiply-shift; bias is below 2^-64.
  std::uint64_t bounded(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next()) * n) >> 64);
  }

  // Inclusive range.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(bounded(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  // Standard normal via Box-Muller, caching the second value.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = u01();
    double u2 = u01();
    while (u1 <= 0.0) u1 = u01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Marsaglia-Tsang gamma; the alpha < 1 case is boosted through alpha + 1.
  double gamma(double alpha) {
    if (alpha < 1.0) {
      double u = u01();
      while (u <= 0.0) u = u01();
      return gamma(alpha + 1.0) * std::pow(u, 1.0 / alpha);
    }
    double d = alpha - 1.0 / 3.0;
    double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = normal();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      double u = u01();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  // Symmetric Dirichlet(alpha * 1_k).
  std::vector<double> dirichlet(double alpha, std::size_t k) {
    std::vector<double> w(k);
    double sum = 0.0;
    for (auto& x : w) {
      x = gamma(alpha);
      sum += x;
    }
    if (sum <= 0.0) sum = 1.0;
    for (auto& x : w) x /= sum;
    return w;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(bounded(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static std::mt19937_64 seed_from(std::uint64_t seed) {
    std::uint64_t s = seed;
    return std::mt19937_64(splitmix64(s));
  }

  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace fedseq
