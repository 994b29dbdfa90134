#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace atdgnn {

// splitmix64 step; also used to derive independent child seeds from a master
// seed so per-fold / per-purpose streams never overlap.
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t hash_combine(uint64_t seed, uint64_t value) {
  uint64_t s = seed ^ (value + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2));
  return splitmix64(s);
}

inline uint64_t hash_tag(uint64_t seed, std::string_view tag) {
  uint64_t h = seed;
  for (char c : tag) h = hash_combine(h, static_cast<uint64_t>(static_cast<unsigned char>(c)));
  return h;
}

// Deterministic RNG with self-contained distributions. The standard library's
// distribution objects are implementation-defined, so we roll our own on top
// of xoshiro-style splitmix output to keep generated bytes stable per seed.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0x853c49e6748fea9bULL) : state_(seed) {
    // burn-in decorrelates near-identical seeds
    splitmix64(state_);
    splitmix64(state_);
  }

  static Rng derive(uint64_t seed, std::string_view tag, uint64_t index = 0) {
    return Rng(hash_combine(hash_tag(seed, tag), index));
  }

  uint64_t next_u64() { return splitmix64(state_); }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller, caching the spare value
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool bernoulli(double p_true) { return uniform() < p_true; }

  // uniform integer in [0, n)
  uint64_t uniform_int(uint64_t n) {
    // rejection sampling to avoid modulo bias
    uint64_t limit = ~0ULL - (~0ULL % n);
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace atdgnn
