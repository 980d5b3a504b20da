// Seeded random streams. All randomness in a run flows from one seed through
// named sub-streams so individual sources (init, shuffle, flip, ...) can be
// isolated when chasing nondeterminism. The generator and the distributions
// are implemented here so output is identical across platforms and standard
// library versions.
#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace orfnet::rng {

inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// xoshiro256** seeded via splitmix64.
class Stream {
 public:
  Stream() : Stream(0) {}
  explicit Stream(uint64_t seed) {
    uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  uint64_t next() {
    auto rotl = [](uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return double(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi], inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    const uint64_t span = uint64_t(hi - lo) + 1;
    return lo + int64_t(next() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    // Box-Muller; u1 in (0,1].
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = size_t(uniform_int(0, int64_t(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t s_[4];
  double cached_ = 0.0;
  bool has_cached_ = false;
};

// Derives an independent stream for a named purpose under one run seed.
inline Stream substream(uint64_t run_seed, std::string_view name) {
  uint64_t sm = run_seed ^ fnv1a(name);
  return Stream(splitmix64(sm));
}

}  // namespace orfnet::rng
