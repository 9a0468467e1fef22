#pragma once

#include <cstdint>
#include <limits>
#include <string_view>

namespace ipa {

// SplitMix64 step; the workhorse behind every deterministic stream in the
// project. state is advanced by the golden gamma and mixed.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
  return splitmix64(a ^ (0x9E3779B97F4A7C15ULL + (b << 6) + (b >> 2)));
}

inline uint64_t hash_str(uint64_t seed, std::string_view s) {
  uint64_t h = seed;
  for (char c : s) h = splitmix64(h ^ static_cast<unsigned char>(c));
  return h;
}

// Counter-based generator: the entire state is (base, counter), so streams
// are trivially serializable and resumable. Satisfies
// UniformRandomBitGenerator, usable with <random> distributions.
class CounterRng {
 public:
  using result_type = uint64_t;

  CounterRng() = default;
  explicit CounterRng(uint64_t base) : base_(base) {}
  CounterRng(uint64_t seed, std::string_view stream)
      : base_(hash_str(seed, stream)) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() {
    return std::numeric_limits<uint64_t>::max();
  }

  result_type operator()() { return splitmix64(base_ + counter_++); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>((*this)() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [lo, hi] inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>((*this)() % span);
  }

  uint64_t base() const { return base_; }
  uint64_t counter() const { return counter_; }
  void set_counter(uint64_t c) { counter_ = c; }

 private:
  uint64_t base_ = 0;
  uint64_t counter_ = 0;
};

}  // namespace ipa
