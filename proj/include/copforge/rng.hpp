#ifndef COPFORGE_RNG_HPP_
#define COPFORGE_RNG_HPP_

#include <cstdint>
#include <string_view>

namespace copforge {

// splitmix64 finalizer.
constexpr uint64_t Mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr uint64_t HashName(std::string_view name) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) {
    h ^= static_cast<uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Derives an independent seed for a named substream of `seed`.
constexpr uint64_t SubSeed(uint64_t seed, std::string_view stream,
                           uint64_t index = 0) {
  return Mix64(Mix64(seed ^ HashName(stream)) + Mix64(index + 0x632be59bd9b4e019ULL));
}

// Counter-based generator: the full state is (key, counter), so a stream can
// be checkpointed and resumed exactly. All draws are implemented here rather
// than through <random> distributions, whose output is implementation-defined.
class CountedRng {
 public:
  CountedRng() = default;
  explicit CountedRng(uint64_t key, uint64_t counter = 0)
      : key_(key), counter_(counter) {}

  uint64_t NextU64() { return Mix64(key_ ^ Mix64(counter_++)); }

  // Uniform in [0, 1) with 53 random bits.
  double Uniform() { return static_cast<double>(NextU64() >> 11) * 0x1.0p-53; }

  // Uniform in (0, 1].
  double UniformOpenClosed() { return 1.0 - Uniform(); }

  double Uniform(double lo, double hi) { return lo + (hi - lo) * Uniform(); }

  // Uniform integer in [0, bound). Lemire's multiply-shift with rejection.
  uint64_t Below(uint64_t bound) {
    if (bound <= 1) return 0;
    const uint64_t threshold = (0 - bound) % bound;
    for (;;) {
      const unsigned __int128 m =
          static_cast<unsigned __int128>(NextU64()) * bound;
      if (static_cast<uint64_t>(m) >= threshold) {
        return static_cast<uint64_t>(m >> 64);
      }
    }
  }

  bool Bernoulli(double p) { return Uniform() < p; }

  uint64_t key() const { return key_; }
  uint64_t counter() const { return counter_; }

 private:
  uint64_t key_ = 0;
  uint64_t counter_ = 0;
};

}  // namespace copforge

#endif  // COPFORGE_RNG_HPP_
