#pragma once
#include <cmath>
#include <cstdint>
#include <random>

// Deterministic randomness. Every consumer derives its own stream from the
// run's root seed through child_seed(), so adding or reordering consumers
// never perturbs unrelated draws, and reruns with the same seed are
// bit-identical. Normal deviates use an explicit Box-Muller so results do not
// depend on the standard library's distribution implementations.
namespace dmf {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// The documented split function: child i of a root seed.
inline std::uint64_t child_seed(std::uint64_t root, std::uint64_t stream) {
  return splitmix64(root + (stream + 1) * 0x9E3779B97F4A7C15ull);
}

// Fixed stream ids off a run's root seed.
namespace streams {
inline constexpr std::uint64_t kCorpus = 1;
inline constexpr std::uint64_t kInit = 2;
inline constexpr std::uint64_t kTrain = 3;
inline constexpr std::uint64_t kSample = 4;
inline constexpr std::uint64_t kEval = 5;
inline constexpr std::uint64_t kCodec = 6;
} // namespace streams

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // uniform in [0, 1)
  double uniform() { return double(eng_() >> 11) * 0x1.0p-53; }

  // uniform integer in [0, n)
  std::uint64_t uniform_u64(std::uint64_t n) {
    const std::uint64_t lim = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do { x = eng_(); } while (x >= lim);
    return x % n;
  }

  // standard normal via Box-Muller
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do { u1 = uniform(); } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

} // namespace dmf
