// Counter-based pseudorandom streams.
//
// Every random quantity in the library is derived from a 64-bit key and a
// 64-bit counter, so results never depend on evaluation order, thread count
// or platform word size. The construction is documented here bit-for-bit so
// it can be reimplemented in another language:
//
//   mix64(z):    the SplitMix64 finalizer
//                z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
//                z ^= z >> 27; z *= 0x94D049BB133111EB;
//                z ^= z >> 31;
//   word(k, c):  mix64(k + 0x9E3779B97F4A7C15 * (c + 1)),  c = 0, 1, 2, ...
//   derive(k,v): mix64(mix64(k) + 0x9E3779B97F4A7C15 * (v + 1))
//
// Uniform doubles take the top 53 bits of a word; standard normals come from
// Box-Muller applied to two consecutive words (u1 in (0,1], u2 in [0,1)).
#pragma once

#include <cmath>
#include <cstdint>

namespace otfm::rng {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

inline std::uint64_t mix64(std::uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ull;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBull;
  z ^= z >> 31;
  return z;
}

inline std::uint64_t word(std::uint64_t key, std::uint64_t counter) {
  return mix64(key + kGolden * (counter + 1));
}

// Hierarchical sub-key derivation; distinct from word() so key and value
// streams never alias.
inline std::uint64_t derive(std::uint64_t key, std::uint64_t value) {
  return mix64(mix64(key) + kGolden * (value + 1));
}

// Fixed salts for the independent streams used across the library.
namespace salt {
inline constexpr std::uint64_t kNoise = 1;
inline constexpr std::uint64_t kData = 2;
inline constexpr std::uint64_t kTime = 3;
inline constexpr std::uint64_t kPairs = 4;
inline constexpr std::uint64_t kInit = 5;
inline constexpr std::uint64_t kSubsample = 6;
inline constexpr std::uint64_t kProbe = 7;
inline constexpr std::uint64_t kTrial = 8;
}  // namespace salt

inline double uniform01(std::uint64_t w) {  // [0, 1)
  return static_cast<double>(w >> 11) * 0x1.0p-53;
}

inline double uniform_open(std::uint64_t w) {  // (0, 1)
  return (static_cast<double>(w >> 11) + 0.5) * 0x1.0p-53;
}

inline double gumbel(std::uint64_t w) { return -std::log(-std::log(uniform_open(w))); }

// Sequential view over the stream of one key.
class Stream {
 public:
  explicit Stream(std::uint64_t key) : key_(key) {}

  std::uint64_t next_word() { return word(key_, counter_++); }
  double u01() { return uniform01(next_word()); }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    // u1 in (0,1] so log is finite.
    double u1 = (static_cast<double>(next_word() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = uniform01(next_word());
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Uniform integer in [0, bound). bound must be > 0.
  std::uint64_t below(std::uint64_t bound) {
    return static_cast<std::uint64_t>(u01() * static_cast<double>(bound)) % bound;
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace otfm::rng
