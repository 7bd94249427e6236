#pragma once

#include <cstdint>

namespace guardian {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// xorshift64* generator. Small, fast and deterministic for a given seed.
class XorShift64 {
 public:
  constexpr XorShift64() noexcept : XorShift64(0) {}
  constexpr explicit XorShift64(std::uint64_t seed) noexcept : state_(splitmix64(seed)) {
    if (state_ == 0) {
      state_ = 0x2545f4914f6cdd1dULL;
    }
  }

  constexpr std::uint64_t next() noexcept {
    state_ ^= state_ >> 12;
    state_ ^= state_ << 25;
    state_ ^= state_ >> 27;
    return state_ * 0x2545f4914f6cdd1dULL;
  }

  /// Uniform integer in [lo, hi], unbiased (rejection sampling).
  constexpr std::uint64_t uniform(std::uint64_t lo, std::uint64_t hi) noexcept {
    const std::uint64_t span = hi - lo;
    if (span == ~std::uint64_t{0}) {
      return next();
    }
    const std::uint64_t range = span + 1;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % range);
    std::uint64_t v;
    do {
      v = next();
    } while (v >= limit);
    return lo + v % range;
  }

  /// Uniform double in [0, 1).
  constexpr double unit() noexcept {
    return static_cast<double>(next() >> 11) * 0x1.0p-53;
  }

 private:
  std::uint64_t state_;
};

}  // namespace guardian
