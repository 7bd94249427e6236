#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>

namespace guardian {

/// Identity of an allocation site: a hash of its allocation stack trace.
struct CoverageSource {
  std::uint64_t hash = 0;
  friend bool operator==(CoverageSource, CoverageSource) = default;
};

inline constexpr std::uint64_t kEmptyTraceSource = 0x5bd1e9955bd1e995ULL;

CoverageSource source_of(std::span<const std::uintptr_t> trace) noexcept;

/// Counting Bloom filter with 4-bit saturating counters. A counter that
/// reaches 15 sticks there and is never decremented again.
class CountingBloomFilter {
 public:
  static constexpr std::size_t kCounters = 1024;
  static constexpr std::size_t kHashes = 2;
  static constexpr std::uint8_t kSaturated = 15;

  void insert(CoverageSource source) noexcept;
  /// Only for previously inserted sources.
  void remove(CoverageSource source) noexcept;
  bool query(CoverageSource source) const noexcept;

  void clear() noexcept;
  std::size_t saturated_count() const noexcept;
  std::uint8_t counter(std::size_t i) const noexcept;

 private:
  static std::array<std::size_t, kHashes> positions(CoverageSource source) noexcept;
  void set_counter(std::size_t i, std::uint8_t v) noexcept;

  std::array<std::uint8_t, kCounters / 2> nibbles_{};
};

struct CoverageConfig {
  double utilization_threshold = 0.75;
};

/// Pool-utilization policy: once utilization reaches the threshold, a
/// sampled allocation is skipped if its site already has a live guarded
/// allocation.
class CoverageFilter {
 public:
  explicit CoverageFilter(const CoverageConfig& config = {});

  bool admit(double pool_utilization, CoverageSource source) const noexcept;

  void insert(CoverageSource source) noexcept { filter_.insert(source); }
  void remove(CoverageSource source) noexcept { filter_.remove(source); }
  bool query(CoverageSource source) const noexcept { return filter_.query(source); }

  /// True once more than 1% of counters are stuck at saturation.
  bool needs_rebuild() const noexcept;
  void rebuild(std::span<const CoverageSource> live_sources) noexcept;

  double threshold() const noexcept { return threshold_; }
  const CountingBloomFilter& filter() const noexcept { return filter_; }

 private:
  double threshold_;
  CountingBloomFilter filter_;
};

}  // namespace guardian
