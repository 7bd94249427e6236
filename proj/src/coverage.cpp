#include "guardian/coverage.hpp"

#include "guardian/rng.hpp"

#include <stdexcept>

namespace guardian {

CoverageSource source_of(std::span<const std::uintptr_t> trace) noexcept {
  if (trace.empty()) {
    return {kEmptyTraceSource};
  }
  // FNV-1a over the frame words, finished with a strong mixer.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uintptr_t pc : trace) {
    for (int i = 0; i < 8; ++i) {
      h ^= (static_cast<std::uint64_t>(pc) >> (8 * i)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  }
  h = splitmix64(h ^ trace.size());
  if (h == kEmptyTraceSource) {
    h ^= 1;
  }
  return {h};
}

std::array<std::size_t, CountingBloomFilter::kHashes> CountingBloomFilter::positions(
    CoverageSource source) noexcept {
  // Double hashing: g_i = h1 + i * h2.
  const std::uint64_t h1 = source.hash & 0xffffffffULL;
  const std::uint64_t h2 = (source.hash >> 32) | 1;
  std::array<std::size_t, kHashes> out{};
  for (std::size_t i = 0; i < kHashes; ++i) {
    out[i] = static_cast<std::size_t>((h1 + i * h2) % kCounters);
  }
  return out;
}

std::uint8_t CountingBloomFilter::counter(std::size_t i) const noexcept {
  const std::uint8_t byte = nibbles_[i / 2];
  return (i % 2 == 0) ? (byte & 0x0f) : (byte >> 4);
}

void CountingBloomFilter::set_counter(std::size_t i, std::uint8_t v) noexcept {
  std::uint8_t& byte = nibbles_[i / 2];
  if (i % 2 == 0) {
    byte = static_cast<std::uint8_t>((byte & 0xf0) | v);
  } else {
    byte = static_cast<std::uint8_t>((byte & 0x0f) | (v << 4));
  }
}

void CountingBloomFilter::insert(CoverageSource source) noexcept {
  for (std::size_t p : positions(source)) {
    const std::uint8_t c = counter(p);
    if (c < kSaturated) {
      set_counter(p, c + 1);
    }
  }
}

void CountingBloomFilter::remove(CoverageSource source) noexcept {
  for (std::size_t p : positions(source)) {
    const std::uint8_t c = counter(p);
    if (c > 0 && c < kSaturated) {
      set_counter(p, c - 1);
    }
  }
}

bool CountingBloomFilter::query(CoverageSource source) const noexcept {
  for (std::size_t p : positions(source)) {
    if (counter(p) == 0) {
      return false;
    }
  }
  return true;
}

void CountingBloomFilter::clear() noexcept { nibbles_.fill(0); }

std::size_t CountingBloomFilter::saturated_count() const noexcept {
  std::size_t n = 0;
  for (std::size_t i = 0; i < kCounters; ++i) {
    n += counter(i) == kSaturated;
  }
  return n;
}

CoverageFilter::CoverageFilter(const CoverageConfig& config)
    : threshold_(config.utilization_threshold) {
  if (!(threshold_ >= 0.0 && threshold_ <= 1.0)) {
    throw std::invalid_argument("utilization threshold must be in [0, 1]");
  }
}

bool CoverageFilter::admit(double pool_utilization, CoverageSource source) const noexcept {
  if (pool_utilization < threshold_) {
    return true;
  }
  return !filter_.query(source);
}

bool CoverageFilter::needs_rebuild() const noexcept {
  return filter_.saturated_count() * 100 > CountingBloomFilter::kCounters;
}

void CoverageFilter::rebuild(std::span<const CoverageSource> live_sources) noexcept {
  filter_.clear();
  for (CoverageSource s : live_sources) {
    filter_.insert(s);
  }
}

}  // namespace guardian
