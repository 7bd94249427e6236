#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>

// Unsigned LEB128: seven payload bits per byte, least-significant group
// first, high bit set on every byte except the last. Signed values are
// zigzag-mapped first (0, -1, 1, -2, ... -> 0, 1, 2, 3, ...).
namespace guardian::varint {

inline constexpr std::size_t kMaxBytes = 10;

constexpr std::uint64_t zigzag_encode(std::int64_t v) noexcept {
  return (static_cast<std::uint64_t>(v) << 1) ^ static_cast<std::uint64_t>(v >> 63);
}

constexpr std::int64_t zigzag_decode(std::uint64_t v) noexcept {
  return static_cast<std::int64_t>(v >> 1) ^ -static_cast<std::int64_t>(v & 1);
}

constexpr std::size_t encoded_length(std::uint64_t v) noexcept {
  std::size_t n = 1;
  while (v >= 0x80) {
    v >>= 7;
    ++n;
  }
  return n;
}

/// Writes `v` into `out`. Returns the number of bytes written, or 0 if `out`
/// is too small.
std::size_t encode(std::uint64_t v, std::span<std::uint8_t> out) noexcept;

struct Decoded {
  std::uint64_t value;
  std::size_t length;
};

/// Reads one value from the front of `in`. Fails on truncation and on
/// encodings longer than ten bytes or overflowing 64 bits.
std::optional<Decoded> decode(std::span<const std::uint8_t> in) noexcept;

}  // namespace guardian::varint
