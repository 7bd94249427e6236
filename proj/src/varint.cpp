#include "guardian/varint.hpp"

namespace guardian::varint {

std::size_t encode(std::uint64_t v, std::span<std::uint8_t> out) noexcept {
  if (out.size() < encoded_length(v)) {
    return 0;
  }
  std::size_t n = 0;
  while (v >= 0x80) {
    out[n++] = static_cast<std::uint8_t>(v | 0x80);
    v >>= 7;
  }
  out[n++] = static_cast<std::uint8_t>(v);
  return n;
}

std::optional<Decoded> decode(std::span<const std::uint8_t> in) noexcept {
  std::uint64_t value = 0;
  for (std::size_t i = 0; i < in.size() && i < kMaxBytes; ++i) {
    const std::uint8_t byte = in[i];
    const unsigned shift = static_cast<unsigned>(7 * i);
    if (i == kMaxBytes - 1 && (byte & 0x7e) != 0) {
      return std::nullopt;
    }
    value |= static_cast<std::uint64_t>(byte & 0x7f) << shift;
    if ((byte & 0x80) == 0) {
      return Decoded{value, i + 1};
    }
  }
  return std::nullopt;
}

}  // namespace guardian::varint
