#pragma once

#include "guardian/stack_trace.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace guardian {

enum class ErrorKind : std::uint8_t {
  UseAfterFree,
  BufferOverflow,
  BufferUnderflow,
  DoubleFree,
  InvalidFree,
  IndeterminateGuardHit,
};

enum class AccessKind : std::uint8_t { Read, Write, Unknown };

std::string_view to_string(ErrorKind kind) noexcept;
std::string_view to_string(AccessKind kind) noexcept;

/// A classified memory error. Plain data with fixed-size traces, so the fault
/// handler can fill one without allocating.
struct ErrorReport {
  ErrorKind kind = ErrorKind::IndeterminateGuardHit;
  std::uintptr_t access_address = 0;
  AccessKind access = AccessKind::Unknown;
  std::uint64_t faulting_thread = 0;
  StackTrace access_trace;

  /// False when the access could not be attributed to any allocation.
  bool has_allocation = false;
  std::uintptr_t allocation_address = 0;
  std::size_t allocation_size = 0;

  std::uint64_t alloc_thread = 0;
  StackTrace alloc_trace;
  bool has_dealloc = false;
  std::uint64_t dealloc_thread = 0;
  StackTrace dealloc_trace;

  /// The allocation's metadata record was evicted or unreadable.
  bool metadata_lost = false;

  /// Used only for rendering module-relative frames; may be null.
  const ModuleTable* modules = nullptr;

  /// Signed distance of the access from the allocation start.
  std::int64_t offset() const noexcept {
    return static_cast<std::int64_t>(access_address - allocation_address);
  }
};

/// Appends into a caller-provided buffer; never allocates. Output that does
/// not fit is dropped and truncated() becomes true.
class TextWriter {
 public:
  explicit TextWriter(std::span<char> buffer) noexcept : buffer_(buffer) {}

  TextWriter& put(std::string_view s) noexcept;
  TextWriter& put(char c) noexcept;
  TextWriter& put_dec(std::uint64_t v) noexcept;
  TextWriter& put_hex(std::uint64_t v) noexcept;  // "0x..." lowercase, no padding

  std::string_view view() const noexcept { return {buffer_.data(), size_}; }
  std::size_t size() const noexcept { return size_; }
  bool truncated() const noexcept { return truncated_; }
  void clear() noexcept {
    size_ = 0;
    truncated_ = false;
  }

 private:
  std::span<char> buffer_;
  std::size_t size_ = 0;
  bool truncated_ = false;
};

inline constexpr std::string_view kReportHeader = "*** GWP-ASan detected a memory error ***";
inline constexpr std::string_view kReportTrailer = "*** End GWP-ASan report ***";
inline constexpr std::string_view kMetadataLost = "<metadata lost>";
inline constexpr std::string_view kTraceUnavailable = "<unavailable>";

/// Renders the report text. Pure function of `report`; async-signal-safe.
void render_report(const ErrorReport& report, TextWriter& out) noexcept;

std::string render_report(const ErrorReport& report);

}  // namespace guardian
