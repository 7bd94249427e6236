#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>

namespace guardian {

inline constexpr std::size_t kMaxFrames = 64;

/// Fixed-capacity list of return addresses, innermost first. Never allocates,
/// so it can be filled from a signal handler.
class StackTrace {
 public:
  StackTrace() = default;
  explicit StackTrace(std::span<const std::uintptr_t> frames) noexcept;

  bool push(std::uintptr_t pc) noexcept {
    if (size_ == kMaxFrames) {
      return false;
    }
    frames_[size_++] = pc;
    return true;
  }

  void clear() noexcept { size_ = 0; }
  std::size_t size() const noexcept { return size_; }
  bool empty() const noexcept { return size_ == 0; }
  std::uintptr_t operator[](std::size_t i) const noexcept { return frames_[i]; }
  std::span<const std::uintptr_t> frames() const noexcept { return {frames_.data(), size_}; }

  friend bool operator==(const StackTrace& a, const StackTrace& b) noexcept;

 private:
  std::array<std::uintptr_t, kMaxFrames> frames_{};
  std::size_t size_ = 0;
};

/// Captures up to `max_frames` return addresses of the current thread,
/// starting with the caller of capture_trace(). `skip` drops that many
/// additional innermost frames (tool-internal callers). An unwalkable stack
/// yields an empty trace.
[[gnu::noinline]] StackTrace capture_trace(std::size_t max_frames, std::size_t skip = 0) noexcept;

/// Fault-time unwind from a signal context (ucontext_t*). The first frame is
/// the faulting pc. Async-signal-safe.
StackTrace capture_trace_from_context(const void* ucontext, std::size_t max_frames) noexcept;

/// Records the calling thread's stack bounds so that later unwinds of this
/// thread (including from the fault handler) can be bounds-checked without
/// syscalls. Called automatically by capture_trace().
void prime_thread_stack_bounds() noexcept;

/// Executable mappings of the process, used to render module-relative frames.
class ModuleTable {
 public:
  struct Module {
    std::uintptr_t start = 0;
    std::uintptr_t end = 0;
    std::uintptr_t load_bias = 0;
    std::array<char, 160> name{};
  };

  static constexpr std::size_t kCapacity = 256;

  /// Snapshots the current set of loaded objects. Not signal-safe.
  void refresh() noexcept;

  const Module* find(std::uintptr_t pc) const noexcept;
  std::size_t size() const noexcept { return count_; }

 private:
  std::array<Module, kCapacity> modules_{};
  std::size_t count_ = 0;
};

/// Process-wide module table, refreshed when an allocator is created.
const ModuleTable& process_modules() noexcept;
void refresh_process_modules() noexcept;

}  // namespace guardian
