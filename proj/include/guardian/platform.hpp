#pragma once

#include <cstddef>
#include <cstdint>

namespace guardian {

/// Size of a virtual-memory page, queried from the OS once.
std::size_t system_page_size() noexcept;

/// Kernel thread id of the calling thread. Cached per thread and safe to call
/// from a signal handler.
std::uint64_t current_thread_id() noexcept;

enum class PageAccess { None, ReadWrite };

/// Reserves `length` bytes of anonymous, inaccessible address space.
/// Returns nullptr on failure.
void* reserve_region(std::size_t length) noexcept;

void release_region(void* base, std::size_t length) noexcept;

/// mprotect() wrapper. `address` and `length` must be page-granular.
bool set_page_access(void* address, std::size_t length, PageAccess access) noexcept;

/// Returns true if one byte at `address` can be read without faulting.
/// Uses a syscall so an unmapped or PROT_NONE address reports false instead
/// of raising SIGSEGV. Async-signal-safe.
bool probe_readable(const void* address) noexcept;

/// Reads a machine word without faulting. Async-signal-safe.
bool safe_read_word(std::uintptr_t address, std::uintptr_t& out) noexcept;

constexpr bool is_power_of_two(std::size_t v) noexcept {
  return v != 0 && (v & (v - 1)) == 0;
}

constexpr std::uintptr_t align_down(std::uintptr_t v, std::size_t alignment) noexcept {
  return v & ~(static_cast<std::uintptr_t>(alignment) - 1);
}

}  // namespace guardian
