#include "guardian/platform.hpp"

#include <sys/mman.h>
#include <sys/syscall.h>
#include <sys/uio.h>
#include <unistd.h>

#include <cerrno>

namespace guardian {

std::size_t system_page_size() noexcept {
  static const std::size_t size = static_cast<std::size_t>(::sysconf(_SC_PAGESIZE));
  return size;
}

std::uint64_t current_thread_id() noexcept {
  thread_local std::uint64_t tid = 0;
  if (tid == 0) {
    tid = static_cast<std::uint64_t>(::syscall(SYS_gettid));
  }
  return tid;
}

void* reserve_region(std::size_t length) noexcept {
  void* p = ::mmap(nullptr, length, PROT_NONE, MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE, -1, 0);
  return p == MAP_FAILED ? nullptr : p;
}

void release_region(void* base, std::size_t length) noexcept {
  if (base != nullptr) {
    ::munmap(base, length);
  }
}

bool set_page_access(void* address, std::size_t length, PageAccess access) noexcept {
  const int prot = access == PageAccess::ReadWrite ? (PROT_READ | PROT_WRITE) : PROT_NONE;
  return ::mprotect(address, length, prot) == 0;
}

namespace {

bool read_self(std::uintptr_t address, void* out, std::size_t length) noexcept {
  iovec local{out, length};
  iovec remote{reinterpret_cast<void*>(address), length};
  const int saved = errno;
  const ssize_t n = ::process_vm_readv(::getpid(), &local, 1, &remote, 1, 0);
  errno = saved;
  return n == static_cast<ssize_t>(length);
}

}  // namespace

bool probe_readable(const void* address) noexcept {
  unsigned char byte;
  return read_self(reinterpret_cast<std::uintptr_t>(address), &byte, 1);
}

bool safe_read_word(std::uintptr_t address, std::uintptr_t& out) noexcept {
  return read_self(address, &out, sizeof(out));
}

}  // namespace guardian
