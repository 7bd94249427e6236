#include "guardian/stack_trace.hpp"

#include "guardian/platform.hpp"

#include <link.h>
#include <pthread.h>
#include <ucontext.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <cstring>
#include <mutex>

namespace guardian {

StackTrace::StackTrace(std::span<const std::uintptr_t> frames) noexcept {
  for (std::uintptr_t pc : frames) {
    if (!push(pc)) {
      break;
    }
  }
}

bool operator==(const StackTrace& a, const StackTrace& b) noexcept {
  return std::equal(a.frames().begin(), a.frames().end(), b.frames().begin(), b.frames().end());
}

namespace {

struct StackBounds {
  std::uintptr_t low = 0;
  std::uintptr_t high = 0;
};

thread_local StackBounds tls_bounds;

// A saved frame pointer always points further up the stack, and frames are
// small relative to this; anything else means the chain left frame-pointer
// code.
constexpr std::uintptr_t kMaxFrameSpan = 1 << 20;

class FrameWalker {
 public:
  explicit FrameWalker(std::uintptr_t fp) noexcept : fp_(fp) {}

  // Advances one frame, producing the return address stored in it.
  bool next(std::uintptr_t& return_address) noexcept {
    if (fp_ == 0 || (fp_ & (sizeof(std::uintptr_t) - 1)) != 0) {
      return false;
    }
    std::uintptr_t saved_fp = 0;
    std::uintptr_t ret = 0;
    if (!read(fp_, saved_fp) || !read(fp_ + sizeof(std::uintptr_t), ret)) {
      return false;
    }
    if (ret == 0) {
      return false;
    }
    return_address = ret;
    if (saved_fp <= fp_ || saved_fp - fp_ > kMaxFrameSpan) {
      fp_ = 0;
    } else {
      fp_ = saved_fp;
    }
    return true;
  }

 private:
  bool read(std::uintptr_t address, std::uintptr_t& out) const noexcept {
    const StackBounds& b = tls_bounds;
    if (b.high != 0) {
      if (address < b.low || address + sizeof(std::uintptr_t) > b.high) {
        return false;
      }
      out = *reinterpret_cast<const std::uintptr_t*>(address);
      return true;
    }
    return safe_read_word(address, out);
  }

  std::uintptr_t fp_;
};

}  // namespace

void prime_thread_stack_bounds() noexcept {
  if (tls_bounds.high != 0) {
    return;
  }
  pthread_attr_t attr;
  if (pthread_getattr_np(pthread_self(), &attr) != 0) {
    return;
  }
  void* addr = nullptr;
  std::size_t size = 0;
  if (pthread_attr_getstack(&attr, &addr, &size) == 0 && addr != nullptr) {
    tls_bounds.low = reinterpret_cast<std::uintptr_t>(addr);
    tls_bounds.high = tls_bounds.low + size;
  }
  pthread_attr_destroy(&attr);
}

StackTrace capture_trace(std::size_t max_frames, std::size_t skip) noexcept {
  StackTrace trace;
  max_frames = std::min(max_frames, kMaxFrames);
  if (max_frames == 0) {
    return trace;
  }
  prime_thread_stack_bounds();
  FrameWalker walker(reinterpret_cast<std::uintptr_t>(__builtin_frame_address(0)));
  std::uintptr_t pc = 0;
  while (trace.size() < max_frames && walker.next(pc)) {
    if (skip > 0) {
      --skip;
      continue;
    }
    trace.push(pc);
  }
  return trace;
}

StackTrace capture_trace_from_context(const void* ucontext, std::size_t max_frames) noexcept {
  StackTrace trace;
  max_frames = std::min(max_frames, kMaxFrames);
  if (ucontext == nullptr || max_frames == 0) {
    return trace;
  }
  const auto* uc = static_cast<const ucontext_t*>(ucontext);
  std::uintptr_t pc = 0;
  std::uintptr_t fp = 0;
#if defined(__x86_64__)
  pc = static_cast<std::uintptr_t>(uc->uc_mcontext.gregs[REG_RIP]);
  fp = static_cast<std::uintptr_t>(uc->uc_mcontext.gregs[REG_RBP]);
#elif defined(__aarch64__)
  pc = static_cast<std::uintptr_t>(uc->uc_mcontext.pc);
  fp = static_cast<std::uintptr_t>(uc->uc_mcontext.regs[29]);
#else
  (void)uc;
#endif
  if (pc == 0) {
    return trace;
  }
  trace.push(pc);
  FrameWalker walker(fp);
  while (trace.size() < max_frames && walker.next(pc)) {
    trace.push(pc);
  }
  return trace;
}

void ModuleTable::refresh() noexcept {
  count_ = 0;
  dl_iterate_phdr(
      [](dl_phdr_info* info, std::size_t, void* data) -> int {
        auto* self = static_cast<ModuleTable*>(data);
        const char* name = info->dlpi_name;
        if (name == nullptr || name[0] == '\0') {
          name = program_invocation_name;
        }
        for (int i = 0; i < info->dlpi_phnum && self->count_ < kCapacity; ++i) {
          const ElfW(Phdr)& ph = info->dlpi_phdr[i];
          if (ph.p_type != PT_LOAD || (ph.p_flags & PF_X) == 0) {
            continue;
          }
          Module& m = self->modules_[self->count_++];
          m.start = info->dlpi_addr + ph.p_vaddr;
          m.end = m.start + ph.p_memsz;
          m.load_bias = info->dlpi_addr;
          std::strncpy(m.name.data(), name, m.name.size() - 1);
          m.name.back() = '\0';
        }
        return 0;
      },
      this);
}

const ModuleTable::Module* ModuleTable::find(std::uintptr_t pc) const noexcept {
  for (std::size_t i = 0; i < count_; ++i) {
    if (pc >= modules_[i].start && pc < modules_[i].end) {
      return &modules_[i];
    }
  }
  return nullptr;
}

namespace {

// Double-buffered so that the fault handler always sees a complete table.
ModuleTable g_tables[2];
std::atomic<int> g_active_table{0};
std::mutex g_refresh_mutex;

}  // namespace

const ModuleTable& process_modules() noexcept {
  return g_tables[g_active_table.load(std::memory_order_acquire)];
}

void refresh_process_modules() noexcept {
  std::lock_guard lock(g_refresh_mutex);
  const int next = 1 - g_active_table.load(std::memory_order_relaxed);
  g_tables[next].refresh();
  g_active_table.store(next, std::memory_order_release);
}

}  // namespace guardian
