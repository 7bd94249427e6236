#include "guardian/fault_handler.hpp"

#include "guardian/platform.hpp"

#include <signal.h>
#include <ucontext.h>
#include <unistd.h>

#include <array>
#include <atomic>
#include <cerrno>
#include <mutex>
#include <sched.h>

namespace guardian {

AccessKind determine_access_kind(const void* ucontext) noexcept {
  if (ucontext == nullptr) {
    return AccessKind::Unknown;
  }
  const auto* uc = static_cast<const ucontext_t*>(ucontext);
#if defined(__x86_64__)
  // Page-fault error code: bit 1 set for writes.
  return (uc->uc_mcontext.gregs[REG_ERR] & 0x2) ? AccessKind::Write : AccessKind::Read;
#elif defined(__aarch64__)
  const auto* ctx = reinterpret_cast<const _aarch64_ctx*>(uc->uc_mcontext.__reserved);
  while (ctx->magic != 0) {
    if (ctx->magic == ESR_MAGIC) {
      const auto esr = reinterpret_cast<const esr_context*>(ctx)->esr;
      // Data abort, WnR bit.
      return (esr & (1u << 6)) ? AccessKind::Write : AccessKind::Read;
    }
    ctx = reinterpret_cast<const _aarch64_ctx*>(reinterpret_cast<const char*>(ctx) + ctx->size);
  }
  return AccessKind::Unknown;
#else
  (void)uc;
  return AccessKind::Unknown;
#endif
}

namespace {

// A record is over a kilobyte; callers of attach_allocation() hold the
// report permit, so one shared copy suffices.
AllocationRecord g_record;

}  // namespace

void attach_allocation(const GuardedPool& pool, const MetadataStore* store, std::size_t slot,
                       ErrorReport& out) noexcept {
  const SlotSnapshot snap = pool.snapshot(slot);
  out.has_allocation = true;
  out.allocation_address = pool.user_address(snap, slot);
  out.allocation_size = snap.user_size;

  AllocationRecord& record = g_record;
  const bool found = store != nullptr && store->snapshot_into(snap.metadata, record) &&
                     record.slot_index == slot && record.slot_generation == snap.generation;
  if (!found) {
    out.metadata_lost = true;
    return;
  }
  out.alloc_thread = record.alloc_thread;
  out.alloc_trace = record.alloc_trace.decompress();
  if (record.has_dealloc) {
    out.has_dealloc = true;
    out.dealloc_thread = record.dealloc_thread;
    out.dealloc_trace = record.dealloc_trace.decompress();
  }
}

bool build_fault_report(const GuardedPool& pool, const MetadataStore* store,
                        std::uintptr_t address, AccessKind access, const StackTrace& access_trace,
                        ErrorReport& out) noexcept {
  const Classification c = pool.classify(address);
  if (c.kind == AddressClass::NotOurs) {
    return false;
  }
  out.access_address = address;
  out.access = access;
  out.faulting_thread = current_thread_id();
  out.access_trace = access_trace;
  out.has_allocation = false;
  out.has_dealloc = false;
  out.metadata_lost = false;
  out.modules = &process_modules();

  switch (c.kind) {
    case AddressClass::QuarantinedSlot:
      out.kind = ErrorKind::UseAfterFree;
      break;
    case AddressClass::LeftGuardOf:
    case AddressClass::RightGuardOf: {
      const SlotState state = pool.snapshot(c.slot).state;
      if (state == SlotState::Quarantined) {
        out.kind = ErrorKind::UseAfterFree;
      } else {
        out.kind = c.kind == AddressClass::LeftGuardOf ? ErrorKind::BufferUnderflow
                                                       : ErrorKind::BufferOverflow;
      }
      break;
    }
    default:
      out.kind = ErrorKind::IndeterminateGuardHit;
      return true;
  }
  attach_allocation(pool, store, c.slot, out);
  if (out.kind == ErrorKind::UseAfterFree && !out.has_dealloc) {
    out.metadata_lost = true;
  }
  if (out.kind != ErrorKind::UseAfterFree && out.has_dealloc) {
    // The slot was freed and re-used between classification and the
    // metadata read; the deallocation belongs to another lifetime.
    out.has_dealloc = false;
  }
  return true;
}

namespace {

std::atomic<std::uint64_t> g_permit_owner{0};
std::atomic<std::uint64_t> g_reports{0};
ErrorReport g_report;
std::array<char, 1 << 16> g_arena;
std::size_t g_text_size = 0;

void write_all(int fd, const char* data, std::size_t size) noexcept {
  while (size > 0) {
    const ssize_t n = ::write(fd, data, size);
    if (n < 0) {
      if (errno == EINTR) {
        continue;
      }
      return;
    }
    data += n;
    size -= static_cast<std::size_t>(n);
  }
}

}  // namespace

ReportSession::ReportSession() noexcept {
  const std::uint64_t self = current_thread_id();
  std::uint64_t expected = 0;
  for (;;) {
    if (g_permit_owner.compare_exchange_weak(expected, self, std::memory_order_acquire)) {
      held_ = true;
      return;
    }
    if (expected == self) {
      return;
    }
    expected = 0;
    sched_yield();
  }
}

ReportSession::~ReportSession() {
  if (held_) {
    g_permit_owner.store(0, std::memory_order_release);
  }
}

ErrorReport& ReportSession::report() noexcept { return g_report; }

void ReportSession::emit(const ReporterConfig& config) noexcept {
  TextWriter out(g_arena);
  render_report(g_report, out);
  g_text_size = out.size();
  if (config.sink_fd >= 0) {
    write_all(config.sink_fd, g_arena.data(), g_text_size);
  }
  g_reports.fetch_add(1, std::memory_order_relaxed);
}

void ReportSession::finish(const ReporterConfig& config) noexcept {
  if (held_) {
    held_ = false;
    g_permit_owner.store(0, std::memory_order_release);
  }
  if (config.on_report != nullptr) {
    config.on_report(g_report, std::string_view(g_arena.data(), g_text_size),
                     config.callback_context);
  }
}

std::uint64_t reports_emitted() noexcept { return g_reports.load(std::memory_order_relaxed); }

namespace {

constexpr std::size_t kMaxTargets = 64;
std::array<std::atomic<FaultTarget*>, kMaxTargets> g_targets{};

struct sigaction g_previous_segv;
struct sigaction g_previous_bus;

void restore_default_and_return(int signo) noexcept {
  struct sigaction dfl {};
  dfl.sa_handler = SIG_DFL;
  sigemptyset(&dfl.sa_mask);
  sigaction(signo, &dfl, nullptr);
}

void chain(int signo, siginfo_t* info, void* ucontext) noexcept {
  const struct sigaction& prev = signo == SIGBUS ? g_previous_bus : g_previous_segv;
  if (prev.sa_flags & SA_SIGINFO) {
    if (prev.sa_sigaction != nullptr) {
      prev.sa_sigaction(signo, info, ucontext);
      return;
    }
  } else if (prev.sa_handler != SIG_DFL && prev.sa_handler != SIG_IGN) {
    prev.sa_handler(signo);
    return;
  }
  // Default (or ignored, which for a synchronous fault would loop): let the
  // faulting instruction re-execute under the default disposition.
  restore_default_and_return(signo);
}

void on_fault_signal(int signo, siginfo_t* info, void* ucontext) {
  const int saved_errno = errno;
  const auto address = reinterpret_cast<std::uintptr_t>(info->si_addr);
  switch (dispatch_fault(address, ucontext)) {
    case FaultOutcome::NotOurs:
      chain(signo, info, ucontext);
      break;
    case FaultOutcome::Recovered:
      break;
    case FaultOutcome::Terminate:
      restore_default_and_return(signo);
      break;
  }
  errno = saved_errno;
}

}  // namespace

FaultOutcome dispatch_fault(std::uintptr_t address, const void* ucontext) noexcept {
  for (auto& slot : g_targets) {
    FaultTarget* target = slot.load(std::memory_order_acquire);
    if (target != nullptr && target->owns(address)) {
      return target->handle_fault(address, ucontext);
    }
  }
  return FaultOutcome::NotOurs;
}

void install_fault_handler() {
  static std::once_flag once;
  std::call_once(once, [] {
    struct sigaction action {};
    action.sa_sigaction = on_fault_signal;
    action.sa_flags = SA_SIGINFO | SA_ONSTACK;
    sigemptyset(&action.sa_mask);
    sigaction(SIGSEGV, &action, &g_previous_segv);
    sigaction(SIGBUS, &action, &g_previous_bus);
  });
}

bool register_fault_target(FaultTarget* target) noexcept {
  for (auto& slot : g_targets) {
    FaultTarget* expected = nullptr;
    if (slot.compare_exchange_strong(expected, target, std::memory_order_acq_rel)) {
      return true;
    }
  }
  return false;
}

void unregister_fault_target(FaultTarget* target) noexcept {
  for (auto& slot : g_targets) {
    FaultTarget* expected = target;
    slot.compare_exchange_strong(expected, nullptr, std::memory_order_acq_rel);
  }
}

}  // namespace guardian
