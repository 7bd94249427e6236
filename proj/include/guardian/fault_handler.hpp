#pragma once

#include "guardian/metadata.hpp"
#include "guardian/pool.hpp"
#include "guardian/report.hpp"

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace guardian {

/// Called after a report has been written to the sink. Runs in signal
/// context for faults, so it must be async-signal-safe; it may leave via
/// siglongjmp. `report` and `text` point into shared storage that the next
/// report overwrites.
using ReportCallback = void (*)(const ErrorReport& report, std::string_view text, void* context);

struct ReporterConfig {
  /// Report once, then unprotect the page, disable sampling and resume,
  /// instead of terminating.
  bool recoverable = false;
  /// Pre-opened descriptor reports are written to; negative disables output.
  int sink_fd = 2;
  ReportCallback on_report = nullptr;
  void* callback_context = nullptr;
};

/// Read/write flag of a fault, decoded from a ucontext_t. Unknown when the
/// platform does not expose it or `ucontext` is null.
AccessKind determine_access_kind(const void* ucontext) noexcept;

/// Builds a report for a fault at `address` from the pool geometry and the
/// metadata store (which may be null). Returns false if the address is not
/// in the pool. Async-signal-safe.
bool build_fault_report(const GuardedPool& pool, const MetadataStore* store,
                        std::uintptr_t address, AccessKind access, const StackTrace& access_trace,
                        ErrorReport& out) noexcept;

/// Fills allocation geometry and traces of `slot` into `out`. Async-signal-safe.
void attach_allocation(const GuardedPool& pool, const MetadataStore* store, std::size_t slot,
                       ErrorReport& out) noexcept;

/// Exclusive use of the shared report storage. Acquisition spins on an
/// atomic permit and never blocks on a mutex; a thread that already holds
/// the permit (a fault inside report generation) fails to acquire.
class ReportSession {
 public:
  ReportSession() noexcept;
  ~ReportSession();

  ReportSession(const ReportSession&) = delete;
  ReportSession& operator=(const ReportSession&) = delete;

  explicit operator bool() const noexcept { return held_; }

  ErrorReport& report() noexcept;

  /// Renders the report into the preallocated arena and writes it to the
  /// configured sink.
  void emit(const ReporterConfig& config) noexcept;

  /// Releases the permit, then runs the configured callback, if any.
  void finish(const ReporterConfig& config) noexcept;

 private:
  bool held_ = false;
};

/// Number of reports emitted by this process.
std::uint64_t reports_emitted() noexcept;

enum class FaultOutcome { NotOurs, Recovered, Terminate };

/// Anything the process-wide fault handler can attribute faults to.
class FaultTarget {
 public:
  virtual bool owns(std::uintptr_t address) const noexcept = 0;
  virtual FaultOutcome handle_fault(std::uintptr_t address, const void* ucontext) noexcept = 0;

 protected:
  ~FaultTarget() = default;
};

/// Installs SIGSEGV/SIGBUS handlers (SA_SIGINFO) once per process, chaining
/// to whatever was installed before for faults no target owns.
void install_fault_handler();

bool register_fault_target(FaultTarget* target) noexcept;
void unregister_fault_target(FaultTarget* target) noexcept;

/// The handler's dispatch step, callable directly for testing.
FaultOutcome dispatch_fault(std::uintptr_t address, const void* ucontext) noexcept;

}  // namespace guardian
