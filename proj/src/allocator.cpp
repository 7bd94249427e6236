#include "guardian/allocator.hpp"

#include "guardian/platform.hpp"
#include "guardian/stack_trace.hpp"

#include <malloc.h>

#include <algorithm>
#include <cstring>
#include <random>
#include <stdexcept>
#include <system_error>

namespace guardian {

namespace {

std::atomic<std::uint64_t> g_next_allocator_id{1};

std::uint64_t fresh_entropy() {
  std::random_device rd;
  return (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
}

}  // namespace

GuardianAllocator::GuardianAllocator(const AllocatorConfig& config)
    : config_(config),
      id_(g_next_allocator_id.fetch_add(1, std::memory_order_relaxed)),
      counter_(config.counter) {
  if (config_.max_frames > kMaxFrames) {
    throw std::invalid_argument("max_frames exceeds the trace capacity");
  }
  if (!is_power_of_two(config_.min_alignment)) {
    throw std::invalid_argument("minimum alignment must be a power of two");
  }
  const std::uint64_t entropy = config_.process_entropy.value_or(fresh_entropy());
  if (!process_sampling_decision(config_.process, entropy)) {
    return;
  }

  try {
    pool_ = std::make_unique<GuardedPool>(config_.pool);
  } catch (const std::system_error&) {
    // Pool unavailable: behave as if sampling were off.
    return;
  }
  const std::size_t capacity =
      config_.metadata_capacity == 0 ? pool_->slot_count() : config_.metadata_capacity;
  store_ = std::make_unique<MetadataStore>(capacity);
  if (config_.coverage_policy) {
    coverage_ = std::make_unique<CoverageFilter>(config_.coverage);
    slot_sources_.resize(pool_->slot_count());
  }

  refresh_process_modules();
  prime_thread_stack_bounds();
  if (config_.install_signal_handler) {
    install_fault_handler();
  }
  registered_ = register_fault_target(this);

  if (config_.policy == SamplingPolicy::Timer) {
    const Clock& clock = config_.clock != nullptr ? *config_.clock : steady_clock_;
    timer_ = std::make_unique<TimerSampler>(config_.timer, clock);
    if (config_.clock == nullptr) {
      timer_->start_background();
    }
    mode_.store(Mode::Timer, std::memory_order_relaxed);
  } else {
    mode_.store(Mode::Counter, std::memory_order_relaxed);
  }
  pool_base_ = pool_->base();
  pool_length_ = pool_->region_length();
}

GuardianAllocator::~GuardianAllocator() {
  disable();
  if (timer_) {
    timer_->stop_background();
  }
  if (registered_) {
    unregister_fault_target(this);
  }
}

bool GuardianAllocator::adopt_thread() noexcept {
  detail::ThreadCache& cache = detail::tls_cache;
  cache.owner = id_;
  cache.sampler = counter_.make_thread_state(
      next_thread_ordinal_.fetch_add(1, std::memory_order_relaxed));
  return counter_.want_to_sample(cache.sampler);
}

void* GuardianAllocator::aligned_fallback(std::size_t size, std::size_t alignment) noexcept {
  void* p = nullptr;
  if (!is_power_of_two(alignment)) {
    return nullptr;
  }
  if (posix_memalign(&p, std::max(alignment, sizeof(void*)), size) != 0) {
    return nullptr;
  }
  return p;
}

void* GuardianAllocator::allocate_guarded(std::size_t size, std::size_t alignment) {
  sampled_.fetch_add(1, std::memory_order_relaxed);
  const std::size_t page = pool_->page_size();
  if (size == 0 || size > page) {
    oversized_.fetch_add(1, std::memory_order_relaxed);
    return nullptr;
  }
  const std::size_t effective = std::max(alignment, config_.min_alignment);
  if (!is_power_of_two(effective) || effective > page) {
    unavailable_.fetch_add(1, std::memory_order_relaxed);
    return nullptr;
  }

  const StackTrace trace = capture_trace(config_.max_frames, 1);
  const std::optional<CoverageSource> source =
      coverage_ ? std::optional(source_of(trace.frames())) : std::nullopt;

  auto lock = pool_->lock();
  if (!enabled()) {
    return nullptr;
  }
  if (coverage_) {
    const double utilization = static_cast<double>(pool_->live_count()) /
                               static_cast<double>(pool_->max_simultaneous_allocations());
    if (!coverage_->admit(utilization, *source)) {
      coverage_rejected_.fetch_add(1, std::memory_order_relaxed);
      return nullptr;
    }
  }
  const auto acquired = pool_->acquire_locked(lock, size, effective);
  if (!acquired) {
    unavailable_.fetch_add(1, std::memory_order_relaxed);
    return nullptr;
  }
  const MetadataHandle handle = store_->store_alloc(acquired->slot, acquired->generation, size,
                                                    current_thread_id(), trace.frames());
  pool_->set_metadata_locked(lock, acquired->slot, handle);
  if (coverage_) {
    coverage_->insert(*source);
    slot_sources_[acquired->slot] = source;
  }
  guarded_.fetch_add(1, std::memory_order_relaxed);
  return acquired->user_address;
}

void GuardianAllocator::deallocate_guarded(void* ptr) noexcept {
  const auto address = reinterpret_cast<std::uintptr_t>(ptr);
  const StackTrace trace = capture_trace(config_.max_frames, 1);

  ErrorKind error;
  std::optional<std::size_t> slot = pool_->slot_of(address);
  {
    auto lock = pool_->lock();
    if (slot) {
      const SlotSnapshot snap = pool_->snapshot(*slot);
      const bool at_start = address == pool_->user_address(snap, *slot);
      if (snap.state == SlotState::Allocated && at_start) {
        store_->store_dealloc(snap.metadata, current_thread_id(), trace.frames());
        pool_->release_locked(lock, *slot);
        if (coverage_) {
          if (const auto source = std::exchange(slot_sources_[*slot], std::nullopt)) {
            coverage_->remove(*source);
          }
          if (coverage_->needs_rebuild()) {
            std::vector<CoverageSource> live;
            for (const auto& s : slot_sources_) {
              if (s) {
                live.push_back(*s);
              }
            }
            coverage_->rebuild(live);
          }
        }
        return;
      }
      if (snap.state == SlotState::Quarantined && at_start) {
        error = ErrorKind::DoubleFree;
      } else {
        error = ErrorKind::InvalidFree;
      }
      if (snap.state == SlotState::Free) {
        slot.reset();
      }
    } else {
      error = ErrorKind::InvalidFree;
    }
  }
  report_free_error(error, address, slot, trace);
}

void GuardianAllocator::report_free_error(ErrorKind kind, std::uintptr_t address,
                                          std::optional<std::size_t> slot,
                                          const StackTrace& trace) noexcept {
  (kind == ErrorKind::DoubleFree ? double_frees_ : invalid_frees_)
      .fetch_add(1, std::memory_order_relaxed);
  if (recovered_.load(std::memory_order_acquire)) {
    return;
  }
  {
    ReportSession session;
    if (!session) {
      return;
    }
    if (recovered_.load(std::memory_order_acquire)) {
      return;
    }
    ErrorReport& r = session.report();
    r = ErrorReport{};
    r.kind = kind;
    r.access_address = address;
    r.access = AccessKind::Unknown;
    r.faulting_thread = current_thread_id();
    r.access_trace = trace;
    r.modules = &process_modules();
    if (slot) {
      attach_allocation(*pool_, store_.get(), *slot, r);
    }
    session.emit(config_.reporter);
    if (config_.reporter.recoverable) {
      recovered_.store(true, std::memory_order_release);
      disable();
    }
    session.finish(config_.reporter);
  }
  if (!config_.reporter.recoverable) {
    std::abort();
  }
}

FaultOutcome GuardianAllocator::handle_fault(std::uintptr_t address,
                                             const void* ucontext) noexcept {
  if (!owns(address)) {
    return FaultOutcome::NotOurs;
  }
  const bool recoverable = config_.reporter.recoverable;
  if (recovered_.load(std::memory_order_acquire)) {
    // Already reported once; later faults are resumed silently.
    return recoverable && pool_->unprotect_for_recovery(address) ? FaultOutcome::Recovered
                                                                  : FaultOutcome::Terminate;
  }

  ReportSession session;
  if (!session) {
    return FaultOutcome::Terminate;
  }
  if (recovered_.load(std::memory_order_acquire)) {
    return recoverable && pool_->unprotect_for_recovery(address) ? FaultOutcome::Recovered
                                                                  : FaultOutcome::Terminate;
  }
  ErrorReport& r = session.report();
  const StackTrace access_trace = capture_trace_from_context(ucontext, config_.max_frames);
  build_fault_report(*pool_, store_.get(), address, determine_access_kind(ucontext), access_trace,
                     r);
  session.emit(config_.reporter);

  FaultOutcome outcome = FaultOutcome::Terminate;
  if (recoverable && pool_->unprotect_for_recovery(address)) {
    recovered_.store(true, std::memory_order_release);
    disable();
    outcome = FaultOutcome::Recovered;
  }
  session.finish(config_.reporter);
  return outcome;
}

void* GuardianAllocator::calloc(std::size_t count, std::size_t size) {
  std::size_t total = 0;
  if (__builtin_mul_overflow(count, size, &total)) {
    return nullptr;
  }
  void* p = malloc(total);
  // Guarded slots are zero-filled on acquisition.
  if (p != nullptr && !is_guarded(p)) {
    std::memset(p, 0, total);
  }
  return p;
}

void* GuardianAllocator::realloc(void* ptr, std::size_t size) {
  if (ptr == nullptr) {
    return malloc(size);
  }
  if (size == 0) {
    free(ptr);
    return nullptr;
  }
  if (!is_guarded(ptr)) {
    return std::realloc(ptr, size);
  }
  void* fresh = malloc(size);
  if (fresh == nullptr) {
    return nullptr;
  }
  std::memcpy(fresh, ptr, std::min(size, usable_size(ptr)));
  free(ptr);
  return fresh;
}

std::size_t GuardianAllocator::usable_size(const void* ptr) const noexcept {
  if (ptr == nullptr) {
    return 0;
  }
  if (is_guarded(ptr)) {
    const auto slot = pool_->slot_of(reinterpret_cast<std::uintptr_t>(ptr));
    return slot ? pool_->snapshot(*slot).user_size : 0;
  }
  return malloc_usable_size(const_cast<void*>(ptr));
}

AllocatorStats GuardianAllocator::stats() const noexcept {
  AllocatorStats s;
  s.sampled = sampled_.load(std::memory_order_relaxed);
  s.guarded = guarded_.load(std::memory_order_relaxed);
  s.oversized = oversized_.load(std::memory_order_relaxed);
  s.unavailable = unavailable_.load(std::memory_order_relaxed);
  s.coverage_rejected = coverage_rejected_.load(std::memory_order_relaxed);
  s.double_frees = double_frees_.load(std::memory_order_relaxed);
  s.invalid_frees = invalid_frees_.load(std::memory_order_relaxed);
  return s;
}

bool GuardianAllocator::poll_timer() noexcept { return timer_ && timer_->poll(); }

std::size_t GuardianAllocator::footprint_bytes() const noexcept {
  if (!pool_) {
    return 0;
  }
  return pool_->max_simultaneous_allocations() * pool_->page_size() + store_->reserved_bytes();
}

GuardedPool::Lock GuardianAllocator::lock_pool_for_testing() const {
  if (!pool_) {
    return {};
  }
  return pool_->lock();
}

namespace {

std::atomic<GuardianAllocator*> g_global{nullptr};

}  // namespace

GuardianAllocator& install_global(const AllocatorConfig& config) {
  static GuardianAllocator* instance = nullptr;
  static std::once_flag once;
  std::call_once(once, [&] {
    instance = new GuardianAllocator(config);  // lives for the process
    g_global.store(instance, std::memory_order_release);
  });
  return *instance;
}

GuardianAllocator* global_allocator() noexcept { return g_global.load(std::memory_order_acquire); }

void* malloc(std::size_t size) {
  GuardianAllocator* a = global_allocator();
  return a != nullptr ? a->malloc(size) : std::malloc(size);
}

void free(void* ptr) noexcept {
  GuardianAllocator* a = global_allocator();
  if (a != nullptr) {
    a->free(ptr);
  } else {
    std::free(ptr);
  }
}

}  // namespace guardian
