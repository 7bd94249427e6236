#pragma once

#include "guardian/coverage.hpp"
#include "guardian/fault_handler.hpp"
#include "guardian/metadata.hpp"
#include "guardian/pool.hpp"
#include "guardian/sampler.hpp"

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <memory>
#include <optional>
#include <vector>

namespace guardian {

enum class SamplingPolicy : std::uint8_t { Counter, Timer };

struct AllocatorConfig {
  PoolConfig pool;
  SamplingPolicy policy = SamplingPolicy::Counter;
  CounterSamplerConfig counter;
  TimerSamplerConfig timer;
  /// Clock for the timer policy. When null a steady clock and a background
  /// arming thread are used; when set, the owner drives it via poll_timer().
  const Clock* clock = nullptr;

  ProcessSamplingConfig process;
  /// Entropy for the process sampling decision; random when unset.
  std::optional<std::uint64_t> process_entropy;

  /// 0 means one record per slot.
  std::size_t metadata_capacity = 0;
  std::size_t max_frames = kMaxFrames;

  bool coverage_policy = false;
  CoverageConfig coverage;

  /// Guarded allocations are aligned to at least this; right-aligned
  /// allocations therefore leave up to min_alignment-1 bytes of slack.
  std::size_t min_alignment = alignof(std::max_align_t);

  ReporterConfig reporter;
  bool install_signal_handler = true;
};

struct AllocatorStats {
  std::uint64_t sampled = 0;     // sampling decisions that fired
  std::uint64_t guarded = 0;     // allocations served from the pool
  std::uint64_t oversized = 0;   // sampled but size 0 or larger than a page
  std::uint64_t unavailable = 0; // sampled but no slot could be acquired
  std::uint64_t coverage_rejected = 0;
  std::uint64_t double_frees = 0;
  std::uint64_t invalid_frees = 0;
};

namespace detail {

struct ThreadCache {
  std::uint64_t owner = 0;
  ThreadSamplerState sampler;
};

inline thread_local constinit ThreadCache tls_cache{};

}  // namespace detail

/// Sampling allocator front end. Sampled allocations of up to one page are
/// placed in a guarded pool; everything else goes to the C allocator.
///
/// Fast paths: malloc() costs a thread-local decrement and branch when not
/// sampling, free() costs one range check for pointers not in the pool.
/// Fully thread-safe. One thread-local skip counter is shared by all
/// instances; using several instances from one thread re-seeds it whenever
/// the instance changes.
class GuardianAllocator final : public FaultTarget {
 public:
  explicit GuardianAllocator(const AllocatorConfig& config = {});
  ~GuardianAllocator();

  GuardianAllocator(const GuardianAllocator&) = delete;
  GuardianAllocator& operator=(const GuardianAllocator&) = delete;

  static constexpr std::size_t kDefaultAlignment = alignof(std::max_align_t);

  void* malloc(std::size_t size, std::size_t alignment = kDefaultAlignment) {
    if (want_to_sample()) [[unlikely]] {
      if (void* p = allocate_guarded(size, alignment)) {
        return p;
      }
    }
    return fallback_allocate(size, alignment);
  }

  void free(void* ptr) noexcept {
    if (is_guarded(ptr)) [[unlikely]] {
      deallocate_guarded(ptr);
      return;
    }
    std::free(ptr);
  }

  void* calloc(std::size_t count, std::size_t size);
  void* realloc(void* ptr, std::size_t size);
  /// Requested size for guarded allocations, malloc_usable_size otherwise.
  std::size_t usable_size(const void* ptr) const noexcept;

  /// Constant time and never dereferences `ptr`.
  bool is_guarded(const void* ptr) const noexcept {
    return reinterpret_cast<std::uintptr_t>(ptr) - pool_base_ < pool_length_;
  }

  /// False when process sampling disabled the tool, the pool could not be
  /// reserved, or a recoverable error turned it off.
  bool enabled() const noexcept { return mode_.load(std::memory_order_relaxed) != Mode::Disabled; }
  bool process_enabled() const noexcept { return pool_ != nullptr; }

  AllocatorStats stats() const noexcept;
  const GuardedPool* pool() const noexcept { return pool_.get(); }
  const MetadataStore* metadata() const noexcept { return store_.get(); }
  const CoverageFilter* coverage() const noexcept { return coverage_.get(); }
  TimerSampler* timer() noexcept { return timer_.get(); }
  const AllocatorConfig& config() const noexcept { return config_; }

  /// Arms the timer gate if due. Only meaningful with a manual clock.
  bool poll_timer() noexcept;

  /// Resident memory the tool may use: slot pages for the maximum number of
  /// live allocations plus the metadata array.
  std::size_t footprint_bytes() const noexcept;

  /// Holds the pool lock, for exercising fault handling under contention.
  GuardedPool::Lock lock_pool_for_testing() const;

  // FaultTarget
  bool owns(std::uintptr_t address) const noexcept override { return address - pool_base_ < pool_length_; }
  FaultOutcome handle_fault(std::uintptr_t address, const void* ucontext) noexcept override;

 private:
  enum class Mode : std::uint8_t { Disabled, Counter, Timer };

  bool want_to_sample() noexcept {
    const Mode mode = mode_.load(std::memory_order_relaxed);
    if (mode == Mode::Disabled) {
      return false;
    }
    if (mode == Mode::Counter) [[likely]] {
      detail::ThreadCache& cache = detail::tls_cache;
      if (cache.owner == id_) [[likely]] {
        return counter_.want_to_sample(cache.sampler);
      }
      return adopt_thread();
    }
    return timer_->want_to_sample();
  }

  static void* fallback_allocate(std::size_t size, std::size_t alignment) noexcept {
    if (alignment <= kDefaultAlignment) [[likely]] {
      return std::malloc(size);
    }
    return aligned_fallback(size, alignment);
  }
  static void* aligned_fallback(std::size_t size, std::size_t alignment) noexcept;

  [[gnu::noinline]] bool adopt_thread() noexcept;
  [[gnu::noinline]] void* allocate_guarded(std::size_t size, std::size_t alignment);
  [[gnu::noinline]] void deallocate_guarded(void* ptr) noexcept;

  void report_free_error(ErrorKind kind, std::uintptr_t address, std::optional<std::size_t> slot,
                         const StackTrace& trace) noexcept;
  void disable() noexcept { mode_.store(Mode::Disabled, std::memory_order_relaxed); }

  AllocatorConfig config_;
  std::uint64_t id_;
  std::atomic<Mode> mode_{Mode::Disabled};
  std::uintptr_t pool_base_ = 0;
  std::size_t pool_length_ = 0;
  CounterSampler counter_;
  std::atomic<std::uint64_t> next_thread_ordinal_{0};

  std::unique_ptr<GuardedPool> pool_;
  std::unique_ptr<MetadataStore> store_;
  std::unique_ptr<CoverageFilter> coverage_;
  std::vector<std::optional<CoverageSource>> slot_sources_;  // guarded by the pool lock
  SteadyClock steady_clock_;
  std::unique_ptr<TimerSampler> timer_;
  std::atomic<bool> recovered_{false};
  bool registered_ = false;

  std::atomic<std::uint64_t> sampled_{0};
  std::atomic<std::uint64_t> guarded_{0};
  std::atomic<std::uint64_t> oversized_{0};
  std::atomic<std::uint64_t> unavailable_{0};
  std::atomic<std::uint64_t> coverage_rejected_{0};
  std::atomic<std::uint64_t> double_frees_{0};
  std::atomic<std::uint64_t> invalid_frees_{0};
};

/// Process-global instance, for programs that route their own allocation
/// through guardian::malloc/free. install_global() may be called once.
GuardianAllocator& install_global(const AllocatorConfig& config);
GuardianAllocator* global_allocator() noexcept;

void* malloc(std::size_t size);
void free(void* ptr) noexcept;

}  // namespace guardian
