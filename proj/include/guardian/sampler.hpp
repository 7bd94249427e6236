#pragma once

#include "guardian/rng.hpp"

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <mutex>
#include <optional>
#include <thread>

namespace guardian {

struct CounterSamplerConfig {
  /// Mean number of allocations per sampled allocation.
  std::uint64_t sample_rate = 5000;
  std::optional<std::uint64_t> rng_seed;
};

/// Per-thread skip counter. Owned by exactly one thread.
struct ThreadSamplerState {
  std::int64_t skip = 0;
  XorShift64 rng;
};

/// Counter-based sampling: each thread counts down a skip value drawn
/// uniformly from [1, 2 * sample_rate] and samples when it reaches zero.
class CounterSampler {
 public:
  explicit CounterSampler(const CounterSamplerConfig& config);

  /// Fresh state for a thread. `thread_ordinal` distinguishes threads when
  /// deriving the per-thread seed.
  ThreadSamplerState make_thread_state(std::uint64_t thread_ordinal) const;

  bool want_to_sample(ThreadSamplerState& state) const noexcept {
    if (--state.skip > 0) [[likely]] {
      return false;
    }
    return rearm(state);
  }

  /// Draws the next skip. Kept out of line so the counting path stays small.
  [[gnu::noinline]] bool rearm(ThreadSamplerState& state) const noexcept {
    state.skip = draw_skip(state.rng);
    return true;
  }

  /// A rate of 1 samples every allocation rather than drawing from [1, 2].
  std::int64_t draw_skip(XorShift64& rng) const noexcept {
    if (rate_ == 1) {
      return 1;
    }
    return static_cast<std::int64_t>(rng.uniform(1, 2 * rate_));
  }

  std::uint64_t sample_rate() const noexcept { return rate_; }
  std::uint64_t seed() const noexcept { return seed_; }

 private:
  std::uint64_t rate_;
  std::uint64_t seed_;
};

class Clock {
 public:
  virtual ~Clock() = default;
  virtual std::chrono::nanoseconds now() const noexcept = 0;
};

class SteadyClock final : public Clock {
 public:
  std::chrono::nanoseconds now() const noexcept override {
    return std::chrono::steady_clock::now().time_since_epoch();
  }
};

/// Clock advanced by hand, for deterministic tests.
class ManualClock final : public Clock {
 public:
  std::chrono::nanoseconds now() const noexcept override {
    return std::chrono::nanoseconds(now_.load(std::memory_order_acquire));
  }
  void advance(std::chrono::nanoseconds d) noexcept {
    now_.fetch_add(d.count(), std::memory_order_acq_rel);
  }
  void set(std::chrono::nanoseconds t) noexcept { now_.store(t.count(), std::memory_order_release); }

 private:
  std::atomic<std::int64_t> now_{0};
};

/// Shared one-shot flag. The fast path is a relaxed load and a branch; only
/// an armed gate pays for the atomic exchange.
class TimerGate {
 public:
  void arm() noexcept { armed_.store(true, std::memory_order_release); }
  bool armed() const noexcept { return armed_.load(std::memory_order_relaxed); }

  bool try_consume() noexcept {
    if (!armed_.load(std::memory_order_relaxed)) {
      return false;
    }
    return armed_.exchange(false, std::memory_order_acq_rel);
  }

 private:
  std::atomic<bool> armed_{false};
};

struct TimerSamplerConfig {
  std::chrono::nanoseconds sample_interval = std::chrono::milliseconds(100);
};

/// Time-based sampling: a timer arms the gate once per interval and the next
/// allocation consumes it, independent of allocation pressure.
class TimerSampler {
 public:
  /// `clock` must outlive the sampler.
  TimerSampler(const TimerSamplerConfig& config, const Clock& clock);
  ~TimerSampler();

  TimerSampler(const TimerSampler&) = delete;
  TimerSampler& operator=(const TimerSampler&) = delete;

  bool want_to_sample() noexcept { return gate_.try_consume(); }

  /// Arms the gate if an interval boundary has passed since the last arming.
  /// Returns true if it armed. Drives the sampler when no background thread
  /// is running.
  bool poll() noexcept;

  /// Starts a thread that sleeps for one interval and arms the gate, repeatedly.
  void start_background();
  void stop_background();

  std::uint64_t armings() const noexcept { return armings_.load(std::memory_order_relaxed); }
  TimerGate& gate() noexcept { return gate_; }
  std::chrono::nanoseconds interval() const noexcept { return interval_; }

 private:
  std::chrono::nanoseconds interval_;
  const Clock& clock_;
  TimerGate gate_;
  std::atomic<std::int64_t> next_deadline_;
  std::atomic<std::uint64_t> armings_{0};

  std::mutex thread_mutex_;
  std::condition_variable stop_cv_;
  bool stop_requested_ = false;
  std::thread thread_;
};

struct ProcessSamplingConfig {
  std::uint64_t numerator = 1;
  std::uint64_t denominator = 1;
};

/// Decides once per process whether the tool is enabled at all: true with
/// probability numerator/denominator given uniformly random `entropy`.
bool process_sampling_decision(const ProcessSamplingConfig& config, std::uint64_t entropy) noexcept;

}  // namespace guardian
