#include "guardian/sampler.hpp"

#include <random>
#include <stdexcept>

namespace guardian {

CounterSampler::CounterSampler(const CounterSamplerConfig& config)
    : rate_(config.sample_rate), seed_(config.rng_seed.value_or(std::random_device{}())) {
  if (rate_ == 0) {
    throw std::invalid_argument("sample rate must be at least 1");
  }
}

ThreadSamplerState CounterSampler::make_thread_state(std::uint64_t thread_ordinal) const {
  ThreadSamplerState state{0, XorShift64(seed_ ^ splitmix64(thread_ordinal + 1))};
  state.skip = draw_skip(state.rng);
  return state;
}

TimerSampler::TimerSampler(const TimerSamplerConfig& config, const Clock& clock)
    : interval_(config.sample_interval),
      clock_(clock),
      next_deadline_((clock.now() + config.sample_interval).count()) {
  if (interval_.count() <= 0) {
    throw std::invalid_argument("sample interval must be positive");
  }
}

TimerSampler::~TimerSampler() { stop_background(); }

bool TimerSampler::poll() noexcept {
  const std::int64_t now = clock_.now().count();
  std::int64_t deadline = next_deadline_.load(std::memory_order_relaxed);
  if (now < deadline) {
    return false;
  }
  // Missed boundaries collapse into one arming.
  std::int64_t next = deadline + interval_.count();
  if (next <= now) {
    next = now + interval_.count();
  }
  if (!next_deadline_.compare_exchange_strong(deadline, next, std::memory_order_acq_rel)) {
    return false;
  }
  gate_.arm();
  armings_.fetch_add(1, std::memory_order_relaxed);
  return true;
}

void TimerSampler::start_background() {
  std::lock_guard lock(thread_mutex_);
  if (thread_.joinable()) {
    return;
  }
  stop_requested_ = false;
  thread_ = std::thread([this] {
    std::unique_lock lock(thread_mutex_);
    while (!stop_requested_) {
      stop_cv_.wait_for(lock, interval_, [this] { return stop_requested_; });
      if (!stop_requested_) {
        poll();
      }
    }
  });
}

void TimerSampler::stop_background() {
  std::thread worker;
  {
    std::lock_guard lock(thread_mutex_);
    stop_requested_ = true;
    worker = std::move(thread_);
  }
  stop_cv_.notify_all();
  if (worker.joinable()) {
    worker.join();
  }
}

bool process_sampling_decision(const ProcessSamplingConfig& config, std::uint64_t entropy) noexcept {
  if (config.numerator == 0 || config.denominator == 0) {
    return false;
  }
  if (config.numerator >= config.denominator) {
    return true;
  }
  XorShift64 rng(entropy);
  return rng.uniform(0, config.denominator - 1) < config.numerator;
}

}  // namespace guardian
