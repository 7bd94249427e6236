#include "harness.hpp"

#include "guardian/fault_handler.hpp"
#include "guardian/report_parser.hpp"

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <thread>

namespace guardian::harness {

AllocatorConfig to_allocator_config(const HarnessConfig& config, int sink_fd) {
  AllocatorConfig ac;
  ac.pool.slot_count = config.slots;
  ac.pool.max_simultaneous_allocations = config.max_live;
  ac.pool.quarantine_min_slots = config.quarantine_min;
  ac.pool.seed = config.seed;
  ac.policy = config.policy;
  ac.counter.sample_rate = config.sample_rate;
  ac.counter.rng_seed = config.seed;
  ac.timer.sample_interval = std::chrono::milliseconds(config.sample_interval_ms);
  ac.process = config.process;
  ac.process_entropy = splitmix64(config.seed);
  ac.reporter.recoverable = config.recoverable;
  ac.reporter.sink_fd = sink_fd;
  return ac;
}

std::optional<ProcessSamplingConfig> parse_probability(const std::string& text) {
  const auto slash = text.find('/');
  if (slash != std::string::npos) {
    ProcessSamplingConfig p;
    const char* begin = text.data();
    const char* mid = begin + slash;
    const char* end = begin + text.size();
    if (std::from_chars(begin, mid, p.numerator).ptr != mid ||
        std::from_chars(mid + 1, end, p.denominator).ptr != end || p.denominator == 0 ||
        p.numerator > p.denominator) {
      return std::nullopt;
    }
    return p;
  }
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (text.empty() || end != text.c_str() + text.size() || !(v >= 0.0 && v <= 1.0)) {
    return std::nullopt;
  }
  constexpr std::uint64_t kDenominator = 1 << 20;
  return ProcessSamplingConfig{static_cast<std::uint64_t>(std::llround(v * kDenominator)),
                               kDenominator};
}

std::optional<InjectKind> parse_inject_kind(const std::string& text) {
  if (text == "uaf") return InjectKind::UseAfterFree;
  if (text == "overflow") return InjectKind::Overflow;
  if (text == "underflow") return InjectKind::Underflow;
  if (text == "double-free") return InjectKind::DoubleFree;
  if (text == "invalid-free") return InjectKind::InvalidFree;
  return std::nullopt;
}

namespace {

std::string_view inject_kind_name(InjectKind kind) {
  switch (kind) {
    case InjectKind::UseAfterFree:
      return "uaf";
    case InjectKind::Overflow:
      return "overflow";
    case InjectKind::Underflow:
      return "underflow";
    case InjectKind::DoubleFree:
      return "double-free";
    case InjectKind::InvalidFree:
      return "invalid-free";
  }
  return "?";
}

[[gnu::noinline]] unsigned char bad_access(volatile unsigned char* p, AccessKind access) {
  if (access == AccessKind::Write) {
    *p = 0xab;
    return 0;
  }
  return *p;
}

SidePolicy default_side(InjectKind kind) {
  return kind == InjectKind::Overflow ? SidePolicy::Right : SidePolicy::Left;
}

AccessKind default_access(InjectKind kind) {
  return kind == InjectKind::UseAfterFree ? AccessKind::Write : AccessKind::Read;
}

struct Trigger {
  std::size_t slot = 0;
  bool guarded = false;
  bool recovered_cleanly = false;
};

// Runs the bug. Returns normally only if nothing terminated the process.
Trigger trigger_bug(const HarnessConfig& config, const InjectOptions& options, int sink_fd,
                    int slot_fd) {
  AllocatorConfig ac = to_allocator_config(config, sink_fd);
  ac.counter.sample_rate = 1;
  ac.process = {1, 1};
  ac.pool.side_policy = options.side.value_or(default_side(options.kind));
  ac.min_alignment = options.alignment;
  GuardianAllocator allocator(ac);

  Trigger t;
  // A second guarded allocation, freed up front, lets recoverable mode check
  // that later faults resume silently.
  void* witness = config.recoverable ? allocator.malloc(16, options.alignment) : nullptr;
  auto* p = static_cast<unsigned char*>(allocator.malloc(options.size, options.alignment));
  t.guarded = allocator.is_guarded(p);
  if (!t.guarded) {
    allocator.free(p);
    allocator.free(witness);
    return t;
  }
  t.slot = *allocator.pool()->slot_of(reinterpret_cast<std::uintptr_t>(p));
  if (slot_fd >= 0) {
    char line[32];
    const int n = std::snprintf(line, sizeof line, "slot=%zu\n", t.slot);
    [[maybe_unused]] ssize_t w = ::write(slot_fd, line, static_cast<std::size_t>(n));
  }
  allocator.free(witness);

  const std::uint64_t reports_before = reports_emitted();
  const AccessKind access = options.access.value_or(default_access(options.kind));
  switch (options.kind) {
    case InjectKind::UseAfterFree:
      allocator.free(p);
      bad_access(p + options.bytes.value_or(8), access);
      break;
    case InjectKind::Overflow:
      bad_access(p + options.size + options.bytes.value_or(0), access);
      break;
    case InjectKind::Underflow:
      bad_access(p - options.bytes.value_or(2), access);
      break;
    case InjectKind::DoubleFree:
      allocator.free(p);
      allocator.free(p);
      break;
    case InjectKind::InvalidFree:
      allocator.free(p + options.bytes.value_or(1));
      break;
  }

  if (config.recoverable) {
    const bool one_report = reports_emitted() == reports_before + 1;
    bool zeros = true;
    if (witness != nullptr && allocator.is_guarded(witness)) {
      zeros = bad_access(static_cast<unsigned char*>(witness), AccessKind::Read) == 0;
    }
    if (options.kind == InjectKind::UseAfterFree) {
      zeros = zeros && bad_access(p, AccessKind::Read) == 0;
    }
    t.recovered_cleanly = one_report && zeros && reports_emitted() == reports_before + 1 &&
                          !allocator.enabled();
  }
  if (options.kind != InjectKind::UseAfterFree && options.kind != InjectKind::DoubleFree) {
    allocator.free(p);
  }
  return t;
}

std::string drain(int fd) {
  std::string out;
  std::array<char, 4096> buf;
  for (;;) {
    const ssize_t n = ::read(fd, buf.data(), buf.size());
    if (n > 0) {
      out.append(buf.data(), static_cast<std::size_t>(n));
    } else if (n < 0 && errno == EINTR) {
      continue;
    } else {
      return out;
    }
  }
}

void finish_result(InjectResult& r) {
  const auto header = r.report_text.find(kReportHeader);
  r.detected = header != std::string::npos;
  if (r.detected) {
    r.report_text.erase(0, header);
    try {
      r.report = parse_report(r.report_text);
    } catch (const ReportParseError&) {
    }
  } else {
    r.report_text.clear();
  }
}

}  // namespace

InjectResult run_injection(const HarnessConfig& config, const InjectOptions& options) {
  InjectResult result;
  int fds[2];
  if (::pipe(fds) != 0) {
    throw std::system_error(errno, std::generic_category(), "pipe");
  }

  if (config.recoverable) {
    ::fcntl(fds[0], F_SETFL, O_NONBLOCK);
    const Trigger t = trigger_bug(config, options, fds[1], -1);
    ::close(fds[1]);
    result.report_text = drain(fds[0]);
    ::close(fds[0]);
    result.slot = t.slot;
    result.recovered_cleanly = t.recovered_cleanly;
    finish_result(result);
    return result;
  }

  std::cout.flush();
  std::cerr.flush();
  const pid_t pid = ::fork();
  if (pid < 0) {
    throw std::system_error(errno, std::generic_category(), "fork");
  }
  if (pid == 0) {
    ::close(fds[0]);
    trigger_bug(config, options, fds[1], fds[1]);
    ::_exit(0);
  }
  ::close(fds[1]);
  std::string output = drain(fds[0]);
  ::close(fds[0]);
  int status = 0;
  while (::waitpid(pid, &status, 0) < 0 && errno == EINTR) {
  }
  if (WIFSIGNALED(status)) {
    result.terminating_signal = WTERMSIG(status);
  }
  if (output.rfind("slot=", 0) == 0) {
    const auto eol = output.find('\n');
    std::from_chars(output.data() + 5, output.data() + eol, result.slot);
    output.erase(0, eol + 1);
  }
  result.report_text = std::move(output);
  finish_result(result);
  return result;
}

void print_injection(std::ostream& out, OutputFormat format, const InjectOptions& options,
                     const InjectResult& r) {
  if (format == OutputFormat::Records) {
    out << "inject\tkind=" << inject_kind_name(options.kind) << "\tdetected=" << r.detected;
    if (r.report) {
      out << "\terror=" << to_string(r.report->kind) << "\taccess=" << to_string(r.report->access)
          << "\toffset=" << r.report->offset() << "\tsize=" << r.report->allocation_size
          << "\tdealloc_trace=" << r.report->has_dealloc;
    }
    out << "\tslot=" << r.slot << "\tsignal=" << r.terminating_signal
        << "\trecovered=" << r.recovered_cleanly << '\n';
    return;
  }
  out << r.report_text;
  if (r.detected) {
    out << "detected: " << (r.report ? to_string(r.report->kind) : "unparsed report");
    if (r.terminating_signal != 0) {
      out << " (child terminated by signal " << r.terminating_signal << ")";
    }
    out << '\n';
  } else {
    out << "undetected: " << inject_kind_name(options.kind) << " produced no report\n";
  }
}

SampleStats run_sample_stats(const HarnessConfig& config, std::uint64_t duration_ms) {
  SampleStats s;
  s.allocations = config.iterations;
  ManualClock clock;
  AllocatorConfig ac = to_allocator_config(config, -1);
  if (config.policy == SamplingPolicy::Timer) {
    ac.clock = &clock;
  }
  GuardianAllocator allocator(ac);

  const std::chrono::nanoseconds step =
      config.iterations == 0 ? std::chrono::nanoseconds(0)
                             : std::chrono::nanoseconds(std::chrono::milliseconds(duration_ms)) /
                                   static_cast<std::int64_t>(config.iterations);
  std::vector<std::uint64_t> gaps;
  std::uint64_t last = 0;
  std::uint64_t sampled = 0;
  for (std::uint64_t i = 1; i <= config.iterations; ++i) {
    if (config.policy == SamplingPolicy::Timer) {
      clock.advance(step);
      allocator.poll_timer();
    }
    void* p = allocator.malloc(16);
    const std::uint64_t now_sampled = allocator.stats().sampled;
    if (now_sampled != sampled) {
      sampled = now_sampled;
      gaps.push_back(i - last);
      last = i;
    }
    allocator.free(p);
  }

  s.samples = sampled;
  s.guarded = allocator.stats().guarded;
  s.rate = config.iterations ? static_cast<double>(sampled) / static_cast<double>(config.iterations) : 0;
  if (config.policy == SamplingPolicy::Timer) {
    s.simulated_ms = duration_ms;
    s.expected_samples = duration_ms / config.sample_interval_ms;
  }
  if (!gaps.empty()) {
    s.mean_gap = std::accumulate(gaps.begin(), gaps.end(), 0.0) / static_cast<double>(gaps.size());
    std::vector<std::uint64_t> sorted = gaps;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    s.median_gap = n % 2 ? static_cast<double>(sorted[n / 2])
                         : (static_cast<double>(sorted[n / 2 - 1]) + static_cast<double>(sorted[n / 2])) / 2.0;
    s.min_gap = sorted.front();
    s.max_gap = sorted.back();
    if (config.policy == SamplingPolicy::Counter) {
      s.histogram.assign(10, 0);
      const double width = 2.0 * static_cast<double>(config.sample_rate) / 10.0;
      for (std::uint64_t g : gaps) {
        auto bin = static_cast<std::size_t>(static_cast<double>(g - 1) / width);
        s.histogram[std::min<std::size_t>(bin, 9)]++;
      }
    }
  }
  return s;
}

void print_sample_stats(std::ostream& out, OutputFormat format, const HarnessConfig& config,
                        const SampleStats& s) {
  const char* policy = config.policy == SamplingPolicy::Timer ? "timer" : "counter";
  if (format == OutputFormat::Records) {
    out << "sample-stats\tpolicy=" << policy << "\tallocations=" << s.allocations
        << "\tsamples=" << s.samples << "\tguarded=" << s.guarded << "\trate=" << s.rate
        << "\tmean_gap=" << s.mean_gap << "\tmedian_gap=" << s.median_gap
        << "\tmin_gap=" << s.min_gap << "\tmax_gap=" << s.max_gap;
    if (config.policy == SamplingPolicy::Timer) {
      out << "\tsimulated_ms=" << s.simulated_ms << "\texpected_samples=" << s.expected_samples;
    }
    out << '\n';
    for (std::size_t i = 0; i < s.histogram.size(); ++i) {
      out << "gap-bin\tindex=" << i << "\tcount=" << s.histogram[i] << '\n';
    }
    return;
  }
  out << "policy:          " << policy << '\n'
      << "allocations:     " << s.allocations << '\n'
      << "samples:         " << s.samples << '\n'
      << "guarded:         " << s.guarded << '\n'
      << "empirical rate:  " << s.rate << '\n';
  if (config.policy == SamplingPolicy::Counter) {
    out << "expected rate:   " << 1.0 / (static_cast<double>(config.sample_rate) + 0.5) << '\n';
  } else {
    out << "simulated time:  " << s.simulated_ms << " ms (expected ~" << s.expected_samples
        << " samples)\n";
  }
  out << "gap mean/median: " << s.mean_gap << " / " << s.median_gap << '\n'
      << "gap min/max:     " << s.min_gap << " / " << s.max_gap << '\n';
  if (!s.histogram.empty()) {
    out << "gap histogram (10 bins over [1, " << 2 * config.sample_rate << "]):\n";
    const std::uint64_t peak = *std::max_element(s.histogram.begin(), s.histogram.end());
    for (std::size_t i = 0; i < s.histogram.size(); ++i) {
      const std::size_t bar = peak ? static_cast<std::size_t>(40 * s.histogram[i] / peak) : 0;
      out << "  " << std::setw(2) << i << ' ' << std::setw(8) << s.histogram[i] << ' '
          << std::string(bar, '#') << '\n';
    }
  }
}

namespace {

template <class Alloc, class Release>
double time_loop(std::uint64_t iterations, Alloc&& alloc, Release&& release) {
  const auto start = std::chrono::steady_clock::now();
  for (std::uint64_t i = 0; i < iterations; ++i) {
    void* p = alloc(16);
    asm volatile("" : : "r"(p) : "memory");
    static_cast<volatile char*>(p)[0] = static_cast<char>(i);
    release(p);
  }
  const auto elapsed = std::chrono::steady_clock::now() - start;
  return static_cast<double>(std::chrono::duration_cast<std::chrono::nanoseconds>(elapsed).count()) /
         static_cast<double>(iterations);
}

}  // namespace

BenchResult run_bench(const HarnessConfig& config, int repeats) {
  AllocatorConfig enabled_config = to_allocator_config(config, -1);
  enabled_config.process = {1, 1};
  AllocatorConfig disabled_config = enabled_config;
  disabled_config.process = {0, 1};

  GuardianAllocator enabled(enabled_config);
  GuardianAllocator disabled(disabled_config);

  // Background noise on a shared machine easily exceeds the effect being
  // measured, so the variants run in short interleaved chunks and each chunk
  // is compared with the baseline chunk next to it. The median ratio is
  // reported.
  constexpr std::uint64_t kChunk = 100'000;
  const std::uint64_t n = std::max<std::uint64_t>(config.iterations, 1);
  const std::uint64_t chunk = std::min(n, kChunk);
  const std::uint64_t rounds = std::max<std::uint64_t>(n / chunk, 1);

  auto baseline = [&] {
    return time_loop(chunk, [](std::size_t s) { return std::malloc(s); },
                     [](void* p) { std::free(p); });
  };
  auto with_enabled = [&] {
    return time_loop(chunk, [&](std::size_t s) { return enabled.malloc(s); },
                     [&](void* p) { enabled.free(p); });
  };
  auto with_disabled = [&] {
    return time_loop(chunk, [&](std::size_t s) { return disabled.malloc(s); },
                     [&](void* p) { disabled.free(p); });
  };

  baseline();
  with_enabled();
  with_disabled();

  std::vector<double> base_ns, enabled_ns, disabled_ns, enabled_ratio, disabled_ratio;
  for (int rep = 0; rep < std::max(repeats, 1); ++rep) {
    for (std::uint64_t round = 0; round < rounds; ++round) {
      double b = 0, e = 0, d = 0;
      switch (round % 3) {
        case 0:
          b = baseline();
          e = with_enabled();
          d = with_disabled();
          break;
        case 1:
          e = with_enabled();
          d = with_disabled();
          b = baseline();
          break;
        default:
          d = with_disabled();
          b = baseline();
          e = with_enabled();
          break;
      }
      base_ns.push_back(b);
      enabled_ns.push_back(e);
      disabled_ns.push_back(d);
      enabled_ratio.push_back(e / b);
      disabled_ratio.push_back(d / b);
    }
  }

  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : (v[m - 1] + v[m]) / 2.0;
  };
  BenchResult r;
  r.baseline_ns = median(base_ns);
  r.enabled_ns = median(enabled_ns);
  r.disabled_ns = median(disabled_ns);
  r.enabled_overhead_pct = (median(enabled_ratio) - 1.0) * 100.0;
  r.disabled_overhead_pct = (median(disabled_ratio) - 1.0) * 100.0;
  r.guarded = enabled.stats().guarded;
  return r;
}

void print_bench(std::ostream& out, OutputFormat format, const HarnessConfig& config,
                 const BenchResult& r) {
  if (format == OutputFormat::Records) {
    out << "bench\tvariant=baseline\tns_per_op=" << r.baseline_ns << "\toverhead_pct=0\n"
        << "bench\tvariant=enabled\tns_per_op=" << r.enabled_ns
        << "\toverhead_pct=" << r.enabled_overhead_pct << "\tsample_rate=" << config.sample_rate
        << "\tslots=" << config.slots << "\tguarded=" << r.guarded << '\n'
        << "bench\tvariant=disabled\tns_per_op=" << r.disabled_ns
        << "\toverhead_pct=" << r.disabled_overhead_pct << '\n';
    return;
  }
  out << std::fixed << std::setprecision(2)
      << "malloc/free of 16 bytes, " << config.iterations << " iterations per run, median of paired chunks\n"
      << "  baseline (no tool):         " << r.baseline_ns << " ns/op\n"
      << "  enabled (rate " << config.sample_rate << ", " << config.slots
      << " slots): " << r.enabled_ns << " ns/op  (" << std::showpos << r.enabled_overhead_pct
      << std::noshowpos << "%, " << r.guarded << " guarded)\n"
      << "  disabled by process sampling: " << r.disabled_ns << " ns/op  (" << std::showpos
      << r.disabled_overhead_pct << std::noshowpos << "%)\n";
  out.unsetf(std::ios::fixed);
}

StressResult run_stress(const HarnessConfig& config, int threads) {
  GuardianAllocator allocator(to_allocator_config(config, 2));
  std::atomic<std::uint64_t> operations{0};
  std::atomic<std::size_t> max_live{0};
  std::atomic<bool> intact{true};
  const std::uint64_t per_thread = config.iterations / static_cast<std::uint64_t>(std::max(threads, 1));

  auto worker = [&](int index) {
    std::mt19937_64 rng(config.seed + static_cast<std::uint64_t>(index));
    struct Live {
      unsigned char* p;
      std::size_t size;
      unsigned char fill;
    };
    std::vector<Live> live;
    for (std::uint64_t i = 0; i < per_thread; ++i) {
      if (live.size() < 32 && (live.empty() || rng() % 2 == 0)) {
        const std::size_t size = 1 + rng() % 6000;
        auto* p = static_cast<unsigned char*>(allocator.malloc(size));
        const auto fill = static_cast<unsigned char>(rng());
        std::memset(p, fill, size);
        live.push_back({p, size, fill});
      } else {
        const std::size_t k = rng() % live.size();
        const Live l = live[k];
        live[k] = live.back();
        live.pop_back();
        for (std::size_t b = 0; b < l.size; ++b) {
          if (l.p[b] != l.fill) {
            intact = false;
            break;
          }
        }
        allocator.free(l.p);
      }
      const std::size_t now_live = allocator.pool() ? allocator.pool()->live_count() : 0;
      std::size_t prev = max_live.load(std::memory_order_relaxed);
      while (now_live > prev && !max_live.compare_exchange_weak(prev, now_live)) {
      }
      operations.fetch_add(1, std::memory_order_relaxed);
    }
    for (const Live& l : live) {
      allocator.free(l.p);
    }
  };

  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back(worker, t);
  }
  for (auto& t : pool) {
    t.join();
  }
  return StressResult{operations.load(), allocator.stats().guarded, max_live.load(), intact.load()};
}

void print_stress(std::ostream& out, OutputFormat format, const StressResult& r) {
  if (format == OutputFormat::Records) {
    out << "stress\toperations=" << r.operations << "\tguarded=" << r.guarded
        << "\tmax_live=" << r.max_live_observed << "\tdata_intact=" << r.data_intact << '\n';
    return;
  }
  out << "operations:       " << r.operations << '\n'
      << "guarded:          " << r.guarded << '\n'
      << "max live slots:   " << r.max_live_observed << '\n'
      << "data intact:      " << (r.data_intact ? "yes" : "NO") << '\n';
}

void print_parsed_report(std::ostream& out, OutputFormat format, const ErrorReport& r) {
  auto hex = [](std::uint64_t v) {
    std::ostringstream s;
    s << "0x" << std::hex << v;
    return s.str();
  };
  if (format == OutputFormat::Records) {
    out << "report\tkind=" << to_string(r.kind) << "\taccess=" << to_string(r.access)
        << "\taccess_address=" << hex(r.access_address) << "\tthread=" << r.faulting_thread
        << "\taccess_frames=" << r.access_trace.size();
    if (r.has_allocation) {
      out << "\tallocation_address=" << hex(r.allocation_address)
          << "\tsize=" << r.allocation_size << "\toffset=" << r.offset()
          << "\tdealloc_frames=" << (r.has_dealloc ? static_cast<long>(r.dealloc_trace.size()) : -1)
          << "\talloc_frames=" << r.alloc_trace.size();
    }
    out << "\tmetadata_lost=" << r.metadata_lost << '\n';
    return;
  }
  out << "kind:            " << to_string(r.kind) << '\n'
      << "access:          " << to_string(r.access) << " at " << hex(r.access_address)
      << " by thread " << r.faulting_thread << " (" << r.access_trace.size() << " frames)\n";
  if (!r.has_allocation) {
    out << "allocation:      none\n";
    return;
  }
  out << "allocation:      " << r.allocation_size << "B at " << hex(r.allocation_address) << '\n'
      << "offset:          " << r.offset() << '\n';
  if (r.metadata_lost) {
    out << "metadata:        lost\n";
    return;
  }
  if (r.has_dealloc) {
    out << "deallocated by:  thread " << r.dealloc_thread << " (" << r.dealloc_trace.size()
        << " frames)\n";
  }
  out << "allocated by:    thread " << r.alloc_thread << " (" << r.alloc_trace.size()
      << " frames)\n";
}

}  // namespace guardian::harness
