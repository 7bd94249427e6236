#pragma once

#include "guardian/allocator.hpp"
#include "guardian/report.hpp"

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace guardian::harness {

enum ExitStatus : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitUndetected = 2,
  kExitConfigError = 3,
};

enum class OutputFormat { Human, Records };

struct HarnessConfig {
  SamplingPolicy policy = SamplingPolicy::Counter;
  std::uint64_t sample_rate = 5000;
  std::uint64_t sample_interval_ms = 100;
  std::size_t slots = 16;
  std::size_t max_live = 16;
  std::size_t quarantine_min = 0;
  bool recoverable = false;
  std::uint64_t seed = 1;
  std::uint64_t iterations = 1'000'000;
  ProcessSamplingConfig process{1, 1};
  OutputFormat format = OutputFormat::Human;
};

/// Library configuration equivalent to the harness flags. Reports go to
/// `sink_fd`.
AllocatorConfig to_allocator_config(const HarnessConfig& config, int sink_fd = 2);

/// Parses "1/128" or a decimal such as "0.25".
std::optional<ProcessSamplingConfig> parse_probability(const std::string& text);

enum class InjectKind { UseAfterFree, Overflow, Underflow, DoubleFree, InvalidFree };

std::optional<InjectKind> parse_inject_kind(const std::string& text);

struct InjectOptions {
  InjectKind kind = InjectKind::UseAfterFree;
  std::size_t size = 41;
  /// Distance of the bad access: offset into the freed allocation (uaf),
  /// bytes past the end (overflow, 0 = first byte past the end), bytes
  /// before the start (underflow) or pointer offset (invalid-free).
  std::optional<std::size_t> bytes;
  std::optional<AccessKind> access;
  std::optional<SidePolicy> side;
  std::size_t alignment = 1;
};

struct InjectResult {
  bool detected = false;
  std::string report_text;
  std::optional<ErrorReport> report;
  /// Signal that ended the child, 0 if it exited (or ran in-process).
  int terminating_signal = 0;
  std::size_t slot = 0;
  /// In recoverable mode: reads of the freed allocation after recovery
  /// returned zero, and no second report was produced.
  bool recovered_cleanly = false;
};

/// Triggers the requested bug on a guarded allocation. Non-recoverable
/// injections run in a forked child so the harness survives the crash.
InjectResult run_injection(const HarnessConfig& config, const InjectOptions& options);

void print_injection(std::ostream& out, OutputFormat format, const InjectOptions& options,
                     const InjectResult& result);

struct SampleStats {
  std::uint64_t allocations = 0;
  std::uint64_t samples = 0;
  std::uint64_t guarded = 0;
  double rate = 0;
  double mean_gap = 0;
  double median_gap = 0;
  std::uint64_t min_gap = 0;
  std::uint64_t max_gap = 0;
  std::vector<std::uint64_t> histogram;  // ten equal-width bins over [1, 2*sample_rate]
  /// Timer policy only.
  std::uint64_t expected_samples = 0;
  std::uint64_t simulated_ms = 0;
};

/// Runs the allocation loop without faults. The timer policy advances a
/// manual clock evenly across `duration_ms`.
SampleStats run_sample_stats(const HarnessConfig& config, std::uint64_t duration_ms = 1000);

void print_sample_stats(std::ostream& out, OutputFormat format, const HarnessConfig& config,
                        const SampleStats& stats);

struct BenchResult {
  double baseline_ns = 0;  // plain malloc/free
  double enabled_ns = 0;   // tool on at the configured rate
  double disabled_ns = 0;  // tool turned off by process sampling
  double enabled_overhead_pct = 0;
  double disabled_overhead_pct = 0;
  std::uint64_t guarded = 0;
};

/// malloc/free stress loop of 16-byte allocations. Each of `repeats` runs
/// executes `iterations` operations per variant in interleaved chunks;
/// timings and overheads are medians over the paired chunks.
BenchResult run_bench(const HarnessConfig& config, int repeats = 5);

void print_bench(std::ostream& out, OutputFormat format, const HarnessConfig& config,
                 const BenchResult& result);

struct StressResult {
  std::uint64_t operations = 0;
  std::uint64_t guarded = 0;
  std::size_t max_live_observed = 0;
  bool data_intact = true;
};

/// Worker threads hammering one allocator with random malloc/free.
StressResult run_stress(const HarnessConfig& config, int threads);

void print_stress(std::ostream& out, OutputFormat format, const StressResult& result);

/// Prints the fields of a parsed report.
void print_parsed_report(std::ostream& out, OutputFormat format, const ErrorReport& report);

}  // namespace guardian::harness
