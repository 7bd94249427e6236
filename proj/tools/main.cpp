#include "harness.hpp"

#include "guardian/platform.hpp"
#include "guardian/report_parser.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <iterator>
#include <map>
#include <sstream>

using namespace guardian;
using namespace guardian::harness;

namespace {

struct CommonFlags {
  std::string policy = "counter";
  std::string format = "human";
  std::string process_probability = "1";
};

void add_common(CLI::App* app, HarnessConfig& config, CommonFlags& flags) {
  app->add_option("--policy", flags.policy, "Sampling policy")
      ->check(CLI::IsMember({"counter", "timer"}))
      ->capture_default_str();
  app->add_option("--sample-rate", config.sample_rate, "Mean allocations per sample")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app->add_option("--sample-interval-ms", config.sample_interval_ms, "Timer policy interval")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app->add_option("--slots", config.slots, "Guarded slots in the pool")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app->add_option("--max-live", config.max_live, "Maximum simultaneous guarded allocations")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app->add_option("--quarantine-min", config.quarantine_min, "Acquisition attempts a released slot sits out")
      ->capture_default_str();
  app->add_flag("--recoverable", config.recoverable, "Continue after the first report");
  app->add_option("--seed", config.seed, "Seed for every random choice")->capture_default_str();
  app->add_option("--iterations", config.iterations, "Loop iterations")->capture_default_str();
  app->add_option("--format", flags.format, "Output format")
      ->check(CLI::IsMember({"human", "records"}))
      ->capture_default_str();
  app->add_option("--process-probability", flags.process_probability,
                  "Chance the tool is enabled for the process, e.g. 1/128")
      ->capture_default_str();
}

// Returns false on an invalid combination.
bool finalize(HarnessConfig& config, const CommonFlags& flags) {
  config.policy = flags.policy == "timer" ? SamplingPolicy::Timer : SamplingPolicy::Counter;
  config.format = flags.format == "records" ? OutputFormat::Records : OutputFormat::Human;
  const auto p = parse_probability(flags.process_probability);
  if (!p) {
    std::cerr << "error: invalid --process-probability '" << flags.process_probability << "'\n";
    return false;
  }
  config.process = *p;
  if (config.max_live > config.slots) {
    std::cerr << "error: --max-live must not exceed --slots\n";
    return false;
  }
  return true;
}

std::string read_input(const std::string& path) {
  if (path == "-") {
    return std::string(std::istreambuf_iterator<char>(std::cin), {});
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open " + path);
  }
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sampled guard-page allocator harness"};
  app.require_subcommand(1);

  HarnessConfig config;
  CommonFlags flags;

  auto* inject = app.add_subcommand("inject", "Trigger one memory bug on a guarded allocation");
  std::string kind_name;
  InjectOptions inject_options;
  std::string access_name;
  std::string side_name;
  std::size_t bytes = 0;
  inject->add_option("kind", kind_name, "Bug class")
      ->required()
      ->check(CLI::IsMember({"uaf", "overflow", "underflow", "double-free", "invalid-free"}));
  inject->add_option("--size", inject_options.size, "Allocation size")
      ->check(CLI::Range(std::size_t{1}, std::size_t{1} << 16))
      ->capture_default_str();
  auto* bytes_opt = inject->add_option("--bytes", bytes, "Distance of the bad access");
  inject->add_option("--access", access_name, "Access kind")
      ->check(CLI::IsMember({"read", "write"}));
  inject->add_option("--align-side", side_name, "Placement of the allocation in its slot")
      ->check(CLI::IsMember({"left", "right", "random"}));
  inject->add_option("--alignment", inject_options.alignment, "Requested alignment")
      ->capture_default_str();
  add_common(inject, config, flags);

  auto* stats = app.add_subcommand("sample-stats", "Measure sampling rate and gap distribution");
  std::uint64_t duration_ms = 1000;
  stats->add_option("--duration-ms", duration_ms, "Simulated time for the timer policy")
      ->capture_default_str();
  add_common(stats, config, flags);

  auto* bench = app.add_subcommand("bench", "Fast-path overhead microbenchmark");
  int repeats = 5;
  bench->add_option("--repeats", repeats, "Timed runs per variant")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  add_common(bench, config, flags);

  auto* parse = app.add_subcommand("parse-report", "Parse a report and print its fields");
  std::string input = "-";
  parse->add_option("file", input, "Report file, or - for stdin")->capture_default_str();
  parse->add_option("--format", flags.format, "Output format")
      ->check(CLI::IsMember({"human", "records"}));

  auto* stress = app.add_subcommand("stress", "Multithreaded malloc/free against one allocator");
  int threads = 4;
  stress->add_option("--threads", threads, "Worker threads")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  add_common(stress, config, flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfigError;
  }

  if (!finalize(config, flags)) {
    return kExitConfigError;
  }

  try {
    if (*inject) {
      inject_options.kind = *parse_inject_kind(kind_name);
      if (*bytes_opt) {
        inject_options.bytes = bytes;
      }
      if (!access_name.empty()) {
        inject_options.access = access_name == "write" ? AccessKind::Write : AccessKind::Read;
      }
      if (!side_name.empty()) {
        static const std::map<std::string, SidePolicy> sides{
            {"left", SidePolicy::Left}, {"right", SidePolicy::Right}, {"random", SidePolicy::Random}};
        inject_options.side = sides.at(side_name);
      }
      if (!is_power_of_two(inject_options.alignment) ||
          inject_options.alignment > system_page_size()) {
        std::cerr << "error: --alignment must be a power of two no larger than a page\n";
        return kExitConfigError;
      }
      const InjectResult r = run_injection(config, inject_options);
      print_injection(std::cout, config.format, inject_options, r);
      if (!r.detected) {
        return kExitUndetected;
      }
      if (config.recoverable && inject_options.kind == InjectKind::UseAfterFree &&
          !r.recovered_cleanly) {
        return kExitFailure;
      }
      return kExitOk;
    }
    if (*stats) {
      print_sample_stats(std::cout, config.format, config, run_sample_stats(config, duration_ms));
      return kExitOk;
    }
    if (*bench) {
      print_bench(std::cout, config.format, config, run_bench(config, repeats));
      return kExitOk;
    }
    if (*parse) {
      const std::string text = read_input(input);
      try {
        print_parsed_report(std::cout, config.format, parse_report(text));
      } catch (const ReportParseError& e) {
        std::cerr << "parse error: " << e.what() << '\n';
        return kExitFailure;
      }
      return kExitOk;
    }
    if (*stress) {
      const StressResult r = run_stress(config, threads);
      print_stress(std::cout, config.format, r);
      return r.data_intact ? kExitOk : kExitFailure;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitOk;
}
