#include "guardian/report_parser.hpp"

#include <charconv>
#include <optional>
#include <vector>

namespace guardian {

ReportParseError::ReportParseError(std::size_t line, std::size_t column, const std::string& message)
    : std::runtime_error("line " + std::to_string(line) + ", column " + std::to_string(column) +
                         ": " + message),
      line_(line),
      column_(column) {}

namespace {

class Cursor {
 public:
  explicit Cursor(std::string_view text) {
    std::size_t start = 0;
    while (start < text.size()) {
      std::size_t end = text.find('\n', start);
      if (end == std::string_view::npos) {
        end = text.size();
      }
      lines_.push_back(text.substr(start, end - start));
      start = end + 1;
    }
  }

  bool done() const noexcept { return index_ >= lines_.size(); }
  std::size_t line_number() const noexcept { return index_ + 1; }

  std::string_view peek(const char* expecting) const {
    if (done()) {
      throw ReportParseError(line_number(), 1,
                             "unexpected end of input (missing trailer '" +
                                 std::string(kReportTrailer) + "'), expected " + expecting);
    }
    return lines_[index_];
  }
  std::string_view take(const char* expecting) {
    std::string_view line = peek(expecting);
    ++index_;
    return line;
  }

  void skip_to(std::string_view exact) {
    while (!done() && lines_[index_] != exact) {
      ++index_;
    }
  }

  [[noreturn]] void fail(std::size_t column, const std::string& message) const {
    throw ReportParseError(line_number(), column, message);
  }
  [[noreturn]] void fail_previous(std::size_t column, const std::string& message) const {
    throw ReportParseError(line_number() - 1, column, message);
  }

 private:
  std::vector<std::string_view> lines_;
  std::size_t index_ = 0;
};

// Consumes `prefix` from the front of `s`.
bool eat(std::string_view& s, std::string_view prefix) {
  if (s.substr(0, prefix.size()) != prefix) {
    return false;
  }
  s.remove_prefix(prefix.size());
  return true;
}

std::optional<std::uint64_t> eat_number(std::string_view& s, int base) {
  if (base == 16 && !eat(s, "0x")) {
    return std::nullopt;
  }
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v, base);
  if (ec != std::errc{} || ptr == s.data()) {
    return std::nullopt;
  }
  s.remove_prefix(static_cast<std::size_t>(ptr - s.data()));
  return v;
}

std::size_t column_of(std::string_view line, std::string_view rest) {
  return line.size() - rest.size() + 1;
}

StackTrace parse_frames(Cursor& in) {
  StackTrace trace;
  std::string_view first = in.peek("stack frames");
  if (first.substr(0, 2) == "  " && first.substr(2) == kTraceUnavailable) {
    in.take("");
    return trace;
  }
  std::size_t expected = 1;
  while (!in.done()) {
    std::string_view line = in.peek("stack frame");
    std::string_view rest = line;
    if (!eat(rest, "  #")) {
      break;
    }
    const auto number = eat_number(rest, 10);
    if (!number || *number != expected) {
      in.fail(4, "expected frame number " + std::to_string(expected));
    }
    const std::size_t open = line.rfind('[');
    if (open == std::string_view::npos || line.back() != ']') {
      in.fail(line.size(), "frame line lacks a bracketed address");
    }
    std::string_view addr = line.substr(open + 1, line.size() - open - 2);
    const auto pc = eat_number(addr, 16);
    if (!pc || !addr.empty()) {
      in.fail(open + 2, "malformed frame address");
    }
    if (!trace.push(static_cast<std::uintptr_t>(*pc))) {
      in.fail(1, "too many frames");
    }
    ++expected;
    in.take("");
  }
  if (trace.empty()) {
    in.fail(1, "expected at least one stack frame or " + std::string(kTraceUnavailable));
  }
  return trace;
}

void expect_blank(Cursor& in) {
  std::string_view line = in.take("blank line");
  if (!line.empty()) {
    in.fail_previous(1, "expected blank line");
  }
}

// "<addr> was <verb> by thread <tid>:"
std::uint64_t parse_block_header(Cursor& in, std::string_view verb, std::uintptr_t allocation) {
  std::string_view line = in.take("allocation block");
  std::string_view rest = line;
  const auto addr = eat_number(rest, 16);
  if (!addr || *addr != allocation) {
    in.fail_previous(1, "block address does not match allocation");
  }
  if (!eat(rest, " was ") || !eat(rest, verb) || !eat(rest, " by thread ")) {
    in.fail_previous(column_of(line, rest), "expected '" + std::string(verb) + " by thread'");
  }
  const auto tid = eat_number(rest, 10);
  if (!tid || rest != ":") {
    in.fail_previous(column_of(line, rest), "malformed thread id");
  }
  return *tid;
}

}  // namespace

ErrorReport parse_report(std::string_view text) {
  Cursor in(text);
  in.skip_to(kReportHeader);
  if (in.done()) {
    throw ReportParseError(1, 1, "missing report header '" + std::string(kReportHeader) + "'");
  }
  in.take("");

  ErrorReport r;

  // Headline.
  std::string_view line = in.take("error headline");
  std::string_view rest = line;
  bool out_of_bounds = false;
  bool free_error = false;
  if (eat(rest, "Use-after-free ")) {
    r.kind = ErrorKind::UseAfterFree;
  } else if (eat(rest, "Out-of-bounds ")) {
    out_of_bounds = true;
  } else if (eat(rest, "Double-free ")) {
    r.kind = ErrorKind::DoubleFree;
    free_error = true;
  } else if (eat(rest, "Invalid-free ")) {
    r.kind = ErrorKind::InvalidFree;
    free_error = true;
  } else if (eat(rest, "Indeterminate-guard-page ")) {
    r.kind = ErrorKind::IndeterminateGuardHit;
  } else {
    in.fail_previous(1, "unknown error kind");
  }
  if (!free_error) {
    if (eat(rest, "read ")) {
      r.access = AccessKind::Read;
    } else if (eat(rest, "write ")) {
      r.access = AccessKind::Write;
    } else if (eat(rest, "access ")) {
      r.access = AccessKind::Unknown;
    } else {
      in.fail_previous(column_of(line, rest), "expected read, write or access");
    }
  }
  if (!eat(rest, "at ")) {
    in.fail_previous(column_of(line, rest), "expected 'at'");
  }
  const auto access_address = eat_number(rest, 16);
  if (!access_address) {
    in.fail_previous(column_of(line, rest), "malformed access address");
  }
  r.access_address = static_cast<std::uintptr_t>(*access_address);
  if (!eat(rest, " by thread ")) {
    in.fail_previous(column_of(line, rest), "expected 'by thread'");
  }
  const auto thread = eat_number(rest, 10);
  if (!thread || rest != ":") {
    in.fail_previous(column_of(line, rest), "malformed thread id");
  }
  r.faulting_thread = *thread;
  r.access_trace = parse_frames(in);
  expect_blank(in);

  // Locator.
  line = in.take("locator line");
  rest = line;
  if (!eat(rest, "The access is ")) {
    in.fail_previous(1, "expected 'The access is'");
  }
  if (rest == "not attributable to a guarded allocation") {
    if (out_of_bounds) {
      in.fail_previous(column_of(line, rest), "out-of-bounds report without an allocation");
    }
    if (in.take(kReportTrailer.data()) != kReportTrailer) {
      in.fail_previous(1, "missing trailer '" + std::string(kReportTrailer) + "'");
    }
    return r;
  }
  r.has_allocation = true;
  std::int64_t side = 0;  // -1 left, 0 within, +1 right
  std::uint64_t distance = 0;
  if (eat(rest, "within ")) {
    side = 0;
  } else {
    const auto k = eat_number(rest, 10);
    if (!k) {
      in.fail_previous(column_of(line, rest), "expected 'within' or a byte distance");
    }
    distance = *k;
    if (eat(rest, "B left of ")) {
      side = -1;
    } else if (eat(rest, "B right of ")) {
      side = 1;
    } else {
      in.fail_previous(column_of(line, rest), "expected 'B left of' or 'B right of'");
    }
  }
  const auto size = eat_number(rest, 10);
  if (!size || !eat(rest, "B allocation at ")) {
    in.fail_previous(column_of(line, rest), "expected '<N>B allocation at'");
  }
  const auto allocation = eat_number(rest, 16);
  if (!allocation || !rest.empty()) {
    in.fail_previous(column_of(line, rest), "malformed allocation address");
  }
  r.allocation_size = *size;
  r.allocation_address = static_cast<std::uintptr_t>(*allocation);

  const std::int64_t offset = r.offset();
  const auto n = static_cast<std::int64_t>(r.allocation_size);
  const bool consistent = side < 0   ? offset == -static_cast<std::int64_t>(distance)
                          : side > 0 ? offset == n + static_cast<std::int64_t>(distance)
                                     : (offset >= 0 && offset < n);
  if (!consistent) {
    in.fail_previous(1, "locator disagrees with the access address");
  }
  if (out_of_bounds) {
    if (side == 0) {
      in.fail_previous(1, "out-of-bounds access located within the allocation");
    }
    r.kind = side < 0 ? ErrorKind::BufferUnderflow : ErrorKind::BufferOverflow;
  }

  expect_blank(in);
  if (in.peek("allocation block") == kMetadataLost) {
    in.take("");
    r.metadata_lost = true;
  } else {
    std::string_view header = in.peek("allocation block");
    if (header.find(" was deallocated by thread ") != std::string_view::npos) {
      r.has_dealloc = true;
      r.dealloc_thread = parse_block_header(in, "deallocated", r.allocation_address);
      r.dealloc_trace = parse_frames(in);
      expect_blank(in);
    }
    r.alloc_thread = parse_block_header(in, "allocated", r.allocation_address);
    r.alloc_trace = parse_frames(in);
  }
  if (in.done()) {
    throw ReportParseError(in.line_number(), 1,
                           "missing trailer '" + std::string(kReportTrailer) + "'");
  }
  if (in.take("") != kReportTrailer) {
    in.fail_previous(1, "expected trailer '" + std::string(kReportTrailer) + "'");
  }
  return r;
}

}  // namespace guardian
