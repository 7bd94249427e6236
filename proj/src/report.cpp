#include "guardian/report.hpp"

#include <array>
#include <vector>

namespace guardian {

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::UseAfterFree:
      return "UseAfterFree";
    case ErrorKind::BufferOverflow:
      return "BufferOverflow";
    case ErrorKind::BufferUnderflow:
      return "BufferUnderflow";
    case ErrorKind::DoubleFree:
      return "DoubleFree";
    case ErrorKind::InvalidFree:
      return "InvalidFree";
    case ErrorKind::IndeterminateGuardHit:
      return "IndeterminateGuardHit";
  }
  return "?";
}

std::string_view to_string(AccessKind kind) noexcept {
  switch (kind) {
    case AccessKind::Read:
      return "read";
    case AccessKind::Write:
      return "write";
    case AccessKind::Unknown:
      return "access";
  }
  return "?";
}

TextWriter& TextWriter::put(std::string_view s) noexcept {
  for (char c : s) {
    put(c);
  }
  return *this;
}

TextWriter& TextWriter::put(char c) noexcept {
  if (size_ < buffer_.size()) {
    buffer_[size_++] = c;
  } else {
    truncated_ = true;
  }
  return *this;
}

TextWriter& TextWriter::put_dec(std::uint64_t v) noexcept {
  char digits[20];
  int n = 0;
  do {
    digits[n++] = static_cast<char>('0' + v % 10);
    v /= 10;
  } while (v != 0);
  while (n > 0) {
    put(digits[--n]);
  }
  return *this;
}

TextWriter& TextWriter::put_hex(std::uint64_t v) noexcept {
  static constexpr char kDigits[] = "0123456789abcdef";
  char digits[16];
  int n = 0;
  do {
    digits[n++] = kDigits[v & 0xf];
    v >>= 4;
  } while (v != 0);
  put("0x");
  while (n > 0) {
    put(digits[--n]);
  }
  return *this;
}

namespace {

std::string_view headline(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::UseAfterFree:
      return "Use-after-free";
    case ErrorKind::BufferOverflow:
    case ErrorKind::BufferUnderflow:
      return "Out-of-bounds";
    case ErrorKind::DoubleFree:
      return "Double-free";
    case ErrorKind::InvalidFree:
      return "Invalid-free";
    case ErrorKind::IndeterminateGuardHit:
      return "Indeterminate-guard-page";
  }
  return "Unknown";
}

bool is_free_error(ErrorKind kind) noexcept {
  return kind == ErrorKind::DoubleFree || kind == ErrorKind::InvalidFree;
}

void render_frames(const StackTrace& trace, const ModuleTable* modules, TextWriter& out) noexcept {
  if (trace.empty()) {
    out.put("  ").put(kTraceUnavailable).put('\n');
    return;
  }
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const std::uintptr_t pc = trace[i];
    out.put("  #").put_dec(i + 1).put(' ');
    const ModuleTable::Module* m = modules != nullptr ? modules->find(pc) : nullptr;
    if (m != nullptr) {
      out.put(m->name.data()).put("(+").put_hex(pc - m->load_bias).put(") ");
    }
    out.put('[').put_hex(pc).put("]\n");
  }
}

}  // namespace

void render_report(const ErrorReport& r, TextWriter& out) noexcept {
  out.put(kReportHeader).put('\n');

  out.put(headline(r.kind));
  if (!is_free_error(r.kind)) {
    out.put(' ').put(to_string(r.access));
  }
  out.put(" at ").put_hex(r.access_address).put(" by thread ").put_dec(r.faulting_thread).put(":\n");
  render_frames(r.access_trace, r.modules, out);
  out.put('\n');

  out.put("The access is ");
  if (!r.has_allocation) {
    out.put("not attributable to a guarded allocation\n");
    out.put(kReportTrailer).put('\n');
    return;
  }
  const std::int64_t offset = r.offset();
  const auto size = static_cast<std::int64_t>(r.allocation_size);
  if (offset < 0) {
    out.put_dec(static_cast<std::uint64_t>(-offset)).put("B left of ");
  } else if (offset >= size) {
    out.put_dec(static_cast<std::uint64_t>(offset - size)).put("B right of ");
  } else {
    out.put("within ");
  }
  out.put_dec(r.allocation_size).put("B allocation at ").put_hex(r.allocation_address).put('\n');

  if (r.metadata_lost) {
    out.put('\n').put(kMetadataLost).put('\n');
  } else {
    if (r.has_dealloc) {
      out.put('\n').put_hex(r.allocation_address).put(" was deallocated by thread ");
      out.put_dec(r.dealloc_thread).put(":\n");
      render_frames(r.dealloc_trace, r.modules, out);
    }
    out.put('\n').put_hex(r.allocation_address).put(" was allocated by thread ");
    out.put_dec(r.alloc_thread).put(":\n");
    render_frames(r.alloc_trace, r.modules, out);
  }
  out.put(kReportTrailer).put('\n');
}

std::string render_report(const ErrorReport& report) {
  std::vector<char> buffer(1 << 16);
  for (;;) {
    TextWriter out(buffer);
    render_report(report, out);
    if (!out.truncated()) {
      return std::string(out.view());
    }
    buffer.resize(buffer.size() * 2);
  }
}

}  // namespace guardian
