#pragma once

#include "guardian/report.hpp"

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace guardian {

/// Malformed report text. line and column are 1-based.
class ReportParseError : public std::runtime_error {
 public:
  ReportParseError(std::size_t line, std::size_t column, const std::string& message);

  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t line_;
  std::size_t column_;
};

/// Parses the text produced by render_report(). Frames are recovered from
/// their bracketed absolute addresses; module annotations are ignored.
/// Leading text before the header line is skipped.
ErrorReport parse_report(std::string_view text);

}  // namespace guardian
