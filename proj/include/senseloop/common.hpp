#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace senseloop {

/// Broad error categories. The CLI maps these onto exit codes and the
/// service onto HTTP statuses.
enum class ErrorKind {
  validation,
  not_found,
  parse,
  backend,
  cassette_miss,
  state,
  sandbox,
  io,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// UTC instant as (possibly fractional) seconds since the Unix epoch.
using EpochSeconds = double;

/// Half-open interval [start, end).
struct TimeRange {
  EpochSeconds start = 0;
  EpochSeconds end = 0;

  bool valid() const { return start <= end; }
  bool contains(EpochSeconds t) const { return start <= t && t < end; }

  static TimeRange everything();

  bool operator==(const TimeRange&) const = default;
};

/// Fixed-offset display zone used to render and parse local wall-clock
/// strings of the form "YYYY-MM-DD HH:MM:SS".
class DisplayZone {
 public:
  DisplayZone() = default;
  explicit DisplayZone(int offset_seconds) : offset_(offset_seconds) {}

  int offset_seconds() const { return offset_; }

  std::string format(EpochSeconds t) const;
  std::string format_date(EpochSeconds t) const;
  std::string format_time(EpochSeconds t) const;

  /// Accepts "YYYY-MM-DD HH:MM:SS", "YYYY-MM-DDTHH:MM:SS" and "YYYY-MM-DD".
  /// Throws Error(validation) on anything else.
  EpochSeconds parse(std::string_view text) const;

 private:
  int offset_ = 0;
};

/// Renders a number the way summaries and chunk texts show it: integral
/// values without a fractional part, others with up to six significant
/// decimals and trailing zeros removed.
std::string format_number(double value);

/// A number written in free text, with the count of decimals it was
/// written with (so "2783.15" can be matched against 2783.1496).
struct NumberToken {
  std::string text;
  double value = 0;
  int decimals = 0;
};

/// Extracts standalone number tokens from prose. Digits glued to letters
/// (identifiers like "u010" or "3rd") are not numbers. Thousands separators
/// ("9,325") are folded; '-' is a separator, so dates yield their parts.
std::vector<NumberToken> extract_numbers(std::string_view text);

/// True when `token` equals `candidate` exactly or after rounding the
/// candidate to the token's written precision.
bool number_matches(const NumberToken& token, double candidate);

std::string trim(std::string_view text);
std::string to_lower(std::string_view text);

/// Collapses every whitespace run to one space and trims both ends.
std::string normalize_whitespace(std::string_view text);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view content);

}  // namespace senseloop
