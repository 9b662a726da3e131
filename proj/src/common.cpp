#include "senseloop/common.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

namespace senseloop {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::validation: return "validation";
    case ErrorKind::not_found: return "not_found";
    case ErrorKind::parse: return "parse";
    case ErrorKind::backend: return "backend";
    case ErrorKind::cassette_miss: return "cassette_miss";
    case ErrorKind::state: return "state";
    case ErrorKind::sandbox: return "sandbox";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

TimeRange TimeRange::everything() {
  return {-std::numeric_limits<double>::max(), std::numeric_limits<double>::max()};
}

namespace {

struct Civil {
  int year, month, day, hour, minute, second;
};

Civil to_civil(EpochSeconds t) {
  using namespace std::chrono;
  const auto whole = static_cast<std::int64_t>(std::floor(t));
  const sys_seconds tp{seconds{whole}};
  const auto dp = floor<days>(tp);
  const year_month_day ymd{dp};
  const hh_mm_ss hms{tp - dp};
  return {int(ymd.year()), int(unsigned(ymd.month())), int(unsigned(ymd.day())),
          int(hms.hours().count()), int(hms.minutes().count()),
          int(hms.seconds().count())};
}

}  // namespace

std::string DisplayZone::format(EpochSeconds t) const {
  const Civil c = to_civil(t + offset_);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02d %02d:%02d:%02d", c.year, c.month,
                c.day, c.hour, c.minute, c.second);
  return buf;
}

std::string DisplayZone::format_date(EpochSeconds t) const {
  return format(t).substr(0, 10);
}

std::string DisplayZone::format_time(EpochSeconds t) const {
  return format(t).substr(11);
}

EpochSeconds DisplayZone::parse(std::string_view text) const {
  const std::string s = trim(text);
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, se = 0;
  char sep = ' ';
  int consumed = 0;
  bool ok = false;
  if (s.size() == 10) {
    ok = std::sscanf(s.c_str(), "%4d-%2d-%2d%n", &y, &mo, &d, &consumed) == 3 &&
         consumed == 10;
  } else if (s.size() == 19) {
    ok = std::sscanf(s.c_str(), "%4d-%2d-%2d%c%2d:%2d:%2d%n", &y, &mo, &d, &sep, &h,
                     &mi, &se, &consumed) == 7 &&
         consumed == 19 && (sep == ' ' || sep == 'T');
  }
  using namespace std::chrono;
  const year_month_day ymd{year{y}, month{unsigned(mo)}, day{unsigned(d)}};
  if (!ok || !ymd.ok() || h > 23 || mi > 59 || se > 60 || h < 0 || mi < 0 || se < 0) {
    throw Error(ErrorKind::validation, "invalid local timestamp '" + s + "'");
  }
  const auto days_since = sys_days{ymd}.time_since_epoch().count();
  return static_cast<double>(days_since) * 86400.0 + h * 3600.0 + mi * 60.0 + se -
         offset_;
}

std::string format_number(double value) {
  if (!std::isfinite(value)) return value > 0 ? "inf" : (value < 0 ? "-inf" : "nan");
  if (value == std::floor(value) && std::fabs(value) < 1e15) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.0f", value);
    return buf;
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", value);
  std::string out = buf;
  while (!out.empty() && out.back() == '0') out.pop_back();
  if (!out.empty() && out.back() == '.') out.pop_back();
  return out;
}

namespace {

bool is_word_char(char c) {
  return std::isalpha(static_cast<unsigned char>(c)) || c == '_';
}

bool is_digit(char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; }

}  // namespace

std::vector<NumberToken> extract_numbers(std::string_view text) {
  std::vector<NumberToken> out;
  std::size_t i = 0;
  while (i < text.size()) {
    if (!is_digit(text[i]) || (i > 0 && (is_word_char(text[i - 1]) || is_digit(text[i - 1])))) {
      ++i;
      continue;
    }
    std::size_t j = i;
    std::string digits;
    int decimals = 0;
    bool seen_point = false;
    while (j < text.size()) {
      if (is_digit(text[j])) {
        digits.push_back(text[j]);
        if (seen_point) ++decimals;
        ++j;
        continue;
      }
      // "9,325" -> grouping; "2783.15" -> decimal point. A separator only
      // counts when a digit follows it.
      if (j + 1 < text.size() && is_digit(text[j + 1])) {
        if (text[j] == ',' && !seen_point) {
          // Grouping needs exactly three digits after the comma.
          std::size_t k = j + 1;
          while (k < text.size() && is_digit(text[k])) ++k;
          if (k - (j + 1) == 3) {
            ++j;
            continue;
          }
        } else if (text[j] == '.' && !seen_point) {
          seen_point = true;
          digits.push_back('.');
          ++j;
          continue;
        }
      }
      break;
    }
    const bool glued = j < text.size() && is_word_char(text[j]);
    if (!glued) {
      NumberToken tok;
      tok.text = std::string(text.substr(i, j - i));
      tok.value = std::strtod(digits.c_str(), nullptr);
      tok.decimals = decimals;
      out.push_back(std::move(tok));
    }
    i = j;
    while (i < text.size() && (is_digit(text[i]) || is_word_char(text[i]))) ++i;
  }
  return out;
}

bool number_matches(const NumberToken& token, double candidate) {
  const double v = std::fabs(candidate);
  if (v == token.value) return true;
  const double scale = std::pow(10.0, token.decimals);
  const double rounded = std::round(v * scale) / scale;
  return std::fabs(rounded - token.value) <= 1e-9 * std::max(1.0, token.value);
}

std::string trim(std::string_view text) {
  std::size_t b = 0, e = text.size();
  while (b < e && std::isspace(static_cast<unsigned char>(text[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(text[e - 1]))) --e;
  return std::string(text.substr(b, e - b));
}

std::string to_lower(std::string_view text) {
  std::string out(text);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::string normalize_whitespace(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, std::string_view content) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write '" + path + "'");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw Error(ErrorKind::io, "write failed for '" + path + "'");
}

}  // namespace senseloop
