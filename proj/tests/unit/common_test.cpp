#include <gtest/gtest.h>

#include <random>

#include "senseloop/common.hpp"

namespace senseloop {
namespace {

TEST(FormatNumber, IntegralValuesHaveNoFraction) {
  EXPECT_EQ(format_number(2075.0), "2075");
  EXPECT_EQ(format_number(-3.0), "-3");
  EXPECT_EQ(format_number(0.0), "0");
}

TEST(FormatNumber, FractionsDropTrailingZeros) {
  EXPECT_EQ(format_number(0.25), "0.25");
  EXPECT_EQ(format_number(1.0 / 3.0), "0.333333");
}

TEST(ExtractNumbers, FindsStandaloneNumbers) {
  const auto tokens = extract_numbers("took a total of 9,325 steps in 2.5 hours");
  ASSERT_EQ(tokens.size(), 2u);
  EXPECT_DOUBLE_EQ(tokens[0].value, 9325);
  EXPECT_DOUBLE_EQ(tokens[1].value, 2.5);
  EXPECT_EQ(tokens[1].decimals, 1);
}

TEST(ExtractNumbers, IdentifiersAreNotNumbers) {
  EXPECT_TRUE(extract_numbers("participant u001 on the 3rd").empty());
}

TEST(ExtractNumbers, DatesSplitIntoParts) {
  const auto tokens = extract_numbers("2024-07-15");
  ASSERT_EQ(tokens.size(), 3u);
  EXPECT_DOUBLE_EQ(tokens[0].value, 2024);
  EXPECT_DOUBLE_EQ(tokens[1].value, 7);
  EXPECT_DOUBLE_EQ(tokens[2].value, 15);
}

TEST(NumberMatches, RespectsWrittenPrecision) {
  const auto t = extract_numbers("2783.15").at(0);
  EXPECT_TRUE(number_matches(t, 2783.1496));
  EXPECT_FALSE(number_matches(t, 2783.2));
  EXPECT_TRUE(number_matches(extract_numbers("12").at(0), 12.0));
  EXPECT_TRUE(number_matches(extract_numbers("12").at(0), 12.4));
  EXPECT_FALSE(number_matches(extract_numbers("12").at(0), 12.6));
}

TEST(DisplayZone, ParsesAllAcceptedForms) {
  const DisplayZone utc;
  EXPECT_DOUBLE_EQ(utc.parse("1970-01-01 00:01:40"), 100);
  EXPECT_DOUBLE_EQ(utc.parse("1970-01-01T00:01:40"), 100);
  EXPECT_DOUBLE_EQ(utc.parse("1970-01-02"), 86400);
  EXPECT_THROW(utc.parse("yesterday"), Error);
  EXPECT_THROW(utc.parse("2024-13-01"), Error);
}

TEST(DisplayZone, OffsetShiftsWallClock) {
  const DisplayZone east(3600);
  EXPECT_EQ(east.format(0), "1970-01-01 01:00:00");
  EXPECT_DOUBLE_EQ(east.parse("1970-01-01 01:00:00"), 0);
}

TEST(DisplayZone, FormatParseRoundTripsWholeSeconds) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<long long> dist(0, 4'000'000'000LL);
  for (int offset : {0, 3600, -5 * 3600, 19800}) {
    const DisplayZone zone(offset);
    for (int i = 0; i < 500; ++i) {
      const double t = static_cast<double>(dist(rng));
      ASSERT_DOUBLE_EQ(zone.parse(zone.format(t)), t) << zone.format(t);
    }
  }
}

TEST(DisplayZone, DateAndTimeParts) {
  const DisplayZone utc;
  const double t = utc.parse("2024-07-15 17:38:57");
  EXPECT_EQ(utc.format_date(t), "2024-07-15");
  EXPECT_EQ(utc.format_time(t), "17:38:57");
}

TEST(TimeRange, HalfOpen) {
  const TimeRange r{150, 301};
  EXPECT_TRUE(r.contains(150));
  EXPECT_TRUE(r.contains(300));
  EXPECT_FALSE(r.contains(301));
  EXPECT_FALSE((TimeRange{0, 0}).contains(0));
  EXPECT_FALSE((TimeRange{5, 4}).valid());
}

TEST(Text, NormalizeWhitespace) {
  EXPECT_EQ(normalize_whitespace("  a \t b\n\nc  "), "a b c");
  EXPECT_EQ(trim("\n x \t"), "x");
  EXPECT_EQ(to_lower("SnapChat"), "snapchat");
}

TEST(ErrorKinds, HaveNames) {
  EXPECT_EQ(to_string(ErrorKind::cassette_miss), "cassette_miss");
  const Error e(ErrorKind::validation, "bad");
  EXPECT_EQ(e.kind(), ErrorKind::validation);
  EXPECT_STREQ(e.what(), "bad");
}

}  // namespace
}  // namespace senseloop
