#pragma once

// Reference implementations used to check the production code by a second,
// independent route. Shared by the unit tests and the acceptance binary.

#include <array>
#include <random>
#include <string>
#include <vector>

#include "senseloop/helpers.hpp"

namespace senseloop::testing {

/// Brute-force open/close pairing: for an open o, take every close of the
/// same app that comes after o in (time, open-first, input order), and every
/// later open; the block closes at the earliest such close that precedes the
/// earliest later open.
std::vector<AppUsageBlock> oracle_pairing(const std::vector<AppUsageEvent>& events, const TimeRange& range);

struct AppUsageFixture {
  std::vector<AppUsageEvent> events;
  TimeRange range;
};

/// Up to 100 events over three apps on a short span, so ties are common.
AppUsageFixture random_app_usage(std::mt19937_64& rng);

/// num/den as a percent, truncated to two decimals, by schoolbook division.
std::string long_division_percent(std::size_t num, std::size_t den);

/// Paired t statistic, two-pass, in long double.
long double reference_paired_t(const std::vector<double>& a, const std::vector<double>& b);

/// Pearson chi-squared from expected counts built from the margins.
long double reference_chi_squared(const std::array<std::array<double, 2>, 2>& table);

/// Cosine in long double; does not assume unit vectors.
long double reference_cosine(const std::vector<double>& a, const std::vector<double>& b);

std::vector<double> random_unit(std::mt19937_64& rng, std::size_t dim);

struct RankedHit {
  std::size_t position;
  long double score;
};

/// Every vector scored against the query, best first, ties by position.
std::vector<RankedHit> brute_force_ranking(const std::vector<double>& query,
                                           const std::vector<std::vector<double>>& vectors);

}  // namespace senseloop::testing
