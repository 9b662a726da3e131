#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "senseloop/orchestrator.hpp"
#include "senseloop/rag.hpp"

namespace senseloop {

enum class QueryCategory { objective, subjective, mixed };
enum class SystemKind { engine, rag };
enum class AccuracyLabel { correct, incorrect, unjudged };

std::string_view to_string(QueryCategory v);
std::string_view to_string(SystemKind v);
std::string_view to_string(AccuracyLabel v);
std::optional<QueryCategory> parse_category(std::string_view text);
std::optional<SystemKind> parse_system(std::string_view text);
std::optional<AccuracyLabel> parse_accuracy(std::string_view text);

struct QuerySpec {
  std::string id;
  std::string text;
  QueryCategory category = QueryCategory::objective;
  std::string user_id;
  TimeRange range;
  std::string instructions = "answer clearly and concisely";
};

/// Corpus file: one JSON object per line with id, text, category, user_id,
/// start, end (epoch seconds or local time strings) and optional
/// instructions.
std::vector<QuerySpec> load_corpus(std::string_view jsonl, const DisplayZone& zone = {});

struct RunOutcome {
  std::string query_id;
  SystemKind system = SystemKind::engine;
  std::vector<std::string> answers;  // one per repetition
  AccuracyLabel accuracy = AccuracyLabel::unjudged;
  std::optional<bool> consistent;    // defined only with >= 3 answers
  std::vector<std::string> provenance;
  std::string error;

  bool operator==(const RunOutcome&) const = default;
};

struct SubjectiveRating {
  std::string query_id;
  SystemKind system = SystemKind::engine;
  bool relevance = false;
  bool interpretation = false;
  bool domain_knowledge = false;
  bool logic = false;
  bool clarity = false;
  int overall = 1;  // 1..5

  bool operator==(const SubjectiveRating&) const = default;
};

inline constexpr std::array<const char*, 5> kRatingDimensions = {
    "relevance", "interpretation", "domain_knowledge", "logic", "clarity"};

// ---------------------------------------------------------------------------
// Consistency.

using AnswerComparator = std::function<bool(const std::string&, const std::string&)>;

/// Case-insensitive equality after whitespace normalization.
bool normalized_equal(const std::string& a, const std::string& b);

struct ConsistencyResult {
  std::vector<std::string> answers;
  std::optional<bool> consistent;  // empty when a repetition failed
  std::string error;
};

/// Calls `run_once(repetition)` `repetitions` times in sequence. Consistent
/// iff every answer equals the first under `comparator`. Throws
/// Error(validation) for fewer than 2 repetitions.
ConsistencyResult measure_consistency(const std::function<std::string(int)>& run_once,
                                      int repetitions, const AnswerComparator& comparator = normalized_equal);

// ---------------------------------------------------------------------------
// Metrics and statistics.

/// num/den as a percentage truncated (not rounded) to two decimals, e.g.
/// 111/210 -> "52.85". Throws Error(validation) when den is 0.
std::string format_percent(std::size_t num, std::size_t den);

struct SystemMetrics {
  SystemKind system = SystemKind::engine;
  std::size_t outcomes = 0;
  std::size_t judged = 0;
  std::size_t correct = 0;
  std::size_t defined = 0;  // outcomes with a consistency verdict
  std::size_t consistent = 0;

  /// Throw Error(validation) when nothing was judged / defined.
  std::string accuracy_percent() const { return format_percent(correct, judged); }
  std::string consistency_percent() const { return format_percent(consistent, defined); }
};

/// Tallies per system, in SystemKind order. Throws Error(validation) on an
/// empty outcome set.
std::vector<SystemMetrics> compute_metrics(const std::vector<RunOutcome>& outcomes);

struct TTestResult {
  double t = 0;
  int degrees_of_freedom = 0;
};

/// Paired t statistic of a - b. Throws Error(validation) for unequal lengths,
/// fewer than 2 pairs, or zero variance of the differences.
TTestResult paired_t_test(std::span<const double> a, std::span<const double> b);

/// Pearson chi-squared (1 df) of a 2x2 table of counts. Throws
/// Error(validation) when a row or column total is zero.
double chi_squared_2x2(const std::array<std::array<double, 2>, 2>& table);

struct RatingSummary {
  SystemKind system = SystemKind::engine;
  std::size_t n = 0;
  std::array<std::size_t, 5> positives{};  // per kRatingDimensions
  double mean_overall = 0;

  double proportion(std::size_t dimension) const {
    return n ? static_cast<double>(positives[dimension]) / static_cast<double>(n) : 0.0;
  }
};

/// Throws Error(validation) on an empty set or an overall score outside 1..5.
std::vector<RatingSummary> summarize_ratings(const std::vector<SubjectiveRating>& ratings);

// ---------------------------------------------------------------------------
// Files.

std::string write_csv(const std::vector<std::vector<std::string>>& rows);
std::vector<std::vector<std::string>> read_csv(std::string_view text);

std::string outcomes_to_csv(const std::vector<RunOutcome>& outcomes);
std::vector<RunOutcome> outcomes_from_csv(std::string_view text);
std::string ratings_to_csv(const std::vector<SubjectiveRating>& ratings);
std::vector<SubjectiveRating> ratings_from_csv(std::string_view text);

struct EvalReport {
  std::vector<SystemMetrics> metrics;
  nlohmann::json statistics;           // t-tests and chi-squared, or why not computable
  std::vector<RatingSummary> ratings;  // empty when no ratings were supplied
  std::vector<RunOutcome> outcomes;    // for per-query provenance
};

EvalReport build_report(const std::vector<RunOutcome>& outcomes,
                        const std::vector<SubjectiveRating>& ratings);

nlohmann::json report_to_json(const EvalReport& report);
std::string report_to_text(const EvalReport& report);

/// Writes metrics.csv, report.json and (with ratings) ratings_summary.csv
/// into `dir`. Returns the written paths. Identical inputs give
/// byte-identical files.
std::vector<std::filesystem::path> export_report(const EvalReport& report,
                                                 const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Corpus runner.

struct CorpusRunner {
  const Engine* engine = nullptr;    // required for SystemKind::engine
  const RagBaseline* rag = nullptr;  // required for SystemKind::rag
  const SensorStore* store = nullptr;
  DisplayZone zone;
  int repetitions = 3;
  int jobs = 1;  // distinct queries run in parallel; repetitions stay sequential
  AnswerComparator comparator = normalized_equal;
  std::string provenance;  // e.g. the cassette in use
};

std::vector<RunOutcome> run_corpus(const std::vector<QuerySpec>& corpus, const CorpusRunner& runner,
                                   const std::vector<SystemKind>& systems);

}  // namespace senseloop
