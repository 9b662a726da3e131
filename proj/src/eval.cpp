#include "senseloop/eval.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <map>
#include <thread>

namespace senseloop {

using nlohmann::json;

std::string_view to_string(QueryCategory v) {
  switch (v) {
    case QueryCategory::objective: return "objective";
    case QueryCategory::subjective: return "subjective";
    case QueryCategory::mixed: return "mixed";
  }
  return "objective";
}

std::string_view to_string(SystemKind v) { return v == SystemKind::engine ? "engine" : "rag"; }

std::string_view to_string(AccuracyLabel v) {
  switch (v) {
    case AccuracyLabel::correct: return "correct";
    case AccuracyLabel::incorrect: return "incorrect";
    case AccuracyLabel::unjudged: return "unjudged";
  }
  return "unjudged";
}

std::optional<QueryCategory> parse_category(std::string_view text) {
  for (auto v : {QueryCategory::objective, QueryCategory::subjective, QueryCategory::mixed}) {
    if (to_string(v) == text) return v;
  }
  return std::nullopt;
}

std::optional<SystemKind> parse_system(std::string_view text) {
  if (text == "engine") return SystemKind::engine;
  if (text == "rag") return SystemKind::rag;
  return std::nullopt;
}

std::optional<AccuracyLabel> parse_accuracy(std::string_view text) {
  if (text == "correct") return AccuracyLabel::correct;
  if (text == "incorrect") return AccuracyLabel::incorrect;
  if (text == "unjudged" || text.empty()) return AccuracyLabel::unjudged;
  return std::nullopt;
}

namespace {

double time_field(const json& j, const char* key, const DisplayZone& zone) {
  const json& v = j.at(key);
  if (v.is_number()) return v.get<double>();
  return zone.parse(v.get<std::string>());
}

bool parse_bool(const std::string& text, const std::string& what) {
  const std::string v = to_lower(trim(text));
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw Error(ErrorKind::parse, what + " must be true/false, got '" + text + "'");
}

std::map<std::string, std::size_t> header_index(const std::vector<std::string>& header,
                                                const std::vector<std::string>& required) {
  std::map<std::string, std::size_t> idx;
  for (std::size_t i = 0; i < header.size(); ++i) idx[trim(header[i])] = i;
  for (const auto& r : required) {
    if (!idx.count(r)) throw Error(ErrorKind::parse, "CSV is missing column '" + r + "'");
  }
  return idx;
}

std::string cell(const std::vector<std::string>& row, const std::map<std::string, std::size_t>& idx,
                 const std::string& name) {
  const auto it = idx.find(name);
  if (it == idx.end() || it->second >= row.size()) return "";
  return row[it->second];
}

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

json ttest_json(const std::vector<double>& a, const std::vector<double>& b) {
  try {
    const auto r = paired_t_test(a, b);
    return {{"t", r.t}, {"df", r.degrees_of_freedom}, {"pairs", a.size()}};
  } catch (const Error& e) {
    return {{"error", e.what()}, {"pairs", a.size()}};
  }
}

}  // namespace

std::vector<QuerySpec> load_corpus(std::string_view jsonl, const DisplayZone& zone) {
  std::vector<QuerySpec> corpus;
  const auto lines = split_lines(jsonl);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    const std::string where = "corpus line " + std::to_string(i + 1) + ": ";
    try {
      const json j = json::parse(lines[i]);
      QuerySpec q;
      q.id = j.at("id").get<std::string>();
      q.text = j.at("text").get<std::string>();
      const auto cat = parse_category(j.value("category", "objective"));
      if (!cat) throw Error(ErrorKind::validation, where + "category must be objective, subjective or mixed");
      q.category = *cat;
      q.user_id = j.at("user_id").get<std::string>();
      q.range = {time_field(j, "start", zone), time_field(j, "end", zone)};
      if (!q.range.valid()) throw Error(ErrorKind::validation, where + "end precedes start");
      q.instructions = j.value("instructions", q.instructions);
      if (q.id.empty() || trim(q.text).empty()) throw Error(ErrorKind::validation, where + "id and text are required");
      corpus.push_back(std::move(q));
    } catch (const json::exception& e) {
      throw Error(ErrorKind::parse, where + e.what());
    }
  }
  return corpus;
}

// ---------------------------------------------------------------------------

bool normalized_equal(const std::string& a, const std::string& b) {
  return to_lower(normalize_whitespace(a)) == to_lower(normalize_whitespace(b));
}

ConsistencyResult measure_consistency(const std::function<std::string(int)>& run_once, int repetitions,
                                      const AnswerComparator& comparator) {
  if (repetitions < 2) throw Error(ErrorKind::validation, "consistency needs at least 2 repetitions");
  ConsistencyResult result;
  for (int rep = 0; rep < repetitions; ++rep) {
    try {
      result.answers.push_back(run_once(rep));
    } catch (const std::exception& e) {
      result.error = "repetition " + std::to_string(rep + 1) + ": " + e.what();
      return result;
    }
  }
  result.consistent = std::all_of(result.answers.begin() + 1, result.answers.end(),
                                  [&](const std::string& a) { return comparator(result.answers.front(), a); });
  return result;
}

// ---------------------------------------------------------------------------

std::string format_percent(std::size_t num, std::size_t den) {
  if (den == 0) throw Error(ErrorKind::validation, "percentage over an empty denominator");
  // Hundredths of a percent, truncated.
  const unsigned long long basis = static_cast<unsigned long long>(num) * 10000ULL / den;
  char buf[48];
  std::snprintf(buf, sizeof buf, "%llu.%02llu", basis / 100, basis % 100);
  return buf;
}

std::vector<SystemMetrics> compute_metrics(const std::vector<RunOutcome>& outcomes) {
  if (outcomes.empty()) throw Error(ErrorKind::validation, "no outcomes to score");
  std::vector<SystemMetrics> out;
  for (auto system : {SystemKind::engine, SystemKind::rag}) {
    SystemMetrics m;
    m.system = system;
    for (const auto& o : outcomes) {
      if (o.system != system) continue;
      ++m.outcomes;
      if (o.accuracy != AccuracyLabel::unjudged) {
        ++m.judged;
        if (o.accuracy == AccuracyLabel::correct) ++m.correct;
      }
      if (o.consistent) {
        ++m.defined;
        if (*o.consistent) ++m.consistent;
      }
    }
    if (m.outcomes) out.push_back(m);
  }
  return out;
}

TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorKind::validation, "paired samples differ in length");
  if (a.size() < 2) throw Error(ErrorKind::validation, "a paired t-test needs at least 2 pairs");
  // Welford's running mean and sum of squared deviations.
  double mean = 0;
  double m2 = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    const double delta = d - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta * (d - mean);
  }
  const double n = static_cast<double>(a.size());
  const double variance = m2 / (n - 1);
  if (!(variance > 0)) throw Error(ErrorKind::validation, "the paired differences have zero variance");
  return {mean / (std::sqrt(variance) / std::sqrt(n)), static_cast<int>(a.size()) - 1};
}

double chi_squared_2x2(const std::array<std::array<double, 2>, 2>& t) {
  for (const auto& row : t) {
    for (double c : row) {
      if (c < 0 || !std::isfinite(c)) throw Error(ErrorKind::validation, "counts must be finite and non-negative");
    }
  }
  const long double a = t[0][0], b = t[0][1], c = t[1][0], d = t[1][1];
  const long double r1 = a + b, r2 = c + d, c1 = a + c, c2 = b + d;
  if (r1 == 0 || r2 == 0 || c1 == 0 || c2 == 0) {
    throw Error(ErrorKind::validation, "a row or column total is zero");
  }
  const long double diff = a * d - b * c;
  return static_cast<double>((r1 + r2) * diff * diff / (r1 * r2 * c1 * c2));
}

std::vector<RatingSummary> summarize_ratings(const std::vector<SubjectiveRating>& ratings) {
  if (ratings.empty()) throw Error(ErrorKind::validation, "no ratings to summarize");
  std::vector<RatingSummary> out;
  for (auto system : {SystemKind::engine, SystemKind::rag}) {
    RatingSummary s;
    s.system = system;
    long long overall = 0;
    for (const auto& r : ratings) {
      if (r.overall < 1 || r.overall > 5) {
        throw Error(ErrorKind::validation, "overall rating must be 1..5 (query " + r.query_id + ")");
      }
      if (r.system != system) continue;
      ++s.n;
      const bool dims[5] = {r.relevance, r.interpretation, r.domain_knowledge, r.logic, r.clarity};
      for (std::size_t i = 0; i < 5; ++i) s.positives[i] += dims[i] ? 1 : 0;
      overall += r.overall;
    }
    if (s.n) {
      s.mean_overall = static_cast<double>(overall) / static_cast<double>(s.n);
      out.push_back(s);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string write_csv(const std::vector<std::vector<std::string>>& rows) {
  std::string out;
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out += ',';
      const std::string& f = row[i];
      if (f.find_first_of(",\"\n\r") == std::string::npos) {
        out += f;
      } else {
        out += '"';
        for (char c : f) {
          if (c == '"') out += '"';
          out += c;
        }
        out += '"';
      }
    }
    out += '\n';
  }
  return out;
}

std::vector<std::vector<std::string>> read_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
      }
      row.clear();
      field.clear();
      any = false;
    } else {
      field += c;
      any = true;
    }
  }
  if (quoted) throw Error(ErrorKind::parse, "CSV ends inside a quoted field");
  if (any || !field.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string outcomes_to_csv(const std::vector<RunOutcome>& outcomes) {
  std::vector<std::vector<std::string>> rows = {
      {"query_id", "system", "accuracy", "consistent", "repetitions", "answers", "provenance", "error"}};
  for (const auto& o : outcomes) {
    rows.push_back({o.query_id, std::string(to_string(o.system)), std::string(to_string(o.accuracy)),
                    o.consistent ? (*o.consistent ? "true" : "false") : "",
                    std::to_string(o.answers.size()), json(o.answers).dump(), json(o.provenance).dump(),
                    o.error});
  }
  return write_csv(rows);
}

std::vector<RunOutcome> outcomes_from_csv(std::string_view text) {
  const auto rows = read_csv(text);
  if (rows.empty()) throw Error(ErrorKind::parse, "outcomes CSV is empty");
  const auto idx = header_index(rows[0], {"query_id", "system", "accuracy"});
  std::vector<RunOutcome> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& row = rows[i];
    const std::string where = "outcomes row " + std::to_string(i + 1) + ": ";
    RunOutcome o;
    o.query_id = cell(row, idx, "query_id");
    const auto system = parse_system(trim(cell(row, idx, "system")));
    const auto accuracy = parse_accuracy(trim(cell(row, idx, "accuracy")));
    if (!system) throw Error(ErrorKind::parse, where + "system must be engine or rag");
    if (!accuracy) throw Error(ErrorKind::parse, where + "accuracy must be correct, incorrect or unjudged");
    o.system = *system;
    o.accuracy = *accuracy;
    const std::string consistent = trim(cell(row, idx, "consistent"));
    if (!consistent.empty()) o.consistent = parse_bool(consistent, where + "consistent");
    try {
      const std::string answers = cell(row, idx, "answers");
      if (!answers.empty()) o.answers = json::parse(answers).get<std::vector<std::string>>();
      const std::string provenance = cell(row, idx, "provenance");
      if (!provenance.empty()) o.provenance = json::parse(provenance).get<std::vector<std::string>>();
    } catch (const json::exception& e) {
      throw Error(ErrorKind::parse, where + e.what());
    }
    o.error = cell(row, idx, "error");
    out.push_back(std::move(o));
  }
  return out;
}

std::string ratings_to_csv(const std::vector<SubjectiveRating>& ratings) {
  std::vector<std::vector<std::string>> rows = {{"query_id", "system", "relevance", "interpretation",
                                                 "domain_knowledge", "logic", "clarity", "overall"}};
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  for (const auto& r : ratings) {
    rows.push_back({r.query_id, std::string(to_string(r.system)), b(r.relevance), b(r.interpretation),
                    b(r.domain_knowledge), b(r.logic), b(r.clarity), std::to_string(r.overall)});
  }
  return write_csv(rows);
}

std::vector<SubjectiveRating> ratings_from_csv(std::string_view text) {
  const auto rows = read_csv(text);
  if (rows.empty()) throw Error(ErrorKind::parse, "ratings CSV is empty");
  const auto idx = header_index(rows[0], {"query_id", "system", "relevance", "interpretation",
                                          "domain_knowledge", "logic", "clarity", "overall"});
  std::vector<SubjectiveRating> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& row = rows[i];
    const std::string where = "ratings row " + std::to_string(i + 1) + ": ";
    SubjectiveRating r;
    r.query_id = cell(row, idx, "query_id");
    const auto system = parse_system(trim(cell(row, idx, "system")));
    if (!system) throw Error(ErrorKind::parse, where + "system must be engine or rag");
    r.system = *system;
    r.relevance = parse_bool(cell(row, idx, "relevance"), where + "relevance");
    r.interpretation = parse_bool(cell(row, idx, "interpretation"), where + "interpretation");
    r.domain_knowledge = parse_bool(cell(row, idx, "domain_knowledge"), where + "domain_knowledge");
    r.logic = parse_bool(cell(row, idx, "logic"), where + "logic");
    r.clarity = parse_bool(cell(row, idx, "clarity"), where + "clarity");
    try {
      r.overall = std::stoi(trim(cell(row, idx, "overall")));
    } catch (const std::exception&) {
      throw Error(ErrorKind::parse, where + "overall must be an integer");
    }
    if (r.overall < 1 || r.overall > 5) throw Error(ErrorKind::validation, where + "overall must be 1..5");
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------

EvalReport build_report(const std::vector<RunOutcome>& outcomes,
                        const std::vector<SubjectiveRating>& ratings) {
  EvalReport report;
  report.metrics = compute_metrics(outcomes);
  report.outcomes = outcomes;
  if (!ratings.empty()) report.ratings = summarize_ratings(ratings);

  // Pair per query: engine vs rag.
  std::map<std::string, const RunOutcome*> engine, rag;
  for (const auto& o : outcomes) (o.system == SystemKind::engine ? engine : rag)[o.query_id] = &o;
  std::vector<double> acc_a, acc_b, con_a, con_b;
  for (const auto& [id, e] : engine) {
    const auto it = rag.find(id);
    if (it == rag.end()) continue;
    const RunOutcome* r = it->second;
    if (e->accuracy != AccuracyLabel::unjudged && r->accuracy != AccuracyLabel::unjudged) {
      acc_a.push_back(e->accuracy == AccuracyLabel::correct ? 1 : 0);
      acc_b.push_back(r->accuracy == AccuracyLabel::correct ? 1 : 0);
    }
    if (e->consistent && r->consistent) {
      con_a.push_back(*e->consistent ? 1 : 0);
      con_b.push_back(*r->consistent ? 1 : 0);
    }
  }
  report.statistics = {{"accuracy_paired_t", ttest_json(acc_a, acc_b)},
                       {"consistency_paired_t", ttest_json(con_a, con_b)}};

  if (!ratings.empty()) {
    json chi = json::object();
    const RatingSummary* se = nullptr;
    const RatingSummary* sr = nullptr;
    for (const auto& s : report.ratings) (s.system == SystemKind::engine ? se : sr) = &s;
    for (std::size_t d = 0; d < kRatingDimensions.size(); ++d) {
      if (!se || !sr) {
        chi[kRatingDimensions[d]] = {{"error", "ratings for both systems are required"}};
        continue;
      }
      const std::array<std::array<double, 2>, 2> table = {
          {{static_cast<double>(se->positives[d]), static_cast<double>(se->n - se->positives[d])},
           {static_cast<double>(sr->positives[d]), static_cast<double>(sr->n - sr->positives[d])}}};
      try {
        chi[kRatingDimensions[d]] = {{"chi_squared", chi_squared_2x2(table)}, {"df", 1}};
      } catch (const Error& e) {
        chi[kRatingDimensions[d]] = {{"error", e.what()}};
      }
    }
    report.statistics["ratings_chi_squared"] = chi;
  }
  return report;
}

json report_to_json(const EvalReport& report) {
  json metrics = json::array();
  for (const auto& m : report.metrics) {
    json row = {{"system", to_string(m.system)},
                {"outcomes", m.outcomes},
                {"judged", m.judged},
                {"correct", m.correct},
                {"defined", m.defined},
                {"consistent", m.consistent},
                {"accuracy_percent", m.judged ? json(m.accuracy_percent()) : json(nullptr)},
                {"consistency_percent", m.defined ? json(m.consistency_percent()) : json(nullptr)}};
    metrics.push_back(row);
  }
  json ratings;
  if (report.ratings.empty()) {
    ratings = {{"note", "no subjective ratings supplied"}};
  } else {
    ratings = json::array();
    for (const auto& s : report.ratings) {
      json row = {{"system", to_string(s.system)}, {"n", s.n}, {"mean_overall", s.mean_overall}};
      for (std::size_t d = 0; d < kRatingDimensions.size(); ++d) row[kRatingDimensions[d]] = s.proportion(d);
      ratings.push_back(row);
    }
  }
  json provenance = json::array();
  for (const auto& o : report.outcomes) {
    provenance.push_back({{"query_id", o.query_id},
                          {"system", to_string(o.system)},
                          {"accuracy", to_string(o.accuracy)},
                          {"consistent", o.consistent ? json(*o.consistent) : json(nullptr)},
                          {"provenance", o.provenance},
                          {"error", o.error}});
  }
  return {{"metrics", metrics},
          {"statistics", report.statistics},
          {"ratings", ratings},
          {"per_query", provenance}};
}

std::string report_to_text(const EvalReport& report) {
  std::string out;
  for (const auto& m : report.metrics) {
    const std::string name(to_string(m.system));
    out += name + " accuracy: " +
           (m.judged ? m.accuracy_percent() + "% (" + std::to_string(m.correct) + "/" + std::to_string(m.judged) +
                           " judged, n=" + std::to_string(m.outcomes) + ")"
                     : std::string("not computable (no judged outcomes)")) +
           "\n";
    out += name + " consistency: " +
           (m.defined ? m.consistency_percent() + "% (" + std::to_string(m.consistent) + "/" +
                            std::to_string(m.defined) + ")"
                      : std::string("not computable (no repeated outcomes)")) +
           "\n";
  }
  for (const char* key : {"accuracy_paired_t", "consistency_paired_t"}) {
    const json& s = report.statistics[key];
    out += std::string(key) + ": " +
           (s.contains("t") ? "t(" + std::to_string(s["df"].get<int>()) + ") = " + fixed(s["t"].get<double>(), 2)
                            : "not computable (" + s.value("error", std::string("unknown")) + ")") +
           "\n";
  }
  if (report.ratings.empty()) {
    out += "ratings: none supplied\n";
  } else {
    for (const auto& s : report.ratings) {
      out += "ratings " + std::string(to_string(s.system)) + " (n=" + std::to_string(s.n) + "):";
      for (std::size_t d = 0; d < kRatingDimensions.size(); ++d) {
        out += std::string(" ") + kRatingDimensions[d] + "=" + fixed(100 * s.proportion(d), 2) + "%";
      }
      out += " overall=" + fixed(s.mean_overall, 2) + "\n";
    }
    const json& chi = report.statistics["ratings_chi_squared"];
    for (const char* d : kRatingDimensions) {
      const json& c = chi[d];
      out += std::string("chi-squared ") + d + ": " +
             (c.contains("chi_squared") ? "chi2(1) = " + fixed(c["chi_squared"].get<double>(), 2)
                                        : "not computable (" + c.value("error", std::string("unknown")) + ")") +
             "\n";
    }
  }
  return out;
}

std::vector<std::filesystem::path> export_report(const EvalReport& report, const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> written;
  std::vector<std::vector<std::string>> rows = {
      {"system", "outcomes", "judged", "correct", "accuracy_percent", "defined", "consistent", "consistency_percent"}};
  for (const auto& m : report.metrics) {
    rows.push_back({std::string(to_string(m.system)), std::to_string(m.outcomes), std::to_string(m.judged),
                    std::to_string(m.correct), m.judged ? m.accuracy_percent() : "",
                    std::to_string(m.defined), std::to_string(m.consistent),
                    m.defined ? m.consistency_percent() : ""});
  }
  written.push_back(dir / "metrics.csv");
  write_file(written.back().string(), write_csv(rows));

  written.push_back(dir / "report.json");
  write_file(written.back().string(), report_to_json(report).dump(2) + "\n");

  if (!report.ratings.empty()) {
    std::vector<std::vector<std::string>> r = {{"system", "dimension", "proportion", "n"}};
    for (const auto& s : report.ratings) {
      for (std::size_t d = 0; d < kRatingDimensions.size(); ++d) {
        r.push_back({std::string(to_string(s.system)), kRatingDimensions[d], fixed(s.proportion(d), 6),
                     std::to_string(s.n)});
      }
      r.push_back({std::string(to_string(s.system)), "mean_overall", fixed(s.mean_overall, 6), std::to_string(s.n)});
    }
    written.push_back(dir / "ratings_summary.csv");
    write_file(written.back().string(), write_csv(r));
  }
  return written;
}

// ---------------------------------------------------------------------------

std::vector<RunOutcome> run_corpus(const std::vector<QuerySpec>& corpus, const CorpusRunner& runner,
                                   const std::vector<SystemKind>& systems) {
  for (auto s : systems) {
    if (s == SystemKind::engine && !runner.engine) throw Error(ErrorKind::validation, "engine system needs an engine");
    if (s == SystemKind::rag && (!runner.rag || !runner.store)) {
      throw Error(ErrorKind::validation, "rag system needs a baseline and a store");
    }
  }
  struct Task {
    const QuerySpec* query;
    SystemKind system;
  };
  std::vector<Task> tasks;
  for (const auto& q : corpus) {
    for (auto s : systems) tasks.push_back({&q, s});
  }
  std::vector<RunOutcome> outcomes(tasks.size());

  auto work = [&](const Task& task) {
    const QuerySpec& q = *task.query;
    RunOutcome o;
    o.query_id = q.id;
    o.system = task.system;
    std::function<std::string(int)> once;
    std::optional<FlatIndex> index;
    if (task.system == SystemKind::engine) {
      once = [&](int rep) {
        RunSpec spec{q.id + "-engine-" + std::to_string(rep + 1), q.text, q.instructions, q.user_id, q.range};
        o.provenance.push_back("run:" + spec.run_id);
        RunResult r = run(*runner.engine, spec);
        if (!r.ok()) throw Error(ErrorKind::backend, r.error);
        return r.answer->text;
      };
    } else {
      index = runner.rag->build_index(*runner.store, q.user_id, q.range, runner.zone);
      once = [&](int rep) {
        o.provenance.push_back("rag:" + q.id + "-" + std::to_string(rep + 1));
        return runner.rag->answer(q.text, *index, q.instructions).text;
      };
    }
    if (!runner.provenance.empty()) o.provenance.push_back(runner.provenance);
    if (runner.repetitions >= 2) {
      ConsistencyResult c = measure_consistency(once, runner.repetitions, runner.comparator);
      o.answers = std::move(c.answers);
      o.error = c.error;
      if (c.consistent && o.answers.size() >= 3) o.consistent = c.consistent;
    } else {
      try {
        o.answers.push_back(once(0));
      } catch (const std::exception& e) {
        o.error = e.what();
      }
    }
    return o;
  };

  const int jobs = std::max(1, runner.jobs);
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < tasks.size(); i = next++) outcomes[i] = work(tasks[i]);
  };
  if (jobs == 1 || tasks.size() <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return outcomes;
}

}  // namespace senseloop
