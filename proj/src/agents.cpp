#include "senseloop/agents.hpp"

#include <algorithm>
#include <set>

namespace senseloop {

using nlohmann::json;

namespace {

const std::pair<const char*, const char*> kBuiltinPrompts[] = {
#include "senseloop/prompt_data.inc"
};

std::string role_name(const std::string& agent) {
  static const std::map<std::string, std::string> names = {
      {"plan", "planning agent"},
      {"next_step", "next-step agent"},
      {"seek", "information-seeking agent"},
      {"codegen", "code-generation agent"},
      {"local_sense", "local sensemaking agent"},
      {"global_sense", "global sensemaking agent"},
      {"present", "presentation agent"},
  };
  const auto it = names.find(agent);
  return it == names.end() ? agent : it->second;
}

/// Cuts at a UTF-8 boundary at or below `limit` bytes.
std::string truncate_text(const std::string& text, std::size_t limit) {
  if (text.size() <= limit) return text;
  std::size_t cut = limit;
  while (cut > 0 && (static_cast<unsigned char>(text[cut]) & 0xC0) == 0x80) --cut;
  return text.substr(0, cut) + " ...[truncated]";
}

std::string tail_text(const std::string& text, std::size_t limit) {
  if (text.size() <= limit) return text;
  std::size_t start = text.size() - limit;
  while (start < text.size() && (static_cast<unsigned char>(text[start]) & 0xC0) == 0x80) ++start;
  return "[...]" + text.substr(start);
}

json parse_object(const std::string& reply) {
  const auto body = extract_fenced(reply, "json");
  if (!body) throw Error(ErrorKind::parse, "no ```json block in the reply");
  json j;
  try {
    j = json::parse(*body);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::parse, std::string("the ```json block is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorKind::parse, "the ```json block is not a JSON object");
  return j;
}

std::string require_string(const json& j, const char* key, bool allow_empty = false) {
  if (!j.contains(key) || !j[key].is_string()) {
    throw Error(ErrorKind::parse, std::string("field \"") + key + "\" must be a string");
  }
  std::string value = trim(j[key].get<std::string>());
  if (!allow_empty && value.empty()) {
    throw Error(ErrorKind::parse, std::string("field \"") + key + "\" must not be empty");
  }
  return value;
}

std::vector<std::string> string_list(const json& j, const char* key) {
  std::vector<std::string> out;
  if (!j.contains(key) || j[key].is_null()) return out;
  if (!j[key].is_array()) throw Error(ErrorKind::parse, std::string("field \"") + key + "\" must be a list");
  for (const auto& item : j[key]) {
    if (!item.is_string()) {
      throw Error(ErrorKind::parse, std::string("field \"") + key + "\" must hold strings");
    }
    std::string s = trim(item.get<std::string>());
    if (!s.empty()) out.push_back(std::move(s));
  }
  return out;
}

json streams_to_json(const std::vector<StreamKind>& streams) {
  json out = json::array();
  for (auto s : streams) out.push_back(to_string(s));
  return out;
}

std::vector<StreamKind> streams_from_json(const json& j) {
  std::vector<StreamKind> out;
  if (!j.is_array()) return out;
  for (const auto& s : j) {
    if (!s.is_string()) continue;
    if (auto kind = parse_stream(s.get<std::string>())) out.push_back(*kind);
  }
  return out;
}

void add_unique(std::vector<StreamKind>& into, StreamKind s) {
  if (std::find(into.begin(), into.end(), s) == into.end()) into.push_back(s);
}

/// Null, empty string or container, or a container of empty values only.
bool is_empty_value(const json& v) {
  if (v.is_null()) return true;
  if (v.is_string()) return v.get<std::string>().empty();
  if (v.is_array() || v.is_object()) {
    return std::all_of(v.begin(), v.end(), [](const json& c) { return is_empty_value(c); });
  }
  return false;
}

void collect_numbers(const json& v, std::vector<double>& out) {
  if (v.is_number()) {
    out.push_back(v.get<double>());
  } else if (v.is_string()) {
    for (const auto& t : extract_numbers(v.get<std::string>())) out.push_back(t.value);
  } else if (v.is_object()) {
    for (auto it = v.begin(); it != v.end(); ++it) {
      for (const auto& t : extract_numbers(it.key())) out.push_back(t.value);
      collect_numbers(it.value(), out);
    }
  } else if (v.is_array()) {
    for (const auto& c : v) collect_numbers(c, out);
  }
}

bool mentions_stream_or_request(const std::string& note, const InformationRequest& request) {
  const std::string lower = to_lower(note);
  if (lower.find(to_lower(request.text)) != std::string::npos) return true;
  if (!streams_mentioned(note).empty()) return true;
  for (auto s : kAllStreams) {
    if (lower.find(std::string(to_string(s))) != std::string::npos) return true;
  }
  return false;
}

std::string join_streams(const std::vector<StreamKind>& streams) {
  std::string out;
  for (std::size_t i = 0; i < streams.size(); ++i) {
    if (i) out += i + 1 == streams.size() ? " and " : ", ";
    out += std::string(to_string(streams[i]));
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

PromptSet PromptSet::builtin() {
  PromptSet set;
  for (const auto& [name, body] : kBuiltinPrompts) set.templates_[name] = body;
  return set;
}

PromptSet PromptSet::with_overrides(const std::filesystem::path& dir) {
  PromptSet set = builtin();
  std::error_code ec;
  for (const auto& entry : std::filesystem::directory_iterator(dir, ec)) {
    if (entry.path().extension() == ".txt") {
      set.templates_[entry.path().stem().string()] = read_file(entry.path().string());
    }
  }
  if (ec) throw Error(ErrorKind::io, "cannot read prompt directory '" + dir.string() + "'");
  return set;
}

const std::string& PromptSet::get(const std::string& name) const {
  const auto it = templates_.find(name);
  if (it == templates_.end()) throw Error(ErrorKind::not_found, "no prompt template '" + name + "'");
  return it->second;
}

std::string PromptSet::render(const std::string& name,
                              const std::map<std::string, std::string>& slots) const {
  const std::string& text = get(name);
  std::string out;
  std::size_t pos = 0;
  while (true) {
    const auto open = text.find("{{", pos);
    if (open == std::string::npos) break;
    const auto close = text.find("}}", open + 2);
    if (close == std::string::npos) break;
    const std::string slot = trim(std::string_view(text).substr(open + 2, close - open - 2));
    const auto it = slots.find(slot);
    if (it == slots.end()) {
      throw Error(ErrorKind::validation, "prompt '" + name + "' needs slot '" + slot + "'");
    }
    out.append(text, pos, open - pos);
    out += it->second;
    pos = close + 2;
  }
  out.append(text, pos, std::string::npos);
  return out;
}

// ---------------------------------------------------------------------------

std::string_view to_string(Verdict verdict) {
  switch (verdict) {
    case Verdict::continue_run: return "continue";
    case Verdict::halt_answered: return "halt_answered";
    case Verdict::halt_failure: return "halt_failure";
  }
  return "continue";
}

std::optional<Verdict> parse_verdict(std::string_view text) {
  if (text == "continue") return Verdict::continue_run;
  if (text == "halt_answered") return Verdict::halt_answered;
  if (text == "halt_failure") return Verdict::halt_failure;
  return std::nullopt;
}

json to_json(const ActionPlan& v) {
  return {{"answerable", v.answerable}, {"steps", v.steps}, {"rationale", v.rationale}};
}

json to_json(const NextStepDecision& v) {
  return {{"verdict", to_string(v.verdict)}, {"reason", v.reason}, {"model_called", v.model_called}};
}

json to_json(const InformationRequest& v) {
  return {{"text", v.text}, {"target_streams", streams_to_json(v.target_streams)}, {"repeat", v.repeat}};
}

json to_json(const Understanding& v) {
  return {{"narrative", v.narrative},
          {"needs", v.needs},
          {"failure_note", v.failure_note ? json(*v.failure_note) : json(nullptr)}};
}

json to_json(const CodeAttempt& v) {
  return {{"program", v.program},          {"status", to_string(v.status)},
          {"exit_code", v.exit_code},      {"error", v.error},
          {"bridge_calls", v.bridge_calls}, {"elapsed_seconds", v.elapsed_seconds}};
}

json to_json(const FulfillResult& v) {
  json attempts = json::array();
  for (const auto& a : v.attempts) attempts.push_back(to_json(a));
  return {{"ok", v.ok},           {"value", v.value},       {"failure", v.failure},
          {"helpers", v.helpers}, {"attempts", attempts}};
}

json to_json(const MemoryEntry& v) {
  return {{"request", to_json(v.request)},
          {"summary", v.summary},
          {"raw_digest", v.raw_digest},
          {"failure", v.failure}};
}

json to_json(const Answer& v) {
  return {{"text", v.text}, {"presentation_instructions", v.presentation_instructions}};
}

ActionPlan plan_from_json(const json& j) {
  return {j.at("answerable").get<bool>(), j.at("steps").get<std::vector<std::string>>(),
          j.at("rationale").get<std::string>()};
}

NextStepDecision decision_from_json(const json& j) {
  const auto verdict = parse_verdict(j.at("verdict").get<std::string>());
  if (!verdict) throw Error(ErrorKind::parse, "unknown verdict");
  return {*verdict, j.at("reason").get<std::string>(), j.value("model_called", true)};
}

InformationRequest request_from_json_value(const json& j) {
  return {j.at("text").get<std::string>(), streams_from_json(j.value("target_streams", json::array())),
          j.value("repeat", false)};
}

Understanding understanding_from_json(const json& j) {
  Understanding u;
  u.narrative = j.value("narrative", "");
  u.needs = j.value("needs", std::vector<std::string>{});
  if (j.contains("failure_note") && j["failure_note"].is_string()) {
    u.failure_note = j["failure_note"].get<std::string>();
  }
  return u;
}

CodeAttempt attempt_from_json(const json& j) {
  CodeAttempt a;
  a.program = j.at("program").get<std::string>();
  const std::string status = j.at("status").get<std::string>();
  for (auto k : {ExitKind::success, ExitKind::nonzero_exit, ExitKind::signaled, ExitKind::timeout}) {
    if (to_string(k) == status) a.status = k;
  }
  a.exit_code = j.value("exit_code", 0);
  a.error = j.value("error", "");
  a.bridge_calls = j.value("bridge_calls", std::size_t{0});
  a.elapsed_seconds = j.value("elapsed_seconds", 0.0);
  return a;
}

FulfillResult fulfill_from_json(const json& j) {
  FulfillResult r;
  r.ok = j.at("ok").get<bool>();
  r.value = j.value("value", json());
  r.failure = j.value("failure", "");
  r.helpers = j.value("helpers", std::vector<std::string>{});
  for (const auto& a : j.value("attempts", json::array())) r.attempts.push_back(attempt_from_json(a));
  return r;
}

MemoryEntry memory_from_json(const json& j) {
  return {request_from_json_value(j.at("request")), j.at("summary").get<std::string>(),
          j.value("raw_digest", ""), j.value("failure", false)};
}

Answer answer_from_json(const json& j) {
  return {j.at("text").get<std::string>(), j.value("presentation_instructions", "")};
}

// ---------------------------------------------------------------------------

std::optional<std::string> extract_fenced(std::string_view text, std::string_view lang) {
  std::optional<std::string> found;
  std::size_t pos = 0;
  while (true) {
    const auto fence = text.find("```", pos);
    if (fence == std::string_view::npos) break;
    const auto line_end = text.find('\n', fence);
    if (line_end == std::string_view::npos) break;
    const std::string tag = to_lower(trim(text.substr(fence + 3, line_end - fence - 3)));
    const auto close = text.find("```", line_end + 1);
    if (close == std::string_view::npos) break;
    const bool match = tag == lang || (lang == "python" && (tag == "py" || tag == "python3"));
    if (match) found = std::string(text.substr(line_end + 1, close - line_end - 1));
    pos = close + 3;
  }
  if (!found && lang == "json") {
    const std::string bare = trim(text);
    if (!bare.empty() && bare.front() == '{' && bare.back() == '}') found = bare;
  }
  return found;
}

std::vector<NumberToken> unsupported_numbers(std::string_view summary, const json& result,
                                             std::string_view request_text) {
  std::vector<double> candidates;
  collect_numbers(result, candidates);
  for (const auto& t : extract_numbers(request_text)) candidates.push_back(t.value);
  std::vector<NumberToken> unsupported;
  for (const auto& token : extract_numbers(summary)) {
    const bool supported = std::any_of(candidates.begin(), candidates.end(),
                                       [&](double c) { return number_matches(token, c); });
    if (!supported) unsupported.push_back(token);
  }
  return unsupported;
}

bool wants_structured_output(std::string_view instructions) {
  const std::string lower = to_lower(instructions);
  for (const char* cue : {"json", "machine-readable", "machine readable", "structured output"}) {
    if (lower.find(cue) != std::string::npos) return true;
  }
  return false;
}

std::string render_plan(const ActionPlan& plan) {
  if (!plan.answerable) return "Not answerable with the available data. " + plan.rationale;
  std::string out;
  for (std::size_t i = 0; i < plan.steps.size(); ++i) {
    out += std::to_string(i + 1) + ". " + plan.steps[i] + "\n";
  }
  if (!plan.rationale.empty()) out += "Rationale: " + plan.rationale;
  return trim(out);
}

std::string render_understanding(const Understanding& u) {
  if (u.empty()) return "(empty)";
  std::string out = u.narrative;
  if (!u.needs.empty()) {
    out += "\nAdditional data that would help:";
    for (const auto& n : u.needs) out += "\n- " + n;
  }
  if (u.failure_note) out += "\nFailure note: " + *u.failure_note;
  return out;
}

// ---------------------------------------------------------------------------

Agents::Agents(ChatBackend& backend, AgentConfig config, PromptSet prompts)
    : backend_(backend), config_(std::move(config)), prompts_(std::move(prompts)) {
  if (config_.codegen_attempts < 1) {
    throw Error(ErrorKind::validation, "codegen_attempts must be at least 1");
  }
}

void Agents::emit(const std::string& phase, const json& payload) const {
  if (observer_) observer_(phase, payload);
}

ChatRequest Agents::make_request(const std::string& role, const std::string& user_content) const {
  ChatRequest request;
  request.model = config_.model;
  request.temperature = config_.temperature;
  request.top_p = config_.top_p;
  request.messages.push_back({Role::system, prompts_.render("system", {{"role", role_name(role)}})});
  request.messages.push_back({Role::user, user_content});
  return request;
}

template <typename T>
T Agents::ask(const std::string& role, const std::string& prompt,
              const std::function<T(const std::string&)>& parse, json& log) {
  ChatRequest request = make_request(role, prompt);
  log["replies"] = json::array();
  std::string reply = backend_.complete(request);
  log["replies"].push_back(reply);
  try {
    return parse(reply);
  } catch (const Error& first) {
    if (first.kind() != ErrorKind::parse) throw;
    log["reask_reason"] = first.what();
    request.messages.push_back({Role::assistant, reply});
    request.messages.push_back({Role::user, prompts_.render("reask", {{"error", first.what()}})});
    reply = backend_.complete(request);
    log["replies"].push_back(reply);
    try {
      return parse(reply);
    } catch (const Error& second) {
      if (second.kind() != ErrorKind::parse) throw;
      log["error"] = second.what();
      emit(role, log);
      throw Error(ErrorKind::parse, role_name(role) + " reply unusable after a re-ask: " + second.what());
    }
  }
}

std::string Agents::render_memory(const std::vector<MemoryEntry>& memory) const {
  if (memory.empty()) return "(empty)";
  std::string out;
  for (std::size_t i = 0; i < memory.size(); ++i) {
    std::string entry = "[" + std::to_string(i + 1) + "] Request: " + memory[i].request.text +
                        "\n    Result: " + memory[i].summary;
    out += truncate_text(entry, config_.memory_budget) + "\n";
  }
  return trim(out);
}

ActionPlan Agents::plan(const std::string& query, const std::string& databases) {
  json log = {{"input", {{"query", query}}}};
  const std::string prompt = prompts_.render("plan", {{"query", query}, {"databases", databases}});
  const std::function<ActionPlan(const std::string&)> parse = [](const std::string& reply) {
    const json j = parse_object(reply);
    if (!j.contains("answerable") || !j["answerable"].is_boolean()) {
      throw Error(ErrorKind::parse, "field \"answerable\" must be true or false");
    }
    ActionPlan p;
    p.answerable = j["answerable"].get<bool>();
    p.steps = string_list(j, "steps");
    p.rationale = j.contains("rationale") && j["rationale"].is_string()
                      ? trim(j["rationale"].get<std::string>())
                      : "";
    if (!p.answerable) {
      p.steps.clear();
      if (p.rationale.empty()) throw Error(ErrorKind::parse, "an unanswerable plan needs a rationale");
    } else if (p.steps.empty()) {
      throw Error(ErrorKind::parse, "an answerable plan needs at least one step");
    }
    return p;
  };
  ActionPlan result = ask<ActionPlan>("plan", prompt, parse, log);
  log["output"] = to_json(result);
  emit("plan", log);
  return result;
}

NextStepDecision Agents::decide_next(const std::string& query, const ActionPlan& plan,
                                     const Understanding& understanding, int iteration,
                                     int max_iterations) {
  json log = {{"input", {{"iteration", iteration}, {"max_iterations", max_iterations}}}};
  NextStepDecision decision;
  if (understanding.empty()) {
    decision = {Verdict::continue_run, "nothing has been gathered yet", false};
  } else if (understanding.failure_note) {
    decision = {Verdict::halt_failure, *understanding.failure_note, false};
  } else {
    const std::string prompt = prompts_.render(
        "next_step", {{"query", query},
                      {"plan", render_plan(plan)},
                      {"understanding", render_understanding(understanding)},
                      {"iteration", std::to_string(iteration)},
                      {"max_iterations", std::to_string(max_iterations)}});
    const std::function<NextStepDecision(const std::string&)> parse = [](const std::string& reply) {
      const json j = parse_object(reply);
      const auto verdict = parse_verdict(require_string(j, "verdict"));
      if (!verdict) {
        throw Error(ErrorKind::parse,
                    "\"verdict\" must be one of continue, halt_answered, halt_failure");
      }
      const std::string reason =
          j.contains("reason") && j["reason"].is_string() ? trim(j["reason"].get<std::string>()) : "";
      return NextStepDecision{*verdict, reason, true};
    };
    decision = ask<NextStepDecision>("next_step", prompt, parse, log);
    // Halting for failure needs a recorded failure; without one, keep going.
    if (decision.verdict == Verdict::halt_failure) {
      log["coerced_from"] = "halt_failure";
      decision.verdict = Verdict::continue_run;
    }
  }
  log["output"] = to_json(decision);
  emit("next_step", log);
  return decision;
}

InformationRequest Agents::seek(const std::string& query, const std::string& user_id,
                                const std::string& period, const ActionPlan& plan,
                                const std::vector<MemoryEntry>& memory,
                                const Understanding& understanding) {
  json log = {{"input", {{"memory_size", memory.size()}}}};
  std::string names;
  for (auto s : kAllStreams) names += (names.empty() ? "" : ", ") + std::string(to_string(s));
  const std::string prompt =
      prompts_.render("seek", {{"query", query},
                               {"user_id", user_id},
                               {"period", period},
                               {"databases", describe_databases()},
                               {"plan", render_plan(plan)},
                               {"memory", render_memory(memory)},
                               {"understanding", render_understanding(understanding)},
                               {"stream_names", names}});
  const std::function<InformationRequest(const std::string&)> parse = [](const std::string& reply) {
    const json j = parse_object(reply);
    InformationRequest r;
    r.text = require_string(j, "request");
    if (j.contains("streams")) r.target_streams = streams_from_json(j["streams"]);
    return r;
  };
  InformationRequest request = ask<InformationRequest>("seek", prompt, parse, log);
  for (auto s : streams_mentioned(request.text)) add_unique(request.target_streams, s);
  const std::string norm = to_lower(normalize_whitespace(request.text));
  request.repeat = std::any_of(memory.begin(), memory.end(), [&](const MemoryEntry& m) {
    return to_lower(normalize_whitespace(m.request.text)) == norm;
  });
  log["output"] = to_json(request);
  emit("seek", log);
  return request;
}

std::string Agents::generate_code(const InformationRequest& request, const std::string& user_id,
                                  const std::string& helper_specs,
                                  const std::optional<std::string>& prior_error) {
  json log = {{"input", {{"request", request.text}, {"prior_error", prior_error ? json(*prior_error) : json()}}}};
  const std::string retry =
      prior_error ? prompts_.render("codegen_retry", {{"error", *prior_error}}) : std::string();
  const std::string prompt = prompts_.render("codegen", {{"request", request.text},
                                                         {"user_id", user_id},
                                                         {"helpers", helper_specs},
                                                         {"prior_error", retry}});
  const std::function<std::string(const std::string&)> parse = [](const std::string& reply) {
    auto program = extract_fenced(reply, "python");
    if (!program || trim(*program).empty()) {
      throw Error(ErrorKind::parse, "no ```python block in the reply");
    }
    return *program;
  };
  std::string program = ask<std::string>("codegen", prompt, parse, log);
  log["output"] = {{"program", program}};
  emit("codegen", log);
  return program;
}

FulfillResult Agents::fulfill(const InformationRequest& request, const ExecutionContext& exec) {
  FulfillResult result;
  json log = {{"input", to_json(request)}};

  // Helpers tagged with any stream the request names or targets.
  std::vector<StreamKind> streams = exec.registry.select_relevant(request.text).streams;
  for (auto s : request.target_streams) add_unique(streams, s);
  std::vector<HelperSignature> exposed;
  for (const auto& name : exec.registry.names()) {
    const HelperSpec& spec = exec.registry.spec(name);
    const bool relevant = std::any_of(spec.stream_tags.begin(), spec.stream_tags.end(), [&](StreamKind t) {
      return std::find(streams.begin(), streams.end(), t) != streams.end();
    });
    if (!relevant) continue;
    result.helpers.push_back(name);
    HelperSignature sig{name, {}};
    for (const auto& p : spec.parameters) sig.params.push_back(p.name);
    exposed.push_back(std::move(sig));
  }

  auto finish = [&]() {
    log["output"] = to_json(result);
    emit("dm", log);
    return result;
  };

  if (result.helpers.empty()) {
    result.failure = "No available database covers this request: \"" + request.text +
                     "\". The requested data is not collected by any database.";
    return finish();
  }

  const std::string specs = exec.registry.describe(result.helpers);
  std::size_t nonempty_reads = 0;
  ExecutionRequest run;
  run.limits = config_.limits;
  run.bridge.exposed = exposed;
  run.bridge.handler = [&](const std::string& helper, const json& args) {
    json value = exec.registry.invoke(helper, args, exec.helpers);
    if (!is_empty_value(value)) ++nonempty_reads;
    return value;
  };

  std::optional<std::string> prior_error;
  for (int attempt = 1; attempt <= config_.codegen_attempts; ++attempt) {
    CodeAttempt record;
    try {
      record.program = generate_code(request, exec.user_id, specs, prior_error);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::parse) throw;
      record.error = e.what();
      record.status = ExitKind::nonzero_exit;
      prior_error = record.error;
      result.attempts.push_back(std::move(record));
      continue;
    }
    run.program = record.program;
    nonempty_reads = 0;
    const ExecutionResult out = exec.sandbox.execute(run);
    record.status = out.status;
    record.exit_code = out.exit_code;
    record.bridge_calls = out.bridge_calls.size();
    record.elapsed_seconds = out.duration;
    if (out.status == ExitKind::timeout) {
      record.error = "the program exceeded the time limit of " +
                     std::to_string(run.limits.wall_clock.count() / 1000) + " s";
    } else if (!out.succeeded()) {
      record.error = tail_text(out.stderr_text.empty() ? "the program failed with exit code " +
                                                             std::to_string(out.exit_code)
                                                       : out.stderr_text,
                               2000);
    } else if (!out.result_value) {
      record.error = out.result_error.empty() ? "the program did not call emit_result(value)"
                                              : out.result_error;
    }
    if (out.output_truncated) record.error += record.error.empty() ? "" : " (output truncated)";

    json calls = json::array();
    for (const auto& c : out.bridge_calls) {
      json call = {{"helper", c.helper}, {"args", c.args}, {"ok", c.ok}};
      if (!c.ok) call["error"] = c.error;
      calls.push_back(std::move(call));
    }
    emit("sandbox", {{"attempt", attempt},
                     {"status", to_string(out.status)},
                     {"exit_code", out.exit_code},
                     {"error", record.error},
                     {"bridge_calls", calls},
                     {"elapsed_seconds", out.duration}});

    const bool ok = record.error.empty();
    result.attempts.push_back(record);
    if (!ok) {
      prior_error = record.error;
      continue;
    }
    if (nonempty_reads == 0) {
      std::vector<StreamKind> read;
      for (const auto& c : out.bridge_calls) {
        if (!exec.registry.contains(c.helper)) continue;
        for (auto t : exec.registry.spec(c.helper).stream_tags) add_unique(read, t);
      }
      if (read.empty()) read = streams;
      result.failure = "No records: no " + join_streams(read) + " data was found for participant " +
                       exec.user_id + " (request: \"" + request.text + "\").";
      return finish();
    }
    result.ok = true;
    result.value = *out.result_value;
    return finish();
  }
  result.failure = "The request \"" + request.text + "\" could not be completed after " +
                   std::to_string(config_.codegen_attempts) +
                   " code generation attempts. Last error: " + prior_error.value_or("unknown");
  return finish();
}

std::string Agents::summarize_local(const InformationRequest& request, const FulfillResult& result) {
  json log = {{"input", {{"request", request.text}, {"ok", result.ok}}}};
  std::string summary;
  if (!result.ok) {
    summary = result.failure;
    log["model_called"] = false;
  } else if (is_empty_value(result.value)) {
    summary = "The request \"" + request.text + "\" returned no matching data.";
    log["model_called"] = false;
  } else {
    const std::string shown = truncate_text(result.value.dump(), config_.memory_budget);
    const std::string prompt =
        prompts_.render("local_sense", {{"request", request.text}, {"result", shown}});
    const json& value = result.value;
    const std::string& request_text = request.text;
    const std::function<std::string(const std::string&)> parse = [&](const std::string& reply) {
      const json j = parse_object(reply);
      std::string s = require_string(j, "summary");
      const auto bad = unsupported_numbers(s, value, request_text);
      if (!bad.empty()) {
        std::string list;
        for (const auto& t : bad) list += (list.empty() ? "" : ", ") + t.text;
        throw Error(ErrorKind::parse, "the summary contains numbers that are not in the result: " + list);
      }
      return s;
    };
    summary = ask<std::string>("local_sense", prompt, parse, log);
    log["model_called"] = true;
  }
  log["output"] = {{"summary", summary}};
  emit("local_sense", log);
  return summary;
}

Understanding Agents::update_understanding(const std::string& query, const ActionPlan& plan,
                                           const Understanding& previous,
                                           const std::vector<MemoryEntry>& memory) {
  if (memory.empty()) throw Error(ErrorKind::state, "understanding update needs at least one memory entry");
  json log = {{"input", {{"memory_size", memory.size()}}}};
  const std::string prompt =
      prompts_.render("global_sense", {{"query", query},
                                       {"databases", describe_databases()},
                                       {"plan", render_plan(plan)},
                                       {"understanding", render_understanding(previous)},
                                       {"memory", render_memory(memory)}});
  const std::function<Understanding(const std::string&)> parse = [](const std::string& reply) {
    const json j = parse_object(reply);
    Understanding u;
    u.narrative = require_string(j, "narrative");
    u.needs = string_list(j, "needs");
    if (j.contains("failure_note") && j["failure_note"].is_string()) {
      std::string note = trim(j["failure_note"].get<std::string>());
      if (!note.empty()) u.failure_note = std::move(note);
    }
    return u;
  };
  Understanding u = ask<Understanding>("global_sense", prompt, parse, log);
  const MemoryEntry& newest = memory.back();
  if (newest.failure && !u.failure_note) u.failure_note = newest.summary;
  if (u.failure_note && !mentions_stream_or_request(*u.failure_note, newest.request)) {
    *u.failure_note += " (affected request: \"" + newest.request.text + "\")";
  }
  log["output"] = to_json(u);
  emit("global_sense", log);
  return u;
}

Answer Agents::present(const std::string& query, const Understanding& understanding,
                       const std::string& outcome, const std::string& instructions) {
  const bool structured = wants_structured_output(instructions);
  json log = {{"input", {{"outcome", outcome}, {"instructions", instructions}, {"structured", structured}}}};
  const std::string note =
      structured ? "The instructions ask for machine-readable output, so \"answer\" must be a JSON object, not a string."
                 : "";
  const std::string prompt = prompts_.render("present", {{"query", query},
                                                         {"understanding", render_understanding(understanding)},
                                                         {"outcome", outcome},
                                                         {"instructions", instructions},
                                                         {"format_note", note}});
  const std::function<std::string(const std::string&)> parse = [structured](const std::string& reply) {
    const json j = parse_object(reply);
    if (!j.contains("answer")) throw Error(ErrorKind::parse, "field \"answer\" is missing");
    const json& a = j["answer"];
    if (structured) {
      if (a.is_object()) return a.dump();
      if (a.is_string()) {
        try {
          const json inner = json::parse(a.get<std::string>());
          if (inner.is_object()) return inner.dump();
        } catch (const json::exception&) {
        }
      }
      throw Error(ErrorKind::parse, "\"answer\" must be a JSON object for machine-readable output");
    }
    return require_string(j, "answer");
  };
  Answer answer{ask<std::string>("present", prompt, parse, log), instructions};
  log["output"] = to_json(answer);
  emit("present", log);
  return answer;
}

}  // namespace senseloop
