#include "senseloop/orchestrator.hpp"

#include <chrono>

namespace senseloop {

using nlohmann::json;

namespace {

constexpr RunStatus kAllStatuses[] = {
    RunStatus::pending,      RunStatus::planning,     RunStatus::seeking,
    RunStatus::executing,    RunStatus::local_sense,  RunStatus::global_sense,
    RunStatus::deciding,     RunStatus::answered,     RunStatus::unanswerable,
    RunStatus::halted_failure, RunStatus::cutoff,
};

template <typename T, typename F>
json optional_json(const std::optional<T>& v, F&& convert) {
  return v ? convert(*v) : json(nullptr);
}

double system_seconds() {
  return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

/// Drops measured durations and wall times so traces compare across runs.
json strip_timing(const json& v) {
  if (v.is_object()) {
    json out = json::object();
    for (auto it = v.begin(); it != v.end(); ++it) {
      if (it.key() == "elapsed_seconds" || it.key() == "wall_time") continue;
      out[it.key()] = strip_timing(it.value());
    }
    return out;
  }
  if (v.is_array()) {
    json out = json::array();
    for (const auto& c : v) out.push_back(strip_timing(c));
    return out;
  }
  return v;
}

}  // namespace

std::string_view to_string(RunStatus status) {
  switch (status) {
    case RunStatus::pending: return "pending";
    case RunStatus::planning: return "planning";
    case RunStatus::seeking: return "seeking";
    case RunStatus::executing: return "executing";
    case RunStatus::local_sense: return "local_sense";
    case RunStatus::global_sense: return "global_sense";
    case RunStatus::deciding: return "deciding";
    case RunStatus::answered: return "answered";
    case RunStatus::unanswerable: return "unanswerable";
    case RunStatus::halted_failure: return "halted_failure";
    case RunStatus::cutoff: return "cutoff";
  }
  return "pending";
}

std::optional<RunStatus> parse_run_status(std::string_view text) {
  for (auto s : kAllStatuses) {
    if (to_string(s) == text) return s;
  }
  return std::nullopt;
}

bool is_terminal(RunStatus status) {
  return status == RunStatus::answered || status == RunStatus::unanswerable ||
         status == RunStatus::halted_failure || status == RunStatus::cutoff;
}

json to_json(const RunState& s) {
  json memory = json::array();
  for (const auto& m : s.memory) memory.push_back(to_json(m));
  json spec = {{"run_id", s.spec.run_id},
               {"query", s.spec.query},
               {"instructions", s.spec.instructions},
               {"user_id", s.spec.user_id},
               {"period", optional_json(s.spec.period, [](const TimeRange& r) {
                  return json{{"start", r.start}, {"end", r.end}};
                })}};
  return {
      {"spec", spec},
      {"plan", optional_json(s.plan, [](const ActionPlan& p) { return to_json(p); })},
      {"memory", memory},
      {"understanding", to_json(s.understanding)},
      {"iteration", s.iteration},
      {"max_iterations", s.max_iterations},
      {"status", to_string(s.status)},
      {"last_decision", optional_json(s.last_decision, [](const NextStepDecision& d) { return to_json(d); })},
      {"pending_request", optional_json(s.pending_request, [](const InformationRequest& r) { return to_json(r); })},
      {"pending_result", optional_json(s.pending_result, [](const FulfillResult& r) { return to_json(r); })},
      {"answer", optional_json(s.answer, [](const Answer& a) { return to_json(a); })},
      {"error", s.error},
  };
}

RunState run_state_from_json(const json& j) {
  RunState s;
  const json& spec = j.at("spec");
  s.spec.run_id = spec.at("run_id").get<std::string>();
  s.spec.query = spec.at("query").get<std::string>();
  s.spec.instructions = spec.value("instructions", "");
  s.spec.user_id = spec.value("user_id", "");
  if (spec.contains("period") && spec["period"].is_object()) {
    s.spec.period = TimeRange{spec["period"].at("start").get<double>(), spec["period"].at("end").get<double>()};
  }
  if (j.contains("plan") && !j["plan"].is_null()) s.plan = plan_from_json(j["plan"]);
  for (const auto& m : j.value("memory", json::array())) s.memory.push_back(memory_from_json(m));
  s.understanding = understanding_from_json(j.value("understanding", json::object()));
  s.iteration = j.value("iteration", 0);
  s.max_iterations = j.value("max_iterations", 5);
  const auto status = parse_run_status(j.at("status").get<std::string>());
  if (!status) throw Error(ErrorKind::parse, "unknown run status in snapshot");
  s.status = *status;
  if (j.contains("last_decision") && !j["last_decision"].is_null()) {
    s.last_decision = decision_from_json(j["last_decision"]);
  }
  if (j.contains("pending_request") && !j["pending_request"].is_null()) {
    s.pending_request = request_from_json_value(j["pending_request"]);
  }
  if (j.contains("pending_result") && !j["pending_result"].is_null()) {
    s.pending_result = fulfill_from_json(j["pending_result"]);
  }
  if (j.contains("answer") && !j["answer"].is_null()) s.answer = answer_from_json(j["answer"]);
  s.error = j.value("error", "");
  return s;
}

json to_json(const TraceEvent& e) {
  return {{"run_id", e.run_id}, {"seq", e.seq}, {"phase", e.phase}, {"payload", e.payload},
          {"wall_time", e.wall_time}};
}

TraceEvent trace_event_from_json(const json& j) {
  return {j.at("run_id").get<std::string>(), j.at("seq").get<std::uint64_t>(),
          j.at("phase").get<std::string>(), j.value("payload", json::object()),
          j.value("wall_time", 0.0)};
}

std::string canonical_trace(const std::vector<TraceEvent>& trace) {
  std::string out;
  for (const auto& e : trace) {
    out += json{{"run_id", e.run_id}, {"seq", e.seq}, {"phase", e.phase},
                {"payload", strip_timing(e.payload)}}
               .dump() +
           "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------

Run::Run(const Engine& engine, RunSpec spec)
    : engine_(engine),
      helper_ctx_{engine.store, engine.zone, engine.predictor},
      agents_(engine.backend, engine.config.agent, engine.prompts) {
  if (trim(spec.query).empty()) throw Error(ErrorKind::validation, "query must not be empty");
  if (spec.run_id.empty()) throw Error(ErrorKind::validation, "run_id must not be empty");
  if (engine.config.max_iterations < 1) {
    throw Error(ErrorKind::validation, "max_iterations must be at least 1");
  }
  if (spec.period && !spec.period->valid()) throw Error(ErrorKind::validation, "period end precedes start");
  state_.spec = std::move(spec);
  state_.max_iterations = engine.config.max_iterations;
  agents_.set_observer([this](const std::string& phase, const json& payload) { emit(phase, payload); });
}

void Run::emit(const std::string& phase, json payload) {
  TraceEvent event;
  event.run_id = state_.spec.run_id;
  event.seq = trace_.size();
  event.phase = phase;
  event.payload = std::move(payload);
  event.wall_time = clock_ ? clock_() : system_seconds();
  trace_.push_back(event);
  if (listener_) listener_(trace_.back());
}

void Run::transition(RunStatus next) {
  state_.status = next;
  // Terminal statuses are announced by the final event from present().
  if (!is_terminal(next)) {
    emit(std::string(to_string(next)), {{"status", to_string(next)}, {"iteration", state_.iteration}});
  }
}

std::string Run::period_text() const {
  if (!state_.spec.period) return "not specified; take it from the query";
  return "from " + engine_.zone.format(state_.spec.period->start) + " to " +
         engine_.zone.format(state_.spec.period->end) + " (local time)";
}

void Run::step() {
  switch (state_.status) {
    case RunStatus::pending:
      emit("run", {{"query", state_.spec.query},
                   {"instructions", state_.spec.instructions},
                   {"user_id", state_.spec.user_id},
                   {"max_iterations", state_.max_iterations}});
      transition(RunStatus::planning);
      return;

    case RunStatus::planning: {
      state_.plan = agents_.plan(state_.spec.query, describe_databases());
      transition(state_.plan->answerable ? RunStatus::deciding : RunStatus::unanswerable);
      return;
    }

    case RunStatus::deciding: {
      if (state_.iteration >= state_.max_iterations) {
        transition(RunStatus::cutoff);
        return;
      }
      state_.last_decision = agents_.decide_next(state_.spec.query, *state_.plan, state_.understanding,
                                                 state_.iteration, state_.max_iterations);
      switch (state_.last_decision->verdict) {
        case Verdict::continue_run: transition(RunStatus::seeking); break;
        case Verdict::halt_answered: transition(RunStatus::answered); break;
        case Verdict::halt_failure: transition(RunStatus::halted_failure); break;
      }
      return;
    }

    case RunStatus::seeking:
      state_.pending_request = agents_.seek(state_.spec.query, state_.spec.user_id, period_text(),
                                            *state_.plan, state_.memory, state_.understanding);
      transition(RunStatus::executing);
      return;

    case RunStatus::executing: {
      const ExecutionContext exec{engine_.registry, helper_ctx_, engine_.sandbox, state_.spec.user_id};
      state_.pending_result = agents_.fulfill(*state_.pending_request, exec);
      transition(RunStatus::local_sense);
      return;
    }

    case RunStatus::local_sense: {
      const FulfillResult& result = *state_.pending_result;
      MemoryEntry entry;
      entry.request = *state_.pending_request;
      entry.summary = agents_.summarize_local(entry.request, result);
      entry.failure = !result.ok;
      entry.raw_digest = result.ok ? result.value.dump().substr(0, 65536) : result.failure;
      state_.memory.push_back(std::move(entry));
      state_.pending_request.reset();
      state_.pending_result.reset();
      ++state_.iteration;
      transition(RunStatus::global_sense);
      return;
    }

    case RunStatus::global_sense:
      state_.understanding = agents_.update_understanding(state_.spec.query, *state_.plan,
                                                          state_.understanding, state_.memory);
      transition(RunStatus::deciding);
      return;

    case RunStatus::answered:
    case RunStatus::unanswerable:
    case RunStatus::halted_failure:
    case RunStatus::cutoff:
      throw Error(ErrorKind::state, "run " + state_.spec.run_id + " is already " +
                                        std::string(to_string(state_.status)));
  }
}

const Answer& Run::present() {
  if (!terminal()) {
    throw Error(ErrorKind::state, "run " + state_.spec.run_id + " is not finished (status " +
                                      std::string(to_string(state_.status)) + ")");
  }
  if (state_.answer) return *state_.answer;

  const std::string& instructions = state_.spec.instructions;
  const bool structured = wants_structured_output(instructions);
  bool fallback = false;
  Answer answer;
  answer.presentation_instructions = instructions;

  if (state_.status == RunStatus::unanswerable) {
    const std::string& why = state_.plan->rationale;
    answer.text = structured ? json{{"answerable", false}, {"reason", why}}.dump()
                             : "The available data cannot answer this query. " + why;
  } else {
    std::string outcome;
    switch (state_.status) {
      case RunStatus::answered:
        outcome = "the understanding answers the query";
        break;
      case RunStatus::halted_failure:
        outcome = "stopped because needed data could not be fetched or does not exist: " +
                  state_.understanding.failure_note.value_or("unknown gap");
        break;
      default:
        outcome = "stopped after the limit of " + std::to_string(state_.max_iterations) +
                  " data-gathering rounds; answer from the latest understanding";
        break;
    }
    try {
      answer = agents_.present(state_.spec.query, state_.understanding, outcome, instructions);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::parse) throw;
      fallback = true;
      const Understanding& u = state_.understanding;
      std::string text = u.narrative.empty() ? "No information was gathered." : u.narrative;
      if (u.failure_note) text += " " + *u.failure_note;
      answer.text = structured ? json{{"answer", text}}.dump() : text;
    }
  }
  state_.answer = answer;
  json payload = {{"status", to_string(state_.status)},
                  {"answer", to_json(answer)},
                  {"iteration", state_.iteration},
                  {"understanding", to_json(state_.understanding)},
                  {"final", true}};
  if (fallback) payload["fallback"] = true;
  emit(std::string(to_string(state_.status)), std::move(payload));
  return *state_.answer;
}

void Run::fail(const std::string& message) {
  state_.error = message;
  emit("error", {{"status", to_string(state_.status)}, {"error", message}, {"final", true}});
}

RunResult run(const Engine& engine, RunSpec spec, EventListener listener, WallClock clock) {
  Run r(engine, std::move(spec));
  if (listener) r.on_event(std::move(listener));
  if (clock) r.set_clock(std::move(clock));
  RunResult result;
  try {
    while (!r.terminal()) r.step();
    result.answer = r.present();
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::validation || e.kind() == ErrorKind::state) throw;
    r.fail(std::string(to_string(e.kind())) + ": " + e.what());
    result.error = r.state().error;
    result.error_kind = e.kind();
  }
  result.state = r.state();
  result.trace = r.trace();
  return result;
}

}  // namespace senseloop
