#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "senseloop/agents.hpp"

namespace senseloop {

enum class RunStatus {
  pending,
  planning,
  seeking,
  executing,
  local_sense,
  global_sense,
  deciding,
  answered,
  unanswerable,
  halted_failure,
  cutoff,
};

std::string_view to_string(RunStatus status);
std::optional<RunStatus> parse_run_status(std::string_view text);
bool is_terminal(RunStatus status);

struct RunSpec {
  std::string run_id;
  std::string query;
  std::string instructions = "answer clearly and concisely";
  std::string user_id;
  std::optional<TimeRange> period;  // optional hint passed to the seeking agent

  bool operator==(const RunSpec&) const = default;
};

struct RunState {
  RunSpec spec;
  std::optional<ActionPlan> plan;
  std::vector<MemoryEntry> memory;
  Understanding understanding;
  int iteration = 0;  // completed seek -> summarize cycles
  int max_iterations = 5;
  RunStatus status = RunStatus::pending;
  std::optional<NextStepDecision> last_decision;
  std::optional<InformationRequest> pending_request;
  std::optional<FulfillResult> pending_result;
  std::optional<Answer> answer;
  std::string error;  // set when the run stopped on an infrastructure failure

  bool operator==(const RunState&) const = default;
};

nlohmann::json to_json(const RunState& state);
RunState run_state_from_json(const nlohmann::json& j);

struct TraceEvent {
  std::string run_id;
  std::uint64_t seq = 0;
  std::string phase;  // a RunStatus name, an agent name, "sandbox" or "error"
  nlohmann::json payload;
  double wall_time = 0;

  /// The last event of a run carries "final": true.
  bool final() const { return payload.is_object() && payload.value("final", false); }
};

nlohmann::json to_json(const TraceEvent& event);
TraceEvent trace_event_from_json(const nlohmann::json& j);

/// JSONL rendering of a trace without wall-clock times and measured
/// durations, for golden comparisons.
std::string canonical_trace(const std::vector<TraceEvent>& trace);

struct EngineConfig {
  int max_iterations = 5;
  AgentConfig agent;
};

/// Shared, read-only dependencies of runs. All referenced objects must
/// outlive every run using them.
struct Engine {
  ChatBackend& backend;
  const HelperRegistry& registry;
  const SensorStore& store;
  Sandbox& sandbox;
  const StressPredictor& predictor;
  DisplayZone zone;
  EngineConfig config;
  PromptSet prompts = PromptSet::builtin();
};

using EventListener = std::function<void(const TraceEvent&)>;
using WallClock = std::function<double()>;

/// One query's pass through the loop. step() advances exactly one phase;
/// present() produces the answer once the run is terminal.
class Run {
 public:
  Run(const Engine& engine, RunSpec spec);
  Run(const Run&) = delete;
  Run& operator=(const Run&) = delete;

  void on_event(EventListener listener) { listener_ = std::move(listener); }
  void set_clock(WallClock clock) { clock_ = std::move(clock); }

  /// Throws Error(state) when the run is already terminal.
  void step();

  /// Throws Error(state) unless terminal. Idempotent.
  const Answer& present();

  /// Records an infrastructure failure and emits the final "error" event.
  void fail(const std::string& message);

  const RunState& state() const { return state_; }
  const std::vector<TraceEvent>& trace() const { return trace_; }
  bool terminal() const { return is_terminal(state_.status); }

 private:
  void emit(const std::string& phase, nlohmann::json payload);
  void transition(RunStatus next);
  std::string period_text() const;

  const Engine& engine_;
  HelperContext helper_ctx_;
  Agents agents_;
  RunState state_;
  std::vector<TraceEvent> trace_;
  EventListener listener_;
  WallClock clock_;
};

struct RunResult {
  RunState state;
  std::vector<TraceEvent> trace;
  std::optional<Answer> answer;
  std::string error;
  ErrorKind error_kind = ErrorKind::backend;  // meaningful only when error is set

  bool ok() const { return error.empty(); }
};

/// Steps until terminal, then presents. Infrastructure failures (backend,
/// cassette miss, unusable agent output, sandbox launch) end the run with
/// `error` set and the partial trace kept.
RunResult run(const Engine& engine, RunSpec spec, EventListener listener = {},
              WallClock clock = {});

}  // namespace senseloop
