#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "senseloop/datastore.hpp"
#include "senseloop/helpers.hpp"
#include "senseloop/llm.hpp"
#include "senseloop/sandbox.hpp"

namespace senseloop {

// ---------------------------------------------------------------------------
// Prompt templates: plain text with {{slot}} placeholders.

class PromptSet {
 public:
  /// Templates compiled into the library from prompts/*.txt.
  static PromptSet builtin();
  /// Builtins overridden by every *.txt file in `dir`.
  static PromptSet with_overrides(const std::filesystem::path& dir);

  const std::string& get(const std::string& name) const;
  void set(const std::string& name, std::string text) { templates_[name] = std::move(text); }

  /// Substitutes every {{slot}}. Throws Error(validation) when the template
  /// uses a slot missing from `slots`.
  std::string render(const std::string& name, const std::map<std::string, std::string>& slots) const;

 private:
  std::map<std::string, std::string> templates_;
};

// ---------------------------------------------------------------------------
// Agent output types.

struct ActionPlan {
  bool answerable = false;
  std::vector<std::string> steps;
  std::string rationale;

  bool operator==(const ActionPlan&) const = default;
};

enum class Verdict { continue_run, halt_answered, halt_failure };

std::string_view to_string(Verdict verdict);
std::optional<Verdict> parse_verdict(std::string_view text);

struct NextStepDecision {
  Verdict verdict = Verdict::continue_run;
  std::string reason;
  bool model_called = true;

  bool operator==(const NextStepDecision&) const = default;
};

struct InformationRequest {
  std::string text;
  std::vector<StreamKind> target_streams;
  bool repeat = false;  // same text as an earlier request of the run

  bool operator==(const InformationRequest&) const = default;
};

struct Understanding {
  std::string narrative;
  std::vector<std::string> needs;
  std::optional<std::string> failure_note;

  bool empty() const { return narrative.empty() && needs.empty() && !failure_note; }
  bool operator==(const Understanding&) const = default;
};

/// One program run inside fulfill().
struct CodeAttempt {
  std::string program;
  ExitKind status = ExitKind::success;
  int exit_code = 0;
  std::string error;  // stderr excerpt or result-contract violation; empty on success
  std::size_t bridge_calls = 0;
  double elapsed_seconds = 0;

  bool operator==(const CodeAttempt&) const = default;
};

/// Outcome of the DM agent for one request. Failures are values, not
/// exceptions, so the loop can fold them into the understanding.
struct FulfillResult {
  bool ok = false;
  nlohmann::json value;         // the program's result when ok
  std::string failure;          // why it failed when !ok
  std::vector<std::string> helpers;  // helpers offered to code generation
  std::vector<CodeAttempt> attempts;

  bool operator==(const FulfillResult&) const = default;
};

struct MemoryEntry {
  InformationRequest request;
  std::string summary;
  std::string raw_digest;  // truncated result JSON, kept for audit only
  bool failure = false;

  bool operator==(const MemoryEntry&) const = default;
};

struct Answer {
  std::string text;
  std::string presentation_instructions;

  bool operator==(const Answer&) const = default;
};

nlohmann::json to_json(const ActionPlan& v);
nlohmann::json to_json(const NextStepDecision& v);
nlohmann::json to_json(const InformationRequest& v);
nlohmann::json to_json(const Understanding& v);
nlohmann::json to_json(const CodeAttempt& v);
nlohmann::json to_json(const FulfillResult& v);
nlohmann::json to_json(const MemoryEntry& v);
nlohmann::json to_json(const Answer& v);

ActionPlan plan_from_json(const nlohmann::json& j);
NextStepDecision decision_from_json(const nlohmann::json& j);
InformationRequest request_from_json_value(const nlohmann::json& j);
Understanding understanding_from_json(const nlohmann::json& j);
CodeAttempt attempt_from_json(const nlohmann::json& j);
FulfillResult fulfill_from_json(const nlohmann::json& j);
MemoryEntry memory_from_json(const nlohmann::json& j);
Answer answer_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Parsing helpers, exposed for tests.

/// Body of the last ```<lang> fenced block. With lang "json" a reply that is
/// a bare JSON object is accepted too.
std::optional<std::string> extract_fenced(std::string_view text, std::string_view lang);

/// Number tokens in `summary` that match no number in `result` (numbers in
/// string values included) and none in `request_text`.
std::vector<NumberToken> unsupported_numbers(std::string_view summary, const nlohmann::json& result,
                                             std::string_view request_text);

/// True when presentation instructions ask for machine-readable output.
bool wants_structured_output(std::string_view instructions);

// ---------------------------------------------------------------------------

struct AgentConfig {
  std::string model = "gpt-4o";
  double temperature = 1.0;
  double top_p = 1.0;
  std::size_t memory_budget = 4000;  // characters per memory entry in prompts
  int codegen_attempts = 3;
  ExecutionLimits limits;
};

/// Everything fulfill() needs to run generated code.
struct ExecutionContext {
  const HelperRegistry& registry;
  const HelperContext& helpers;
  Sandbox& sandbox;
  std::string user_id;
};

/// Called once per agent operation (and once per sandbox execution) with the
/// phase name and a structured record of its inputs and outputs.
using AgentObserver = std::function<void(const std::string& phase, const nlohmann::json& payload)>;

/// The agent roles of the loop. Stateless apart from configuration; every
/// operation is a function of its arguments and the backend's replies.
class Agents {
 public:
  Agents(ChatBackend& backend, AgentConfig config = {}, PromptSet prompts = PromptSet::builtin());

  void set_observer(AgentObserver observer) { observer_ = std::move(observer); }
  const AgentConfig& config() const { return config_; }

  ActionPlan plan(const std::string& query, const std::string& databases);

  NextStepDecision decide_next(const std::string& query, const ActionPlan& plan,
                               const Understanding& understanding, int iteration, int max_iterations);

  InformationRequest seek(const std::string& query, const std::string& user_id,
                          const std::string& period, const ActionPlan& plan,
                          const std::vector<MemoryEntry>& memory, const Understanding& understanding);

  std::string generate_code(const InformationRequest& request, const std::string& user_id,
                            const std::string& helper_specs,
                            const std::optional<std::string>& prior_error);

  FulfillResult fulfill(const InformationRequest& request, const ExecutionContext& exec);

  std::string summarize_local(const InformationRequest& request, const FulfillResult& result);

  Understanding update_understanding(const std::string& query, const ActionPlan& plan,
                                     const Understanding& previous,
                                     const std::vector<MemoryEntry>& memory);

  Answer present(const std::string& query, const Understanding& understanding,
                 const std::string& outcome, const std::string& instructions);

  /// Renders memory as it appears in prompts (entries truncated to budget).
  std::string render_memory(const std::vector<MemoryEntry>& memory) const;

 private:
  ChatRequest make_request(const std::string& role, const std::string& user_content) const;

  /// Runs a completion and hands the reply to `parse`; on Error(parse) asks
  /// once more, then rethrows. Returns the parsed value and the raw replies.
  template <typename T>
  T ask(const std::string& role, const std::string& prompt,
        const std::function<T(const std::string&)>& parse, nlohmann::json& log);

  void emit(const std::string& phase, const nlohmann::json& payload) const;

  ChatBackend& backend_;
  AgentConfig config_;
  PromptSet prompts_;
  AgentObserver observer_;
};

/// Human-readable renderings shared by prompts and presentation fallbacks.
std::string render_plan(const ActionPlan& plan);
std::string render_understanding(const Understanding& understanding);

}  // namespace senseloop
