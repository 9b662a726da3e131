#pragma once

// Scripted model behaviors and fixtures shared by the unit tests, the
// acceptance binary and the golden generator.

#include <atomic>
#include <functional>
#include <memory>
#include <string>

#include <nlohmann/json.hpp>

#include "senseloop/datastore.hpp"
#include "senseloop/llm.hpp"
#include "senseloop/orchestrator.hpp"
#include "senseloop/sandbox.hpp"

namespace senseloop::testing {

std::string fixture_path(const std::string& relative);

/// The bundled fixture participants (u001 and test004) in a fresh store.
std::unique_ptr<MemoryStore> fixture_store();

/// Agent key ("plan", "seek", ...) of a request, read from its system message.
std::string role_of(const ChatRequest& request);

/// The last user message of a request.
const std::string& last_user(const ChatRequest& request);

/// Text between `header` and the next blank line in `prompt`.
std::string prompt_section(const std::string& prompt, const std::string& header);

std::string json_reply(const nlohmann::json& body);
std::string python_reply(const std::string& program);

struct Scenario {
  RunSpec spec;
  ScriptedBackend::Responder responder;
};

/// "How long did I use SnapChat on 2024-07-15?" for u001: one request,
/// answered after the first round.
Scenario happy_path();

/// Asks for PPG data, which no stream provides.
Scenario ppg_query();

/// test004 activity on a day without activity records.
Scenario missing_data();

/// Plans, then keeps asking for more data forever. The presentation reply
/// echoes the final understanding it was given.
Scenario always_continue();

/// A seeded mix of hostile next-step and agent behaviors (bad JSON,
/// halt_failure without cause, repeated requests, failing programs...)
/// that never answers halt_answered.
Scenario adversarial(unsigned seed);

/// Sandbox double: runs no code; calls each exposed helper once through the
/// bridge and returns the first non-empty result (or an empty list).
class BridgeOnlySandbox : public Sandbox {
 public:
  std::string name() const override { return "bridge-only"; }
  std::string unavailable_reason() const override { return ""; }
  ExecutionResult execute(const ExecutionRequest& request) override;
  std::size_t executions() const { return executions_; }

 private:
  std::atomic<std::size_t> executions_{0};
};

/// Counts executions and forwards to an inner sandbox.
class CountingSandbox : public Sandbox {
 public:
  explicit CountingSandbox(Sandbox& inner) : inner_(inner) {}
  std::string name() const override { return inner_.name(); }
  std::string unavailable_reason() const override { return inner_.unavailable_reason(); }
  ExecutionResult execute(const ExecutionRequest& request) override {
    ++executions_;
    return inner_.execute(request);
  }
  std::size_t executions() const { return executions_; }

 private:
  Sandbox& inner_;
  std::atomic<std::size_t> executions_{0};
};

/// Outcome of one isolation probe. `contained` is judged from the host side
/// (a connection arriving at a host listener, a secret appearing in output,
/// a helper call accepted by the bridge), not from the guest's own report.
struct ProbeOutcome {
  std::string name;
  bool contained = false;
  bool program_failed = false;
  std::string detail;
};

/// Runs the network-egress, host-file-read and unregistered-helper probes.
std::vector<ProbeOutcome> run_isolation_probes(Sandbox& sandbox);

/// A result plus a summary that states at least one number the result does
/// not support.
struct HallucinationCase {
  std::string kind;  // how the number was invented
  std::string request;
  nlohmann::json result;
  std::string summary;
  std::string invented;  // the unsupported number as written
};

/// `n` seeded adversarial summaries. Each invented number is checked against
/// every digit run of the result and the request, rounded to the written
/// precision with printf, so no case is accidentally supported.
std::vector<HallucinationCase> hallucination_cases(unsigned seed, std::size_t n);

/// Trace events of one phase.
std::size_t count_phase(const std::vector<TraceEvent>& trace, const std::string& phase);

}  // namespace senseloop::testing
