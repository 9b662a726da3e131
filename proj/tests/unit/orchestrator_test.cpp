#include <gtest/gtest.h>

#include "scenarios.hpp"
#include "senseloop/orchestrator.hpp"

namespace senseloop {
namespace {

using nlohmann::json;

struct Harness {
  std::unique_ptr<MemoryStore> store = testing::fixture_store();
  HelperRegistry registry = builtin_registry();
  LogisticStressStub predictor;
};

RunResult run_scripted(const testing::Scenario& scenario, Sandbox& sandbox) {
  Harness h;
  ScriptedBackend backend(scenario.responder);
  const Engine engine{backend, h.registry, *h.store, sandbox, h.predictor, DisplayZone{}, EngineConfig{}};
  return run(engine, scenario.spec);
}

RunResult replay_golden(const std::string& name, Sandbox& sandbox, const RunSpec& spec) {
  Harness h;
  auto backend = ReplayBackend::from_file(testing::fixture_path("golden/" + name + ".cassette.jsonl"));
  const Engine engine{*backend, h.registry, *h.store, sandbox, h.predictor, DisplayZone{}, EngineConfig{}};
  return run(engine, spec);
}

std::vector<std::string> phases(const std::vector<TraceEvent>& trace) {
  std::vector<std::string> out;
  for (const auto& e : trace) out.push_back(e.phase);
  return out;
}

void expect_well_formed(const std::vector<TraceEvent>& trace) {
  ASSERT_FALSE(trace.empty());
  for (std::size_t i = 0; i < trace.size(); ++i) {
    EXPECT_EQ(trace[i].seq, i);
    EXPECT_EQ(trace[i].final(), i + 1 == trace.size()) << trace[i].phase;
  }
  EXPECT_EQ(trace.front().phase, "run");
}

TEST(RunStatus, NamesAndTerminality) {
  for (auto s : {RunStatus::pending, RunStatus::planning, RunStatus::seeking, RunStatus::executing,
                 RunStatus::local_sense, RunStatus::global_sense, RunStatus::deciding, RunStatus::answered,
                 RunStatus::unanswerable, RunStatus::halted_failure, RunStatus::cutoff}) {
    EXPECT_EQ(parse_run_status(to_string(s)), s);
  }
  EXPECT_TRUE(is_terminal(RunStatus::cutoff));
  EXPECT_FALSE(is_terminal(RunStatus::deciding));
}

TEST(Orchestrator, HappyPath) {
  testing::BridgeOnlySandbox sandbox;
  const auto r = run_scripted(testing::happy_path(), sandbox);
  ASSERT_TRUE(r.ok()) << r.error;
  EXPECT_EQ(r.state.status, RunStatus::answered);
  EXPECT_EQ(r.state.memory.size(), 1u);
  EXPECT_EQ(r.state.iteration, 1);
  expect_well_formed(r.trace);
}

TEST(Orchestrator, PhaseOrder) {
  testing::BridgeOnlySandbox sandbox;
  const auto r = run_scripted(testing::happy_path(), sandbox);
  const std::vector<std::string> expected = {
      "run",      "planning", "plan",        "deciding",     "next_step",   "seeking",
      "seek",     "executing", "codegen",    "sandbox",      "dm",          "local_sense",
      "local_sense", "global_sense", "global_sense", "deciding", "next_step", "present", "answered"};
  EXPECT_EQ(phases(r.trace), expected);
}

TEST(Orchestrator, GoldenReplayMatchesRecordedTrace) {
  auto sandbox = make_sandbox(SandboxKind::subprocess);
  if (!sandbox->unavailable_reason().empty()) GTEST_SKIP() << sandbox->unavailable_reason();
  const std::string golden_trace = read_file(testing::fixture_path("golden/happy_path.trace.jsonl"));
  const std::string golden_answer = trim(read_file(testing::fixture_path("golden/happy_path.answer.txt")));
  for (int i = 0; i < 3; ++i) {
    const auto r = replay_golden("happy_path", *sandbox, testing::happy_path().spec);
    ASSERT_TRUE(r.ok()) << r.error;
    EXPECT_EQ(r.answer->text, golden_answer);
    EXPECT_EQ(canonical_trace(r.trace), golden_trace);
  }
}

TEST(Orchestrator, ChangedQueryMissesTheCassette) {
  testing::BridgeOnlySandbox sandbox;
  RunSpec spec = testing::happy_path().spec;
  spec.query = "How long did I use Spotify on 2024-07-15?";
  const auto r = replay_golden("happy_path", sandbox, spec);
  EXPECT_FALSE(r.ok());
  EXPECT_EQ(r.error_kind, ErrorKind::cassette_miss);
  EXPECT_EQ(r.trace.back().phase, "error");
  EXPECT_TRUE(r.trace.back().final());
}

TEST(Orchestrator, CutoffAfterFiveIterations) {
  testing::BridgeOnlySandbox sandbox;
  const auto r = run_scripted(testing::always_continue(), sandbox);
  ASSERT_TRUE(r.ok()) << r.error;
  EXPECT_EQ(r.state.status, RunStatus::cutoff);
  EXPECT_EQ(r.state.iteration, 5);
  EXPECT_EQ(r.state.memory.size(), 5u);
  EXPECT_EQ(testing::count_phase(r.trace, "seek"), 5u);
  // The presentation reply echoes the understanding it was given.
  EXPECT_EQ(r.answer->text, "Final: " + render_understanding(r.state.understanding));
  EXPECT_NE(r.answer->text.find("round 5"), std::string::npos);
  expect_well_formed(r.trace);
}

TEST(Orchestrator, AdversarialBehaviorsNeverExceedTheBound) {
  testing::BridgeOnlySandbox sandbox;
  for (unsigned seed = 0; seed < 100; ++seed) {
    const auto r = run_scripted(testing::adversarial(seed), sandbox);
    EXPECT_LE(r.state.iteration, 5) << seed;
    EXPECT_LE(r.state.memory.size(), 5u) << seed;
    EXPECT_LE(testing::count_phase(r.trace, "seek"), 5u) << seed;
    EXPECT_TRUE(r.trace.back().final()) << seed;
    if (r.ok()) {
      EXPECT_TRUE(is_terminal(r.state.status)) << seed;
      EXPECT_NE(r.state.status, RunStatus::answered) << seed;
    }
  }
}

TEST(Orchestrator, UnanswerableQueryRunsNothing) {
  auto inner = make_sandbox(SandboxKind::subprocess);
  testing::CountingSandbox sandbox(*inner);
  const auto r = run_scripted(testing::ppg_query(), sandbox);
  ASSERT_TRUE(r.ok()) << r.error;
  EXPECT_EQ(r.state.status, RunStatus::unanswerable);
  EXPECT_EQ(testing::count_phase(r.trace, "seek"), 0u);
  EXPECT_EQ(sandbox.executions(), 0u);
  EXPECT_TRUE(r.state.memory.empty());
  EXPECT_NE(r.answer->text.find("PPG"), std::string::npos);
}

TEST(Orchestrator, MissingDataHaltsWithFailureNote) {
  auto sandbox = make_sandbox(SandboxKind::subprocess);
  if (!sandbox->unavailable_reason().empty()) GTEST_SKIP() << sandbox->unavailable_reason();
  const auto r = run_scripted(testing::missing_data(), *sandbox);
  ASSERT_TRUE(r.ok()) << r.error;
  EXPECT_EQ(r.state.status, RunStatus::halted_failure);
  ASSERT_TRUE(r.state.understanding.failure_note.has_value());
  EXPECT_NE(r.state.understanding.failure_note->find("activity"), std::string::npos);
  EXPECT_NE(r.answer->text.find("activity"), std::string::npos);
  EXPECT_NE(r.answer->text.find("2024-07-12"), std::string::npos);
}

TEST(Orchestrator, StepOnTerminalRunIsAnError) {
  Harness h;
  testing::BridgeOnlySandbox sandbox;
  ScriptedBackend backend(testing::ppg_query().responder);
  const Engine engine{backend, h.registry, *h.store, sandbox, h.predictor, DisplayZone{}, EngineConfig{}};
  senseloop::Run r(engine, testing::ppg_query().spec);
  EXPECT_THROW(r.present(), Error);
  while (!r.terminal()) r.step();
  EXPECT_THROW(r.step(), Error);
  EXPECT_EQ(r.present(), r.present());
}

TEST(Orchestrator, ListenerSeesEveryEvent) {
  Harness h;
  testing::BridgeOnlySandbox sandbox;
  ScriptedBackend backend(testing::happy_path().responder);
  const Engine engine{backend, h.registry, *h.store, sandbox, h.predictor, DisplayZone{}, EngineConfig{}};
  std::vector<TraceEvent> seen;
  const auto r = senseloop::run(engine, testing::happy_path().spec, [&](const TraceEvent& e) { seen.push_back(e); },
                     [] { return 42.0; });
  ASSERT_EQ(seen.size(), r.trace.size());
  for (const auto& e : seen) EXPECT_EQ(e.wall_time, 42.0);
}

TEST(Orchestrator, StateJsonRoundTrip) {
  testing::BridgeOnlySandbox sandbox;
  for (const auto& scenario : {testing::happy_path(), testing::always_continue(), testing::ppg_query()}) {
    const auto r = run_scripted(scenario, sandbox);
    EXPECT_EQ(run_state_from_json(to_json(r.state)), r.state);
  }
}

TEST(Orchestrator, TraceEventJsonRoundTrip) {
  testing::BridgeOnlySandbox sandbox;
  const auto r = run_scripted(testing::happy_path(), sandbox);
  for (const auto& e : r.trace) {
    const TraceEvent back = trace_event_from_json(to_json(e));
    EXPECT_EQ(back.seq, e.seq);
    EXPECT_EQ(back.phase, e.phase);
    EXPECT_EQ(back.payload, e.payload);
  }
}

TEST(Orchestrator, MaxIterationsIsConfigurable) {
  Harness h;
  testing::BridgeOnlySandbox sandbox;
  ScriptedBackend backend(testing::always_continue().responder);
  EngineConfig config;
  config.max_iterations = 2;
  const Engine engine{backend, h.registry, *h.store, sandbox, h.predictor, DisplayZone{}, config};
  const auto r = senseloop::run(engine, testing::always_continue().spec);
  EXPECT_EQ(r.state.status, RunStatus::cutoff);
  EXPECT_EQ(r.state.iteration, 2);
}

}  // namespace
}  // namespace senseloop
