#include <gtest/gtest.h>

#include "scenarios.hpp"
#include "senseloop/sandbox.hpp"

namespace senseloop {

void PrintTo(SandboxKind kind, std::ostream* os) { *os << to_string(kind); }

namespace {

using nlohmann::json;

TEST(ResultBlock, ParsesLastBlock) {
  const std::string out = "noise\n<<<RESULT\n1\nRESULT>>>\nmore\n<<<RESULT\n{\"a\": [1, 2]}\nRESULT>>>\n";
  EXPECT_EQ(parse_result_block(out), (json{{"a", {1, 2}}}));
}

TEST(ResultBlock, MissingOrBrokenBlocks) {
  std::string err;
  EXPECT_FALSE(parse_result_block("no block here", &err).has_value());
  EXPECT_FALSE(parse_result_block("<<<RESULT\n1\n", &err).has_value());
  EXPECT_NE(err.find("not terminated"), std::string::npos);
  EXPECT_FALSE(parse_result_block("<<<RESULT\n{oops\nRESULT>>>\n", &err).has_value());
  EXPECT_NE(err.find("not valid JSON"), std::string::npos);
}

TEST(Prelude, DefinesOneWrapperPerHelper) {
  const std::string py = guest_prelude({{"get_heart_rate", {"uid", "start_time", "end_time"}}});
  EXPECT_NE(py.find("def get_heart_rate(uid, start_time, end_time):"), std::string::npos);
  EXPECT_NE(py.find("def emit_result(value):"), std::string::npos);
}

TEST(SandboxKinds, NamesRoundTrip) {
  for (auto k : {SandboxKind::subprocess, SandboxKind::container}) {
    EXPECT_EQ(parse_sandbox_kind(to_string(k)), k);
  }
  EXPECT_FALSE(parse_sandbox_kind("docker").has_value());
}

class SandboxBackends : public ::testing::TestWithParam<SandboxKind> {
 protected:
  void SetUp() override {
    sandbox_ = make_sandbox(GetParam());
    if (const auto reason = sandbox_->unavailable_reason(); !reason.empty()) {
      GTEST_SKIP() << to_string(GetParam()) << " unavailable: " << reason;
    }
  }

  ExecutionResult run(const std::string& program, std::chrono::milliseconds limit = std::chrono::seconds(20)) {
    ExecutionRequest req;
    req.program = program;
    req.limits.wall_clock = limit;
    return sandbox_->execute(req);
  }

  std::unique_ptr<Sandbox> sandbox_;
};

TEST_P(SandboxBackends, ComputesAResult) {
  const auto r = run("emit_result(2 + 2)\n");
  ASSERT_TRUE(r.succeeded()) << r.stderr_text;
  EXPECT_EQ(r.result_value, json(4));
}

TEST_P(SandboxBackends, NonFiniteFloatsBecomeNull) {
  const auto r = run("emit_result({'x': float('nan'), 'y': [1.5]})\n");
  ASSERT_TRUE(r.succeeded()) << r.stderr_text;
  EXPECT_EQ(r.result_value, (json{{"x", nullptr}, {"y", {1.5}}}));
}

TEST_P(SandboxBackends, NonzeroExitKeepsStderr) {
  const auto r = run("raise ValueError('boom')\n");
  EXPECT_EQ(r.status, ExitKind::nonzero_exit);
  EXPECT_NE(r.stderr_text.find("ValueError: boom"), std::string::npos);
  EXPECT_FALSE(r.result_value.has_value());
}

TEST_P(SandboxBackends, TimeoutIsEnforced) {
  const auto r = run("while True:\n    pass\n", std::chrono::seconds(2));
  EXPECT_EQ(r.status, ExitKind::timeout);
  EXPECT_GE(r.duration, 2.0);
  EXPECT_LT(r.duration, 3.0);
}

TEST_P(SandboxBackends, OutputIsCapped) {
  ExecutionRequest req;
  req.program = "print('x' * 100000)\n";
  req.limits.output_bytes = 1000;
  const auto r = sandbox_->execute(req);
  EXPECT_TRUE(r.output_truncated);
  EXPECT_LE(r.stdout_text.size(), 1000u);
}

TEST_P(SandboxBackends, IsolationProbesAllFail) {
  for (const auto& probe : testing::run_isolation_probes(*sandbox_)) {
    EXPECT_TRUE(probe.contained) << probe.name << ": " << probe.detail;
    EXPECT_TRUE(probe.program_failed) << probe.name;
  }
}

TEST_P(SandboxBackends, NetworkProbeIsRefused) {
  const auto probes = testing::run_isolation_probes(*sandbox_);
  ASSERT_EQ(probes[0].name, "network egress");
  // Denied by Landlock/seccomp, or unreachable in an empty network namespace.
  const std::string& d = probes[0].detail;
  EXPECT_TRUE(d.find("ConnectionRefusedError") != std::string::npos ||
              d.find("PermissionError") != std::string::npos ||
              d.find("Network is unreachable") != std::string::npos)
      << d;
}

TEST_P(SandboxBackends, HelpersRunThroughTheBridge) {
  auto store = testing::fixture_store();
  const auto registry = builtin_registry();
  const LogisticStressStub stub;
  const HelperContext ctx{*store, DisplayZone{}, stub};
  ExecutionRequest req;
  req.program =
      "blocks = get_app_usage_blocks('u001', '2024-07-15 00:00:00', '2024-07-16 00:00:00')\n"
      "snap = [b for b in blocks if b['app'] == 'SnapChat']\n"
      "emit_result(snap[0]['duration'])\n";
  req.bridge = make_bridge_session(registry, ctx);
  const auto r = sandbox_->execute(req);
  ASSERT_TRUE(r.succeeded()) << r.stderr_text;
  EXPECT_EQ(r.result_value, json(2075.0));
  // Every datastore read is a logged bridge call.
  ASSERT_EQ(r.bridge_calls.size(), 1u);
  EXPECT_EQ(r.bridge_calls[0].helper, "get_app_usage_blocks");
  EXPECT_TRUE(r.bridge_calls[0].ok);
}

TEST_P(SandboxBackends, HelperErrorsSurfaceAsProgramErrors) {
  auto store = testing::fixture_store();
  const auto registry = builtin_registry();
  const LogisticStressStub stub;
  const HelperContext ctx{*store, DisplayZone{}, stub};
  ExecutionRequest req;
  req.program = "emit_result(get_heart_rate('u001', 'tomorrow', 'later'))\n";
  req.bridge = make_bridge_session(registry, ctx);
  const auto r = sandbox_->execute(req);
  EXPECT_FALSE(r.succeeded());
  EXPECT_NE(r.stderr_text.find("HelperError"), std::string::npos);
  ASSERT_EQ(r.bridge_calls.size(), 1u);
  EXPECT_EQ(r.bridge_calls[0].error, "validation");
}

INSTANTIATE_TEST_SUITE_P(Backends, SandboxBackends,
                         ::testing::Values(SandboxKind::subprocess, SandboxKind::container),
                         [](const auto& info) { return std::string(to_string(info.param)); });

}  // namespace
}  // namespace senseloop
