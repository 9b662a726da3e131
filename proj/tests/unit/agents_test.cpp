#include <gtest/gtest.h>

#include "scenarios.hpp"
#include "senseloop/agents.hpp"

namespace senseloop {
namespace {

using nlohmann::json;
using testing::json_reply;
using testing::python_reply;

ScriptedBackend::Responder by_role(std::map<std::string, std::vector<std::string>> replies) {
  auto state = std::make_shared<std::map<std::string, std::vector<std::string>>>(std::move(replies));
  return [state](const ChatRequest& request, std::size_t) -> std::optional<std::string> {
    auto& queue = (*state)[testing::role_of(request)];
    if (queue.empty()) return std::nullopt;
    std::string r = queue.front();
    if (queue.size() > 1) queue.erase(queue.begin());
    return r;
  };
}

InformationRequest request_for(const std::string& text, std::vector<StreamKind> streams = {}) {
  return {text, std::move(streams), false};
}

const ActionPlan kPlan{true, {"Fetch the data", "Summarize it"}, "Because."};

// -- parsing helpers ---------------------------------------------------------

TEST(ExtractFenced, LastBlockOfLanguage) {
  EXPECT_EQ(extract_fenced("a\n```python\nx = 1\n```\nb\n```python\ny = 2\n```", "python"), "y = 2\n");
  EXPECT_EQ(extract_fenced("```json\n{\"a\":1}\n```", "json"), "{\"a\":1}\n");
  EXPECT_EQ(extract_fenced("{\"a\": 1}", "json"), "{\"a\": 1}");
  EXPECT_FALSE(extract_fenced("print(1)", "python").has_value());
}

TEST(UnsupportedNumbers, AcceptsNumbersFromResultOrRequest) {
  const json result = {{"total_steps", 9325}, {"day", "2024-07-15"}};
  EXPECT_TRUE(unsupported_numbers("You took 9,325 steps on 2024-07-15.", result, "").empty());
  EXPECT_TRUE(unsupported_numbers("In the 3 hours asked about, 9325 steps.", result, "last 3 hours").empty());
  const auto bad = unsupported_numbers("You took 9326 steps.", result, "");
  ASSERT_EQ(bad.size(), 1u);
  EXPECT_EQ(bad[0].text, "9326");
}

TEST(StructuredOutput, DetectsCues) {
  EXPECT_TRUE(wants_structured_output("Respond in JSON format"));
  EXPECT_TRUE(wants_structured_output("machine-readable please"));
  EXPECT_FALSE(wants_structured_output("answer clearly and concisely"));
}

TEST(Prompts, RenderRejectsMissingSlots) {
  const PromptSet prompts = PromptSet::builtin();
  EXPECT_THROW(prompts.render("plan", {{"query", "q"}}), Error);
  EXPECT_THROW(prompts.get("nope"), Error);
  PromptSet custom = prompts;
  custom.set("t", "a {{x}} b {{x}}");
  EXPECT_EQ(custom.render("t", {{"x", "1"}}), "a 1 b 1");
}

TEST(JsonForms, RoundTrip) {
  const Understanding u{"n", {"more"}, std::string("missing")};
  EXPECT_EQ(understanding_from_json(to_json(u)), u);
  EXPECT_EQ(plan_from_json(to_json(kPlan)), kPlan);
  const NextStepDecision d{Verdict::halt_answered, "done", true};
  EXPECT_EQ(decision_from_json(to_json(d)), d);
  const MemoryEntry m{request_for("r", {StreamKind::wifi}), "s", "{}", true};
  EXPECT_EQ(memory_from_json(to_json(m)), m);
  const FulfillResult f{true, json{{"a", 1}}, "", {"get_wifi_blocks"}, {CodeAttempt{"p", ExitKind::timeout, 0, "slow", 2, 0}}};
  EXPECT_EQ(fulfill_from_json(to_json(f)), f);
}

// -- plan --------------------------------------------------------------------

TEST(Plan, UnanswerableQuery) {
  ScriptedBackend backend(std::vector<std::string>{json_reply(
      {{"answerable", false}, {"steps", json::array()}, {"rationale", "No database records PPG."}})});
  Agents agents(backend);
  const ActionPlan p = agents.plan("What is my average PPG value?", describe_databases());
  EXPECT_FALSE(p.answerable);
  EXPECT_TRUE(p.steps.empty());
  EXPECT_NE(p.rationale.find("PPG"), std::string::npos);
}

TEST(Plan, ThreeSteps) {
  ScriptedBackend backend(std::vector<std::string>{
      json_reply({{"answerable", true}, {"steps", {"a", "b", "c"}}, {"rationale", "r"}})});
  Agents agents(backend);
  EXPECT_EQ(agents.plan("q", "dbs").steps, (std::vector<std::string>{"a", "b", "c"}));
}

TEST(Plan, MissingBlockIsReaskedThenFails) {
  ScriptedBackend backend(std::vector<std::string>{"Sure, here is my plan.", "Still prose."});
  Agents agents(backend);
  try {
    agents.plan("q", "dbs");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::parse);
  }
  ASSERT_EQ(backend.calls(), 2u);
  // The re-ask carries the rejected reply and the reason.
  const auto second = backend.requests()[1];
  ASSERT_EQ(second.messages.size(), 4u);
  EXPECT_EQ(second.messages[2].content, "Sure, here is my plan.");
}

TEST(Plan, ReaskRecovers) {
  ScriptedBackend backend(std::vector<std::string>{
      "oops", json_reply({{"answerable", true}, {"steps", {"a"}}, {"rationale", ""}})});
  Agents agents(backend);
  EXPECT_EQ(agents.plan("q", "dbs").steps.size(), 1u);
}

// -- decide_next -------------------------------------------------------------

TEST(DecideNext, EmptyUnderstandingContinuesWithoutACall) {
  ScriptedBackend backend(std::vector<std::string>{});
  Agents agents(backend);
  const auto d = agents.decide_next("q", kPlan, Understanding{}, 0, 5);
  EXPECT_EQ(d.verdict, Verdict::continue_run);
  EXPECT_FALSE(d.model_called);
  EXPECT_EQ(backend.calls(), 0u);
}

TEST(DecideNext, FailureNoteHalts) {
  ScriptedBackend backend(std::vector<std::string>{});
  Agents agents(backend);
  const auto d = agents.decide_next("q", kPlan, Understanding{"n", {}, std::string("no wifi data")}, 1, 5);
  EXPECT_EQ(d.verdict, Verdict::halt_failure);
  EXPECT_EQ(d.reason, "no wifi data");
}

TEST(DecideNext, HaltAnswered) {
  ScriptedBackend backend(std::vector<std::string>{json_reply({{"verdict", "halt_answered"}, {"reason", "ok"}})});
  Agents agents(backend);
  EXPECT_EQ(agents.decide_next("q", kPlan, Understanding{"known", {}, {}}, 1, 5).verdict, Verdict::halt_answered);
}

TEST(DecideNext, UnfoundedFailureVerdictIsCoerced) {
  ScriptedBackend backend(std::vector<std::string>{json_reply({{"verdict", "halt_failure"}})});
  Agents agents(backend);
  EXPECT_EQ(agents.decide_next("q", kPlan, Understanding{"known", {}, {}}, 1, 5).verdict, Verdict::continue_run);
}

// -- seek --------------------------------------------------------------------

TEST(Seek, StreamsFromTextAndReply) {
  ScriptedBackend backend(std::vector<std::string>{
      json_reply({{"request", "list the GPS points recorded while the participant was running"}})});
  Agents agents(backend);
  const auto r = agents.seek("q", "u001", "2024-07-15", kPlan, {}, Understanding{});
  EXPECT_EQ(r.target_streams, (std::vector<StreamKind>{StreamKind::location, StreamKind::activity}));
  EXPECT_FALSE(r.repeat);
}

TEST(Seek, FlagsRepeatedRequests) {
  ScriptedBackend backend(std::vector<std::string>{json_reply({{"request", "Get  the wifi blocks."}})});
  Agents agents(backend);
  const std::vector<MemoryEntry> memory = {{request_for("get the wifi blocks."), "none", "", false}};
  EXPECT_TRUE(agents.seek("q", "u", "", kPlan, memory, Understanding{"x", {}, {}}).repeat);
}

// -- codegen -----------------------------------------------------------------

TEST(Codegen, ExtractsProgramExactly) {
  const std::string program = "x = get_heart_rate('u001', 'a', 'b')\nemit_result(len(x))\n";
  ScriptedBackend backend(std::vector<std::string>{"Here you go:\n" + python_reply(program) + "\nDone."});
  Agents agents(backend);
  EXPECT_EQ(agents.generate_code(request_for("r"), "u001", "specs", std::nullopt), program);
}

TEST(Codegen, NoBlockIsAnExtractionError) {
  ScriptedBackend backend(std::vector<std::string>{"I would call the helper."});
  Agents agents(backend);
  EXPECT_THROW(agents.generate_code(request_for("r"), "u001", "specs", std::nullopt), Error);
}

TEST(Codegen, PriorErrorIsQuotedVerbatim) {
  ScriptedBackend backend(std::vector<std::string>{python_reply("emit_result(1)\n")});
  Agents agents(backend);
  const std::string error = "Traceback (most recent call last):\n  KeyError: 'bpm_avg'";
  agents.generate_code(request_for("r"), "u001", "specs", error);
  EXPECT_NE(backend.requests()[0].messages.back().content.find(error), std::string::npos);
}

// -- fulfill -----------------------------------------------------------------

class FulfillTest : public ::testing::Test {
 protected:
  void SetUp() override {
    store_ = testing::fixture_store();
    sandbox_ = make_sandbox(SandboxKind::subprocess);
    if (!sandbox_->unavailable_reason().empty()) GTEST_SKIP() << sandbox_->unavailable_reason();
  }
  FulfillResult fulfill(ScriptedBackend& backend, const InformationRequest& request, const std::string& uid) {
    const HelperContext ctx{*store_, DisplayZone{}, stub_};
    Agents agents(backend);
    return agents.fulfill(request, ExecutionContext{registry_, ctx, *sandbox_, uid});
  }

  std::unique_ptr<MemoryStore> store_;
  std::unique_ptr<Sandbox> sandbox_;
  HelperRegistry registry_ = builtin_registry();
  LogisticStressStub stub_;
};

TEST_F(FulfillTest, AppBlocksOnFixtureDay) {
  ScriptedBackend backend(std::vector<std::string>{python_reply(
      "emit_result(get_app_usage_blocks('u001', '2024-07-15 00:00:00', '2024-07-16 00:00:00'))\n")});
  const auto r = fulfill(backend, request_for("Get the app usage blocks of u001 on 2024-07-15."), "u001");
  ASSERT_TRUE(r.ok) << r.failure;
  EXPECT_EQ(r.helpers, std::vector<std::string>{"get_app_usage_blocks"});
  const json snap = {{"app", "SnapChat"}, {"open", "2024-07-15 17:38:57"},
                     {"close", "2024-07-15 18:13:32"}, {"duration", 2075.0}};
  EXPECT_NE(std::find(r.value.begin(), r.value.end(), snap), r.value.end());
}

TEST_F(FulfillTest, NoDataIsANoRecordsFailure) {
  ScriptedBackend backend(std::vector<std::string>{python_reply(
      "emit_result(get_activity_blocks('test004', '2024-07-12 00:00:00', '2024-07-13 00:00:00'))\n")});
  const auto r = fulfill(backend, request_for("Get the activity blocks of test004 on 2024-07-12."), "test004");
  EXPECT_FALSE(r.ok);
  EXPECT_NE(r.failure.find("No records"), std::string::npos);
  EXPECT_NE(r.failure.find("activity"), std::string::npos);
}

TEST_F(FulfillTest, RetriesWithTheError) {
  ScriptedBackend backend(std::vector<std::string>{
      python_reply("emit_result(undefined_name)\n"),
      python_reply("emit_result(len(get_heart_rate('u001', '2024-07-15 00:00:00', '2024-07-16 00:00:00')))\n")});
  const auto r = fulfill(backend, request_for("Count heart rate samples of u001 on 2024-07-15."), "u001");
  ASSERT_TRUE(r.ok) << r.failure;
  ASSERT_EQ(r.attempts.size(), 2u);
  EXPECT_NE(r.attempts[0].error.find("NameError"), std::string::npos);
  EXPECT_NE(backend.requests()[1].messages.back().content.find("NameError"), std::string::npos);
  EXPECT_GT(r.value.get<int>(), 0);
}

TEST_F(FulfillTest, GivesUpAfterConfiguredAttempts) {
  ScriptedBackend backend(by_role({{"codegen", {python_reply("raise RuntimeError('nope')\n")}}}));
  const auto r = fulfill(backend, request_for("Get the wifi blocks of u001."), "u001");
  EXPECT_FALSE(r.ok);
  EXPECT_EQ(r.attempts.size(), 3u);
  EXPECT_NE(r.failure.find("RuntimeError"), std::string::npos);
}

TEST_F(FulfillTest, NoRelevantHelperRunsNoCode) {
  ScriptedBackend backend(std::vector<std::string>{});
  const auto r = fulfill(backend, request_for("Get the PPG waveform."), "u001");
  EXPECT_FALSE(r.ok);
  EXPECT_TRUE(r.attempts.empty());
  EXPECT_EQ(backend.calls(), 0u);
}

// -- summarize_local ---------------------------------------------------------

TEST(SummarizeLocal, KeepsResultNumbers) {
  ScriptedBackend backend(std::vector<std::string>{json_reply({{"summary", "The participant took 9325 steps."}})});
  Agents agents(backend);
  const std::string s = agents.summarize_local(request_for("steps"), FulfillResult{true, json{{"total_steps", 9325}}});
  EXPECT_NE(s.find("9325"), std::string::npos);
}

TEST(SummarizeLocal, EmptyResultNeedsNoModel) {
  ScriptedBackend backend(std::vector<std::string>{});
  Agents agents(backend);
  const std::string s = agents.summarize_local(request_for("steps"), FulfillResult{true, json::array()});
  EXPECT_NE(s.find("no matching data"), std::string::npos);
  EXPECT_EQ(backend.calls(), 0u);
}

TEST(SummarizeLocal, InventedNumberIsReasked) {
  ScriptedBackend backend(std::vector<std::string>{json_reply({{"summary", "The participant took 10000 steps."}}),
                                                   json_reply({{"summary", "The participant took 9325 steps."}})});
  Agents agents(backend);
  EXPECT_EQ(agents.summarize_local(request_for("steps"), FulfillResult{true, json{{"total_steps", 9325}}}),
            "The participant took 9325 steps.");
  EXPECT_NE(backend.requests()[1].messages.back().content.find("10000"), std::string::npos);
}

TEST(SummarizeLocal, RejectsEveryAdversarialSummary) {
  const auto cases = testing::hallucination_cases(7, 50);
  ASSERT_EQ(cases.size(), 50u);
  for (const auto& c : cases) {
    ScriptedBackend backend(std::vector<std::string>{json_reply({{"summary", c.summary}})});
    Agents agents(backend);
    EXPECT_THROW(agents.summarize_local(request_for(c.request), FulfillResult{true, c.result}), Error)
        << c.kind << ": " << c.summary;
    EXPECT_EQ(backend.calls(), 2u);
  }
}

TEST(SummarizeLocal, FaithfulVariantsAreAccepted) {
  // The same cases with the invented number replaced by the true total.
  for (const auto& c : testing::hallucination_cases(7, 50)) {
    const std::string truth = std::to_string(c.result["total_steps"].get<int>());
    std::string summary = c.summary;
    auto at = summary.find(" " + c.invented + " ");
    if (at == std::string::npos) at = summary.find(" " + c.invented + "%");
    ASSERT_NE(at, std::string::npos) << c.summary;
    summary.replace(at + 1, c.invented.size(), truth);
    ScriptedBackend backend(std::vector<std::string>{json_reply({{"summary", summary}})});
    Agents agents(backend);
    EXPECT_EQ(agents.summarize_local(request_for(c.request), FulfillResult{true, c.result}), summary);
  }
}

// -- update_understanding ----------------------------------------------------

TEST(UpdateUnderstanding, FailureEntrySetsNote) {
  ScriptedBackend backend(std::vector<std::string>{
      json_reply({{"narrative", "Nothing is known yet."}, {"needs", {"activity data"}}})});
  Agents agents(backend);
  const std::vector<MemoryEntry> memory = {
      {request_for("Get activity of test004 on 2024-07-12.", {StreamKind::activity}),
       "No records: no activity data was found for participant test004.", "", true}};
  const auto u = agents.update_understanding("q", kPlan, Understanding{}, memory);
  ASSERT_TRUE(u.failure_note.has_value());
  EXPECT_NE(u.failure_note->find("activity"), std::string::npos);
}

TEST(UpdateUnderstanding, SynthesizesEntries) {
  ScriptedBackend backend(std::vector<std::string>{
      json_reply({{"narrative", "Steps 9325 and 61 minutes of walking."}, {"needs", json::array()}})});
  Agents agents(backend);
  const std::vector<MemoryEntry> memory = {{request_for("steps"), "9325 steps", "", false},
                                           {request_for("walking"), "61 minutes of walking", "", false}};
  const auto u = agents.update_understanding("q", kPlan, Understanding{}, memory);
  EXPECT_FALSE(u.failure_note.has_value());
  const std::string prompt = backend.requests()[0].messages.back().content;
  EXPECT_NE(prompt.find("[1] Request: steps"), std::string::npos);
  EXPECT_NE(prompt.find("[2] Request: walking"), std::string::npos);
}

TEST(UpdateUnderstanding, NeedsMemory) {
  ScriptedBackend backend(std::vector<std::string>{});
  Agents agents(backend);
  EXPECT_THROW(agents.update_understanding("q", kPlan, Understanding{}, {}), Error);
}

// -- present -----------------------------------------------------------------

TEST(Present, FollowsInstructions) {
  ScriptedBackend backend(std::vector<std::string>{json_reply({{"answer", "You used SnapChat for 2075 seconds."}})});
  Agents agents(backend);
  const Answer a = agents.present("q", Understanding{"2075 s of SnapChat", {}, {}}, "answered",
                                  "answer clearly and concisely");
  EXPECT_EQ(a.text, "You used SnapChat for 2075 seconds.");
  EXPECT_EQ(a.presentation_instructions, "answer clearly and concisely");
}

TEST(Present, JsonInstructionsYieldAnObject) {
  ScriptedBackend backend(std::vector<std::string>{json_reply({{"answer", "2075 seconds"}}),
                                                   json_reply({{"answer", {{"app", "SnapChat"}, {"seconds", 2075}}}})});
  Agents agents(backend);
  const Answer a = agents.present("q", Understanding{"x", {}, {}}, "answered", "Respond in JSON format");
  EXPECT_EQ(json::parse(a.text), (json{{"app", "SnapChat"}, {"seconds", 2075}}));
}

TEST(Present, FailureUnderstandingReachesThePrompt) {
  ScriptedBackend backend(std::vector<std::string>{
      json_reply({{"answer", "No wifi data was recorded, so I cannot say."}})});
  Agents agents(backend);
  const Answer a = agents.present("q", Understanding{"unknown", {}, std::string("no wifi data for u001")},
                                  "halted_failure", "answer clearly and concisely");
  EXPECT_NE(backend.requests()[0].messages.back().content.find("Failure note: no wifi data for u001"),
            std::string::npos);
  EXPECT_NE(a.text.find("wifi"), std::string::npos);
}

TEST(Observer, SeesEachOperation) {
  ScriptedBackend backend(by_role({{"plan", {json_reply({{"answerable", true}, {"steps", {"a"}}})}}}));
  Agents agents(backend);
  std::vector<std::string> phases;
  agents.set_observer([&](const std::string& phase, const json&) { phases.push_back(phase); });
  agents.plan("q", "dbs");
  agents.decide_next("q", kPlan, Understanding{}, 0, 5);
  EXPECT_EQ(phases, (std::vector<std::string>{"plan", "next_step"}));
}

}  // namespace
}  // namespace senseloop
