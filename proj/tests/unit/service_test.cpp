#include <gtest/gtest.h>

#include <httplib.h>

#include <filesystem>
#include <thread>

#include <unistd.h>

#include "scenarios.hpp"
#include "senseloop/service.hpp"

namespace senseloop {
namespace {

using nlohmann::json;
using namespace std::chrono_literals;

constexpr const char* kRagAnswer = "You used SnapChat for 2075 seconds.";

// Holds every planning call until opened.
class Gate {
 public:
  void open() {
    {
      std::lock_guard lock(mutex_);
      open_ = true;
    }
    cv_.notify_all();
  }
  void wait() {
    std::unique_lock lock(mutex_);
    cv_.wait(lock, [&] { return open_; });
  }

 private:
  std::mutex mutex_;
  std::condition_variable cv_;
  bool open_ = false;
};

struct Fixture {
  explicit Fixture(ScriptedBackend::Responder scenario = testing::happy_path().responder,
                   ServiceConfig config = {})
      : backend([this, scenario](const ChatRequest& r, std::size_t i) -> std::optional<std::string> {
          const std::string role = testing::role_of(r);
          if (role == "rag") return std::string(kRagAnswer);
          if (role == "plan") gate.wait();
          return scenario(r, i);
        }),
        service(ServiceDeps{backend, registry, *store, sandbox, predictor, embedder, DisplayZone{}, EngineConfig{},
                            RagConfig{}},
                std::move(config)) {}

  ~Fixture() { gate.open(); }

  Gate gate;
  std::unique_ptr<MemoryStore> store = testing::fixture_store();
  HelperRegistry registry = builtin_registry();
  LogisticStressStub predictor;
  testing::BridgeOnlySandbox sandbox;
  LexicalEmbedder embedder;
  ScriptedBackend backend;
  Service service;
};

json happy_body() {
  const RunSpec spec = testing::happy_path().spec;
  return {{"query", spec.query}, {"user_id", spec.user_id}, {"instructions", spec.instructions}};
}

std::vector<TraceEvent> drain(const Service& service, const std::string& id) {
  std::vector<TraceEvent> out;
  for (;;) {
    const EventBatch b = service.wait_events(id, out.size(), 50ms);
    out.insert(out.end(), b.events.begin(), b.events.end());
    if (b.finished) return out;
  }
}

std::string lines_of(const std::vector<TraceEvent>& events) {
  std::string out;
  for (const auto& e : events) out += to_json(e).dump() + "\n";
  return out;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() /
             ("senseloop-service-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  return dir;
}

TEST(ServiceRuns, RejectsInvalidBodies) {
  Fixture f;
  f.gate.open();
  for (const json& body : {json::array(), json{{"user_id", "u001"}}, json{{"query", " "}, {"user_id", "u001"}},
                           json{{"query", "q"}, {"user_id", "u001"}, {"config", {{"max_iterations", 0}}}},
                           json{{"query", "q"}, {"user_id", "u001"}, {"config", {{"max_iterations", 51}}}},
                           json{{"query", "q"}, {"user_id", "u001"}, {"config", {{"seed", 1}}}},
                           json{{"query", "q"}, {"user_id", "u001"}, {"period", {{"start", 10}, {"end", 5}}}}}) {
    try {
      f.service.create_run(body);
      ADD_FAILURE() << body;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::validation) << body;
    }
  }
  EXPECT_EQ(f.service.active_runs(), 0u);
}

TEST(ServiceRuns, CompletesWithTheScriptedAnswer) {
  Fixture f;
  f.gate.open();
  const RunHandle h = f.service.create_run(happy_body());
  EXPECT_EQ(h.status, RunStatus::pending);
  const auto events = drain(f.service, h.run_id);
  EXPECT_EQ(events.back().phase, "answered");
  f.service.wait_idle();
  const json view = f.service.run_view(h.run_id);
  EXPECT_TRUE(view["ready"].get<bool>());
  EXPECT_EQ(view["status"], "answered");
  EXPECT_FALSE(view["cutoff"].get<bool>());
  EXPECT_NE(view["answer"]["text"].get<std::string>().find("2075 seconds"), std::string::npos);
  EXPECT_EQ(view["trace"].size(), events.size());
  EXPECT_THROW(f.service.run_view("run-nope"), Error);
}

TEST(ServiceRuns, ViewIsNotReadyWhileRunning) {
  Fixture f;
  const RunHandle h = f.service.create_run(happy_body());
  const json view = f.service.run_view(h.run_id);
  EXPECT_FALSE(view["ready"].get<bool>());
  EXPECT_FALSE(view.contains("answer"));
  f.gate.open();
  f.service.wait_idle();
  EXPECT_TRUE(f.service.run_view(h.run_id)["ready"].get<bool>());
}

TEST(ServiceRuns, SubscribersSeeIdenticalGapFreeStreams) {
  Fixture f;
  const RunHandle h = f.service.create_run(happy_body());
  std::vector<TraceEvent> a, b;
  std::thread ta([&] { a = drain(f.service, h.run_id); });
  std::thread tb([&] { b = drain(f.service, h.run_id); });
  std::this_thread::sleep_for(50ms);
  f.gate.open();
  ta.join();
  tb.join();
  ASSERT_FALSE(a.empty());
  EXPECT_EQ(lines_of(a), lines_of(b));
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].seq, i);
    EXPECT_EQ(a[i].final(), i + 1 == a.size());
  }
  // A subscriber arriving after the end still gets the whole backlog.
  const EventBatch late = f.service.wait_events(h.run_id, 0, 0ms);
  EXPECT_TRUE(late.finished);
  EXPECT_EQ(lines_of(late.events), lines_of(a));
  const EventBatch tail = f.service.wait_events(h.run_id, a.size(), 10ms);
  EXPECT_TRUE(tail.events.empty());
  EXPECT_TRUE(tail.finished);
}

TEST(ServiceRuns, CapacityIsEnforced) {
  ServiceConfig config;
  config.max_active_runs = 2;
  config.retry_after_seconds = 7;
  Fixture f(testing::happy_path().responder, config);
  f.service.create_run(happy_body());
  f.service.create_run(happy_body());
  EXPECT_EQ(f.service.active_runs(), 2u);
  try {
    f.service.create_run(happy_body());
    ADD_FAILURE() << "third run accepted";
  } catch (const CapacityExceeded& e) {
    EXPECT_EQ(e.retry_after(), 7);
  }
  f.gate.open();
  f.service.wait_idle();
  EXPECT_NO_THROW(f.service.create_run(happy_body()));
  f.service.wait_idle();
}

TEST(ServiceRuns, CutoffIsFlagged) {
  Fixture f(testing::always_continue().responder);
  f.gate.open();
  json body = happy_body();
  body["query"] = testing::always_continue().spec.query;
  body["user_id"] = testing::always_continue().spec.user_id;
  const RunHandle h = f.service.create_run(body);
  f.service.wait_idle();
  const json view = f.service.run_view(h.run_id);
  EXPECT_EQ(view["status"], "cutoff");
  EXPECT_TRUE(view["cutoff"].get<bool>());
  EXPECT_EQ(view["state"]["iteration"], 5);
}

TEST(ServiceRuns, PerRunIterationOverride) {
  Fixture f(testing::always_continue().responder);
  f.gate.open();
  json body = happy_body();
  body["config"] = {{"max_iterations", 2}};
  const RunHandle h = f.service.create_run(body);
  f.service.wait_idle();
  EXPECT_EQ(f.service.run_view(h.run_id)["state"]["iteration"], 2);
}

TEST(ServicePersistence, FinishedRunsSurviveARestart) {
  const auto dir = temp_dir("persist");
  ServiceConfig config;
  config.data_dir = dir;
  std::string id;
  json before;
  {
    Fixture f(testing::happy_path().responder, config);
    f.gate.open();
    id = f.service.create_run(happy_body()).run_id;
    f.service.wait_idle();
    before = f.service.run_view(id);
  }
  Fixture g(testing::happy_path().responder, config);
  const json after = g.service.run_view(id);
  EXPECT_EQ(after["answer"], before["answer"]);
  EXPECT_EQ(after["trace"], before["trace"]);
  EXPECT_EQ(after["status"], "answered");
  EXPECT_EQ(lines_of(g.service.wait_events(id, 0, 0ms).events), read_file((dir / "runs" / (id + ".trace.jsonl")).string()));
  std::filesystem::remove_all(dir);
}

TEST(ServicePersistence, InterruptedRunsAreClosed) {
  const auto dir = temp_dir("interrupted");
  std::filesystem::create_directories(dir / "runs");
  // Partial trace as a crashed process leaves it, torn last line included.
  std::string partial;
  for (std::size_t i = 0; i < 3; ++i) {
    TraceEvent e;
    e.run_id = "run-00000000deadbeef";
    e.seq = i;
    e.phase = i == 0 ? "run" : "planning";
    e.wall_time = 100.0 + i;
    partial += to_json(e).dump() + "\n";
  }
  write_file((dir / "runs" / "run-00000000deadbeef.trace.jsonl").string(), partial + "{\"seq\":3,\"pha");
  ServiceConfig config;
  config.data_dir = dir;
  {
    Fixture f(testing::happy_path().responder, config);
    const auto batch = f.service.wait_events("run-00000000deadbeef", 0, 0ms);
    EXPECT_TRUE(batch.finished);
    ASSERT_EQ(batch.events.size(), 4u);
    EXPECT_EQ(batch.events.back().phase, "error");
    EXPECT_EQ(batch.events.back().seq, 3u);
    EXPECT_TRUE(batch.events.back().final());
    const json view = f.service.run_view("run-00000000deadbeef");
    EXPECT_TRUE(view["ready"].get<bool>());
    EXPECT_NE(view["error"].get<std::string>().find("restarted"), std::string::npos);
  }
  // Closed once; a second restart reads the completed record.
  Fixture g(testing::happy_path().responder, config);
  EXPECT_EQ(g.service.wait_events("run-00000000deadbeef", 0, 0ms).events.size(), 4u);
  std::filesystem::remove_all(dir);
}

TEST(ServiceRag, AnswersFromTheIndex) {
  Fixture f;
  const json out = f.service.rag_query(
      {{"user_id", "u001"}, {"query", "How long did I use SnapChat?"}, {"start", "2024-07-15"}, {"end", "2024-07-16"}});
  EXPECT_EQ(out["text"], kRagAnswer);
  EXPECT_GT(out["indexed_chunks"].get<std::size_t>(), 0u);
  EXPECT_THROW(f.service.rag_query({{"user_id", "u001"}, {"query", "q"}, {"start", 0}, {"end", 1e12}}), Error);
  EXPECT_THROW(f.service.rag_query({{"user_id", "u001"}, {"query", "q"}, {"start", 0}, {"end", 10}, {"k", 0}}), Error);
}

TEST(ServiceEval, RunsInTheBackground) {
  Fixture f;
  f.gate.open();
  EXPECT_THROW(f.service.eval_report(std::nullopt), Error);
  const std::string id = f.service.start_eval(
      {{"corpus", json::array({{{"id", "q1"},
                                {"text", testing::happy_path().spec.query},
                                {"category", "objective"},
                                {"user_id", "u001"},
                                {"start", "2024-07-15"},
                                {"end", "2024-07-16"}}})},
       {"repetitions", 3},
       {"labels", json::array({{{"query_id", "q1"}, {"system", "engine"}, {"accuracy", "correct"}},
                               {{"query_id", "q1"}, {"system", "rag"}, {"accuracy", "incorrect"}}})}});
  f.service.wait_idle();
  const json r = f.service.eval_report(std::nullopt);
  EXPECT_EQ(r["eval_id"], id);
  ASSERT_TRUE(r["ready"].get<bool>());
  ASSERT_FALSE(r.contains("error")) << r["error"];
  const json& metrics = r["report"]["metrics"];
  ASSERT_EQ(metrics.size(), 2u);
  EXPECT_EQ(metrics[0]["accuracy_percent"], "100.00");
  EXPECT_EQ(metrics[0]["consistency_percent"], "100.00");
  EXPECT_EQ(metrics[1]["accuracy_percent"], "0.00");
  EXPECT_NE(r["text"].get<std::string>().find("engine accuracy: 100.00%"), std::string::npos);
  EXPECT_THROW(f.service.start_eval({{"corpus", ""}}), Error);
  EXPECT_THROW(f.service.start_eval({{"corpus", json::array()}, {"systems", {"bogus"}}}), Error);
}

// ---------------------------------------------------------------------------

class ServiceHttp : public ::testing::Test {
 protected:
  void SetUp() override {
    ServiceConfig config;
    config.max_active_runs = 1;
    fixture_ = std::make_unique<Fixture>(testing::happy_path().responder, config);
    server_ = std::make_unique<HttpServer>(fixture_->service);
    port_ = server_->bind("127.0.0.1", 0);
    thread_ = std::thread([this] { server_->listen(); });
  }
  void TearDown() override {
    fixture_->gate.open();
    server_->stop();
    thread_.join();
    fixture_->service.wait_idle();
  }

  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port_);
    c.set_read_timeout(10, 0);
    return c;
  }

  std::string stream_events(const std::string& id) const {
    std::string body;
    auto c = client();
    auto res = c.Get("/runs/" + id + "/events", [&](const char* data, std::size_t n) {
      body.append(data, n);
      return true;
    });
    EXPECT_TRUE(res);
    if (res) {
      EXPECT_EQ(res->status, 200);
      EXPECT_EQ(res->get_header_value("Content-Type"), "application/x-ndjson");
    }
    return body;
  }

  std::unique_ptr<Fixture> fixture_;
  std::unique_ptr<HttpServer> server_;
  std::thread thread_;
  int port_ = 0;
};

TEST_F(ServiceHttp, Health) {
  auto res = client().Get("/health");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(json::parse(res->body), (json{{"ok", true}}));
}

TEST_F(ServiceHttp, RunLifecycleAndStreams) {
  auto c = client();
  auto created = c.Post("/runs", happy_body().dump(), "application/json");
  ASSERT_TRUE(created);
  ASSERT_EQ(created->status, 201) << created->body;
  const std::string id = json::parse(created->body)["run_id"];

  auto pending = c.Get("/runs/" + id);
  ASSERT_TRUE(pending);
  EXPECT_EQ(pending->status, 202);
  EXPECT_FALSE(json::parse(pending->body)["ready"].get<bool>());

  // One slot, already taken.
  auto busy = c.Post("/runs", happy_body().dump(), "application/json");
  ASSERT_TRUE(busy);
  EXPECT_EQ(busy->status, 429);
  EXPECT_EQ(busy->get_header_value("Retry-After"), "2");

  std::string a, b;
  std::thread ta([&] { a = stream_events(id); });
  std::thread tb([&] { b = stream_events(id); });
  std::this_thread::sleep_for(100ms);
  fixture_->gate.open();
  ta.join();
  tb.join();
  EXPECT_EQ(a, b);
  const auto lines = split_lines(a);
  std::size_t seq = 0;
  for (const auto& line : lines) {
    if (line.empty()) continue;
    const json e = json::parse(line);
    EXPECT_EQ(e["seq"], seq++);
  }
  EXPECT_GT(seq, 10u);

  fixture_->service.wait_idle();
  auto done = c.Get("/runs/" + id);
  ASSERT_TRUE(done);
  EXPECT_EQ(done->status, 200);
  EXPECT_EQ(json::parse(done->body)["status"], "answered");
  // Late subscriber: full backlog, same bytes.
  EXPECT_EQ(stream_events(id), a);
}

TEST_F(ServiceHttp, ErrorMapping) {
  auto c = client();
  auto bad_json = c.Post("/runs", "{not json", "application/json");
  ASSERT_TRUE(bad_json);
  EXPECT_EQ(bad_json->status, 400);
  EXPECT_EQ(json::parse(bad_json->body)["error"]["kind"], "parse");
  auto invalid = c.Post("/runs", R"({"query":"q"})", "application/json");
  ASSERT_TRUE(invalid);
  EXPECT_EQ(invalid->status, 400);
  EXPECT_EQ(json::parse(invalid->body)["error"]["kind"], "validation");
  for (const std::string path : {"/runs/run-missing", "/runs/run-missing/events", "/eval/report"}) {
    auto res = c.Get(path);
    ASSERT_TRUE(res) << path;
    EXPECT_EQ(res->status, 404) << path;
  }
  auto stream = c.Post("/ingest/ppg", "", "application/x-ndjson");
  ASSERT_TRUE(stream);
  EXPECT_EQ(stream->status, 400);
}

TEST_F(ServiceHttp, Ingest) {
  const std::string body =
      R"({"user_id":"u9","timestamp":10,"payload":{"app_name":"Mail","event":"open"}})"
      "\n"
      R"({"user_id":"u9","timestamp":"soon","payload":{"app_name":"Mail","event":"close"}})"
      "\n";
  auto res = client().Post("/ingest/app_usage", body, "application/x-ndjson");
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200) << res->body;
  const json r = json::parse(res->body);
  EXPECT_EQ(r["accepted"], 1);
  EXPECT_EQ(r["rejected"], 1);
  EXPECT_EQ(r["rejections"][0]["line"], 2);
  EXPECT_EQ(fixture_->store->query_records("u9", StreamKind::app_usage, {0, 100}).records.size(), 1u);
}

TEST_F(ServiceHttp, RagQuery) {
  const json body = {{"user_id", "u001"}, {"query", "SnapChat?"}, {"start", "2024-07-15"}, {"end", "2024-07-16"}};
  auto res = client().Post("/rag/query", body.dump(), "application/json");
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200) << res->body;
  EXPECT_EQ(json::parse(res->body)["text"], kRagAnswer);
}

TEST_F(ServiceHttp, EvalCorpusAndReport) {
  fixture_->gate.open();
  const json body = {{"corpus", json::array({{{"id", "q1"},
                                              {"text", "How long did I use SnapChat?"},
                                              {"category", "objective"},
                                              {"user_id", "u001"},
                                              {"start", "2024-07-15"},
                                              {"end", "2024-07-16"}}})},
                     {"systems", {"rag"}}};
  auto c = client();
  auto started = c.Post("/eval/corpus", body.dump(), "application/json");
  ASSERT_TRUE(started);
  ASSERT_EQ(started->status, 202) << started->body;
  const std::string id = json::parse(started->body)["eval_id"];
  fixture_->service.wait_idle();
  auto report = c.Get("/eval/report?eval_id=" + id);
  ASSERT_TRUE(report);
  EXPECT_EQ(report->status, 200);
  const json r = json::parse(report->body);
  EXPECT_EQ(r["report"]["metrics"][0]["system"], "rag");
  EXPECT_EQ(r["report"]["metrics"][0]["consistency_percent"], "100.00");
}

}  // namespace
}  // namespace senseloop
