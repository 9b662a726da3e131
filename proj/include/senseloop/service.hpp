#pragma once

#include <condition_variable>
#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "senseloop/eval.hpp"
#include "senseloop/orchestrator.hpp"
#include "senseloop/rag.hpp"

namespace senseloop {

/// Thrown by create_run when too many runs are active.
class CapacityExceeded : public Error {
 public:
  CapacityExceeded(const std::string& message, int retry_after_seconds)
      : Error(ErrorKind::state, message), retry_after_(retry_after_seconds) {}
  int retry_after() const noexcept { return retry_after_; }

 private:
  int retry_after_;
};

struct ServiceConfig {
  std::filesystem::path data_dir;  // runs/ and evals/ live here; empty = no persistence
  std::size_t max_active_runs = 8;
  int retry_after_seconds = 2;
  int max_iterations_cap = 50;     // upper bound for per-run overrides
  std::size_t max_rag_windows = 100000;
};

/// Everything a run needs. Referenced objects must outlive the service.
struct ServiceDeps {
  ChatBackend& backend;
  const HelperRegistry& registry;
  SensorStore& store;
  Sandbox& sandbox;
  const StressPredictor& predictor;
  const Embedder& embedder;
  DisplayZone zone;
  EngineConfig engine;
  RagConfig rag;
  PromptSet prompts = PromptSet::builtin();
};

struct RunHandle {
  std::string run_id;
  double created_at = 0;
  RunStatus status = RunStatus::pending;
};

struct EventBatch {
  std::vector<TraceEvent> events;
  bool finished = false;  // the last event of the run has been delivered
};

/// Run registry, event fan-out, persistence and the non-HTTP halves of every
/// endpoint. Thread-safe.
class Service {
 public:
  Service(ServiceDeps deps, ServiceConfig config);
  ~Service();

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Body: {query, user_id, instructions?, period?: {start, end}, config?:
  /// {max_iterations, model, temperature, top_p}}. Starts the run on its own
  /// thread and returns at once.
  RunHandle create_run(const nlohmann::json& body);

  RunHandle handle(const std::string& run_id) const;

  /// Events from index `from` on. Blocks up to `timeout` when none are
  /// available yet. Throws Error(not_found) for an unknown run.
  EventBatch wait_events(const std::string& run_id, std::size_t from,
                         std::chrono::milliseconds timeout) const;

  /// {run_id, status, ready: false} while running; otherwise the full record
  /// with answer, state and trace.
  nlohmann::json run_view(const std::string& run_id) const;

  IngestReport ingest(StreamKind stream, std::string_view jsonl);

  /// Body: {user_id, query, start, end, k?, instructions?}.
  nlohmann::json rag_query(const nlohmann::json& body) const;

  /// Body: {corpus: JSONL string or array, repetitions?, systems?, jobs?,
  /// labels?: [{query_id, system, accuracy}], ratings_csv?}. Runs in the
  /// background; returns the evaluation id.
  std::string start_eval(const nlohmann::json& body);

  /// The named (or latest) evaluation: {eval_id, ready: false} while it runs,
  /// then the report. Throws Error(not_found) when there is none.
  nlohmann::json eval_report(const std::optional<std::string>& eval_id) const;

  /// Blocks until no run or evaluation is in flight.
  void wait_idle();

  std::size_t active_runs() const;

 private:
  struct RunRecord;
  struct EvalRecord;

  std::shared_ptr<RunRecord> find(const std::string& run_id) const;
  std::string fresh_id(const char* prefix);
  void execute(std::shared_ptr<RunRecord> record);
  void persist_event(const RunRecord& record, const TraceEvent& event) const;
  void persist_final(const RunRecord& record) const;
  void load_persisted();
  std::filesystem::path runs_dir() const;

  ServiceDeps deps_;
  ServiceConfig config_;
  RagBaseline rag_;

  mutable std::mutex mutex_;
  std::condition_variable idle_cv_;
  std::map<std::string, std::shared_ptr<RunRecord>> runs_;
  std::map<std::string, std::shared_ptr<EvalRecord>> evals_;
  std::string latest_eval_;
  std::size_t active_ = 0;
  std::size_t active_evals_ = 0;
  std::vector<std::thread> threads_;

  std::map<StreamKind, std::unique_ptr<std::mutex>> ingest_locks_;
};

/// HTTP binding of a Service.
class HttpServer {
 public:
  explicit HttpServer(Service& service);
  ~HttpServer();

  /// Binds (port 0 picks a free port) and returns the bound port.
  int bind(const std::string& host, int port);
  /// Serves until stop(). Returns false if the listener failed.
  bool listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace senseloop
