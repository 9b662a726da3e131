#include "senseloop/service.hpp"

#include <httplib.h>

#include <fstream>
#include <random>
#include <set>

namespace senseloop {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

const json& require(const json& body, const char* key) {
  if (!body.is_object() || !body.contains(key)) {
    throw Error(ErrorKind::validation, std::string("missing field '") + key + "'");
  }
  return body.at(key);
}

std::string require_string(const json& body, const char* key) {
  const json& v = require(body, key);
  if (!v.is_string() || trim(v.get<std::string>()).empty()) {
    throw Error(ErrorKind::validation, std::string("field '") + key + "' must be a non-empty string");
  }
  return v.get<std::string>();
}

EpochSeconds time_value(const json& v, const DisplayZone& zone, const char* key) {
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) return zone.parse(v.get<std::string>());
  throw Error(ErrorKind::validation, std::string("field '") + key + "' must be a number or a time string");
}

TimeRange range_from(const json& body, const DisplayZone& zone) {
  TimeRange r{time_value(require(body, "start"), zone, "start"), time_value(require(body, "end"), zone, "end")};
  if (!r.valid()) throw Error(ErrorKind::validation, "end must not precede start");
  return r;
}

void write_atomic(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  write_file(tmp.string(), content);
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error(ErrorKind::io, "cannot rename " + tmp.string() + ": " + ec.message());
}

}  // namespace

struct Service::RunRecord {
  RunHandle handle;
  RunSpec spec;
  std::unique_ptr<Engine> engine;
  std::optional<RunResult> result;  // set once finished
  std::vector<TraceEvent> events;
  bool finished = false;
  mutable std::mutex mutex;
  mutable std::condition_variable cv;
};

struct Service::EvalRecord {
  std::string id;
  double created_at = 0;
  bool finished = false;
  std::string error;
  std::vector<RunOutcome> outcomes;
  std::vector<SubjectiveRating> ratings;
  json report;
};

Service::Service(ServiceDeps deps, ServiceConfig config)
    : deps_(std::move(deps)),
      config_(std::move(config)),
      rag_(deps_.backend, deps_.embedder, deps_.rag, deps_.prompts) {
  if (config_.max_active_runs == 0) throw Error(ErrorKind::validation, "max_active_runs must be positive");
  for (auto s : kAllStreams) ingest_locks_[s] = std::make_unique<std::mutex>();
  if (!config_.data_dir.empty()) {
    fs::create_directories(runs_dir());
    load_persisted();
  }
}

Service::~Service() {
  std::vector<std::thread> threads;
  {
    std::lock_guard lock(mutex_);
    threads.swap(threads_);
  }
  for (auto& t : threads) {
    if (t.joinable()) t.join();
  }
}

fs::path Service::runs_dir() const { return config_.data_dir / "runs"; }

std::string Service::fresh_id(const char* prefix) {
  static thread_local std::mt19937_64 rng{std::random_device{}()};
  char buf[24];
  for (;;) {
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(rng()));
    std::string id = std::string(prefix) + buf;
    if (!runs_.count(id) && !evals_.count(id)) return id;
  }
}

std::size_t Service::active_runs() const {
  std::lock_guard lock(mutex_);
  return active_;
}

RunHandle Service::create_run(const json& body) {
  if (!body.is_object()) throw Error(ErrorKind::validation, "request body must be a JSON object");
  RunSpec spec;
  spec.query = require_string(body, "query");
  spec.user_id = require_string(body, "user_id");
  if (body.contains("instructions")) {
    if (!body["instructions"].is_string()) throw Error(ErrorKind::validation, "instructions must be a string");
    if (!trim(body["instructions"].get<std::string>()).empty()) spec.instructions = body["instructions"];
  }
  if (body.contains("period") && !body["period"].is_null()) spec.period = range_from(body["period"], deps_.zone);

  EngineConfig ec = deps_.engine;
  if (body.contains("config") && !body["config"].is_null()) {
    const json& c = body["config"];
    if (!c.is_object()) throw Error(ErrorKind::validation, "config must be an object");
    for (const auto& [key, value] : c.items()) {
      if (key == "max_iterations") {
        if (!value.is_number_integer()) throw Error(ErrorKind::validation, "max_iterations must be an integer");
        const int n = value.get<int>();
        if (n < 1 || n > config_.max_iterations_cap) {
          throw Error(ErrorKind::validation,
                      "max_iterations must be between 1 and " + std::to_string(config_.max_iterations_cap));
        }
        ec.max_iterations = n;
      } else if (key == "model") {
        if (!value.is_string() || value.get<std::string>().empty()) {
          throw Error(ErrorKind::validation, "model must be a non-empty string");
        }
        ec.agent.model = value;
      } else if (key == "temperature" || key == "top_p") {
        if (!value.is_number()) throw Error(ErrorKind::validation, key + " must be a number");
        (key == "temperature" ? ec.agent.temperature : ec.agent.top_p) = value.get<double>();
      } else {
        throw Error(ErrorKind::validation, "unknown config key '" + key + "'");
      }
    }
  }

  auto record = std::make_shared<RunRecord>();
  RunHandle handle;
  {
    std::lock_guard lock(mutex_);
    if (active_ >= config_.max_active_runs) {
      throw CapacityExceeded("too many active runs (" + std::to_string(active_) + "); retry later",
                             config_.retry_after_seconds);
    }
    spec.run_id = fresh_id("run-");
    record->handle = {spec.run_id, now_seconds(), RunStatus::pending};
    record->spec = spec;
    record->engine = std::make_unique<Engine>(Engine{deps_.backend, deps_.registry, deps_.store, deps_.sandbox,
                                                     deps_.predictor, deps_.zone, ec, deps_.prompts});
    runs_[spec.run_id] = record;
    handle = record->handle;
    ++active_;
    // TODO: reap finished run threads instead of joining them all at shutdown.
    threads_.emplace_back([this, record] { execute(record); });
  }
  return handle;
}

void Service::execute(std::shared_ptr<RunRecord> record) {
  auto append = [&](TraceEvent e) {
    {
      std::lock_guard lock(record->mutex);
      if (record->finished) return;
      e.seq = record->events.size();
      if (auto s = parse_run_status(e.phase)) record->handle.status = *s;
      record->events.push_back(e);
      if (e.final()) record->finished = true;
    }
    try {
      persist_event(*record, e);
    } catch (const std::exception&) {
      // The in-memory stream stays authoritative.
    }
    record->cv.notify_all();
  };

  RunResult result;
  try {
    result = run(*record->engine, record->spec, [&](const TraceEvent& e) { append(e); });
  } catch (const std::exception& e) {
    result.error = e.what();
  }
  bool need_final = false;
  {
    std::lock_guard lock(record->mutex);
    need_final = !record->finished;
  }
  if (need_final) {
    TraceEvent e;
    e.run_id = record->spec.run_id;
    e.phase = "error";
    e.wall_time = now_seconds();
    e.payload = {{"error", result.error.empty() ? "run ended without a final event" : result.error}, {"final", true}};
    append(e);
  }
  {
    std::lock_guard lock(record->mutex);
    result.trace = record->events;
    if (!result.error.empty() && result.state.spec.run_id.empty()) {
      result.state.spec = record->spec;
    }
    if (is_terminal(result.state.status)) record->handle.status = result.state.status;
    record->result = std::move(result);
  }
  try {
    persist_final(*record);
  } catch (const std::exception&) {
  }
  record->cv.notify_all();
  {
    std::lock_guard lock(mutex_);
    --active_;
  }
  idle_cv_.notify_all();
}

std::shared_ptr<Service::RunRecord> Service::find(const std::string& run_id) const {
  std::lock_guard lock(mutex_);
  const auto it = runs_.find(run_id);
  if (it == runs_.end()) throw Error(ErrorKind::not_found, "unknown run '" + run_id + "'");
  return it->second;
}

RunHandle Service::handle(const std::string& run_id) const {
  auto r = find(run_id);
  std::lock_guard lock(r->mutex);
  return r->handle;
}

EventBatch Service::wait_events(const std::string& run_id, std::size_t from,
                                std::chrono::milliseconds timeout) const {
  auto r = find(run_id);
  std::unique_lock lock(r->mutex);
  r->cv.wait_for(lock, timeout, [&] { return r->events.size() > from || r->finished; });
  EventBatch batch;
  if (from < r->events.size()) batch.events.assign(r->events.begin() + static_cast<std::ptrdiff_t>(from), r->events.end());
  batch.finished = r->finished && from + batch.events.size() >= r->events.size();
  return batch;
}

json Service::run_view(const std::string& run_id) const {
  auto r = find(run_id);
  std::lock_guard lock(r->mutex);
  json view = {{"run_id", r->handle.run_id},
               {"created_at", r->handle.created_at},
               {"status", to_string(r->handle.status)}};
  if (!r->result) {
    view["ready"] = false;
    return view;
  }
  const RunResult& res = *r->result;
  view["ready"] = true;
  view["answer"] = res.answer ? to_json(*res.answer) : json(nullptr);
  view["cutoff"] = res.state.status == RunStatus::cutoff;
  view["error"] = res.error;
  view["state"] = to_json(res.state);
  json trace = json::array();
  for (const auto& e : res.trace) trace.push_back(to_json(e));
  view["trace"] = trace;
  return view;
}

void Service::persist_event(const RunRecord& record, const TraceEvent& event) const {
  if (config_.data_dir.empty()) return;
  std::ofstream out(runs_dir() / (record.spec.run_id + ".trace.jsonl"), std::ios::app);
  out << to_json(event).dump() << '\n';
}

void Service::persist_final(const RunRecord& record) const {
  if (config_.data_dir.empty()) return;
  json j;
  {
    std::lock_guard lock(record.mutex);
    const RunResult& res = *record.result;
    json trace = json::array();
    for (const auto& e : res.trace) trace.push_back(to_json(e));
    j = {{"run_id", record.spec.run_id},
         {"created_at", record.handle.created_at},
         {"status", to_string(record.handle.status)},
         {"state", to_json(res.state)},
         {"answer", res.answer ? to_json(*res.answer) : json(nullptr)},
         {"error", res.error},
         {"trace", trace}};
  }
  write_atomic(runs_dir() / (record.spec.run_id + ".json"), j.dump() + "\n");
}

void Service::load_persisted() {
  std::set<std::string> complete;
  for (const auto& entry : fs::directory_iterator(runs_dir())) {
    const std::string name = entry.path().filename().string();
    if (name.size() <= 5 || name.ends_with(".trace.jsonl") || !name.ends_with(".json")) continue;
    try {
      const json j = json::parse(read_file(entry.path().string()));
      auto r = std::make_shared<RunRecord>();
      RunResult res;
      res.state = run_state_from_json(j.at("state"));
      if (!j.at("answer").is_null()) res.answer = answer_from_json(j["answer"]);
      res.error = j.value("error", "");
      for (const auto& e : j.at("trace")) res.trace.push_back(trace_event_from_json(e));
      r->spec = res.state.spec;
      r->spec.run_id = j.at("run_id");
      r->handle = {r->spec.run_id, j.value("created_at", 0.0),
                   parse_run_status(j.value("status", "pending")).value_or(res.state.status)};
      r->events = res.trace;
      r->finished = true;
      r->result = std::move(res);
      complete.insert(r->spec.run_id);
      runs_[r->spec.run_id] = r;
    } catch (const std::exception&) {
      // A damaged record is skipped; its trace file stays on disk for inspection.
    }
  }
  // Runs interrupted by a restart: keep their partial trace and close it.
  for (const auto& entry : fs::directory_iterator(runs_dir())) {
    const std::string name = entry.path().filename().string();
    if (!name.ends_with(".trace.jsonl")) continue;
    const std::string id = name.substr(0, name.size() - std::string(".trace.jsonl").size());
    if (complete.count(id)) continue;
    auto r = std::make_shared<RunRecord>();
    r->spec.run_id = id;
    for (const auto& line : split_lines(read_file(entry.path().string()))) {
      if (trim(line).empty()) continue;
      try {
        r->events.push_back(trace_event_from_json(json::parse(line)));
      } catch (const std::exception&) {
        break;  // torn final line
      }
    }
    TraceEvent e;
    e.run_id = id;
    e.seq = r->events.size();
    e.phase = "error";
    e.payload = {{"error", "the service restarted before this run finished"}, {"final", true}};
    r->events.push_back(e);
    r->finished = true;
    RunResult res;
    res.state.spec.run_id = id;
    res.error = e.payload["error"];
    res.trace = r->events;
    r->handle = {id, r->events.front().wall_time, RunStatus::pending};
    r->result = std::move(res);
    runs_[id] = r;
    try {
      persist_event(*r, e);
      persist_final(*r);
    } catch (const std::exception&) {
    }
  }
}

IngestReport Service::ingest(StreamKind stream, std::string_view jsonl) {
  std::lock_guard lock(*ingest_locks_.at(stream));
  return deps_.store.ingest_stream(stream, split_lines(jsonl), deps_.zone);
}

json Service::rag_query(const json& body) const {
  const std::string user = require_string(body, "user_id");
  const std::string query = require_string(body, "query");
  const TimeRange range = range_from(body, deps_.zone);
  RagConfig cfg = deps_.rag;
  if (body.contains("k")) {
    if (!body["k"].is_number_integer() || body["k"].get<long long>() < 1) {
      throw Error(ErrorKind::validation, "k must be a positive integer");
    }
    cfg.k = body["k"].get<std::size_t>();
  }
  if ((range.end - range.start) / cfg.window_seconds > static_cast<double>(config_.max_rag_windows)) {
    throw Error(ErrorKind::validation, "time range spans too many windows");
  }
  const std::string instructions = body.value("instructions", std::string("answer clearly and concisely"));
  RagBaseline baseline(deps_.backend, deps_.embedder, cfg, deps_.prompts);
  const FlatIndex index = baseline.build_index(deps_.store, user, range, deps_.zone);
  json out = to_json(baseline.answer(query, index, instructions));
  out["indexed_chunks"] = index.size();
  return out;
}

std::string Service::start_eval(const json& body) {
  const json& c = require(body, "corpus");
  std::vector<QuerySpec> corpus;
  if (c.is_string()) {
    corpus = load_corpus(c.get<std::string>(), deps_.zone);
  } else if (c.is_array()) {
    std::string jsonl;
    for (const auto& q : c) jsonl += q.dump() + "\n";
    corpus = load_corpus(jsonl, deps_.zone);
  } else {
    throw Error(ErrorKind::validation, "corpus must be a JSONL string or an array");
  }
  if (corpus.empty()) throw Error(ErrorKind::validation, "corpus is empty");

  std::vector<SystemKind> systems = {SystemKind::engine, SystemKind::rag};
  if (body.contains("systems")) {
    systems.clear();
    for (const auto& s : body["systems"]) {
      const auto k = s.is_string() ? parse_system(s.get<std::string>()) : std::nullopt;
      if (!k) throw Error(ErrorKind::validation, "systems must list engine and/or rag");
      systems.push_back(*k);
    }
    if (systems.empty()) throw Error(ErrorKind::validation, "systems must not be empty");
  }
  const int repetitions = body.value("repetitions", 3);
  const int jobs = body.value("jobs", 1);
  if (repetitions < 1 || repetitions > 20) throw Error(ErrorKind::validation, "repetitions must be 1..20");
  if (jobs < 1 || jobs > 64) throw Error(ErrorKind::validation, "jobs must be 1..64");

  std::map<std::pair<std::string, SystemKind>, AccuracyLabel> labels;
  if (body.contains("labels")) {
    for (const auto& l : body["labels"]) {
      const auto sys = parse_system(l.value("system", ""));
      const auto acc = parse_accuracy(l.value("accuracy", ""));
      if (!sys || !acc) throw Error(ErrorKind::validation, "labels need system and accuracy");
      labels[{l.value("query_id", ""), *sys}] = *acc;
    }
  }
  std::vector<SubjectiveRating> ratings;
  if (body.contains("ratings_csv")) ratings = ratings_from_csv(body["ratings_csv"].get<std::string>());

  auto record = std::make_shared<EvalRecord>();
  record->created_at = now_seconds();
  record->ratings = std::move(ratings);
  {
    std::lock_guard lock(mutex_);
    record->id = fresh_id("eval-");
    evals_[record->id] = record;
    latest_eval_ = record->id;
    ++active_evals_;
    threads_.emplace_back([this, record, corpus = std::move(corpus), systems, repetitions, jobs,
                           labels = std::move(labels)] {
      std::vector<RunOutcome> outcomes;
      std::string error;
      json report;
      try {
        Engine engine{deps_.backend, deps_.registry, deps_.store, deps_.sandbox, deps_.predictor,
                      deps_.zone,    deps_.engine,   deps_.prompts};
        CorpusRunner runner;
        runner.engine = &engine;
        runner.rag = &rag_;
        runner.store = &deps_.store;
        runner.zone = deps_.zone;
        runner.repetitions = repetitions;
        runner.jobs = jobs;
        runner.provenance = "service:" + record->id;
        outcomes = run_corpus(corpus, runner, systems);
        for (auto& o : outcomes) {
          const auto it = labels.find({o.query_id, o.system});
          if (it != labels.end()) o.accuracy = it->second;
        }
        report = report_to_json(build_report(outcomes, record->ratings));
      } catch (const std::exception& e) {
        error = e.what();
      }
      {
        std::lock_guard lock(mutex_);
        record->outcomes = std::move(outcomes);
        record->report = std::move(report);
        record->error = error;
        record->finished = true;
        --active_evals_;
      }
      if (!config_.data_dir.empty() && error.empty()) {
        try {
          fs::create_directories(config_.data_dir / "evals" / record->id);
          export_report(build_report(record->outcomes, record->ratings), config_.data_dir / "evals" / record->id);
          write_file((config_.data_dir / "evals" / record->id / "outcomes.csv").string(),
                     outcomes_to_csv(record->outcomes));
        } catch (const std::exception&) {
        }
      }
      idle_cv_.notify_all();
    });
  }
  return record->id;
}

json Service::eval_report(const std::optional<std::string>& eval_id) const {
  std::lock_guard lock(mutex_);
  const std::string id = eval_id.value_or(latest_eval_);
  const auto it = evals_.find(id);
  if (id.empty() || it == evals_.end()) throw Error(ErrorKind::not_found, "no such evaluation");
  const EvalRecord& e = *it->second;
  json out = {{"eval_id", e.id}, {"created_at", e.created_at}, {"ready", e.finished}};
  if (!e.finished) return out;
  if (!e.error.empty()) {
    out["error"] = e.error;
    return out;
  }
  out["report"] = e.report;
  out["text"] = report_to_text(build_report(e.outcomes, e.ratings));
  return out;
}

void Service::wait_idle() {
  std::unique_lock lock(mutex_);
  idle_cv_.wait(lock, [&] { return active_ == 0 && active_evals_ == 0; });
}

// ---------------------------------------------------------------------------
// HTTP

namespace {

int http_status(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::validation:
    case ErrorKind::parse: return 400;
    case ErrorKind::not_found: return 404;
    case ErrorKind::state: return 409;
    case ErrorKind::backend:
    case ErrorKind::cassette_miss: return 502;
    default: return 500;
  }
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump() + "\n", "application/json");
}

json parse_body(const httplib::Request& req) {
  try {
    return json::parse(req.body);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::parse, std::string("request body is not valid JSON: ") + e.what());
  }
}

}  // namespace

struct HttpServer::Impl {
  Service& service;
  httplib::Server server;

  explicit Impl(Service& s) : service(s) {
    server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      try {
        std::rethrow_exception(ep);
      } catch (const CapacityExceeded& e) {
        res.set_header("Retry-After", std::to_string(e.retry_after()));
        send_json(res, 429, {{"error", {{"kind", "capacity"}, {"message", e.what()}, {"retry_after", e.retry_after()}}}});
      } catch (const Error& e) {
        send_json(res, http_status(e.kind()), {{"error", {{"kind", to_string(e.kind())}, {"message", e.what()}}}});
      } catch (const std::exception& e) {
        send_json(res, 500, {{"error", {{"kind", "internal"}, {"message", e.what()}}}});
      }
    });

    server.Post("/runs", [this](const httplib::Request& req, httplib::Response& res) {
      const RunHandle h = service.create_run(parse_body(req));
      send_json(res, 201, {{"run_id", h.run_id}, {"status", to_string(h.status)}, {"created_at", h.created_at}});
    });

    server.Get(R"(/runs/([A-Za-z0-9\-]+))", [this](const httplib::Request& req, httplib::Response& res) {
      const json view = service.run_view(req.matches[1]);
      send_json(res, view["ready"].get<bool>() ? 200 : 202, view);
    });

    server.Get(R"(/runs/([A-Za-z0-9\-]+)/events)", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      service.handle(id);  // 404 before the stream starts
      auto next = std::make_shared<std::size_t>(0);
      res.set_chunked_content_provider(
          "application/x-ndjson", [this, id, next](std::size_t, httplib::DataSink& sink) {
            const EventBatch batch = service.wait_events(id, *next, std::chrono::milliseconds(500));
            for (const auto& e : batch.events) {
              const std::string line = to_json(e).dump() + "\n";
              if (!sink.write(line.data(), line.size())) return false;
              ++*next;
            }
            if (batch.finished) sink.done();
            return sink.is_writable();
          });
    });

    server.Post(R"(/ingest/([a-z_]+))", [this](const httplib::Request& req, httplib::Response& res) {
      const auto stream = parse_stream(req.matches[1].str());
      if (!stream) throw Error(ErrorKind::validation, "unknown stream '" + req.matches[1].str() + "'");
      const IngestReport r = service.ingest(*stream, req.body);
      json rejections = json::array();
      for (const auto& x : r.rejections) rejections.push_back({{"line", x.line}, {"reason", x.reason}});
      send_json(res, 200,
                {{"stream", to_string(*stream)},
                 {"accepted", r.accepted},
                 {"inserted", r.inserted},
                 {"duplicates", r.duplicates},
                 {"rejected", r.rejections.size()},
                 {"rejections", rejections}});
    });

    server.Post("/rag/query", [this](const httplib::Request& req, httplib::Response& res) {
      send_json(res, 200, service.rag_query(parse_body(req)));
    });

    server.Post("/eval/corpus", [this](const httplib::Request& req, httplib::Response& res) {
      send_json(res, 202, {{"eval_id", service.start_eval(parse_body(req))}, {"ready", false}});
    });

    server.Get("/eval/report", [this](const httplib::Request& req, httplib::Response& res) {
      std::optional<std::string> id;
      if (req.has_param("eval_id")) id = req.get_param_value("eval_id");
      const json r = service.eval_report(id);
      send_json(res, r["ready"].get<bool>() ? 200 : 202, r);
    });

    server.Get("/health", [](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, {{"ok", true}});
    });
  }
};

HttpServer::HttpServer(Service& service) : impl_(std::make_unique<Impl>(service)) {}
HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw Error(ErrorKind::io, "cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

bool HttpServer::listen() { return impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace senseloop
