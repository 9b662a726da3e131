#include "cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>

#include "senseloop/eval.hpp"
#include "senseloop/orchestrator.hpp"
#include "senseloop/rag.hpp"
#include "senseloop/sandbox.hpp"
#include "senseloop/service.hpp"

namespace senseloop::cli {

using nlohmann::json;
namespace fs = std::filesystem;

json default_settings() {
  return {{"base_url", "https://api.openai.com/v1"},
          {"api_key", ""},
          {"model", "gpt-4o"},
          {"temperature", 1.0},
          {"top_p", 1.0},
          {"max_iterations", 5},
          {"codegen_attempts", 3},
          {"http_max_attempts", 3},
          {"http_timeout_seconds", 120},
          {"sandbox", "subprocess"},
          {"sandbox_timeout_seconds", 60},
          {"window_seconds", 3600},
          {"k", 8},
          {"embedder", "lexical"},
          {"embedding_model", "text-embedding-3-small"},
          {"embedding_dimension", 1536},
          {"data_dir", "senseloop-data"},
          {"zone_offset_seconds", 0},
          {"max_active_runs", 8}};
}

json load_settings(const std::string& config_path) {
  json s = default_settings();
  if (!config_path.empty()) {
    json file;
    try {
      file = json::parse(read_file(config_path));
    } catch (const json::exception& e) {
      throw Error(ErrorKind::parse, "config " + config_path + ": " + e.what());
    }
    if (!file.is_object()) throw Error(ErrorKind::validation, "config " + config_path + " must be a JSON object");
    for (const auto& [key, value] : file.items()) {
      if (!s.contains(key)) throw Error(ErrorKind::validation, "config " + config_path + ": unknown key '" + key + "'");
      if (s[key].type_name() != std::string(value.type_name()) && !(s[key].is_number() && value.is_number())) {
        throw Error(ErrorKind::validation, "config " + config_path + ": '" + key + "' has the wrong type");
      }
      s[key] = value;
    }
  }
  auto env = [](const char* name) -> std::string {
    const char* v = std::getenv(name);
    return v ? v : "";
  };
  if (auto v = env("SENSELOOP_BASE_URL"); !v.empty()) s["base_url"] = v;
  if (auto v = env("OPENAI_API_KEY"); !v.empty()) s["api_key"] = v;
  if (auto v = env("SENSELOOP_API_KEY"); !v.empty()) s["api_key"] = v;
  if (auto v = env("SENSELOOP_MODEL"); !v.empty()) s["model"] = v;
  if (auto v = env("SENSELOOP_DATA_DIR"); !v.empty()) s["data_dir"] = v;
  return s;
}

namespace {

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::validation:
    case ErrorKind::parse:
    case ErrorKind::not_found:
    case ErrorKind::state: return ExitCode::validation;
    case ErrorKind::cassette_miss: return ExitCode::cassette_miss;
    default: return ExitCode::backend;
  }
}

void report_error(std::ostream& err, std::string_view kind, const std::string& message) {
  err << json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << '\n';
}

/// Everything a command may need, built lazily from settings and flags.
struct Context {
  json settings;
  std::ostream& out;
  std::ostream& err;

  DisplayZone zone() const { return DisplayZone(settings["zone_offset_seconds"].get<int>()); }
  fs::path data_dir() const { return settings["data_dir"].get<std::string>(); }

  RemoteConfig remote() const {
    RemoteConfig rc;
    rc.base_url = settings["base_url"];
    rc.api_key = settings["api_key"];
    rc.max_attempts = settings["http_max_attempts"];
    rc.timeout = std::chrono::seconds(settings["http_timeout_seconds"].get<int>());
    return rc;
  }

  std::unique_ptr<FileStore> store() const { return std::make_unique<FileStore>(data_dir() / "store"); }

  std::unique_ptr<Embedder> embedder() const {
    const std::string kind = settings["embedder"];
    if (kind == "lexical") return std::make_unique<LexicalEmbedder>();
    if (kind == "remote") {
      return std::make_unique<RemoteEmbedder>(remote(), settings["embedding_model"],
                                              settings["embedding_dimension"].get<std::size_t>());
    }
    throw Error(ErrorKind::validation, "embedder must be lexical or remote");
  }

  std::unique_ptr<Sandbox> sandbox() const {
    const auto kind = parse_sandbox_kind(settings["sandbox"].get<std::string>());
    if (!kind) throw Error(ErrorKind::validation, "sandbox must be subprocess or container");
    return make_sandbox(*kind);
  }

  EngineConfig engine_config() const {
    EngineConfig ec;
    ec.max_iterations = settings["max_iterations"];
    if (ec.max_iterations < 1) throw Error(ErrorKind::validation, "max_iterations must be at least 1");
    ec.agent.model = settings["model"];
    ec.agent.temperature = settings["temperature"];
    ec.agent.top_p = settings["top_p"];
    ec.agent.codegen_attempts = settings["codegen_attempts"];
    ec.agent.limits.wall_clock = std::chrono::milliseconds(
        static_cast<long long>(settings["sandbox_timeout_seconds"].get<double>() * 1000));
    return ec;
  }

  RagConfig rag_config() const {
    RagConfig rc;
    rc.window_seconds = settings["window_seconds"];
    rc.k = settings["k"];
    rc.model = settings["model"];
    rc.temperature = settings["temperature"];
    rc.top_p = settings["top_p"];
    return rc;
  }
};

/// Backend selection shared by ask, rag, eval run and serve.
struct BackendOptions {
  std::string kind = "remote";
  std::string cassette;
  std::string record;
  std::string script;

  void add_to(CLI::App* app) {
    app->add_option("--backend", kind, "remote, scripted or replay")
        ->check(CLI::IsMember({"remote", "scripted", "replay"}));
    app->add_option("--cassette", cassette, "cassette to replay (implies --backend replay)");
    app->add_option("--record", record, "record every exchange to this cassette");
    app->add_option("--script", script, "JSON array of canned responses for --backend scripted");
  }

  struct Built {
    std::shared_ptr<ChatBackend> backend;
    std::shared_ptr<RecordingBackend> recorder;
  };

  Built build(const Context& ctx) const {
    std::string k = kind;
    if (!cassette.empty() && k == "remote") k = "replay";
    Built b;
    if (k == "replay") {
      if (cassette.empty()) throw Error(ErrorKind::validation, "--backend replay needs --cassette");
      b.backend = ReplayBackend::from_file(cassette);
    } else if (k == "scripted") {
      if (script.empty()) throw Error(ErrorKind::validation, "--backend scripted needs --script");
      json j;
      try {
        j = json::parse(read_file(script));
      } catch (const json::exception& e) {
        throw Error(ErrorKind::parse, "script " + script + ": " + e.what());
      }
      if (!j.is_array()) throw Error(ErrorKind::validation, "script must be a JSON array of strings");
      b.backend = std::make_shared<ScriptedBackend>(j.get<std::vector<std::string>>());
    } else {
      b.backend = std::make_shared<RemoteBackend>(ctx.remote());
    }
    if (!record.empty()) {
      b.recorder = std::make_shared<RecordingBackend>(b.backend, record);
      b.backend = b.recorder;
    }
    return b;
  }
};

std::optional<TimeRange> optional_range(const Context& ctx, const std::string& start, const std::string& end) {
  if (start.empty() && end.empty()) return std::nullopt;
  if (start.empty() || end.empty()) throw Error(ErrorKind::validation, "--start and --end go together");
  TimeRange r{ctx.zone().parse(start), ctx.zone().parse(end)};
  if (!r.valid()) throw Error(ErrorKind::validation, "--end precedes --start");
  return r;
}

TimeRange coverage_range(const SensorStore& store, const std::string& user) {
  const CoverageReport cov = store.coverage(user);
  if (cov.entries.empty()) return {0, 0};
  TimeRange r{cov.entries.front().earliest, cov.entries.front().latest};
  for (const auto& e : cov.entries) {
    r.start = std::min(r.start, e.earliest);
    r.end = std::max(r.end, e.latest);
  }
  r.end += 1;
  return r;
}

std::vector<SystemKind> parse_systems(const std::string& text) {
  std::vector<SystemKind> systems;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = text.find(',', pos);
    const std::string part = trim(text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
    const auto s = parse_system(part);
    if (!s) throw Error(ErrorKind::validation, "unknown system '" + part + "' (use engine, rag)");
    systems.push_back(*s);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return systems;
}

// ---------------------------------------------------------------------------

int cmd_ingest(Context& ctx, const std::string& stream_name, const std::string& file, const std::string& manifest) {
  std::vector<ManifestEntry> entries;
  if (!manifest.empty()) {
    entries = read_manifest(manifest);
  } else {
    if (stream_name.empty() || file.empty()) throw Error(ErrorKind::validation, "ingest needs --stream and --file, or --manifest");
    const auto stream = parse_stream(stream_name);
    if (!stream) throw Error(ErrorKind::validation, "unknown stream '" + stream_name + "'");
    entries.push_back({*stream, file});
  }
  auto store = ctx.store();
  json report = json::array();
  for (const auto& e : entries) {
    const IngestReport r = store->ingest_stream(e.stream, split_lines(read_file(e.path.string())), ctx.zone());
    json rejections = json::array();
    for (const auto& x : r.rejections) rejections.push_back({{"line", x.line}, {"reason", x.reason}});
    report.push_back({{"stream", to_string(e.stream)},
                      {"file", e.path.string()},
                      {"accepted", r.accepted},
                      {"inserted", r.inserted},
                      {"duplicates", r.duplicates},
                      {"rejected", r.rejections.size()},
                      {"rejections", rejections}});
  }
  ctx.out << (report.size() == 1 ? report[0] : report).dump() << '\n';
  return ExitCode::ok;
}

struct AskArgs {
  std::string user, query, present = "answer clearly and concisely", start, end, trace_out, run_id = "cli";
  int max_iter = 0;
  bool json_output = false;
  BackendOptions backend;
};


int cmd_ask(Context& ctx, const AskArgs& a) {
  auto built = a.backend.build(ctx);
  auto store = ctx.store();
  auto sandbox = ctx.sandbox();
  const HelperRegistry registry = builtin_registry();
  const LogisticStressStub predictor;
  EngineConfig ec = ctx.engine_config();
  if (a.max_iter > 0) ec.max_iterations = a.max_iter;
  Engine engine{*built.backend, registry, *store, *sandbox, predictor, ctx.zone(), ec};
  RunSpec spec{a.run_id, a.query, a.present, a.user, optional_range(ctx, a.start, a.end)};
  const RunResult result = run(engine, spec);
  if (built.recorder) built.recorder->close();
  if (!a.trace_out.empty()) {
    std::string lines;
    for (const auto& e : result.trace) lines += to_json(e).dump() + "\n";
    write_file(a.trace_out, lines);
  }
  if (!result.ok()) throw Error(result.error_kind, result.error);
  if (a.json_output) {
    ctx.out << json{{"run_id", spec.run_id},
                    {"status", to_string(result.state.status)},
                    {"iteration", result.state.iteration},
                    {"answer", result.answer->text},
                    {"failure_note", result.state.understanding.failure_note
                                         ? json(*result.state.understanding.failure_note)
                                         : json(nullptr)}}
                   .dump()
            << '\n';
  } else {
    ctx.out << result.answer->text << '\n';
  }
  return ExitCode::ok;
}

struct RagArgs {
  std::string user, query, present = "answer clearly and concisely", start, end, index_out;
  int k = 0;
  bool json_output = false;
  BackendOptions backend;
};

int cmd_rag(Context& ctx, const RagArgs& a) {
  auto built = a.backend.build(ctx);
  auto store = ctx.store();
  auto embedder = ctx.embedder();
  RagConfig rc = ctx.rag_config();
  if (a.k > 0) rc.k = static_cast<std::size_t>(a.k);
  const RagBaseline baseline(*built.backend, *embedder, rc);
  const TimeRange range = optional_range(ctx, a.start, a.end).value_or(coverage_range(*store, a.user));
  const FlatIndex index = baseline.build_index(*store, a.user, range, ctx.zone());
  if (!a.index_out.empty()) index.save(a.index_out);
  const RagAnswer answer = baseline.answer(a.query, index, a.present);
  if (built.recorder) built.recorder->close();
  if (a.json_output) {
    ctx.out << to_json(answer).dump() << '\n';
  } else {
    ctx.out << answer.text << '\n';
  }
  return ExitCode::ok;
}

struct EvalRunArgs {
  std::string corpus, systems = "engine,rag", out = "outcomes.csv";
  int repetitions = 3;
  int jobs = 1;
  BackendOptions backend;
};

int cmd_eval_run(Context& ctx, const EvalRunArgs& a) {
  const auto corpus = load_corpus(read_file(a.corpus), ctx.zone());
  if (corpus.empty()) throw Error(ErrorKind::validation, "corpus " + a.corpus + " has no queries");
  const auto systems = parse_systems(a.systems);
  auto built = a.backend.build(ctx);
  auto store = ctx.store();
  auto sandbox = ctx.sandbox();
  auto embedder = ctx.embedder();
  const HelperRegistry registry = builtin_registry();
  const LogisticStressStub predictor;
  const Engine engine{*built.backend, registry, *store, *sandbox, predictor, ctx.zone(), ctx.engine_config()};
  const RagBaseline baseline(*built.backend, *embedder, ctx.rag_config());

  CorpusRunner runner;
  runner.engine = &engine;
  runner.rag = &baseline;
  runner.store = store.get();
  runner.zone = ctx.zone();
  runner.repetitions = a.repetitions;
  runner.jobs = a.jobs;
  if (!a.backend.cassette.empty()) runner.provenance = "cassette:" + a.backend.cassette;
  const auto outcomes = run_corpus(corpus, runner, systems);
  if (built.recorder) built.recorder->close();
  write_file(a.out, outcomes_to_csv(outcomes));

  std::size_t errors = 0;
  for (const auto& o : outcomes) errors += o.error.empty() ? 0 : 1;
  ctx.out << json{{"outcomes", a.out}, {"queries", corpus.size()}, {"rows", outcomes.size()}, {"errors", errors}}.dump()
          << '\n';
  return ExitCode::ok;
}

struct EvalReportArgs {
  std::string outcomes, ratings, export_dir;
  bool json_output = false;
};

int cmd_eval_report(Context& ctx, const EvalReportArgs& a) {
  const auto outcomes = outcomes_from_csv(read_file(a.outcomes));
  std::vector<SubjectiveRating> ratings;
  if (!a.ratings.empty()) ratings = ratings_from_csv(read_file(a.ratings));
  const EvalReport report = build_report(outcomes, ratings);
  if (!a.export_dir.empty()) {
    fs::create_directories(a.export_dir);
    export_report(report, a.export_dir);
  }
  if (a.json_output) {
    ctx.out << report_to_json(report).dump(2) << '\n';
  } else {
    ctx.out << report_to_text(report);
  }
  return ExitCode::ok;
}

struct ServeArgs {
  std::string host = "127.0.0.1";
  int port = 8080;
  BackendOptions backend;
};

int cmd_serve(Context& ctx, const ServeArgs& a) {
  auto built = a.backend.build(ctx);
  fs::create_directories(ctx.data_dir());
  auto store = ctx.store();
  auto sandbox = ctx.sandbox();
  auto embedder = ctx.embedder();
  const HelperRegistry registry = builtin_registry();
  const LogisticStressStub predictor;
  ServiceConfig sc;
  sc.data_dir = ctx.data_dir();
  sc.max_active_runs = ctx.settings["max_active_runs"];
  Service service(ServiceDeps{*built.backend, registry, *store, *sandbox, predictor, *embedder, ctx.zone(),
                              ctx.engine_config(), ctx.rag_config()},
                  sc);
  HttpServer server(service);
  const int port = server.bind(a.host, a.port);
  ctx.out << json{{"listening", a.host + ":" + std::to_string(port)}, {"data_dir", sc.data_dir.string()}}.dump()
          << std::endl;
  const bool ok = server.listen();
  service.wait_idle();
  if (built.recorder) built.recorder->close();
  if (!ok) throw Error(ErrorKind::io, "the HTTP listener stopped unexpectedly");
  return ExitCode::ok;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sensor-data question answering with an iterative LLM agent loop", "senseloop"};
  app.require_subcommand(1);
  std::string config_path;
  std::string data_dir;
  app.add_option("--config", config_path, "JSON settings file")->envname("SENSELOOP_CONFIG");
  app.add_option("--data-dir", data_dir, "data directory (store, runs, evaluations)");

  std::string stream, file, manifest;
  auto* ingest = app.add_subcommand("ingest", "load JSONL sensor records into the store");
  ingest->add_option("--stream", stream, "stream name, e.g. app_usage");
  ingest->add_option("--file", file, "JSONL file with one record per line");
  ingest->add_option("--manifest", manifest, "manifest listing several stream files");

  AskArgs ask_args;
  auto* ask = app.add_subcommand("ask", "answer one question through the agent loop");
  ask->add_option("--user", ask_args.user, "participant id")->required();
  ask->add_option("--query", ask_args.query, "the question")->required();
  ask->add_option("--present", ask_args.present, "presentation instructions");
  ask->add_option("--max-iter", ask_args.max_iter, "iteration cutoff")->check(CLI::Range(1, 1000));
  ask->add_option("--start", ask_args.start, "period start, YYYY-MM-DD[ HH:MM:SS]");
  ask->add_option("--end", ask_args.end, "period end (exclusive)");
  ask->add_option("--trace-out", ask_args.trace_out, "write the event trace as JSONL");
  ask->add_option("--run-id", ask_args.run_id, "run id recorded in the trace");
  ask->add_flag("--json", ask_args.json_output, "print a JSON object instead of the answer text");
  ask_args.backend.add_to(ask);

  RagArgs rag_args;
  auto* rag = app.add_subcommand("rag", "answer one question with the retrieval baseline");
  rag->add_option("--user", rag_args.user, "participant id")->required();
  rag->add_option("--query", rag_args.query, "the question")->required();
  rag->add_option("--present", rag_args.present, "presentation instructions");
  rag->add_option("--k", rag_args.k, "chunks to retrieve")->check(CLI::Range(1, 100000));
  rag->add_option("--start", rag_args.start, "index start (default: all data of the user)");
  rag->add_option("--end", rag_args.end, "index end (exclusive)");
  rag->add_option("--index-out", rag_args.index_out, "save the built index");
  rag->add_flag("--json", rag_args.json_output, "print the answer with retrieved chunk ids and scores");
  rag_args.backend.add_to(rag);

  auto* eval = app.add_subcommand("eval", "evaluation harness");
  eval->require_subcommand(1);
  EvalRunArgs eval_run_args;
  auto* eval_run = eval->add_subcommand("run", "run a query corpus through both systems");
  eval_run->add_option("--corpus", eval_run_args.corpus, "JSONL query corpus")->required();
  eval_run->add_option("--repetitions", eval_run_args.repetitions, "runs per query")->check(CLI::Range(1, 100));
  eval_run->add_option("--systems", eval_run_args.systems, "comma-separated: engine,rag");
  eval_run->add_option("--jobs", eval_run_args.jobs, "queries run in parallel")->check(CLI::Range(1, 256));
  eval_run->add_option("--out", eval_run_args.out, "outcomes CSV to write");
  eval_run_args.backend.add_to(eval_run);
  EvalReportArgs eval_report_args;
  auto* eval_report = eval->add_subcommand("report", "metrics and statistics from judged outcomes");
  eval_report->add_option("--outcomes", eval_report_args.outcomes, "outcomes CSV")->required();
  eval_report->add_option("--ratings", eval_report_args.ratings, "subjective ratings CSV");
  eval_report->add_option("--export", eval_report_args.export_dir, "write metrics.csv and report.json here");
  eval_report->add_flag("--json", eval_report_args.json_output, "print the report as JSON");

  ServeArgs serve_args;
  auto* serve = app.add_subcommand("serve", "run the HTTP service");
  serve->add_option("--port", serve_args.port, "TCP port (0 picks one)")->check(CLI::Range(0, 65535));
  serve->add_option("--host", serve_args.host, "bind address");
  serve_args.backend.add_to(serve);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return ExitCode::ok;
    }
    report_error(err, "usage", e.what());
    return ExitCode::validation;
  }

  try {
    Context ctx{load_settings(config_path), out, err};
    if (!data_dir.empty()) ctx.settings["data_dir"] = data_dir;
    if (*ingest) return cmd_ingest(ctx, stream, file, manifest);
    if (*ask) return cmd_ask(ctx, ask_args);
    if (*rag) return cmd_rag(ctx, rag_args);
    if (*eval_run) return cmd_eval_run(ctx, eval_run_args);
    if (*eval_report) return cmd_eval_report(ctx, eval_report_args);
    if (*serve) return cmd_serve(ctx, serve_args);
  } catch (const Error& e) {
    report_error(err, to_string(e.kind()), e.what());
    return exit_code(e.kind());
  } catch (const json::exception& e) {
    report_error(err, "validation", e.what());
    return ExitCode::validation;
  } catch (const std::exception& e) {
    report_error(err, "internal", e.what());
    return ExitCode::backend;
  }
  return ExitCode::validation;
}

}  // namespace senseloop::cli
