#include "senseloop/rag.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "senseloop/helpers.hpp"

namespace senseloop {

using nlohmann::json;

namespace {

std::string when(const DisplayZone& zone, EpochSeconds t) {
  return "At " + zone.format_time(t) + " on " + zone.format_date(t);
}

std::string span(const DisplayZone& zone, EpochSeconds a, EpochSeconds b) {
  return "From " + zone.format_time(a) + " to " + zone.format_time(b) + " on " + zone.format_date(a);
}

std::string activity_phrase(const std::string& kind) {
  if (kind == "automotive") return "in a vehicle";
  return kind;
}

std::vector<std::string> render_window(const SensorStore& store, const std::string& user,
                                       StreamKind stream, const TimeRange& w, const DisplayZone& zone) {
  std::vector<std::string> lines;
  if (stream == StreamKind::app_usage) {
    for (const auto& b : get_app_usage_blocks(store, user, w)) {
      lines.push_back("Between " + zone.format_time(b.open) + " and " + zone.format_time(b.close) +
                      " on " + zone.format_date(b.open) + ", the user used " + b.app + " for " +
                      format_number(b.duration) + " seconds.");
    }
    return lines;
  }
  const auto records = store.query_records(user, stream, w).records;
  if (records.empty()) return lines;

  auto blocks = [&](auto state_of) {
    std::vector<StateEvent> events;
    for (const auto& r : records) events.push_back({r.timestamp, state_of(r)});
    return pair_state_events(events, w.end);
  };

  switch (stream) {
    case StreamKind::activity:
      for (const auto& b : blocks([](const SensorRecord& r) {
             return std::string(to_string(std::get<ActivityPayload>(r.payload).kind));
           })) {
        lines.push_back(span(zone, b.start, b.end) + ", the user was " + activity_phrase(b.state) + ".");
      }
      break;
    case StreamKind::lock_unlock:
      for (const auto& b : blocks([](const SensorRecord& r) {
             return std::get<LockUnlockPayload>(r.payload).event == LockEvent::lock ? std::string("locked")
                                                                                   : std::string("unlocked");
           })) {
        lines.push_back(span(zone, b.start, b.end) + ", the phone was " + b.state + ".");
      }
      break;
    case StreamKind::wifi:
      // '+' prefixes a real SSID, '-' marks disconnection and '?' an unnamed network.
      for (const auto& b : blocks([](const SensorRecord& r) {
             const auto& p = std::get<WifiPayload>(r.payload);
             if (!p.connected) return std::string("-");
             return p.ssid ? "+" + *p.ssid : std::string("?");
           })) {
        std::string what;
        if (b.state == "-") {
          what = "the user was not connected to any Wi-Fi network";
        } else if (b.state == "?") {
          what = "the user was connected to a Wi-Fi network whose name was not recorded";
        } else {
          what = "the user was connected to the Wi-Fi network named \"" + b.state.substr(1) + "\"";
        }
        lines.push_back(span(zone, b.start, b.end) + ", " + what + ".");
      }
      break;
    default:
      for (const auto& r : records) {
        const std::string at = when(zone, r.timestamp);
        std::visit(
            [&](const auto& p) {
              using P = std::decay_t<decltype(p)>;
              if constexpr (std::is_same_v<P, LocationPayload>) {
                lines.push_back(at + ", the user was at latitude " + format_number(p.latitude) +
                                ", longitude " + format_number(p.longitude) + ", altitude " +
                                format_number(p.altitude) + " meters.");
              } else if constexpr (std::is_same_v<P, PhoneStepsPayload>) {
                lines.push_back(at + ", the phone counted " + format_number(p.steps) + " steps over " +
                                format_number(p.distance) + " meters, " + format_number(p.floors_up) +
                                " floors up and " + format_number(p.floors_down) + " floors down.");
              } else if constexpr (std::is_same_v<P, CallLogPayload>) {
                if (p.direction == CallDirection::missed) {
                  lines.push_back(at + ", the user missed an incoming call.");
                } else {
                  lines.push_back(at + ", the user had an " + std::string(to_string(p.direction)) +
                                  " call lasting " + format_number(p.duration) + " seconds.");
                }
              } else if constexpr (std::is_same_v<P, BatteryPayload>) {
                lines.push_back(at + ", the battery was at " + format_number(p.level) + " percent and " +
                                std::string(to_string(p.state)) + ".");
              } else if constexpr (std::is_same_v<P, GarminStepsPayload>) {
                lines.push_back(at + ", the watch counted " + format_number(p.steps) + " steps.");
              } else if constexpr (std::is_same_v<P, HeartRatePayload>) {
                lines.push_back(at + ", the watch measured a heart rate of " + format_number(p.bpm) +
                                " beats per minute.");
              } else if constexpr (std::is_same_v<P, StressPayload>) {
                lines.push_back(at + ", the stress model predicted a stress probability of " +
                                format_number(p.probability) + ".");
              }
            },
            r.payload);
      }
      break;
  }
  return lines;
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::vector<double> normalized(std::vector<double> v) {
  double norm = 0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm == 0 || !std::isfinite(norm)) throw Error(ErrorKind::validation, "cannot normalize a zero vector");
  for (double& x : v) x /= norm;
  return v;
}

}  // namespace

std::vector<TextChunk> textualize(const SensorStore& store, const std::string& user_id,
                                  const TimeRange& range, double window_seconds,
                                  const DisplayZone& zone) {
  if (!(window_seconds > 0)) throw Error(ErrorKind::validation, "window must be positive");
  if (!range.valid()) throw Error(ErrorKind::validation, "invalid time range");
  std::vector<TextChunk> chunks;
  for (EpochSeconds start = range.start; start < range.end; start += window_seconds) {
    const TimeRange w{start, std::min(range.end, start + window_seconds)};
    for (auto stream : kAllStreams) {
      const auto lines = render_window(store, user_id, stream, w, zone);
      if (lines.empty()) continue;
      TextChunk c;
      c.id = user_id + "/" + std::string(to_string(stream)) + "/" + format_number(w.start);
      c.user_id = user_id;
      c.stream = stream;
      c.range = w;
      for (const auto& l : lines) c.text += (c.text.empty() ? "" : " ") + l;
      chunks.push_back(std::move(c));
    }
  }
  return chunks;
}

// ---------------------------------------------------------------------------

LexicalEmbedder::LexicalEmbedder(std::size_t dimension) : dimension_(dimension) {
  if (dimension == 0) throw Error(ErrorKind::validation, "embedding dimension must be positive");
}

std::string LexicalEmbedder::name() const { return "lexical-fnv1a-" + std::to_string(dimension_); }

std::vector<std::string> LexicalEmbedder::tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c >= 0x80) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

std::size_t LexicalEmbedder::bucket(std::string_view token) const {
  return static_cast<std::size_t>(fnv1a(token) % dimension_);
}

std::vector<double> LexicalEmbedder::embed(std::string_view text) const {
  const auto tokens = tokenize(text);
  if (tokens.empty()) throw Error(ErrorKind::validation, "cannot embed text without tokens");
  std::vector<double> v(dimension_, 0.0);
  for (const auto& t : tokens) v[bucket(t)] += 1.0;
  return normalized(std::move(v));
}

RemoteEmbedder::RemoteEmbedder(RemoteConfig config, std::string model, std::size_t dimension)
    : config_(std::move(config)), model_(std::move(model)), dimension_(dimension) {}

std::vector<double> RemoteEmbedder::embed(std::string_view text) const {
  if (trim(text).empty()) throw Error(ErrorKind::validation, "cannot embed empty text");
  const json response = post_json(config_, "/embeddings", {{"model", model_}, {"input", std::string(text)}});
  std::vector<double> v;
  try {
    v = response.at("data").at(0).at("embedding").get<std::vector<double>>();
  } catch (const json::exception&) {
    throw Error(ErrorKind::backend, "embedding response has no data[0].embedding");
  }
  if (v.size() != dimension_) {
    throw Error(ErrorKind::backend, "embedding has dimension " + std::to_string(v.size()) + ", expected " +
                                        std::to_string(dimension_));
  }
  return normalized(std::move(v));
}

// ---------------------------------------------------------------------------

FlatIndex::FlatIndex(std::size_t dimension, std::string embedder)
    : dimension_(dimension), embedder_(std::move(embedder)) {}

void FlatIndex::add(TextChunk chunk, std::vector<double> vector) {
  if (vector.size() != dimension_) {
    throw Error(ErrorKind::validation, "vector dimension " + std::to_string(vector.size()) +
                                           " does not match index dimension " + std::to_string(dimension_));
  }
  chunks_.push_back(std::move(chunk));
  vectors_.push_back(std::move(vector));
}

std::vector<ScoredChunk> FlatIndex::search(const std::vector<double>& query, std::size_t k) const {
  if (chunks_.empty()) throw Error(ErrorKind::state, "the index is empty");
  if (query.size() != dimension_) throw Error(ErrorKind::validation, "query dimension mismatch");
  std::vector<std::pair<double, std::size_t>> scored;
  scored.reserve(chunks_.size());
  for (std::size_t i = 0; i < vectors_.size(); ++i) {
    double dot = 0;
    const auto& v = vectors_[i];
    for (std::size_t d = 0; d < dimension_; ++d) dot += v[d] * query[d];
    scored.emplace_back(dot, i);
  }
  const std::size_t n = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(n), scored.end(),
                    [](const auto& a, const auto& b) {
                      return a.first != b.first ? a.first > b.first : a.second < b.second;
                    });
  std::vector<ScoredChunk> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back({chunks_[scored[i].second], scored[i].first, scored[i].second});
  return out;
}

void FlatIndex::save(const std::filesystem::path& path) const {
  std::string out = json{{"format", "senseloop-flat-index"},
                         {"version", 1},
                         {"dimension", dimension_},
                         {"embedder", embedder_},
                         {"count", chunks_.size()}}
                        .dump() +
                    "\n";
  for (std::size_t i = 0; i < chunks_.size(); ++i) {
    const auto& c = chunks_[i];
    out += json{{"id", c.id},
                {"text", c.text},
                {"user_id", c.user_id},
                {"stream", to_string(c.stream)},
                {"start", c.range.start},
                {"end", c.range.end},
                {"vector", vectors_[i]}}
               .dump() +
           "\n";
  }
  write_file(path.string(), out);
}

FlatIndex FlatIndex::load(const std::filesystem::path& path) {
  const auto lines = split_lines(read_file(path.string()));
  if (lines.empty()) throw Error(ErrorKind::parse, "index file is empty");
  try {
    const json header = json::parse(lines[0]);
    if (header.value("format", "") != "senseloop-flat-index" || header.value("version", 0) != 1) {
      throw Error(ErrorKind::parse, "unsupported index format or version");
    }
    FlatIndex index(header.at("dimension").get<std::size_t>(), header.value("embedder", ""));
    for (std::size_t i = 1; i < lines.size(); ++i) {
      if (trim(lines[i]).empty()) continue;
      const json j = json::parse(lines[i]);
      TextChunk c;
      c.id = j.at("id").get<std::string>();
      c.text = j.at("text").get<std::string>();
      c.user_id = j.at("user_id").get<std::string>();
      const auto stream = parse_stream(j.at("stream").get<std::string>());
      if (!stream) throw Error(ErrorKind::parse, "unknown stream in index line " + std::to_string(i + 1));
      c.stream = *stream;
      c.range = {j.at("start").get<double>(), j.at("end").get<double>()};
      index.add(std::move(c), j.at("vector").get<std::vector<double>>());
    }
    if (index.size() != header.value("count", index.size())) {
      throw Error(ErrorKind::parse, "index file is truncated");
    }
    return index;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::parse, std::string("index file: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

json to_json(const RagAnswer& a) {
  return {{"text", a.text},
          {"chunk_ids", a.chunk_ids},
          {"scores", a.scores},
          {"unsupported_numbers", a.unsupported_numbers},
          {"model_called", a.model_called}};
}

RagBaseline::RagBaseline(ChatBackend& backend, const Embedder& embedder, RagConfig config, PromptSet prompts)
    : backend_(backend), embedder_(embedder), config_(std::move(config)), prompts_(std::move(prompts)) {
  if (config_.k == 0) throw Error(ErrorKind::validation, "k must be positive");
}

FlatIndex RagBaseline::build_index(const SensorStore& store, const std::string& user_id,
                                   const TimeRange& range, const DisplayZone& zone) const {
  FlatIndex index(embedder_.dimension(), embedder_.name());
  for (auto& chunk : textualize(store, user_id, range, config_.window_seconds, zone)) {
    auto v = embedder_.embed(chunk.text);
    index.add(std::move(chunk), std::move(v));
  }
  return index;
}

std::vector<ScoredChunk> RagBaseline::retrieve(const FlatIndex& index, const std::string& query) const {
  return index.search(embedder_.embed(query), config_.k);
}

RagAnswer RagBaseline::answer(const std::string& query, const FlatIndex& index,
                              const std::string& instructions) const {
  if (trim(query).empty()) throw Error(ErrorKind::validation, "query must not be empty");
  RagAnswer out;
  if (index.size() == 0) {
    out.text = "No sensor data was found for the requested participant and period, so the question "
               "cannot be answered.";
    return out;
  }
  const auto hits = retrieve(index, query);
  std::string context;
  for (const auto& h : hits) {
    out.chunk_ids.push_back(h.chunk.id);
    out.scores.push_back(h.score);
    context += "- " + h.chunk.text + "\n";
  }
  ChatRequest request;
  request.model = config_.model;
  request.temperature = config_.temperature;
  request.top_p = config_.top_p;
  request.messages.push_back(
      {Role::user, prompts_.render("rag_answer", {{"context", trim(context)},
                                                  {"query", query},
                                                  {"instructions", instructions}})});
  out.text = backend_.complete(request);
  out.model_called = true;
  for (const auto& t : unsupported_numbers(out.text, json(context), query)) {
    out.unsupported_numbers.push_back(t.text);
  }
  return out;
}

}  // namespace senseloop
