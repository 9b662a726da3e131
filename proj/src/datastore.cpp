#include "senseloop/datastore.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>

namespace senseloop {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, kAllStreams.size()> kStreamNames = {
    "location", "activity",     "app_usage",         "phone_steps",
    "lock_unlock", "wifi",      "call_logs",         "battery",
    "garmin_steps", "garmin_heart_rate", "stress_prediction",
};

[[noreturn]] void invalid(const std::string& what) {
  throw Error(ErrorKind::validation, what);
}

double number_field(const json& j, const char* key) {
  if (!j.contains(key)) invalid(std::string("missing field '") + key + "'");
  const json& v = j.at(key);
  if (!v.is_number()) invalid(std::string("field '") + key + "' must be a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) invalid(std::string("field '") + key + "' must be finite");
  return d;
}

double count_field(const json& j, const char* key) {
  const double d = number_field(j, key);
  if (d < 0) invalid(std::string("field '") + key + "' must be non-negative");
  return d;
}

std::string string_field(const json& j, const char* key) {
  if (!j.contains(key)) invalid(std::string("missing field '") + key + "'");
  const json& v = j.at(key);
  if (!v.is_string()) invalid(std::string("field '") + key + "' must be a string");
  return v.get<std::string>();
}

template <typename Enum, std::size_t N>
Enum enum_field(const json& j, const char* key,
                const std::array<std::pair<std::string_view, Enum>, N>& table) {
  const std::string s = to_lower(string_field(j, key));
  for (const auto& [name, value] : table) {
    if (name == s) return value;
  }
  invalid(std::string("field '") + key + "' has unknown value '" + s + "'");
}

constexpr std::array<std::pair<std::string_view, ActivityKind>, 5> kActivities = {{
    {"stationary", ActivityKind::stationary},
    {"walking", ActivityKind::walking},
    {"cycling", ActivityKind::cycling},
    {"running", ActivityKind::running},
    {"automotive", ActivityKind::automotive},
}};
constexpr std::array<std::pair<std::string_view, AppEvent>, 2> kAppEvents = {{
    {"open", AppEvent::open}, {"close", AppEvent::close}}};
constexpr std::array<std::pair<std::string_view, LockEvent>, 2> kLockEvents = {{
    {"lock", LockEvent::lock}, {"unlock", LockEvent::unlock}}};
constexpr std::array<std::pair<std::string_view, CallDirection>, 3> kDirections = {{
    {"incoming", CallDirection::incoming},
    {"outgoing", CallDirection::outgoing},
    {"missed", CallDirection::missed},
}};
constexpr std::array<std::pair<std::string_view, BatteryState>, 3> kBatteryStates = {{
    {"charging", BatteryState::charging},
    {"discharging", BatteryState::discharging},
    {"full", BatteryState::full},
}};

template <typename Enum, std::size_t N>
std::string_view name_of(Enum e, const std::array<std::pair<std::string_view, Enum>, N>& t) {
  for (const auto& [name, value] : t) {
    if (value == e) return name;
  }
  return "unknown";
}

std::string dedup_key(const SensorRecord& r) {
  json k = json::array({r.user_id, to_string(r.stream), r.timestamp,
                        payload_to_json(r.payload)});
  return k.dump();
}

std::string sanitize_component(std::string_view s) {
  static constexpr char kHex[] = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : s) {
    if (std::isalnum(c) || c == '_' || c == '-' || (c == '.' && !out.empty())) {
      out.push_back(static_cast<char>(c));
    } else {
      out.push_back('%');
      out.push_back(kHex[c >> 4]);
      out.push_back(kHex[c & 15]);
    }
  }
  return out.empty() ? std::string("%") : out;
}

}  // namespace

std::string_view to_string(StreamKind stream) {
  return kStreamNames[static_cast<std::size_t>(stream)];
}

std::optional<StreamKind> parse_stream(std::string_view name) {
  for (std::size_t i = 0; i < kStreamNames.size(); ++i) {
    if (kStreamNames[i] == name) return kAllStreams[i];
  }
  return std::nullopt;
}

std::string_view to_string(ActivityKind kind) { return name_of(kind, kActivities); }
std::string_view to_string(AppEvent event) { return name_of(event, kAppEvents); }
std::string_view to_string(LockEvent event) { return name_of(event, kLockEvents); }
std::string_view to_string(CallDirection d) { return name_of(d, kDirections); }
std::string_view to_string(BatteryState s) { return name_of(s, kBatteryStates); }

std::string_view to_string(QueryStatus status) {
  switch (status) {
    case QueryStatus::ok: return "ok";
    case QueryStatus::no_records: return "no_records";
    case QueryStatus::unknown_user: return "unknown_user";
  }
  return "unknown";
}

json payload_to_json(const Payload& payload) {
  return std::visit(
      [](const auto& p) -> json {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, LocationPayload>) {
          return {{"latitude", p.latitude}, {"longitude", p.longitude}, {"altitude", p.altitude}};
        } else if constexpr (std::is_same_v<T, ActivityPayload>) {
          return {{"kind", to_string(p.kind)}};
        } else if constexpr (std::is_same_v<T, AppUsagePayload>) {
          return {{"app_name", p.app_name}, {"event", to_string(p.event)}};
        } else if constexpr (std::is_same_v<T, PhoneStepsPayload>) {
          return {{"steps", p.steps}, {"distance", p.distance},
                  {"floors_up", p.floors_up}, {"floors_down", p.floors_down}};
        } else if constexpr (std::is_same_v<T, LockUnlockPayload>) {
          return {{"event", to_string(p.event)}};
        } else if constexpr (std::is_same_v<T, WifiPayload>) {
          json j = {{"connected", p.connected}};
          j["ssid"] = p.ssid ? json(*p.ssid) : json(nullptr);
          return j;
        } else if constexpr (std::is_same_v<T, CallLogPayload>) {
          return {{"direction", to_string(p.direction)}, {"duration", p.duration}};
        } else if constexpr (std::is_same_v<T, BatteryPayload>) {
          return {{"level", p.level}, {"state", to_string(p.state)}};
        } else if constexpr (std::is_same_v<T, GarminStepsPayload>) {
          return {{"steps", p.steps}};
        } else if constexpr (std::is_same_v<T, HeartRatePayload>) {
          return {{"bpm", p.bpm}};
        } else {
          return {{"probability", p.probability}};
        }
      },
      payload);
}

Payload payload_from_json(StreamKind stream, const json& j) {
  if (!j.is_object()) invalid("payload must be an object");
  switch (stream) {
    case StreamKind::location: {
      LocationPayload p{number_field(j, "latitude"), number_field(j, "longitude"),
                        j.contains("altitude") ? number_field(j, "altitude") : 0.0};
      if (p.latitude < -90 || p.latitude > 90) invalid("latitude out of [-90, 90]");
      if (p.longitude < -180 || p.longitude > 180) invalid("longitude out of [-180, 180]");
      return p;
    }
    case StreamKind::activity:
      return ActivityPayload{enum_field(j, "kind", kActivities)};
    case StreamKind::app_usage: {
      AppUsagePayload p{string_field(j, "app_name"), enum_field(j, "event", kAppEvents)};
      if (p.app_name.empty()) invalid("app_name must be non-empty");
      return p;
    }
    case StreamKind::phone_steps:
      return PhoneStepsPayload{count_field(j, "steps"),
                               j.contains("distance") ? count_field(j, "distance") : 0.0,
                               j.contains("floors_up") ? count_field(j, "floors_up") : 0.0,
                               j.contains("floors_down") ? count_field(j, "floors_down") : 0.0};
    case StreamKind::lock_unlock:
      return LockUnlockPayload{enum_field(j, "event", kLockEvents)};
    case StreamKind::wifi: {
      if (!j.contains("connected") || !j.at("connected").is_boolean()) {
        invalid("field 'connected' must be a boolean");
      }
      WifiPayload p;
      p.connected = j.at("connected").get<bool>();
      // An SSID is only kept for connected samples; a disconnected sample has
      // no network name, whatever the raw source wrote there.
      if (p.connected && j.contains("ssid") && !j.at("ssid").is_null()) {
        p.ssid = string_field(j, "ssid");
      }
      return p;
    }
    case StreamKind::call_logs:
      return CallLogPayload{enum_field(j, "direction", kDirections),
                            j.contains("duration") ? count_field(j, "duration") : 0.0};
    case StreamKind::battery: {
      BatteryPayload p{number_field(j, "level"), enum_field(j, "state", kBatteryStates)};
      if (p.level < 0 || p.level > 100) invalid("battery level out of [0, 100]");
      return p;
    }
    case StreamKind::garmin_steps:
      return GarminStepsPayload{count_field(j, "steps")};
    case StreamKind::garmin_heart_rate: {
      HeartRatePayload p{number_field(j, "bpm")};
      if (p.bpm <= 0) invalid("bpm must be positive");
      return p;
    }
    case StreamKind::stress_prediction: {
      StressPayload p{number_field(j, "probability")};
      if (p.probability < 0 || p.probability > 1) invalid("probability out of [0, 1]");
      return p;
    }
  }
  invalid("unknown stream");
}

json record_to_json(const SensorRecord& r) {
  return {{"user_id", r.user_id},
          {"stream", to_string(r.stream)},
          {"timestamp", r.timestamp},
          {"payload", payload_to_json(r.payload)}};
}

SensorRecord record_from_json(StreamKind stream, const json& j, const DisplayZone& zone) {
  if (!j.is_object()) invalid("record must be a JSON object");
  SensorRecord r;
  r.user_id = string_field(j, "user_id");
  if (r.user_id.empty()) invalid("user_id must be non-empty");
  if (j.contains("stream")) {
    const auto named = parse_stream(string_field(j, "stream"));
    if (!named) invalid("unknown stream '" + j.at("stream").get<std::string>() + "'");
    if (*named != stream) {
      invalid("record stream '" + std::string(to_string(*named)) +
              "' does not match '" + std::string(to_string(stream)) + "'");
    }
  }
  r.stream = stream;
  if (!j.contains("timestamp")) invalid("missing field 'timestamp'");
  const json& ts = j.at("timestamp");
  if (ts.is_number()) {
    r.timestamp = ts.get<double>();
  } else if (ts.is_string()) {
    r.timestamp = zone.parse(ts.get<std::string>());
  } else {
    invalid("timestamp must be epoch seconds or a local time string");
  }
  if (!std::isfinite(r.timestamp)) invalid("timestamp must be finite");
  if (!j.contains("payload")) invalid("missing field 'payload'");
  r.payload = payload_from_json(stream, j.at("payload"));
  return r;
}

std::vector<std::string> split_lines(std::string_view text) {
  std::vector<std::string> lines;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string line(text.substr(pos, nl - pos));
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
    pos = nl + 1;
  }
  return lines;
}

IngestReport SensorStore::ingest_stream(StreamKind stream,
                                        const std::vector<std::string>& lines,
                                        const DisplayZone& zone) {
  IngestReport report;
  std::vector<SensorRecord> batch;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    try {
      batch.push_back(record_from_json(stream, json::parse(lines[i]), zone));
    } catch (const json::exception& e) {
      report.rejections.push_back({i + 1, std::string("malformed JSON: ") + e.what()});
    } catch (const Error& e) {
      report.rejections.push_back({i + 1, e.what()});
    }
  }
  report.accepted = batch.size();
  report.inserted = insert(std::move(batch));
  report.duplicates = report.accepted - report.inserted;
  return report;
}

std::size_t MemoryStore::insert(std::vector<SensorRecord> batch) {
  return insert_locked(std::move(batch), true);
}

std::size_t MemoryStore::insert_unpersisted(std::vector<SensorRecord> batch) {
  return insert_locked(std::move(batch), false);
}

std::size_t MemoryStore::insert_locked(std::vector<SensorRecord> batch, bool persist_fresh) {
  std::unique_lock lock(mutex_);
  std::vector<SensorRecord> fresh;
  std::vector<std::string> keys;
  std::unordered_set<std::string> batch_keys;
  for (auto& r : batch) {
    std::string key = dedup_key(r);
    if (seen_.count(key) || !batch_keys.insert(key).second) continue;
    keys.push_back(std::move(key));
    fresh.push_back(std::move(r));
  }
  if (fresh.empty()) return 0;
  if (persist_fresh) persist(fresh);
  for (auto& k : keys) seen_.insert(std::move(k));

  auto by_time = [](const SensorRecord& a, const SensorRecord& b) {
    return a.timestamp < b.timestamp;
  };
  const std::size_t n = fresh.size();
  std::stable_sort(fresh.begin(), fresh.end(), by_time);
  // Each touched series is an old sorted prefix plus a sorted appended tail;
  // inplace_merge is stable, so existing records stay first on ties.
  std::vector<std::pair<std::vector<SensorRecord>*, std::size_t>> touched;
  for (auto& r : fresh) {
    auto& series = index_[r.user_id][static_cast<std::size_t>(r.stream)];
    if (std::none_of(touched.begin(), touched.end(),
                     [&](const auto& t) { return t.first == &series; })) {
      touched.emplace_back(&series, series.size());
    }
    series.push_back(std::move(r));
  }
  for (auto& [series, old_size] : touched) {
    const auto mid = series->begin() + static_cast<std::ptrdiff_t>(old_size);
    std::inplace_merge(series->begin(), mid, series->end(), by_time);
  }
  return n;
}

QueryResult MemoryStore::query_records(const std::string& user_id, StreamKind stream,
                                       const TimeRange& range) const {
  if (!range.valid()) invalid("time range start must not exceed end");
  std::shared_lock lock(mutex_);
  QueryResult result;
  const auto it = index_.find(user_id);
  if (it == index_.end()) {
    result.status = QueryStatus::unknown_user;
    return result;
  }
  const auto& series = it->second[static_cast<std::size_t>(stream)];
  auto lo = std::lower_bound(series.begin(), series.end(), range.start,
                             [](const SensorRecord& r, double t) { return r.timestamp < t; });
  auto hi = std::lower_bound(lo, series.end(), range.end,
                             [](const SensorRecord& r, double t) { return r.timestamp < t; });
  result.records.assign(lo, hi);
  result.status = result.records.empty() ? QueryStatus::no_records : QueryStatus::ok;
  return result;
}

CoverageReport MemoryStore::coverage(const std::string& user_id) const {
  std::shared_lock lock(mutex_);
  CoverageReport report;
  report.user_id = user_id;
  const auto it = index_.find(user_id);
  if (it == index_.end()) return report;
  for (std::size_t s = 0; s < kAllStreams.size(); ++s) {
    const auto& series = it->second[s];
    if (series.empty()) continue;
    report.entries.push_back(
        {kAllStreams[s], series.front().timestamp, series.back().timestamp, series.size()});
  }
  return report;
}

std::vector<std::string> MemoryStore::users() const {
  std::shared_lock lock(mutex_);
  std::vector<std::string> out;
  for (const auto& [user, _] : index_) out.push_back(user);
  std::sort(out.begin(), out.end());
  return out;
}

FileStore::FileStore(std::filesystem::path root) : root_(std::move(root)) {
  namespace fs = std::filesystem;
  fs::create_directories(root_);
  for (const auto& user_dir : fs::directory_iterator(root_)) {
    if (!user_dir.is_directory()) continue;
    for (const auto& file : fs::directory_iterator(user_dir.path())) {
      if (file.path().extension() != ".jsonl") continue;
      const auto stream = parse_stream(file.path().stem().string());
      if (!stream) continue;
      std::vector<SensorRecord> batch;
      for (const auto& line : split_lines(read_file(file.path().string()))) {
        if (trim(line).empty()) continue;
        try {
          batch.push_back(record_from_json(*stream, json::parse(line)));
        } catch (const std::exception&) {
          // A torn final line from an interrupted append; the rest stays usable.
        }
      }
      insert_unpersisted(std::move(batch));
    }
  }
}

std::filesystem::path FileStore::log_path(const std::string& user_id,
                                          StreamKind stream) const {
  return root_ / sanitize_component(user_id) / (std::string(to_string(stream)) + ".jsonl");
}

void FileStore::persist(const std::vector<SensorRecord>& fresh) {
  std::unordered_map<std::string, std::string> chunks;
  for (const auto& r : fresh) {
    chunks[log_path(r.user_id, r.stream).string()] += record_to_json(r).dump() + "\n";
  }
  for (const auto& [path, text] : chunks) {
    std::filesystem::create_directories(std::filesystem::path(path).parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::app);
    out << text;
    out.flush();
    if (!out) throw Error(ErrorKind::io, "failed to append to '" + path + "'");
  }
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest) {
  const json j = json::parse(read_file(manifest.string()));
  if (!j.contains("files") || !j.at("files").is_array()) {
    invalid("manifest must contain a 'files' array");
  }
  std::vector<ManifestEntry> out;
  for (const auto& f : j.at("files")) {
    const auto stream = parse_stream(f.value("stream", ""));
    if (!stream) invalid("manifest names unknown stream '" + f.value("stream", "") + "'");
    std::filesystem::path p = f.value("path", "");
    if (p.is_relative()) p = manifest.parent_path() / p;
    out.push_back({*stream, p});
  }
  return out;
}

}  // namespace senseloop
