#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "senseloop/common.hpp"

namespace senseloop {

enum class StreamKind {
  location,
  activity,
  app_usage,
  phone_steps,
  lock_unlock,
  wifi,
  call_logs,
  battery,
  garmin_steps,
  garmin_heart_rate,
  stress_prediction,
};

inline constexpr std::array<StreamKind, 11> kAllStreams = {
    StreamKind::location,     StreamKind::activity,          StreamKind::app_usage,
    StreamKind::phone_steps,  StreamKind::lock_unlock,       StreamKind::wifi,
    StreamKind::call_logs,    StreamKind::battery,           StreamKind::garmin_steps,
    StreamKind::garmin_heart_rate, StreamKind::stress_prediction,
};

std::string_view to_string(StreamKind stream);
std::optional<StreamKind> parse_stream(std::string_view name);

// Per-stream payloads. The variant below keeps the same order as StreamKind,
// so payload.index() == static_cast<size_t>(stream) always holds.

struct LocationPayload {
  double latitude = 0;
  double longitude = 0;
  double altitude = 0;
  bool operator==(const LocationPayload&) const = default;
};

enum class ActivityKind { stationary, walking, cycling, running, automotive };

struct ActivityPayload {
  ActivityKind kind = ActivityKind::stationary;
  bool operator==(const ActivityPayload&) const = default;
};

enum class AppEvent { open, close };

struct AppUsagePayload {
  std::string app_name;
  AppEvent event = AppEvent::open;
  bool operator==(const AppUsagePayload&) const = default;
};

struct PhoneStepsPayload {
  double steps = 0;
  double distance = 0;
  double floors_up = 0;
  double floors_down = 0;
  bool operator==(const PhoneStepsPayload&) const = default;
};

enum class LockEvent { lock, unlock };

struct LockUnlockPayload {
  LockEvent event = LockEvent::lock;
  bool operator==(const LockUnlockPayload&) const = default;
};

struct WifiPayload {
  bool connected = false;
  std::optional<std::string> ssid;  // only meaningful when connected
  bool operator==(const WifiPayload&) const = default;
};

enum class CallDirection { incoming, outgoing, missed };

struct CallLogPayload {
  CallDirection direction = CallDirection::incoming;
  double duration = 0;
  bool operator==(const CallLogPayload&) const = default;
};

enum class BatteryState { charging, discharging, full };

struct BatteryPayload {
  double level = 0;
  BatteryState state = BatteryState::discharging;
  bool operator==(const BatteryPayload&) const = default;
};

struct GarminStepsPayload {
  double steps = 0;
  bool operator==(const GarminStepsPayload&) const = default;
};

struct HeartRatePayload {
  double bpm = 0;
  bool operator==(const HeartRatePayload&) const = default;
};

struct StressPayload {
  double probability = 0;
  bool operator==(const StressPayload&) const = default;
};

using Payload =
    std::variant<LocationPayload, ActivityPayload, AppUsagePayload, PhoneStepsPayload,
                 LockUnlockPayload, WifiPayload, CallLogPayload, BatteryPayload,
                 GarminStepsPayload, HeartRatePayload, StressPayload>;

std::string_view to_string(ActivityKind kind);
std::string_view to_string(AppEvent event);
std::string_view to_string(LockEvent event);
std::string_view to_string(CallDirection direction);
std::string_view to_string(BatteryState state);

struct SensorRecord {
  std::string user_id;
  StreamKind stream = StreamKind::location;
  EpochSeconds timestamp = 0;
  Payload payload;

  bool operator==(const SensorRecord&) const = default;
};

nlohmann::json payload_to_json(const Payload& payload);

/// Validates `j` against the schema of `stream`. Throws Error(validation).
Payload payload_from_json(StreamKind stream, const nlohmann::json& j);

/// One JSONL line: {user_id, stream?, timestamp, payload}. `timestamp` is
/// epoch seconds or a local "YYYY-MM-DD HH:MM:SS" string in `zone`.
nlohmann::json record_to_json(const SensorRecord& record);
SensorRecord record_from_json(StreamKind stream, const nlohmann::json& j,
                              const DisplayZone& zone = {});

struct Rejection {
  std::size_t line = 0;  // 1-based
  std::string reason;
};

struct IngestReport {
  std::size_t accepted = 0;    // valid records in the input
  std::size_t inserted = 0;    // accepted minus exact duplicates
  std::size_t duplicates = 0;
  std::vector<Rejection> rejections;
};

enum class QueryStatus {
  ok,
  no_records,    // user known, nothing in range
  unknown_user,  // user never seen by the store
};

std::string_view to_string(QueryStatus status);

struct QueryResult {
  std::vector<SensorRecord> records;
  QueryStatus status = QueryStatus::ok;
};

struct CoverageEntry {
  StreamKind stream = StreamKind::location;
  EpochSeconds earliest = 0;
  EpochSeconds latest = 0;
  std::size_t count = 0;
};

struct CoverageReport {
  std::string user_id;
  std::vector<CoverageEntry> entries;  // StreamKind order, only streams with data
};

/// Storage boundary. Implementations must be safe for concurrent readers and
/// make each insert() batch visible atomically.
class SensorStore {
 public:
  virtual ~SensorStore() = default;

  /// Parses JSONL lines for `stream` and inserts the valid ones as one batch.
  /// Malformed lines are reported, never fatal.
  IngestReport ingest_stream(StreamKind stream, const std::vector<std::string>& lines,
                             const DisplayZone& zone = {});

  /// Inserts records, skipping exact duplicates. Returns the number inserted.
  virtual std::size_t insert(std::vector<SensorRecord> batch) = 0;

  /// Records with range.start <= timestamp < range.end, ascending.
  virtual QueryResult query_records(const std::string& user_id, StreamKind stream,
                                    const TimeRange& range) const = 0;

  virtual CoverageReport coverage(const std::string& user_id) const = 0;
  virtual std::vector<std::string> users() const = 0;
};

/// In-memory index: per (user, stream) a timestamp-sorted vector.
class MemoryStore : public SensorStore {
 public:
  std::size_t insert(std::vector<SensorRecord> batch) override;
  QueryResult query_records(const std::string& user_id, StreamKind stream,
                            const TimeRange& range) const override;
  CoverageReport coverage(const std::string& user_id) const override;
  std::vector<std::string> users() const override;

 protected:
  /// Called with the lock held and only the new (non-duplicate) records,
  /// before they become visible.
  virtual void persist(const std::vector<SensorRecord>& /*fresh*/) {}

  /// Adds to the index without calling persist(); used while loading.
  std::size_t insert_unpersisted(std::vector<SensorRecord> batch);

 private:
  std::size_t insert_locked(std::vector<SensorRecord> batch, bool persist_fresh);

  using Series = std::array<std::vector<SensorRecord>, kAllStreams.size()>;
  mutable std::shared_mutex mutex_;
  std::unordered_map<std::string, Series> index_;
  std::unordered_set<std::string> seen_;
};

/// File-backed store: one append-only JSONL log per (user, stream) under
/// `root/<user>/<stream>.jsonl`, replayed into memory on open.
class FileStore : public MemoryStore {
 public:
  explicit FileStore(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }

 protected:
  void persist(const std::vector<SensorRecord>& fresh) override;

 private:
  std::filesystem::path log_path(const std::string& user_id, StreamKind stream) const;

  std::filesystem::path root_;
};

/// A manifest lists stream files to ingest together:
/// {"files": [{"stream": "wifi", "path": "wifi.jsonl"}, ...]}. Relative paths
/// resolve against the manifest's directory.
struct ManifestEntry {
  StreamKind stream = StreamKind::location;
  std::filesystem::path path;
};

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest);

/// Splits file content into lines, keeping blank lines so line numbers in
/// rejection reports match the file.
std::vector<std::string> split_lines(std::string_view text);

}  // namespace senseloop
