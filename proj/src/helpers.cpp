#include "senseloop/helpers.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <regex>
#include <set>
#include <sstream>

namespace senseloop {

using nlohmann::json;

double LogisticStressStub::predict(std::span<const HeartRateSample> window) const {
  double sum = 0;
  for (const auto& s : window) sum += s.bpm;
  const double mean = sum / static_cast<double>(window.size());
  return 1.0 / (1.0 + std::exp(-(mean - 70.0) / 10.0));
}

double predict_stress(const StressPredictor& model, std::span<const HeartRateSample> window) {
  if (window.empty()) {
    throw Error(ErrorKind::validation, "stress prediction needs a non-empty heart-rate window");
  }
  return std::clamp(model.predict(window), 0.0, 1.0);
}

// ---------------------------------------------------------------------------

std::vector<AppUsageBlock> pair_app_usage(std::vector<AppUsageEvent> events,
                                          const TimeRange& range) {
  std::map<std::string, std::vector<AppUsageEvent>> per_app;
  for (auto& e : events) per_app[e.app].push_back(std::move(e));

  std::vector<AppUsageBlock> blocks;
  for (auto& [app, list] : per_app) {
    std::stable_sort(list.begin(), list.end(), [](const auto& a, const auto& b) {
      if (a.time != b.time) return a.time < b.time;
      return a.event == AppEvent::open && b.event == AppEvent::close;
    });
    for (std::size_t i = 0; i < list.size(); ++i) {
      if (list[i].event != AppEvent::open || !range.contains(list[i].time)) continue;
      AppUsageBlock block{app, list[i].time, range.end, 0, true};
      if (i + 1 < list.size()) {
        const AppUsageEvent& next = list[i + 1];
        if (next.event == AppEvent::close) {
          block.close = next.time;
          block.synthetic = false;
        } else {
          block.close = std::min(range.end, next.time);
        }
      }
      block.duration = block.close - block.open;
      blocks.push_back(std::move(block));
    }
  }
  std::stable_sort(blocks.begin(), blocks.end(), [](const auto& a, const auto& b) {
    if (a.open != b.open) return a.open < b.open;
    return a.app < b.app;
  });
  return blocks;
}

std::vector<StateBlock> pair_state_events(const std::vector<StateEvent>& events,
                                          EpochSeconds range_end) {
  std::vector<StateEvent> sorted = events;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const auto& a, const auto& b) { return a.time < b.time; });
  std::vector<StateBlock> blocks;
  for (const auto& e : sorted) {
    if (!blocks.empty() && blocks.back().state == e.state) continue;
    if (!blocks.empty()) blocks.back().end = e.time;
    blocks.push_back({e.state, e.time, e.time, false});
  }
  if (!blocks.empty()) {
    auto& last = blocks.back();
    last.end = std::max(last.start, range_end);
    last.synthetic = true;
  }
  return blocks;
}

// ---------------------------------------------------------------------------
// Lexicon.

namespace {

const std::array<std::vector<std::string>, kAllStreams.size()>& lexicon_table() {
  static const std::array<std::vector<std::string>, kAllStreams.size()> table = {{
      // location
      {"gps", "location", "locations", "latitude", "longitude", "altitude", "coordinate",
       "coordinates", "place", "places", "visited", "displacement", "mobility",
       "travel", "traveled", "travelled", "outdoor", "outdoors", "commute"},
      // activity
      {"activity", "activities", "stationary", "walking", "walk", "cycling", "biking",
       "running", "run", "automotive", "driving", "drive", "commute", "exercise",
       "exercising", "sedentary", "active"},
      // app_usage
      {"app", "apps", "application", "applications", "app usage", "screen time",
       "social media"},
      // phone_steps
      {"steps", "step", "step count", "floors", "floor", "climbed", "stairs",
       "distance", "walked", "mobility"},
      // lock_unlock
      {"lock", "unlock", "locked", "unlocked", "unlocks", "locks", "lock/unlock",
       "phone usage", "pickups", "pickup", "screen"},
      // wifi
      {"wifi", "wi-fi", "ssid", "network", "networks", "internet", "connected",
       "connection"},
      // call_logs
      {"call", "calls", "called", "calling", "incoming", "outgoing", "missed",
       "phone call", "phone calls"},
      // battery
      {"battery", "charging", "charge", "charged", "discharging", "power"},
      // garmin_steps
      {"garmin", "watch", "smartwatch", "wearable", "steps", "step count"},
      // garmin_heart_rate
      {"heart rate", "heart-rate", "heartrate", "bpm", "pulse", "hr", "garmin"},
      // stress_prediction
      {"stress", "stressed", "stressful", "anxiety", "anxious", "relaxed"},
  }};
  return table;
}

std::vector<std::string> words_of(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : to_lower(text)) {
    if (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '/' || c == '_') {
      cur.push_back(c);
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

}  // namespace

const std::vector<std::string>& stream_lexicon(StreamKind stream) {
  return lexicon_table()[static_cast<std::size_t>(stream)];
}

std::vector<StreamKind> streams_mentioned(std::string_view text) {
  const auto words = words_of(text);
  std::string joined = " ";
  for (const auto& w : words) joined += w + " ";
  std::set<std::string> word_set(words.begin(), words.end());

  std::vector<StreamKind> out;
  for (StreamKind s : kAllStreams) {
    const auto& terms = stream_lexicon(s);
    const bool hit = std::any_of(terms.begin(), terms.end(), [&](const std::string& t) {
      if (t.find(' ') != std::string::npos) return joined.find(" " + t + " ") != std::string::npos;
      return word_set.count(t) > 0;
    });
    if (hit) out.push_back(s);
  }
  return out;
}

std::string describe_databases() {
  struct Db {
    const char* title;
    const char* info;
    const char* device;
  };
  static const std::array<Db, kAllStreams.size()> dbs = {{
      {"Location Database",
       "Phone GPS fixes: latitude and longitude in degrees, altitude in meters; one sample "
       "per minute.",
       "Phone"},
      {"Activity Database",
       "Motion state reported by the phone (stationary, walking, cycling, running or "
       "automotive); a record is written whenever the state changes.",
       "Phone"},
      {"App Usage Database",
       "Open and close events per app, from which usage sessions and their lengths are "
       "derived.",
       "Phone"},
      {"Phone Steps Database",
       "Per-minute step counts with distance walked and floors climbed up and down.",
       "Phone"},
      {"Phone Lock/Unlock Database", "One record per screen lock or unlock.", "Phone"},
      {"WiFi Database",
       "Per-minute WiFi state: whether a network is connected and, if so, its name (SSID).",
       "Phone"},
      {"Call Logs Database", "Incoming, outgoing and missed calls with call length in seconds.",
       "Phone"},
      {"Phone Battery Database", "Battery percentage and charging state, written on change.",
       "Phone"},
      {"Garmin Steps Database", "Per-minute step counts from the watch.", "Garmin Smartwatch"},
      {"Garmin Heart Rate Database", "Heart rate in beats per minute, one sample every 30 seconds.",
       "Garmin Smartwatch"},
      {"Garmin Stress ML Model",
       "Model estimates of physiological stress from watch heart signals, as a probability "
       "between 0 (calm) and 1 (stressed). Physiological arousal is not the same thing as "
       "felt, psychological stress.",
       "Garmin Smartwatch"},
  }};
  std::ostringstream out;
  for (std::size_t i = 0; i < dbs.size(); ++i) {
    if (i) out << "\n";
    out << dbs[i].title << ":\nInfo: " << dbs[i].info << "\nDevice: " << dbs[i].device
        << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Registry.

void HelperRegistry::add(HelperSpec spec, HelperFn fn) {
  if (spec.name.empty()) throw Error(ErrorKind::validation, "helper name must be non-empty");
  if (by_name_.count(spec.name)) {
    throw Error(ErrorKind::validation, "duplicate helper name '" + spec.name + "'");
  }
  if (spec.stream_tags.empty()) {
    throw Error(ErrorKind::validation, "helper '" + spec.name + "' has no stream tags");
  }
  if (!fn) throw Error(ErrorKind::validation, "helper '" + spec.name + "' has no implementation");
  static const std::regex backticked("`([A-Za-z_][A-Za-z0-9_]*)`");
  for (std::sregex_iterator it(spec.description.begin(), spec.description.end(), backticked), end;
       it != end; ++it) {
    const std::string named = (*it)[1];
    const bool declared = std::any_of(spec.parameters.begin(), spec.parameters.end(),
                                      [&](const HelperParam& p) { return p.name == named; });
    if (!declared) {
      throw Error(ErrorKind::validation, "helper '" + spec.name + "' describes undeclared parameter '" +
                                             named + "'");
    }
  }
  by_name_.emplace(spec.name, entries_.size());
  entries_.push_back({std::move(spec), std::move(fn)});
}

bool HelperRegistry::contains(std::string_view name) const {
  return by_name_.count(std::string(name)) > 0;
}

const HelperSpec& HelperRegistry::spec(std::string_view name) const {
  const auto it = by_name_.find(std::string(name));
  if (it == by_name_.end()) {
    throw Error(ErrorKind::not_found, "unknown helper '" + std::string(name) + "'");
  }
  return entries_[it->second].spec;
}

std::vector<std::string> HelperRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) out.push_back(e.spec.name);
  return out;
}

std::string HelperRegistry::describe(const std::vector<std::string>& names) const {
  std::vector<std::size_t> indices;
  for (const auto& n : names) {
    const auto it = by_name_.find(n);
    if (it == by_name_.end()) throw Error(ErrorKind::not_found, "unknown helper '" + n + "'");
    indices.push_back(it->second);
  }
  std::sort(indices.begin(), indices.end());
  indices.erase(std::unique(indices.begin(), indices.end()), indices.end());

  std::ostringstream out;
  bool first = true;
  for (std::size_t idx : indices) {
    const HelperSpec& s = entries_[idx].spec;
    if (!first) out << "\n";
    first = false;
    out << "Name: " << s.name << "\n";
    out << "Description: " << s.description << "\n";
    out << "Parameters:\n";
    for (const auto& p : s.parameters) {
      out << "- " << p.name << " (" << p.type << "): " << p.description << "\n";
    }
    out << "Returns:\n" << s.returns << "\n";
    out << "Example:\n";
    for (const auto& ex : s.examples) out << "- " << ex << "\n";
  }
  return out.str();
}

HelperSelection HelperRegistry::select_relevant(std::string_view request_text) const {
  HelperSelection sel;
  sel.streams = streams_mentioned(request_text);
  for (const auto& e : entries_) {
    const bool relevant = std::any_of(e.spec.stream_tags.begin(), e.spec.stream_tags.end(),
                                      [&](StreamKind s) {
                                        return std::find(sel.streams.begin(), sel.streams.end(),
                                                         s) != sel.streams.end();
                                      });
    if (relevant) sel.helpers.push_back(&e.spec);
  }
  return sel;
}

json HelperRegistry::invoke(std::string_view name, const json& args,
                            const HelperContext& ctx) const {
  const auto it = by_name_.find(std::string(name));
  if (it == by_name_.end()) {
    throw Error(ErrorKind::not_found, "helper '" + std::string(name) + "' is not registered");
  }
  if (!args.is_object()) throw Error(ErrorKind::validation, "helper arguments must be an object");
  return entries_[it->second].fn(args, ctx);
}

// ---------------------------------------------------------------------------
// Built-in helpers.

namespace {

constexpr double kCloseLookahead = 86400.0;

std::string uid_arg(const json& args) {
  if (!args.contains("uid") || !args.at("uid").is_string()) {
    throw Error(ErrorKind::validation, "argument 'uid' must be a string");
  }
  return args.at("uid").get<std::string>();
}

EpochSeconds time_arg(const json& args, const char* key, const DisplayZone& zone) {
  if (!args.contains(key)) throw Error(ErrorKind::validation, std::string("missing argument '") + key + "'");
  const json& v = args.at(key);
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) return zone.parse(v.get<std::string>());
  throw Error(ErrorKind::validation, std::string("argument '") + key + "' must be a time string");
}

TimeRange range_args(const json& args, const DisplayZone& zone) {
  TimeRange r{time_arg(args, "start_time", zone), time_arg(args, "end_time", zone)};
  if (!r.valid()) throw Error(ErrorKind::validation, "start_time must not be after end_time");
  return r;
}

json block_json(const std::string& key, const std::string& state, const StateBlock& b,
                const DisplayZone& zone) {
  json row = {{key, state},
              {"start", zone.format(b.start)},
              {"end", zone.format(b.end)},
              {"duration", b.end - b.start}};
  if (b.synthetic) row["synthetic"] = true;
  return row;
}

std::vector<HelperParam> window_params() {
  return {{"uid", "string", "Participant id, e.g. 'u001'."},
          {"start_time", "string", "Inclusive window start, 'YYYY-MM-DD HH:MM:SS' local time."},
          {"end_time", "string", "Exclusive window end, 'YYYY-MM-DD HH:MM:SS' local time."}};
}

}  // namespace

json app_block_to_json(const AppUsageBlock& b, const DisplayZone& zone) {
  json row = {{"app", b.app},
              {"open", zone.format(b.open)},
              {"close", zone.format(b.close)},
              {"duration", b.duration}};
  if (b.synthetic) row["synthetic"] = true;
  return row;
}

std::vector<AppUsageBlock> get_app_usage_blocks(const SensorStore& store, const std::string& uid,
                                                const TimeRange& range) {
  const auto result = store.query_records(
      uid, StreamKind::app_usage, {range.start, range.end + kCloseLookahead});
  std::vector<AppUsageEvent> events;
  for (const auto& r : result.records) {
    const auto& p = std::get<AppUsagePayload>(r.payload);
    events.push_back({r.timestamp, p.app_name, p.event});
  }
  return pair_app_usage(std::move(events), range);
}

json stream_window(const HelperContext& ctx, StreamKind stream, const std::string& uid,
                   const TimeRange& range) {
  const DisplayZone& zone = ctx.zone;
  json rows = json::array();
  if (stream == StreamKind::app_usage) {
    for (const auto& b : get_app_usage_blocks(ctx.store, uid, range)) {
      rows.push_back(app_block_to_json(b, zone));
    }
    return rows;
  }
  const auto records = ctx.store.query_records(uid, stream, range).records;

  auto state_rows = [&](const char* key, auto state_of) {
    std::vector<StateEvent> events;
    for (const auto& r : records) events.push_back({r.timestamp, state_of(r)});
    for (const auto& b : pair_state_events(events, range.end)) {
      rows.push_back(block_json(key, b.state, b, zone));
    }
  };

  switch (stream) {
    case StreamKind::activity:
      state_rows("activity", [](const SensorRecord& r) {
        return std::string(to_string(std::get<ActivityPayload>(r.payload).kind));
      });
      break;
    case StreamKind::lock_unlock:
      state_rows("state", [](const SensorRecord& r) {
        return std::get<LockUnlockPayload>(r.payload).event == LockEvent::lock ? std::string("locked")
                                                                              : std::string("unlocked");
      });
      break;
    case StreamKind::wifi: {
      // State key is the SSID for connected samples; a reserved key that
      // cannot collide with an SSID marks disconnection.
      static const std::string kDisconnected = std::string("\x01") + "disconnected";
      std::vector<StateEvent> events;
      for (const auto& r : records) {
        const auto& p = std::get<WifiPayload>(r.payload);
        events.push_back({r.timestamp, p.connected ? "=" + p.ssid.value_or("") : kDisconnected});
      }
      for (const auto& b : pair_state_events(events, range.end)) {
        json row;
        if (b.state == kDisconnected) {
          row = {{"connected", false}, {"ssid", nullptr}};
        } else {
          const std::string ssid = b.state.substr(1);
          row = {{"connected", true}, {"ssid", ssid.empty() ? json(nullptr) : json(ssid)}};
        }
        row["start"] = zone.format(b.start);
        row["end"] = zone.format(b.end);
        row["duration"] = b.end - b.start;
        if (b.synthetic) row["synthetic"] = true;
        rows.push_back(std::move(row));
      }
      break;
    }
    default:
      for (const auto& r : records) {
        json row = payload_to_json(r.payload);
        row["time"] = zone.format(r.timestamp);
        rows.push_back(std::move(row));
      }
      break;
  }
  return rows;
}

HelperRegistry builtin_registry() {
  HelperRegistry reg;

  reg.add({"get_app_usage_blocks",
           "Pairs app open and close events of one participant into usage blocks over a time "
           "window; one block per opening of an app.",
           window_params(),
           "A list of blocks with app, open, close and duration (seconds, close minus open). "
           "Blocks whose close was never recorded carry 'synthetic': True.",
           {"{'app': 'SnapChat', 'open': '2024-07-15 17:38:57', 'close': '2024-07-15 18:13:32', "
            "'duration': 2075.0}",
            "{'app': 'iMessage', 'open': '2024-07-15 19:07:34', 'close': '2024-07-15 19:08:12', "
            "'duration': 38.0}"},
           {StreamKind::app_usage}},
          [](const json& args, const HelperContext& ctx) {
            return stream_window(ctx, StreamKind::app_usage, uid_arg(args),
                                 range_args(args, ctx.zone));
          });

  struct Family {
    const char* name;
    StreamKind stream;
    const char* description;
    const char* returns;
    const char* example;
  };
  const std::array<Family, 10> family = {{
      {"get_location_points", StreamKind::location,
       "GPS location samples of one participant between start_time and end_time.",
       "A list of samples with time, latitude, longitude (degrees) and altitude (meters).",
       "{'time': '2024-07-15 09:00:12', 'latitude': 42.3398, 'longitude': -71.0892, "
       "'altitude': 12.0}"},
      {"get_activity_blocks", StreamKind::activity,
       "Periods of detected activity (stationary, walking, cycling, running, automotive) of "
       "one participant between start_time and end_time.",
       "A list of blocks with activity, start, end and duration in seconds. The last block "
       "ends at end_time and carries 'synthetic': True.",
       "{'activity': 'walking', 'start': '2024-07-15 08:10:00', 'end': '2024-07-15 08:25:30', "
       "'duration': 930.0}"},
      {"get_phone_steps", StreamKind::phone_steps,
       "Step samples counted by the phone (steps, distance, floors ascended and descended) of "
       "one participant between start_time and end_time.",
       "A list of samples with time, steps, distance (meters), floors_up and floors_down.",
       "{'time': '2024-07-15 08:11:00', 'steps': 92, 'distance': 67.5, 'floors_up': 0, "
       "'floors_down': 1}"},
      {"get_lock_unlock_blocks", StreamKind::lock_unlock,
       "Periods during which the phone of one participant was locked or unlocked, between "
       "start_time and end_time.",
       "A list of blocks with state ('locked' or 'unlocked'), start, end and duration in "
       "seconds.",
       "{'state': 'unlocked', 'start': '2024-07-15 10:02:11', 'end': '2024-07-15 10:09:40', "
       "'duration': 449.0}"},
      {"get_wifi_blocks", StreamKind::wifi,
       "WiFi connection periods of one participant between start_time and end_time. "
       "Disconnected periods have 'connected': False and 'ssid': None.",
       "A list of blocks with connected (bool), ssid (network name or None), start, end and "
       "duration in seconds.",
       "{'connected': True, 'ssid': 'HomeNet', 'start': '2024-07-15 05:05:19', 'end': "
       "'2024-07-15 08:31:46', 'duration': 12387.0}"},
      {"get_call_logs", StreamKind::call_logs,
       "Phone calls of one participant between start_time and end_time.",
       "A list of calls with time, direction ('incoming', 'outgoing' or 'missed') and "
       "duration in seconds.",
       "{'time': '2024-07-15 12:30:02', 'direction': 'outgoing', 'duration': 184}"},
      {"get_battery_events", StreamKind::battery,
       "Battery level and charging state changes of one participant's phone between start_time "
       "and end_time.",
       "A list of events with time, level (percent) and state ('charging', 'discharging' or "
       "'full').",
       "{'time': '2024-07-15 22:41:10', 'level': 18, 'state': 'charging'}"},
      {"get_garmin_steps", StreamKind::garmin_steps,
       "Step counts recorded by the Garmin smartwatch of one participant between start_time "
       "and end_time.",
       "A list of samples with time and steps.",
       "{'time': '2024-07-15 08:11:00', 'steps': 88}"},
      {"get_heart_rate", StreamKind::garmin_heart_rate,
       "Heart rate samples (bpm) recorded by the Garmin smartwatch of one participant between "
       "start_time and end_time.",
       "A list of samples with time and bpm.",
       "{'time': '2024-07-15 10:52:35', 'bpm': 121}"},
      {"get_stress_predictions", StreamKind::stress_prediction,
       "Stored physiological stress predictions (0 low to 1 high) of one participant between "
       "start_time and end_time.",
       "A list of samples with time and probability.",
       "{'time': '2024-07-15 10:53:05', 'probability': 0.82}"},
  }};
  for (const auto& f : family) {
    const StreamKind stream = f.stream;
    reg.add({f.name, f.description, window_params(), f.returns, {f.example}, {stream}},
            [stream](const json& args, const HelperContext& ctx) {
              return stream_window(ctx, stream, uid_arg(args), range_args(args, ctx.zone));
            });
  }

  reg.add({"predict_stress_from_heart_rate",
           "Runs the stress model on the Garmin heart rate samples of one participant between "
           "start_time and end_time and returns one stress probability for the whole window.",
           window_params(),
           "A dictionary with probability (0 low to 1 high) and the number of heart rate "
           "samples used. Raises an error when the window has no heart rate data.",
           {"{'probability': 0.73, 'samples': 118}"},
           {StreamKind::garmin_heart_rate, StreamKind::stress_prediction}},
          [](const json& args, const HelperContext& ctx) {
            const auto range = range_args(args, ctx.zone);
            const auto records =
                ctx.store.query_records(uid_arg(args), StreamKind::garmin_heart_rate, range).records;
            std::vector<HeartRateSample> window;
            for (const auto& r : records) {
              window.push_back({r.timestamp, std::get<HeartRatePayload>(r.payload).bpm});
            }
            return json{{"probability", predict_stress(ctx.predictor, window)},
                        {"samples", window.size()}};
          });
  return reg;
}

}  // namespace senseloop
