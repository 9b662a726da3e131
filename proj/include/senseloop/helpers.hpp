#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "senseloop/common.hpp"
#include "senseloop/datastore.hpp"

namespace senseloop {

struct HelperParam {
  std::string name;
  std::string type;  // "string", "number", ...
  std::string description;
};

/// Prompt-injectable description of a helper function.
struct HelperSpec {
  std::string name;
  std::string description;
  std::vector<HelperParam> parameters;
  std::string returns;
  std::vector<std::string> examples;  // rendered example output values
  std::vector<StreamKind> stream_tags;
};

// ---------------------------------------------------------------------------
// Stress prediction. The real classifier works on IBI + heart rate; this
// interface only fixes its contract.

struct HeartRateSample {
  EpochSeconds time = 0;
  double bpm = 0;
};

class StressPredictor {
 public:
  virtual ~StressPredictor() = default;
  /// Probability in [0, 1]; `window` is never empty.
  virtual double predict(std::span<const HeartRateSample> window) const = 0;
};

/// Placeholder model: logistic((mean_bpm - 70) / 10). Deterministic and
/// monotone in mean heart rate; not a physiological stress model.
class LogisticStressStub : public StressPredictor {
 public:
  double predict(std::span<const HeartRateSample> window) const override;
};

/// Throws Error(validation) for an empty window.
double predict_stress(const StressPredictor& model, std::span<const HeartRateSample> window);

// ---------------------------------------------------------------------------
// Event pairing.

struct AppUsageEvent {
  EpochSeconds time = 0;
  std::string app;
  AppEvent event = AppEvent::open;
};

struct AppUsageBlock {
  std::string app;
  EpochSeconds open = 0;
  EpochSeconds close = 0;
  double duration = 0;
  bool synthetic = false;  // close was not observed

  bool operator==(const AppUsageBlock&) const = default;
};

/// Pairs open/close events per app. A block is emitted for every open inside
/// `range`; it closes at the first close of the same app before the app's
/// next open, otherwise synthetically at min(range.end, next open). At equal
/// timestamps an open sorts before a close. Output is sorted by (open, app).
std::vector<AppUsageBlock> pair_app_usage(std::vector<AppUsageEvent> events,
                                          const TimeRange& range);

/// A state held over [start, end). Consecutive events with the same state
/// merge; the last block is closed synthetically at `range_end`.
struct StateBlock {
  std::string state;
  EpochSeconds start = 0;
  EpochSeconds end = 0;
  bool synthetic = false;

  bool operator==(const StateBlock&) const = default;
};

struct StateEvent {
  EpochSeconds time = 0;
  std::string state;
};

std::vector<StateBlock> pair_state_events(const std::vector<StateEvent>& events,
                                          EpochSeconds range_end);

// ---------------------------------------------------------------------------
// Registry.

struct HelperContext {
  const SensorStore& store;
  DisplayZone zone;
  const StressPredictor& predictor;
};

using HelperFn = std::function<nlohmann::json(const nlohmann::json& args, const HelperContext&)>;

struct HelperSelection {
  std::vector<const HelperSpec*> helpers;  // registration order
  std::vector<StreamKind> streams;         // streams the request mentions
  bool no_relevant_helpers() const { return helpers.empty(); }
};

class HelperRegistry {
 public:
  /// Throws Error(validation) on a duplicate name, empty stream_tags, or a
  /// backticked parameter in the description that is not declared.
  void add(HelperSpec spec, HelperFn fn);

  std::size_t size() const { return entries_.size(); }
  bool contains(std::string_view name) const;
  const HelperSpec& spec(std::string_view name) const;
  std::vector<std::string> names() const;

  /// Name, description, parameters and examples of the selected helpers as
  /// text blocks, in registration order.
  /// Throws Error(not_found) for an unknown name.
  std::string describe(const std::vector<std::string>& names) const;

  /// Lexicon-based selection: helpers whose stream tags intersect the streams
  /// the request mentions.
  HelperSelection select_relevant(std::string_view request_text) const;

  /// Runs a helper. Throws Error(not_found) for an unregistered name and
  /// Error(validation) for bad arguments.
  nlohmann::json invoke(std::string_view name, const nlohmann::json& args,
                        const HelperContext& ctx) const;

 private:
  struct Entry {
    HelperSpec spec;
    HelperFn fn;
  };
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

/// Streams referenced by free text through the per-stream synonym lexicon.
std::vector<StreamKind> streams_mentioned(std::string_view text);

/// The synonym list for one stream (lower-case).
const std::vector<std::string>& stream_lexicon(StreamKind stream);

/// Plain-text database descriptions ("<Name>:\nInfo: ...\nDevice: ...")
/// for every stream.
std::string describe_databases();

/// Rows of one stream over [start, end): point streams return samples,
/// interval streams (activity, wifi, lock_unlock) return state blocks and
/// app_usage returns usage blocks. Row shapes are documented in
/// docs/helpers.md.
nlohmann::json stream_window(const HelperContext& ctx, StreamKind stream,
                             const std::string& uid, const TimeRange& range);

/// Usage blocks for one user; looks up to one day past range.end for closes.
std::vector<AppUsageBlock> get_app_usage_blocks(const SensorStore& store,
                                                const std::string& uid,
                                                const TimeRange& range);

nlohmann::json app_block_to_json(const AppUsageBlock& block, const DisplayZone& zone);

/// Registry with the built-in helper family (one or more helpers per stream).
HelperRegistry builtin_registry();

}  // namespace senseloop
