#pragma once

#include <chrono>
#include <cstddef>
#include <deque>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "senseloop/common.hpp"

namespace senseloop {

enum class Role { system, user, assistant };

std::string_view to_string(Role role);

struct ChatMessage {
  Role role = Role::user;
  std::string content;
  bool operator==(const ChatMessage&) const = default;
};

struct ChatRequest {
  std::string model = "gpt-4o";
  std::vector<ChatMessage> messages;
  double temperature = 1.0;
  double top_p = 1.0;
  bool operator==(const ChatRequest&) const = default;
};

nlohmann::json request_to_json(const ChatRequest& request);
ChatRequest request_from_json(const nlohmann::json& j);

/// Canonical serialization: keys sorted, message content whitespace-normalized,
/// message order preserved.
std::string canonical_request(const ChatRequest& request);

/// Hex SHA-256 of canonical_request().
std::string fingerprint(const ChatRequest& request);

/// Throws Error(validation) if the request breaks the ChatRequest invariants.
void validate(const ChatRequest& request);

/// Chat-completion backend. Implementations are safe to share between runs.
class ChatBackend {
 public:
  virtual ~ChatBackend() = default;

  std::string complete(const ChatRequest& request) {
    validate(request);
    return do_complete(request);
  }

 private:
  virtual std::string do_complete(const ChatRequest& request) = 0;
};

// ---------------------------------------------------------------------------

struct RemoteConfig {
  std::string base_url = "https://api.openai.com/v1";
  std::string api_key;
  int max_attempts = 3;
  std::chrono::milliseconds initial_backoff{500};
  std::chrono::seconds timeout{120};
};

/// POSTs JSON to `{base_url}{path}` with bearer auth, retrying transport
/// errors, 429 and 5xx with exponential backoff. Other statuses fail at once.
nlohmann::json post_json(const RemoteConfig& config, const std::string& path,
                         const nlohmann::json& body);

/// OpenAI-compatible chat completions over HTTP(S).
class RemoteBackend : public ChatBackend {
 public:
  explicit RemoteBackend(RemoteConfig config) : config_(std::move(config)) {}

 private:
  std::string do_complete(const ChatRequest& request) override;

  RemoteConfig config_;
};

/// Returns canned responses. Either a fixed queue, or a responder callback
/// that sees every request (returning nullopt means "exhausted").
class ScriptedBackend : public ChatBackend {
 public:
  using Responder =
      std::function<std::optional<std::string>(const ChatRequest&, std::size_t call_index)>;

  explicit ScriptedBackend(std::vector<std::string> responses);
  explicit ScriptedBackend(Responder responder);

  std::size_t calls() const;
  std::vector<ChatRequest> requests() const;

 private:
  std::string do_complete(const ChatRequest& request) override;

  mutable std::mutex mutex_;
  std::deque<std::string> queue_;
  Responder responder_;
  std::size_t calls_ = 0;
  std::vector<ChatRequest> seen_;
};

struct CassetteEntry {
  std::string request_fingerprint;
  ChatRequest request;
  std::string response_text;
};

/// Ordered request/response exchanges; persisted as JSONL.
class Cassette {
 public:
  void append(const ChatRequest& request, std::string response);
  const std::vector<CassetteEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::string to_jsonl() const;
  static Cassette from_jsonl(std::string_view text);
  static Cassette load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

 private:
  std::vector<CassetteEntry> entries_;
};

/// Serves responses from a cassette by fingerprint. Repeated identical
/// requests consume matching entries in recorded order; once they run out
/// the last one is served again.
class ReplayBackend : public ChatBackend {
 public:
  explicit ReplayBackend(Cassette cassette);
  static std::shared_ptr<ReplayBackend> from_file(const std::filesystem::path& path);

 private:
  std::string do_complete(const ChatRequest& request) override;

  std::mutex mutex_;
  Cassette cassette_;
  std::unordered_map<std::string, std::vector<std::size_t>> by_fingerprint_;
  std::unordered_map<std::string, std::size_t> cursor_;
};

/// Passes requests through to `inner` and records every exchange. The
/// cassette is written by close() (or the destructor, if close was skipped).
class RecordingBackend : public ChatBackend {
 public:
  RecordingBackend(std::shared_ptr<ChatBackend> inner, std::filesystem::path path);
  ~RecordingBackend() override;

  RecordingBackend(const RecordingBackend&) = delete;
  RecordingBackend& operator=(const RecordingBackend&) = delete;

  /// Persists the cassette. Throws Error(io) on failure.
  Cassette close();
  Cassette snapshot() const;

 private:
  std::string do_complete(const ChatRequest& request) override;

  std::shared_ptr<ChatBackend> inner_;
  std::filesystem::path path_;
  mutable std::mutex mutex_;
  Cassette cassette_;
  bool closed_ = false;
};

}  // namespace senseloop
