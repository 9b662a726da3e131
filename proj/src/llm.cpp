#include "senseloop/llm.hpp"

#include <iomanip>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <openssl/sha.h>

namespace senseloop {

using nlohmann::json;

std::string_view to_string(Role role) {
  switch (role) {
    case Role::system: return "system";
    case Role::user: return "user";
    case Role::assistant: return "assistant";
  }
  return "user";
}

namespace {

Role parse_role(const std::string& s) {
  if (s == "system") return Role::system;
  if (s == "user") return Role::user;
  if (s == "assistant") return Role::assistant;
  throw Error(ErrorKind::validation, "unknown chat role '" + s + "'");
}

std::string sha256_hex(std::string_view data) {
  unsigned char digest[SHA256_DIGEST_LENGTH];
  SHA256(reinterpret_cast<const unsigned char*>(data.data()), data.size(), digest);
  std::ostringstream out;
  out << std::hex << std::setfill('0');
  for (unsigned char c : digest) out << std::setw(2) << static_cast<int>(c);
  return out.str();
}

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string prefix;  // path without trailing slash
};

SplitUrl split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw Error(ErrorKind::validation, "base URL needs a scheme: '" + url + "'");
  }
  const auto path_start = url.find('/', scheme_end + 3);
  SplitUrl out;
  out.origin = url.substr(0, path_start);
  out.prefix = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!out.prefix.empty() && out.prefix.back() == '/') out.prefix.pop_back();
  return out;
}

}  // namespace

json request_to_json(const ChatRequest& request) {
  json messages = json::array();
  for (const auto& m : request.messages) {
    messages.push_back({{"role", to_string(m.role)}, {"content", m.content}});
  }
  return {{"model", request.model},
          {"messages", messages},
          {"temperature", request.temperature},
          {"top_p", request.top_p}};
}

ChatRequest request_from_json(const json& j) {
  ChatRequest r;
  r.model = j.value("model", r.model);
  r.temperature = j.value("temperature", 1.0);
  r.top_p = j.value("top_p", 1.0);
  for (const auto& m : j.at("messages")) {
    r.messages.push_back({parse_role(m.at("role").get<std::string>()),
                          m.at("content").get<std::string>()});
  }
  return r;
}

std::string canonical_request(const ChatRequest& request) {
  json j = request_to_json(request);
  for (auto& m : j["messages"]) {
    m["content"] = normalize_whitespace(m["content"].get<std::string>());
  }
  // nlohmann::json objects are key-sorted, so dump() is canonical.
  return j.dump();
}

std::string fingerprint(const ChatRequest& request) {
  return sha256_hex(canonical_request(request));
}

void validate(const ChatRequest& request) {
  if (request.messages.empty()) {
    throw Error(ErrorKind::validation, "chat request has no messages");
  }
  for (const auto& m : request.messages) {
    if (m.role != Role::assistant && trim(m.content).empty()) {
      throw Error(ErrorKind::validation, "system/user message content must be non-empty");
    }
  }
}

// ---------------------------------------------------------------------------

json post_json(const RemoteConfig& config, const std::string& path, const json& body) {
  const SplitUrl url = split_url(config.base_url);
  httplib::Client client(url.origin);
  client.set_connection_timeout(std::chrono::seconds(10));
  client.set_read_timeout(config.timeout);
  client.set_write_timeout(config.timeout);
  httplib::Headers headers;
  if (!config.api_key.empty()) headers.emplace("Authorization", "Bearer " + config.api_key);

  const std::string payload = body.dump();
  std::string last_error;
  auto backoff = config.initial_backoff;
  const int attempts = std::max(1, config.max_attempts);
  for (int attempt = 1; attempt <= attempts; ++attempt) {
    auto res = client.Post(url.prefix + path, headers, payload, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
    } else if (res->status == 429 || res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 300);
    } else if (res->status >= 400) {
      throw Error(ErrorKind::backend,
                  "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 300));
    } else {
      try {
        return json::parse(res->body);
      } catch (const json::exception& e) {
        throw Error(ErrorKind::backend, std::string("unparseable response body: ") + e.what());
      }
    }
    if (attempt < attempts) {
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
  }
  throw Error(ErrorKind::backend, "request failed after " + std::to_string(attempts) +
                                      " attempts: " + last_error);
}

std::string RemoteBackend::do_complete(const ChatRequest& request) {
  const json response = post_json(config_, "/chat/completions", request_to_json(request));
  try {
    return response.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception&) {
    throw Error(ErrorKind::backend, "response has no choices[0].message.content");
  }
}

// ---------------------------------------------------------------------------

ScriptedBackend::ScriptedBackend(std::vector<std::string> responses)
    : queue_(responses.begin(), responses.end()) {}

ScriptedBackend::ScriptedBackend(Responder responder) : responder_(std::move(responder)) {}

std::size_t ScriptedBackend::calls() const {
  std::lock_guard lock(mutex_);
  return calls_;
}

std::vector<ChatRequest> ScriptedBackend::requests() const {
  std::lock_guard lock(mutex_);
  return seen_;
}

std::string ScriptedBackend::do_complete(const ChatRequest& request) {
  std::size_t index = 0;
  {
    std::lock_guard lock(mutex_);
    index = calls_++;
    seen_.push_back(request);
    if (!responder_) {
      if (!queue_.empty()) {
        std::string r = std::move(queue_.front());
        queue_.pop_front();
        return r;
      }
    }
  }
  // Responders may block (tests use them as gates), so they run unlocked.
  if (responder_) {
    if (auto r = responder_(request, index)) return *r;
  }
  throw Error(ErrorKind::backend,
              "scripted backend exhausted after " + std::to_string(index) + " responses");
}

// ---------------------------------------------------------------------------

void Cassette::append(const ChatRequest& request, std::string response) {
  entries_.push_back({fingerprint(request), request, std::move(response)});
}

std::string Cassette::to_jsonl() const {
  std::string out;
  for (const auto& e : entries_) {
    json line = {{"request_fingerprint", e.request_fingerprint},
                 {"request", request_to_json(e.request)},
                 {"response_text", e.response_text}};
    out += line.dump() + "\n";
  }
  return out;
}

Cassette Cassette::from_jsonl(std::string_view text) {
  Cassette c;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const std::string line = trim(text.substr(pos, nl - pos));
    pos = nl + 1;
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      CassetteEntry e;
      e.request = request_from_json(j.at("request"));
      e.request_fingerprint = fingerprint(e.request);
      if (j.contains("request_fingerprint") &&
          j["request_fingerprint"].get<std::string>() != e.request_fingerprint) {
        throw Error(ErrorKind::parse, "cassette line " + std::to_string(line_no) +
                                          ": stored fingerprint does not match its request");
      }
      e.response_text = j.at("response_text").get<std::string>();
      c.entries_.push_back(std::move(e));
    } catch (const json::exception& ex) {
      throw Error(ErrorKind::parse,
                  "cassette line " + std::to_string(line_no) + ": " + ex.what());
    }
  }
  return c;
}

Cassette Cassette::load(const std::filesystem::path& path) {
  return from_jsonl(read_file(path.string()));
}

void Cassette::save(const std::filesystem::path& path) const {
  write_file(path.string(), to_jsonl());
}

ReplayBackend::ReplayBackend(Cassette cassette) : cassette_(std::move(cassette)) {
  for (std::size_t i = 0; i < cassette_.entries().size(); ++i) {
    by_fingerprint_[cassette_.entries()[i].request_fingerprint].push_back(i);
  }
}

std::shared_ptr<ReplayBackend> ReplayBackend::from_file(const std::filesystem::path& path) {
  return std::make_shared<ReplayBackend>(Cassette::load(path));
}

std::string ReplayBackend::do_complete(const ChatRequest& request) {
  const std::string fp = fingerprint(request);
  std::lock_guard lock(mutex_);
  const auto it = by_fingerprint_.find(fp);
  if (it == by_fingerprint_.end()) {
    throw Error(ErrorKind::cassette_miss, "cassette miss for request fingerprint " + fp);
  }
  std::size_t& cursor = cursor_[fp];
  const std::size_t idx = it->second[std::min(cursor, it->second.size() - 1)];
  ++cursor;
  return cassette_.entries()[idx].response_text;
}

RecordingBackend::RecordingBackend(std::shared_ptr<ChatBackend> inner, std::filesystem::path path)
    : inner_(std::move(inner)), path_(std::move(path)) {}

RecordingBackend::~RecordingBackend() {
  try {
    if (!closed_) close();
  } catch (...) {
  }
}

std::string RecordingBackend::do_complete(const ChatRequest& request) {
  std::string response = inner_->complete(request);
  std::lock_guard lock(mutex_);
  cassette_.append(request, response);
  return response;
}

Cassette RecordingBackend::close() {
  std::lock_guard lock(mutex_);
  cassette_.save(path_);
  closed_ = true;
  return cassette_;
}

Cassette RecordingBackend::snapshot() const {
  std::lock_guard lock(mutex_);
  return cassette_;
}

}  // namespace senseloop
