#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "senseloop/common.hpp"
#include "senseloop/helpers.hpp"

namespace senseloop {

// Guest programs are Python 3. They talk to the host over an inherited
// AF_UNIX stream (fd 3) using length-prefixed JSON frames; see
// docs/bridge-protocol.md.

inline constexpr std::string_view kResultOpen = "<<<RESULT";
inline constexpr std::string_view kResultClose = "RESULT>>>";

struct HelperSignature {
  std::string name;
  std::vector<std::string> params;
};

/// Host side of one execution's bridge: the helpers the guest may call and
/// the function that runs them. The handler throws Error to report failure.
struct BridgeSession {
  std::vector<HelperSignature> exposed;
  std::function<nlohmann::json(const std::string& helper, const nlohmann::json& args)> handler;
};

/// Exposes every helper of `registry`, executed against `ctx`. The returned
/// session references `registry` and `ctx`; both must outlive it.
BridgeSession make_bridge_session(const HelperRegistry& registry, const HelperContext& ctx);

struct ExecutionLimits {
  std::chrono::milliseconds wall_clock{60'000};
  std::size_t output_bytes = 1 << 20;
  std::size_t memory_bytes = std::size_t{1} << 30;
};

struct ExecutionRequest {
  std::string program;
  ExecutionLimits limits;
  BridgeSession bridge;
};

struct BridgeCall {
  std::string helper;
  nlohmann::json args;
  bool ok = false;
  std::string error;  // error code when !ok
  std::string message;
};

enum class ExitKind { success, nonzero_exit, signaled, timeout };

std::string_view to_string(ExitKind kind);

struct ExecutionResult {
  ExitKind status = ExitKind::success;
  int exit_code = 0;  // exit status, or signal number when signaled
  std::string stdout_text;
  std::string stderr_text;
  bool output_truncated = false;
  double duration = 0;  // seconds
  std::optional<nlohmann::json> result_value;
  std::string result_error;  // set when a result block was present but unparseable
  std::vector<BridgeCall> bridge_calls;

  bool succeeded() const { return status == ExitKind::success; }
};

/// Extracts the last result block from program output.
std::optional<nlohmann::json> parse_result_block(std::string_view stdout_text,
                                                 std::string* error = nullptr);

/// The Python prelude that defines call_helper(), emit_result() and one
/// wrapper per exposed helper, then runs the program from argv[1].
std::string guest_prelude(const std::vector<HelperSignature>& exposed);

struct SandboxOptions {
  std::string python = "/usr/bin/python3";
  /// Read-only runtime paths visible to the guest (the interpreter and its
  /// libraries). Nothing else of the host filesystem is readable.
  std::vector<std::string> runtime_paths = {"/usr",           "/lib",          "/lib64",
                                            "/bin",           "/sbin",         "/etc/ld.so.cache",
                                            "/etc/localtime"};
  std::filesystem::path scratch_root = std::filesystem::temp_directory_path();
};

class Sandbox {
 public:
  virtual ~Sandbox() = default;
  virtual std::string name() const = 0;

  /// Empty when usable; otherwise the reason the backend cannot run here.
  virtual std::string unavailable_reason() const = 0;

  /// Runs one program. Program failures are reported in the result; only a
  /// failure to launch throws Error(sandbox).
  virtual ExecutionResult execute(const ExecutionRequest& request) = 0;
};

enum class SandboxKind {
  subprocess,  // rlimits + Landlock (filesystem, TCP) + seccomp socket filter
  container,   // fresh mount/net/pid/ipc/uts namespaces, read-only runtime binds
};

std::string_view to_string(SandboxKind kind);
std::optional<SandboxKind> parse_sandbox_kind(std::string_view name);

std::unique_ptr<Sandbox> make_sandbox(SandboxKind kind, SandboxOptions options = {});

}  // namespace senseloop
