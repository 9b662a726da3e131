#include "senseloop/sandbox.hpp"

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <set>
#include <sstream>

#include <fcntl.h>
#include <grp.h>
#include <linux/audit.h>
#include <linux/filter.h>
#include <linux/landlock.h>
#include <linux/seccomp.h>
#include <poll.h>
#include <sched.h>
#include <signal.h>
#include <stddef.h>
#include <sys/mount.h>
#include <sys/prctl.h>
#include <sys/resource.h>
#include <sys/socket.h>
#include <sys/stat.h>
#include <sys/syscall.h>
#include <sys/wait.h>
#include <unistd.h>

// Landlock additions newer than the system headers.
#ifndef LANDLOCK_ACCESS_FS_REFER
#define LANDLOCK_ACCESS_FS_REFER (1ULL << 13)
#endif
#ifndef LANDLOCK_ACCESS_FS_TRUNCATE
#define LANDLOCK_ACCESS_FS_TRUNCATE (1ULL << 14)
#endif
#ifndef LANDLOCK_ACCESS_FS_IOCTL_DEV
#define LANDLOCK_ACCESS_FS_IOCTL_DEV (1ULL << 15)
#endif
#ifndef LANDLOCK_ACCESS_NET_BIND_TCP
#define LANDLOCK_ACCESS_NET_BIND_TCP (1ULL << 0)
#define LANDLOCK_ACCESS_NET_CONNECT_TCP (1ULL << 1)
#endif
#ifndef LANDLOCK_SCOPE_ABSTRACT_UNIX_SOCKET
#define LANDLOCK_SCOPE_ABSTRACT_UNIX_SOCKET (1ULL << 0)
#define LANDLOCK_SCOPE_SIGNAL (1ULL << 1)
#endif

#if defined(__x86_64__)
#define SENSELOOP_AUDIT_ARCH AUDIT_ARCH_X86_64
#elif defined(__aarch64__)
#define SENSELOOP_AUDIT_ARCH AUDIT_ARCH_AARCH64
#else
#error "sandbox seccomp filter supports x86_64 and aarch64 only"
#endif

namespace senseloop {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

std::string_view to_string(ExitKind kind) {
  switch (kind) {
    case ExitKind::success: return "success";
    case ExitKind::nonzero_exit: return "nonzero_exit";
    case ExitKind::signaled: return "signaled";
    case ExitKind::timeout: return "timeout";
  }
  return "unknown";
}

std::string_view to_string(SandboxKind kind) {
  return kind == SandboxKind::subprocess ? "subprocess" : "container";
}

std::optional<SandboxKind> parse_sandbox_kind(std::string_view name) {
  if (name == "subprocess") return SandboxKind::subprocess;
  if (name == "container") return SandboxKind::container;
  return std::nullopt;
}

BridgeSession make_bridge_session(const HelperRegistry& registry, const HelperContext& ctx) {
  BridgeSession session;
  for (const auto& name : registry.names()) {
    HelperSignature sig{name, {}};
    for (const auto& p : registry.spec(name).parameters) sig.params.push_back(p.name);
    session.exposed.push_back(std::move(sig));
  }
  session.handler = [&registry, &ctx](const std::string& helper, const json& args) {
    return registry.invoke(helper, args, ctx);
  };
  return session;
}

std::optional<json> parse_result_block(std::string_view out, std::string* error) {
  const std::string open = std::string(kResultOpen) + "\n";
  const auto start = out.rfind(open);
  if (start == std::string_view::npos) return std::nullopt;
  const auto body_start = start + open.size();
  const auto end = out.find(std::string("\n") + std::string(kResultClose), body_start);
  if (end == std::string_view::npos) {
    if (error) *error = "result block is not terminated";
    return std::nullopt;
  }
  try {
    return json::parse(out.substr(body_start, end - body_start));
  } catch (const json::exception& e) {
    if (error) *error = std::string("result block is not valid JSON: ") + e.what();
    return std::nullopt;
  }
}

std::string guest_prelude(const std::vector<HelperSignature>& exposed) {
  std::ostringstream py;
  py << R"PY(import json as _json
import math as _math
import os as _os
import struct as _struct
import sys as _sys

_BRIDGE_FD = 3


class HelperError(Exception):
    pass


def _read_exact(n):
    buf = b""
    while len(buf) < n:
        chunk = _os.read(_BRIDGE_FD, n - len(buf))
        if not chunk:
            raise HelperError("helper bridge closed")
        buf += chunk
    return buf


def _write_all(data):
    view = memoryview(data)
    while view:
        written = _os.write(_BRIDGE_FD, view)
        view = view[written:]


def call_helper(name, **kwargs):
    body = _json.dumps({"helper": name, "args": kwargs}, default=str).encode("utf-8")
    _write_all(_struct.pack(">I", len(body)) + body)
    (size,) = _struct.unpack(">I", _read_exact(4))
    reply = _json.loads(_read_exact(size).decode("utf-8"))
    if not reply.get("ok"):
        raise HelperError("%s: %s" % (reply.get("error"), reply.get("message")))
    return reply.get("value")


def _finite(value):
    if isinstance(value, float) and not _math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {str(k): _finite(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, set)):
        return [_finite(v) for v in value]
    return value


def emit_result(value):
    text = _json.dumps(_finite(value), default=str, sort_keys=True)
    _sys.stdout.write("\n)PY"
     << kResultOpen << R"PY(\n" + text + "\n)PY" << kResultClose << R"PY(\n")
    _sys.stdout.flush()

)PY";
  for (const auto& h : exposed) {
    py << "\ndef " << h.name << "(";
    for (std::size_t i = 0; i < h.params.size(); ++i) py << (i ? ", " : "") << h.params[i];
    py << "):\n    return call_helper(\"" << h.name << "\"";
    for (const auto& p : h.params) py << ", " << p << "=" << p;
    py << ")\n";
  }
  py << R"PY(

_exported = {"__name__": "__main__", "__builtins__": __builtins__,
             "call_helper": call_helper, "emit_result": emit_result,
             "HelperError": HelperError}
)PY";
  for (const auto& h : exposed) py << "_exported[\"" << h.name << "\"] = " << h.name << "\n";
  py << R"PY(exec(compile(_sys.argv[1], "<program>", "exec"), _exported)
)PY";
  return py.str();
}

namespace {

// ---------------------------------------------------------------------------
// Everything the child needs is prepared before fork(); the child itself
// only issues system calls.

struct BindMount {
  std::string source;
  std::string target;
  bool is_dir = true;
  bool device = false;
};

struct SymlinkSpec {
  std::string target;
  std::string linkpath;
};

struct ContainerPlan {
  std::string root;
  std::vector<std::string> mkdirs;  // parents before children
  std::vector<BindMount> binds;
  std::vector<SymlinkSpec> symlinks;
  std::vector<std::string> tmpfs_dirs;
  bool user_namespace = false;
  std::string uid_map;
  std::string gid_map;
};

struct LaunchPlan {
  std::vector<std::string> argv_storage;
  std::vector<char*> argv;
  std::vector<std::string> env_storage;
  std::vector<char*> envp;
  std::string exec_path;
  std::string workdir;

  // Child-destined descriptors, all >= 10 until the child moves them.
  int stdin_fd = -1;
  int stdout_fd = -1;
  int stderr_fd = -1;
  int bridge_fd = -1;
  int errpipe_fd = -1;
  int landlock_fd = -1;

  rlim_t cpu_seconds = 61;
  rlim_t address_space = rlim_t{1} << 30;
  rlim_t max_processes = 0;  // 0 = leave unchanged

  std::vector<sock_filter> seccomp;
  std::optional<ContainerPlan> container;
};

struct ChildFailure {
  int stage;
  int err;
};

enum Stage {
  kStageFds = 1,
  kStageUnshare,
  kStageIdMap,
  kStageFork,
  kStageMounts,
  kStagePivot,
  kStageCredentials,
  kStageRlimits,
  kStageNoNewPrivs,
  kStageLandlock,
  kStageSeccomp,
  kStageExec,
};

const char* stage_name(int stage) {
  switch (stage) {
    case kStageFds: return "descriptor setup";
    case kStageUnshare: return "namespace creation";
    case kStageIdMap: return "user id mapping";
    case kStageFork: return "namespace init fork";
    case kStageMounts: return "filesystem setup";
    case kStagePivot: return "root switch";
    case kStageCredentials: return "privilege drop";
    case kStageRlimits: return "resource limits";
    case kStageNoNewPrivs: return "no_new_privs";
    case kStageLandlock: return "landlock";
    case kStageSeccomp: return "seccomp";
    case kStageExec: return "exec";
  }
  return "unknown stage";
}

[[noreturn]] void child_fail(int errpipe, int stage) {
  ChildFailure f{stage, errno};
  [[maybe_unused]] auto n = ::write(errpipe, &f, sizeof f);
  _exit(127);
}

int move_high(int fd) {
  const int moved = ::fcntl(fd, F_DUPFD_CLOEXEC, 10);
  ::close(fd);
  return moved;
}

void set_nonblocking(int fd) { ::fcntl(fd, F_SETFL, ::fcntl(fd, F_GETFL) | O_NONBLOCK); }

bool write_whole_file(const char* path, const std::string& content) {
  const int fd = ::open(path, O_WRONLY | O_CLOEXEC);
  if (fd < 0) return false;
  const bool ok = ::write(fd, content.data(), content.size()) == static_cast<ssize_t>(content.size());
  ::close(fd);
  return ok;
}

// Child: descriptors 0-3 for stdio + bridge, 4 error pipe, 5 landlock.
void child_setup_fds(const LaunchPlan& plan) {
  int err = plan.errpipe_fd;
  if (::dup2(plan.stdin_fd, 0) < 0 || ::dup2(plan.stdout_fd, 1) < 0 ||
      ::dup2(plan.stderr_fd, 2) < 0 || ::dup2(plan.bridge_fd, 3) < 0) {
    child_fail(err, kStageFds);
  }
  if (::dup3(plan.errpipe_fd, 4, O_CLOEXEC) < 0) child_fail(err, kStageFds);
  err = 4;
  int first_closed = 5;
  if (plan.landlock_fd >= 0) {
    if (::dup3(plan.landlock_fd, 5, O_CLOEXEC) < 0) child_fail(err, kStageFds);
    first_closed = 6;
  }
  if (::syscall(SYS_close_range, first_closed, ~0U, 0) != 0) {
    for (int fd = first_closed; fd < 4096; ++fd) ::close(fd);
  }
}

void child_limits_and_exec(const LaunchPlan& plan) {
  const int err = 4;
  const rlimit cpu{plan.cpu_seconds, plan.cpu_seconds + 1};
  const rlimit as{plan.address_space, plan.address_space};
  const rlimit fsize{64u << 20, 64u << 20};
  const rlimit nofile{64, 64};
  const rlimit core{0, 0};
  if (::setrlimit(RLIMIT_CPU, &cpu) || ::setrlimit(RLIMIT_AS, &as) ||
      ::setrlimit(RLIMIT_FSIZE, &fsize) || ::setrlimit(RLIMIT_NOFILE, &nofile) ||
      ::setrlimit(RLIMIT_CORE, &core)) {
    child_fail(err, kStageRlimits);
  }
  if (plan.max_processes) {
    const rlimit nproc{plan.max_processes, plan.max_processes};
    if (::setrlimit(RLIMIT_NPROC, &nproc)) child_fail(err, kStageRlimits);
  }
  if (::chdir(plan.workdir.c_str()) != 0) child_fail(err, kStageMounts);
  if (::prctl(PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0) child_fail(err, kStageNoNewPrivs);
  if (plan.landlock_fd >= 0) {
    if (::syscall(SYS_landlock_restrict_self, 5, 0) != 0) child_fail(err, kStageLandlock);
    ::close(5);
  }
  sock_fprog prog{static_cast<unsigned short>(plan.seccomp.size()),
                  const_cast<sock_filter*>(plan.seccomp.data())};
  if (::prctl(PR_SET_SECCOMP, SECCOMP_MODE_FILTER, &prog, 0, 0) != 0) {
    child_fail(err, kStageSeccomp);
  }
  ::execve(plan.exec_path.c_str(), plan.argv.data(), plan.envp.data());
  child_fail(err, kStageExec);
}

void child_container(const LaunchPlan& plan) {
  const int err = 4;
  const ContainerPlan& c = *plan.container;
  int flags = CLONE_NEWNS | CLONE_NEWNET | CLONE_NEWIPC | CLONE_NEWUTS | CLONE_NEWPID;
  if (c.user_namespace) flags |= CLONE_NEWUSER;
  if (::unshare(flags) != 0) child_fail(err, kStageUnshare);
  if (c.user_namespace) {
    if (!write_whole_file("/proc/self/setgroups", "deny") ||
        !write_whole_file("/proc/self/uid_map", c.uid_map) ||
        !write_whole_file("/proc/self/gid_map", c.gid_map)) {
      child_fail(err, kStageIdMap);
    }
  }
  // The first child after CLONE_NEWPID is the namespace's init.
  const pid_t init = ::fork();
  if (init < 0) child_fail(err, kStageFork);
  if (init > 0) {
    int status = 0;
    while (::waitpid(init, &status, 0) < 0 && errno == EINTR) {
    }
    if (WIFEXITED(status)) _exit(WEXITSTATUS(status));
    _exit(128 + (WIFSIGNALED(status) ? WTERMSIG(status) : 0));
  }
  ::prctl(PR_SET_PDEATHSIG, SIGKILL);

  if (::mount(nullptr, "/", nullptr, MS_REC | MS_PRIVATE, nullptr) != 0) {
    child_fail(err, kStageMounts);
  }
  if (::mount("tmpfs", c.root.c_str(), "tmpfs", MS_NOSUID | MS_NODEV, "mode=0755,size=16m") != 0) {
    child_fail(err, kStageMounts);
  }
  for (const auto& d : c.mkdirs) {
    if (::mkdir(d.c_str(), 0755) != 0 && errno != EEXIST) child_fail(err, kStageMounts);
  }
  for (const auto& b : c.binds) {
    if (!b.is_dir) {
      const int fd = ::open(b.target.c_str(), O_CREAT | O_WRONLY | O_CLOEXEC, 0644);
      if (fd < 0) child_fail(err, kStageMounts);
      ::close(fd);
    }
    if (::mount(b.source.c_str(), b.target.c_str(), nullptr, MS_BIND | MS_REC, nullptr) != 0) {
      child_fail(err, kStageMounts);
    }
    unsigned long ro = MS_REMOUNT | MS_BIND | MS_RDONLY | MS_NOSUID;
    if (!b.device) ro |= MS_NODEV;
    if (::mount(nullptr, b.target.c_str(), nullptr, ro, nullptr) != 0) {
      child_fail(err, kStageMounts);
    }
  }
  for (const auto& s : c.symlinks) {
    if (::symlink(s.target.c_str(), s.linkpath.c_str()) != 0) child_fail(err, kStageMounts);
  }
  for (const auto& t : c.tmpfs_dirs) {
    if (::mount("tmpfs", t.c_str(), "tmpfs", MS_NOSUID | MS_NODEV, "mode=1777,size=64m") != 0) {
      child_fail(err, kStageMounts);
    }
  }
  if (::chdir(c.root.c_str()) != 0) child_fail(err, kStagePivot);
  if (::syscall(SYS_pivot_root, ".", ".") == 0) {
    if (::umount2(".", MNT_DETACH) != 0) child_fail(err, kStagePivot);
  } else if (::chroot(".") != 0) {
    child_fail(err, kStagePivot);
  }
  if (::chdir("/") != 0) child_fail(err, kStagePivot);
  [[maybe_unused]] int hn = ::sethostname("sandbox", 7);

  if (!c.user_namespace) {
    const gid_t nogroup = 65534;
    const uid_t nobody = 65534;
    if (::setgroups(0, nullptr) != 0 || ::setresgid(nogroup, nogroup, nogroup) != 0 ||
        ::setresuid(nobody, nobody, nobody) != 0) {
      child_fail(err, kStageCredentials);
    }
  }
  child_limits_and_exec(plan);
}

[[noreturn]] void child_main(const LaunchPlan& plan) {
  ::setpgid(0, 0);
  ::prctl(PR_SET_PDEATHSIG, SIGKILL);
  child_setup_fds(plan);
  if (plan.container) {
    child_container(plan);
  } else {
    child_limits_and_exec(plan);
  }
  _exit(127);
}

// ---------------------------------------------------------------------------

std::vector<sock_filter> build_seccomp(bool restrict_sockets) {
  std::vector<sock_filter> f;
  f.push_back(BPF_STMT(BPF_LD | BPF_W | BPF_ABS, offsetof(seccomp_data, arch)));
  f.push_back(BPF_JUMP(BPF_JMP | BPF_JEQ | BPF_K, SENSELOOP_AUDIT_ARCH, 1, 0));
  f.push_back(BPF_STMT(BPF_RET | BPF_K, SECCOMP_RET_KILL_PROCESS));
  f.push_back(BPF_STMT(BPF_LD | BPF_W | BPF_ABS, offsetof(seccomp_data, nr)));
#if defined(__x86_64__)
  f.push_back(BPF_JUMP(BPF_JMP | BPF_JGE | BPF_K, 0x40000000u, 0, 1));  // x32 ABI
  f.push_back(BPF_STMT(BPF_RET | BPF_K, SECCOMP_RET_KILL_PROCESS));
#endif
  const long denied[] = {
      SYS_ptrace,       SYS_mount,          SYS_umount2,        SYS_unshare,
      SYS_setns,        SYS_pivot_root,     SYS_chroot,         SYS_bpf,
      SYS_perf_event_open, SYS_keyctl,      SYS_add_key,        SYS_request_key,
      SYS_init_module,  SYS_finit_module,   SYS_delete_module,  SYS_kexec_load,
      SYS_io_uring_setup, SYS_io_uring_enter, SYS_io_uring_register,
      SYS_process_vm_readv, SYS_process_vm_writev, SYS_userfaultfd,
  };
  for (long nr : denied) {
    f.push_back(BPF_JUMP(BPF_JMP | BPF_JEQ | BPF_K, static_cast<unsigned>(nr), 0, 1));
    f.push_back(BPF_STMT(BPF_RET | BPF_K, SECCOMP_RET_ERRNO | (EPERM & SECCOMP_RET_DATA)));
  }
  if (restrict_sockets) {
    // Only AF_UNIX sockets may be created; the bridge is inherited.
    f.push_back(BPF_JUMP(BPF_JMP | BPF_JEQ | BPF_K, SYS_socket, 0, 4));
    f.push_back(BPF_STMT(BPF_LD | BPF_W | BPF_ABS, offsetof(seccomp_data, args[0])));
    f.push_back(BPF_JUMP(BPF_JMP | BPF_JEQ | BPF_K, AF_UNIX, 0, 1));
    f.push_back(BPF_STMT(BPF_RET | BPF_K, SECCOMP_RET_ALLOW));
    f.push_back(BPF_STMT(BPF_RET | BPF_K, SECCOMP_RET_ERRNO | (EACCES & SECCOMP_RET_DATA)));
  }
  f.push_back(BPF_STMT(BPF_RET | BPF_K, SECCOMP_RET_ALLOW));
  return f;
}

struct LandlockRulesetAttr {
  __u64 handled_access_fs;
  __u64 handled_access_net;
  __u64 scoped;
};

int landlock_abi() {
  const long v = ::syscall(SYS_landlock_create_ruleset, nullptr, 0,
                           LANDLOCK_CREATE_RULESET_VERSION);
  return v < 0 ? 0 : static_cast<int>(v);
}

class UniqueFd {
 public:
  UniqueFd() = default;
  explicit UniqueFd(int fd) : fd_(fd) {}
  UniqueFd(UniqueFd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  UniqueFd& operator=(UniqueFd&& o) noexcept {
    reset(std::exchange(o.fd_, -1));
    return *this;
  }
  ~UniqueFd() { reset(); }
  int get() const { return fd_; }
  int release() { return std::exchange(fd_, -1); }
  void reset(int fd = -1) {
    if (fd_ >= 0) ::close(fd_);
    fd_ = fd;
  }
  explicit operator bool() const { return fd_ >= 0; }

 private:
  int fd_ = -1;
};

/// Ruleset: read/execute on runtime paths, full access to the scratch dir,
/// no TCP bind/connect, scoped abstract sockets and signals.
UniqueFd build_landlock(const std::vector<std::string>& runtime_paths, const std::string& scratch) {
  const int abi = landlock_abi();
  if (abi < 4) {
    throw Error(ErrorKind::sandbox, "Landlock ABI >= 4 is required (found " + std::to_string(abi) + ")");
  }
  __u64 fs = (1ULL << 13) - 1;  // every ABI 1 right
  fs |= LANDLOCK_ACCESS_FS_REFER | LANDLOCK_ACCESS_FS_TRUNCATE;
  if (abi >= 5) fs |= LANDLOCK_ACCESS_FS_IOCTL_DEV;
  LandlockRulesetAttr attr{fs, LANDLOCK_ACCESS_NET_BIND_TCP | LANDLOCK_ACCESS_NET_CONNECT_TCP,
                           abi >= 6 ? (LANDLOCK_SCOPE_ABSTRACT_UNIX_SOCKET | LANDLOCK_SCOPE_SIGNAL)
                                    : 0};
  const std::size_t attr_size = abi >= 6 ? sizeof(attr) : offsetof(LandlockRulesetAttr, scoped);
  UniqueFd ruleset(static_cast<int>(::syscall(SYS_landlock_create_ruleset, &attr, attr_size, 0)));
  if (!ruleset) throw Error(ErrorKind::sandbox, std::string("landlock ruleset: ") + std::strerror(errno));

  const __u64 file_rights = LANDLOCK_ACCESS_FS_EXECUTE | LANDLOCK_ACCESS_FS_WRITE_FILE |
                            LANDLOCK_ACCESS_FS_READ_FILE | LANDLOCK_ACCESS_FS_TRUNCATE |
                            (abi >= 5 ? LANDLOCK_ACCESS_FS_IOCTL_DEV : 0);
  auto allow = [&](const std::string& path, __u64 rights) {
    UniqueFd fd(::open(path.c_str(), O_PATH | O_CLOEXEC));
    if (!fd) return;  // missing runtime paths are skipped
    struct stat st {};
    if (::fstat(fd.get(), &st) != 0) return;
    if (!S_ISDIR(st.st_mode)) rights &= file_rights;
    landlock_path_beneath_attr rule{rights, fd.get()};
    if (::syscall(SYS_landlock_add_rule, ruleset.get(), LANDLOCK_RULE_PATH_BENEATH, &rule, 0) != 0) {
      throw Error(ErrorKind::sandbox, "landlock rule for '" + path + "': " + std::strerror(errno));
    }
  };
  const __u64 read_exec =
      LANDLOCK_ACCESS_FS_EXECUTE | LANDLOCK_ACCESS_FS_READ_FILE | LANDLOCK_ACCESS_FS_READ_DIR;
  for (const auto& p : runtime_paths) allow(p, read_exec);
  allow("/dev/null", LANDLOCK_ACCESS_FS_READ_FILE | LANDLOCK_ACCESS_FS_WRITE_FILE);
  allow("/dev/urandom", LANDLOCK_ACCESS_FS_READ_FILE);
  allow(scratch, fs);
  return ruleset;
}

// ---------------------------------------------------------------------------

class ScratchDir {
 public:
  explicit ScratchDir(const std::filesystem::path& root) {
    std::string templ = (root / "senseloop-sbx-XXXXXX").string();
    if (!::mkdtemp(templ.data())) {
      throw Error(ErrorKind::sandbox, std::string("mkdtemp: ") + std::strerror(errno));
    }
    path_ = templ;
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

void finalize_pointers(LaunchPlan& plan) {
  plan.argv.clear();
  for (auto& a : plan.argv_storage) plan.argv.push_back(a.data());
  plan.argv.push_back(nullptr);
  plan.envp.clear();
  for (auto& e : plan.env_storage) plan.envp.push_back(e.data());
  plan.envp.push_back(nullptr);
}

constexpr std::size_t kMaxFrame = 16u << 20;

/// Serves bridge frames and collects output until the child exits, the
/// deadline passes, or output drains.
class Supervisor {
 public:
  Supervisor(const ExecutionRequest& request, ExecutionResult& result)
      : request_(request), result_(result) {
    for (const auto& h : request.bridge.exposed) exposed_.insert(h.name);
  }

  void run(pid_t pid, int out_fd, int err_fd, int bridge_fd, Clock::time_point deadline) {
    UniqueFd out(out_fd), errfd(err_fd), bridge(bridge_fd);
    UniqueFd pidfd(static_cast<int>(::syscall(SYS_pidfd_open, pid, 0)));
    set_nonblocking(out.get());
    set_nonblocking(errfd.get());
    set_nonblocking(bridge.get());

    bool exited = false;
    std::optional<Clock::time_point> drain_until;
    while (true) {
      const auto now = Clock::now();
      if (!exited && now >= deadline) {
        ::kill(-pid, SIGKILL);
        ::kill(pid, SIGKILL);
        timed_out_ = true;
      }
      if (exited && (!out && !errfd)) break;
      if (drain_until && now >= *drain_until) break;

      std::vector<pollfd> fds;
      auto add = [&](const UniqueFd& fd, short events) {
        if (fd) fds.push_back({fd.get(), events, 0});
      };
      add(out, POLLIN);
      add(errfd, POLLIN);
      add(bridge, static_cast<short>(POLLIN | (pending_out_.empty() ? 0 : POLLOUT)));
      if (!exited) add(pidfd, POLLIN);

      auto limit = drain_until ? *drain_until : deadline;
      if (timed_out_ && !exited) limit = now + std::chrono::milliseconds(50);
      const auto wait_ms = std::max<long long>(
          0, std::chrono::duration_cast<std::chrono::milliseconds>(limit - now).count() + 1);
      const int ready = ::poll(fds.data(), fds.size(), static_cast<int>(std::min<long long>(wait_ms, 1000)));
      if (ready < 0 && errno != EINTR) break;

      for (const auto& p : fds) {
        if (!p.revents) continue;
        if (p.fd == out.get()) {
          if (!drain(out, result_.stdout_text)) out.reset();
        } else if (p.fd == errfd.get()) {
          if (!drain(errfd, result_.stderr_text)) errfd.reset();
        } else if (p.fd == bridge.get()) {
          if (!serve_bridge(bridge)) bridge.reset();
        } else if (p.fd == pidfd.get()) {
          exited = reap(pid);
          if (exited) {
            bridge.reset();
            drain_until = Clock::now() + std::chrono::milliseconds(300);
          }
        }
      }
      if (!exited && !pidfd) exited = reap(pid);
    }
    if (!exited) {
      ::kill(-pid, SIGKILL);
      int status = 0;
      ::waitpid(pid, &status, 0);
      status_ = status;
    }
    ::kill(-pid, SIGKILL);  // stray descendants holding pipes open
  }

  bool timed_out() const { return timed_out_; }
  int status() const { return status_; }

 private:
  bool reap(pid_t pid) {
    int status = 0;
    const pid_t r = ::waitpid(pid, &status, WNOHANG);
    if (r == pid) {
      status_ = status;
      return true;
    }
    return false;
  }

  bool drain(UniqueFd& fd, std::string& sink) {
    char buf[65536];
    while (true) {
      const ssize_t n = ::read(fd.get(), buf, sizeof buf);
      if (n > 0) {
        const std::size_t room =
            sink.size() < request_.limits.output_bytes ? request_.limits.output_bytes - sink.size() : 0;
        sink.append(buf, std::min<std::size_t>(room, static_cast<std::size_t>(n)));
        if (static_cast<std::size_t>(n) > room) result_.output_truncated = true;
        continue;
      }
      if (n == 0) return false;
      return errno == EAGAIN || errno == EINTR;
    }
  }

  bool serve_bridge(UniqueFd& fd) {
    char buf[65536];
    while (true) {
      const ssize_t n = ::read(fd.get(), buf, sizeof buf);
      if (n > 0) {
        pending_in_.append(buf, static_cast<std::size_t>(n));
        continue;
      }
      if (n == 0) return false;
      if (errno == EAGAIN || errno == EINTR) break;
      return false;
    }
    while (pending_in_.size() >= 4) {
      const auto* p = reinterpret_cast<const unsigned char*>(pending_in_.data());
      const std::size_t len = (std::size_t{p[0]} << 24) | (std::size_t{p[1]} << 16) |
                              (std::size_t{p[2]} << 8) | std::size_t{p[3]};
      if (len > kMaxFrame) return false;
      if (pending_in_.size() < 4 + len) break;
      const std::string body = pending_in_.substr(4, len);
      pending_in_.erase(0, 4 + len);
      const std::string reply = handle_frame(body);
      const std::uint32_t rlen = static_cast<std::uint32_t>(reply.size());
      const char header[4] = {static_cast<char>(rlen >> 24), static_cast<char>(rlen >> 16),
                              static_cast<char>(rlen >> 8), static_cast<char>(rlen)};
      pending_out_.append(header, 4);
      pending_out_ += reply;
    }
    while (!pending_out_.empty()) {
      const ssize_t n = ::send(fd.get(), pending_out_.data(), pending_out_.size(), MSG_NOSIGNAL);
      if (n > 0) {
        pending_out_.erase(0, static_cast<std::size_t>(n));
        continue;
      }
      if (n < 0 && (errno == EAGAIN || errno == EINTR)) break;
      return false;
    }
    return true;
  }

  std::string handle_frame(const std::string& body) {
    BridgeCall call;
    json reply;
    try {
      const json msg = json::parse(body);
      call.helper = msg.at("helper").get<std::string>();
      call.args = msg.value("args", json::object());
      if (!exposed_.count(call.helper)) {
        call.error = "unregistered_helper";
        call.message = "helper '" + call.helper + "' is not available in this session";
      } else {
        reply = {{"ok", true}, {"value", request_.bridge.handler(call.helper, call.args)}};
        call.ok = true;
      }
    } catch (const Error& e) {
      call.error = std::string(to_string(e.kind()));
      call.message = e.what();
    } catch (const std::exception& e) {
      call.error = "bad_request";
      call.message = e.what();
    }
    if (!call.ok) reply = {{"ok", false}, {"error", call.error}, {"message", call.message}};
    result_.bridge_calls.push_back(std::move(call));
    return reply.dump();
  }

  const ExecutionRequest& request_;
  ExecutionResult& result_;
  std::set<std::string> exposed_;
  std::string pending_in_;
  std::string pending_out_;
  bool timed_out_ = false;
  int status_ = 0;
};

class ProcessSandbox : public Sandbox {
 public:
  ProcessSandbox(SandboxKind kind, SandboxOptions options)
      : kind_(kind), options_(std::move(options)) {}

  std::string name() const override { return std::string(to_string(kind_)); }

  std::string unavailable_reason() const override {
    if (::access(options_.python.c_str(), X_OK) != 0) {
      return "python interpreter '" + options_.python + "' is not executable";
    }
    if (kind_ == SandboxKind::subprocess) {
      const int abi = landlock_abi();
      if (abi < 4) return "Landlock ABI >= 4 unavailable (found " + std::to_string(abi) + ")";
      return {};
    }
    // Probe namespace creation in a throwaway child.
    const pid_t pid = ::fork();
    if (pid == 0) {
      int flags = CLONE_NEWNS | CLONE_NEWNET | CLONE_NEWPID | CLONE_NEWIPC | CLONE_NEWUTS;
      if (::geteuid() != 0) flags |= CLONE_NEWUSER;
      _exit(::unshare(flags) == 0 ? 0 : 1);
    }
    int status = 0;
    if (pid < 0 || ::waitpid(pid, &status, 0) != pid || !WIFEXITED(status) ||
        WEXITSTATUS(status) != 0) {
      return "cannot create mount/network/pid namespaces";
    }
    return {};
  }

  ExecutionResult execute(const ExecutionRequest& request) override {
    if (trim(request.program).empty()) throw Error(ErrorKind::validation, "program is empty");
    if (request.limits.wall_clock.count() <= 0 || request.limits.output_bytes == 0) {
      throw Error(ErrorKind::validation, "execution limits must be positive");
    }
    ScratchDir scratch(options_.scratch_root);

    LaunchPlan plan;
    plan.exec_path = options_.python;
    plan.argv_storage = {options_.python, "-I", "-B", "-c", guest_prelude(request.bridge.exposed),
                         request.program};
    plan.env_storage = {"PATH=/usr/bin:/bin", "LANG=C.UTF-8", "PYTHONIOENCODING=utf-8"};
    const auto wall_s = std::chrono::duration_cast<std::chrono::seconds>(request.limits.wall_clock).count();
    plan.cpu_seconds = static_cast<rlim_t>(wall_s + 1);
    plan.address_space = static_cast<rlim_t>(request.limits.memory_bytes);
    plan.seccomp = build_seccomp(kind_ == SandboxKind::subprocess);

    UniqueFd landlock;
    if (kind_ == SandboxKind::subprocess) {
      plan.workdir = scratch.path();
      plan.env_storage.push_back("HOME=" + scratch.path());
      plan.env_storage.push_back("TMPDIR=" + scratch.path());
      landlock = build_landlock(options_.runtime_paths, scratch.path());
    } else {
      plan.workdir = "/work";
      plan.env_storage.push_back("HOME=/work");
      plan.env_storage.push_back("TMPDIR=/tmp");
      plan.max_processes = 256;
      plan.container = make_container_plan(scratch.path());
    }
    finalize_pointers(plan);

    int sv[2];
    if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, sv) != 0) {
      throw Error(ErrorKind::sandbox, std::string("socketpair: ") + std::strerror(errno));
    }
    UniqueFd host_bridge(sv[0]), guest_bridge(move_high(sv[1]));
    int out_pipe[2], err_pipe[2], fail_pipe[2];
    if (::pipe2(out_pipe, O_CLOEXEC) || ::pipe2(err_pipe, O_CLOEXEC) || ::pipe2(fail_pipe, O_CLOEXEC)) {
      throw Error(ErrorKind::sandbox, std::string("pipe: ") + std::strerror(errno));
    }
    UniqueFd out_r(out_pipe[0]), out_w(move_high(out_pipe[1]));
    UniqueFd err_r(err_pipe[0]), err_w(move_high(err_pipe[1]));
    UniqueFd fail_r(fail_pipe[0]), fail_w(move_high(fail_pipe[1]));
    UniqueFd devnull(move_high(::open("/dev/null", O_RDONLY | O_CLOEXEC)));
    if (landlock) landlock = UniqueFd(move_high(landlock.release()));

    plan.stdin_fd = devnull.get();
    plan.stdout_fd = out_w.get();
    plan.stderr_fd = err_w.get();
    plan.bridge_fd = guest_bridge.get();
    plan.errpipe_fd = fail_w.get();
    plan.landlock_fd = landlock ? landlock.get() : -1;

    ExecutionResult result;
    const auto start = Clock::now();
    const pid_t pid = ::fork();
    if (pid < 0) throw Error(ErrorKind::sandbox, std::string("fork: ") + std::strerror(errno));
    if (pid == 0) child_main(plan);
    ::setpgid(pid, pid);

    out_w.reset();
    err_w.reset();
    fail_w.reset();
    guest_bridge.reset();
    devnull.reset();
    landlock.reset();

    Supervisor supervisor(request, result);
    supervisor.run(pid, out_r.release(), err_r.release(), host_bridge.release(),
                   start + request.limits.wall_clock);
    result.duration = std::chrono::duration<double>(Clock::now() - start).count();

    ChildFailure failure{};
    if (::read(fail_r.get(), &failure, sizeof failure) == static_cast<ssize_t>(sizeof failure)) {
      throw Error(ErrorKind::sandbox, std::string("sandbox launch failed at ") +
                                          stage_name(failure.stage) + ": " + std::strerror(failure.err));
    }

    const int status = supervisor.status();
    if (supervisor.timed_out()) {
      result.status = ExitKind::timeout;
      result.exit_code = SIGKILL;
    } else if (WIFEXITED(status)) {
      result.exit_code = WEXITSTATUS(status);
      result.status = result.exit_code == 0 ? ExitKind::success : ExitKind::nonzero_exit;
    } else if (WIFSIGNALED(status)) {
      result.exit_code = WTERMSIG(status);
      result.status = ExitKind::signaled;
    }
    if (result.status == ExitKind::success) {
      result.result_value = parse_result_block(result.stdout_text, &result.result_error);
    }
    return result;
  }

 private:
  ContainerPlan make_container_plan(const std::string& scratch) const {
    namespace fs = std::filesystem;
    ContainerPlan c;
    c.root = scratch;
    c.user_namespace = ::geteuid() != 0;
    c.uid_map = "0 " + std::to_string(::geteuid()) + " 1\n";
    c.gid_map = "0 " + std::to_string(::getegid()) + " 1\n";

    std::set<std::string> dirs;
    auto ensure_parents = [&](const fs::path& inside) {
      fs::path acc;
      for (const auto& part : inside.parent_path()) {
        if (part == "/") continue;
        acc /= part;
        const std::string d = scratch + "/" + acc.string();
        if (dirs.insert(d).second) c.mkdirs.push_back(d);
      }
    };
    auto add_dir = [&](const std::string& inside) {
      ensure_parents(fs::path(inside) / "x");
    };

    for (const auto& p : options_.runtime_paths) {
      std::error_code ec;
      const auto st = fs::symlink_status(p, ec);
      if (ec || !fs::exists(st)) continue;
      if (fs::is_symlink(st)) {
        ensure_parents(p);
        c.symlinks.push_back({fs::read_symlink(p).string(), scratch + p});
        continue;
      }
      const bool is_dir = fs::is_directory(st);
      if (is_dir) {
        add_dir(p);
      } else {
        ensure_parents(p);
      }
      c.binds.push_back({p, scratch + p, is_dir, false});
    }
    for (const char* dev : {"/dev/null", "/dev/urandom", "/dev/zero"}) {
      ensure_parents(dev);
      c.binds.push_back({dev, scratch + dev, false, true});
    }
    for (const char* t : {"/work", "/tmp"}) {
      add_dir(t);
      c.tmpfs_dirs.push_back(scratch + t);
    }
    return c;
  }

  SandboxKind kind_;
  SandboxOptions options_;
};

}  // namespace

std::unique_ptr<Sandbox> make_sandbox(SandboxKind kind, SandboxOptions options) {
  return std::make_unique<ProcessSandbox>(kind, std::move(options));
}

}  // namespace senseloop
