#pragma once

// Host-side launcher: turns a JobSpec into a kernel boot command line,
// starts the appliance through a pluggable backend (in-process mock, or a
// spawned user-mode kernel), pumps the guest console onto the host's
// standard output, and emits batch/grid submission wrappers.

#include <sys/stat.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstring>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "apptool/backend.hpp"
#include "apptool/bootparam.hpp"
#include "apptool/guest_init.hpp"
#include "apptool/util.hpp"

namespace apptool::runner {

enum class Backend { mock, uml };

inline std::string_view to_string(Backend b) {
  return b == Backend::mock ? "mock" : "uml";
}

struct JobSpec {
  std::string image_path;   // raw disk image (uml)
  std::string kernel_path;  // guest kernel executable (uml)
  int memory_mib = 512;
  fs::path workdir;  // host working directory shared with the guest
  std::optional<std::string> job_command;
  std::optional<std::string> changes_path;
  std::vector<std::string> extra_boot_args;
  Backend backend = Backend::mock;
  std::optional<std::string> tag;
  std::optional<std::string> cow_path;  // enables the hypervisor's copy-on-write disk
  std::string guest_workdir = std::string(init::kDefaultWorkdirMount);
  std::optional<fs::path> mock_appliance_root;  // mock: run against an existing fixture tree
};

struct RunOutcome {
  int exit_status = 0;
  std::string transcript;
  std::chrono::duration<double> wall_time{0};
  std::vector<std::pair<std::string, double>> stage_timings;  // mock backend only
  bool transcript_truncated = false;
};

struct BackendInvocation {
  std::vector<std::string> argv;
  std::vector<std::pair<std::string, std::string>> env;
  std::string stdio;
};

inline constexpr int kMinMemoryMib = 16;

inline void validate(const JobSpec& spec) {
  if (spec.memory_mib < kMinMemoryMib) {
    throw Error("memory must be at least " + std::to_string(kMinMemoryMib) + " MiB");
  }
  std::error_code ec;
  if (spec.workdir.empty() || !fs::is_directory(spec.workdir, ec)) {
    throw Error("working directory does not exist: " + spec.workdir.string());
  }
  if (spec.backend == Backend::uml) {
    if (spec.kernel_path.empty()) throw Error("uml backend requires --kernel");
    if (spec.image_path.empty()) throw Error("uml backend requires --image");
  }
}

/// Builds the boot command line: recognized apppot.* pairs derived from the
/// spec, then the caller's passthrough tokens. uid/gid carry the host owner
/// of the working directory so the guest can remap; a root-owned workdir
/// emits no remap request (the guest refuses to run for uid 0).
inline std::string build_boot_cmdline(const JobSpec& spec) {
  validate(spec);
  struct stat st{};
  if (::stat(spec.workdir.c_str(), &st) != 0) {
    throw Error("cannot stat working directory " + spec.workdir.string() + ": " +
                std::strerror(errno));
  }
  bootparam::BootParams params;
  if (spec.job_command) params.set(bootparam::keys::jobcmd, *spec.job_command);
  if (spec.changes_path) {
    // Inside the shared workdir the archive is addressed relative to the
    // mount; anywhere else the path goes through verbatim.
    std::string value = *spec.changes_path;
    std::error_code ec;
    fs::path rel = fs::relative(fs::absolute(*spec.changes_path), fs::absolute(spec.workdir), ec);
    if (!ec && !rel.empty() && rel != "." && *rel.begin() != "..") {
      value = rel.generic_string();
    }
    params.set(bootparam::keys::changes, value);
  }
  if (st.st_uid != 0) {
    params.set(bootparam::keys::uid, std::to_string(st.st_uid));
    params.set(bootparam::keys::gid, std::to_string(st.st_gid));
  }
  params.set(bootparam::keys::workdir, spec.guest_workdir);
  if (spec.tag) params.set(bootparam::keys::tag, *spec.tag);
  params.passthrough = spec.extra_boot_args;
  return bootparam::encode(params);
}

/// Deterministic argv/environment for the user-mode kernel.
inline BackendInvocation build_uml_invocation(const JobSpec& spec) {
  if (spec.backend != Backend::uml) throw Error("not a uml job spec");
  validate(spec);
  std::error_code ec;
  if (!fs::is_regular_file(spec.kernel_path, ec)) {
    throw Error("uml backend unavailable: kernel not found at " + spec.kernel_path);
  }
  if (!fs::is_regular_file(spec.image_path, ec)) {
    throw Error("uml backend unavailable: disk image not found at " + spec.image_path);
  }
  BackendInvocation inv;
  inv.argv.push_back(spec.kernel_path);
  if (spec.cow_path) {
    inv.argv.push_back("ubd0=" + *spec.cow_path + "," + spec.image_path);
  } else {
    inv.argv.push_back("ubd0=" + spec.image_path);
  }
  inv.argv.push_back("mem=" + std::to_string(spec.memory_mib) + "M");
  inv.argv.push_back("con0=fd:0,fd:1");
  inv.argv.push_back("con=null");
  std::string cmdline = build_boot_cmdline(spec);
  for (auto tok : detail::split(cmdline, ' ')) {
    if (!tok.empty()) inv.argv.emplace_back(tok);
  }
  // The kernel backs guest memory with files under TMPDIR; honor the
  // toolkit-level override.
  if (const char* p = std::getenv("APPTOOL_TMPDIR"); p && *p) {
    inv.env.emplace_back("TMPDIR", p);
  }
  inv.stdio = "stdin/stdout wired to guest console con0; stderr merged into stdout";
  return inv;
}

struct PumpResult {
  std::uint64_t bytes = 0;
  bool truncated = false;  // sink closed before the stream ended
};

namespace pump_detail {

inline bool forward_chunk(std::ostream& sink, const char* buf, std::streamsize n,
                          PumpResult& res) {
  sink.write(buf, n);
  if (sink.fail()) {
    res.truncated = true;
    return false;
  }
  if (std::memchr(buf, '\n', static_cast<std::size_t>(n))) {
    sink.flush();
    if (sink.fail()) {
      res.truncated = true;
      return false;
    }
  }
  res.bytes += static_cast<std::uint64_t>(n);
  return true;
}

}  // namespace pump_detail

/// Forwards every byte from `src` to `sink` in order, flushing at line
/// granularity, until end of stream or until the sink stops accepting
/// writes. Returns the byte count (and whether output was truncated).
inline PumpResult pump_console(std::istream& src, std::ostream& sink) {
  PumpResult res;
  char buf[1 << 16];
  std::streambuf* in = src.rdbuf();
  for (;;) {
    std::streamsize n = 0;
    std::streamsize avail = in->in_avail();
    if (avail > 0) {
      n = in->sgetn(buf, std::min<std::streamsize>(avail, sizeof buf));
    } else {
      int c = in->sbumpc();  // blocks for the next chunk or hits EOF
      if (c == std::char_traits<char>::eof()) break;
      buf[0] = static_cast<char>(c);
      n = 1;
      std::streamsize more = in->in_avail();
      if (more > 0) {
        n += in->sgetn(buf + 1, std::min<std::streamsize>(more, sizeof buf - 1));
      }
    }
    if (n <= 0) break;
    if (!pump_detail::forward_chunk(sink, buf, n, res)) return res;
  }
  sink.flush();
  return res;
}

/// File-descriptor flavor used for spawned guests.
inline PumpResult pump_console(int fd, std::ostream& sink) {
  PumpResult res;
  char buf[1 << 16];
  for (;;) {
    ssize_t n = ::read(fd, buf, sizeof buf);
    if (n == 0) break;
    if (n < 0) {
      if (errno == EINTR) continue;
      break;
    }
    if (!pump_detail::forward_chunk(sink, buf, static_cast<std::streamsize>(n), res)) {
      // Drain the remainder so the guest never blocks on a full pipe.
      while ((n = ::read(fd, buf, sizeof buf)) > 0 || (n < 0 && errno == EINTR)) {
      }
      return res;
    }
  }
  sink.flush();
  return res;
}

namespace detail_runner {

// streambuf writing through to a live sink while keeping a transcript.
class TeeBuf final : public std::streambuf {
 public:
  TeeBuf(std::ostream& live, std::string& transcript) : live_(live), transcript_(transcript) {}

 protected:
  int overflow(int c) override {
    if (c == std::char_traits<char>::eof()) return c;
    char ch = static_cast<char>(c);
    return xsputn(&ch, 1) == 1 ? c : std::char_traits<char>::eof();
  }
  std::streamsize xsputn(const char* s, std::streamsize n) override {
    transcript_.append(s, static_cast<std::size_t>(n));
    live_.write(s, n);
    return n;  // transcript always keeps the bytes, even if the live sink died
  }
  int sync() override {
    live_.flush();
    return 0;
  }

 private:
  std::ostream& live_;
  std::string& transcript_;
};

inline RunOutcome launch_mock(const JobSpec& spec, std::ostream& console_sink) {
  std::optional<TempDir> scratch;
  fs::path root;
  if (spec.mock_appliance_root) {
    root = *spec.mock_appliance_root;
  } else {
    scratch.emplace("apptool-mock");
    root = scratch->path();
    fs::create_directories(root / "home/user");
    fs::create_directories(root / "usr/local/bin");
  }
  init::MockConfig cfg;
  cfg.appliance_root = root;
  cfg.host_workdir = spec.workdir;
  cfg.cmdline = build_boot_cmdline(spec);
  cfg.echo = &console_sink;
  init::MockBackend backend(std::move(cfg));

  auto t0 = std::chrono::steady_clock::now();
  int status = init::init_main(backend.kernel_cmdline(), backend);
  auto t1 = std::chrono::steady_clock::now();

  RunOutcome out;
  out.exit_status = status;
  out.transcript = backend.transcript();
  out.wall_time = t1 - t0;
  out.stage_timings = backend.stage_timings();
  return out;
}

inline RunOutcome launch_uml(const JobSpec& spec, std::ostream& console_sink) {
  BackendInvocation inv = build_uml_invocation(spec);

  int pipefd[2];
  if (::pipe(pipefd) != 0) throw Error("launch: pipe failed: " + std::string(std::strerror(errno)));
  pid_t pid = ::fork();
  if (pid < 0) {
    ::close(pipefd[0]);
    ::close(pipefd[1]);
    throw Error("launch: fork failed: " + std::string(std::strerror(errno)));
  }
  if (pid == 0) {
    ::close(pipefd[0]);
    ::dup2(pipefd[1], 1);
    ::dup2(pipefd[1], 2);
    ::close(pipefd[1]);
    for (const auto& [k, v] : inv.env) ::setenv(k.c_str(), v.c_str(), 1);
    std::vector<char*> cargv;
    for (const auto& a : inv.argv) cargv.push_back(const_cast<char*>(a.c_str()));
    cargv.push_back(nullptr);
    ::execv(cargv[0], cargv.data());
    std::fprintf(stderr, "cannot exec %s: %s\n", cargv[0], std::strerror(errno));
    ::_exit(127);
  }
  ::close(pipefd[1]);

  RunOutcome out;
  auto t0 = std::chrono::steady_clock::now();
  PumpResult pumped;
  {
    TeeBuf tee(console_sink, out.transcript);
    std::ostream tee_stream(&tee);
    std::thread pump([&] { pumped = pump_console(pipefd[0], tee_stream); });
    int wait_status = 0;
    while (::waitpid(pid, &wait_status, 0) < 0) {
      if (errno != EINTR) break;
    }
    pump.join();  // console drained before the outcome is returned
    ::close(pipefd[0]);
    bool signaled = false;
    out.exit_status = apptool::detail::exit_status_from_wait(wait_status, &signaled);
    if (signaled) out.exit_status = 255;  // guest crash
  }
  out.transcript_truncated = pumped.truncated;
  out.wall_time = std::chrono::steady_clock::now() - t0;
  return out;
}

}  // namespace detail_runner

/// Runs the appliance described by `spec`, returning the guest's exit
/// status alongside the captured console transcript.
inline RunOutcome launch(const JobSpec& spec, std::ostream& console_sink) {
  validate(spec);
  if (spec.backend == Backend::mock) return detail_runner::launch_mock(spec, console_sink);
  return detail_runner::launch_uml(spec, console_sink);
}

enum class WrapperFlavor { generic_batch, grid_description };

inline std::optional<WrapperFlavor> wrapper_flavor_from_string(std::string_view s) {
  if (s == "generic-batch") return WrapperFlavor::generic_batch;
  if (s == "grid-description") return WrapperFlavor::grid_description;
  return std::nullopt;
}

namespace detail_runner {

inline std::string xrsl_quote(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  return out;
}

// Fixed stage-in names; order image, kernel, changes everywhere.
inline constexpr std::string_view kStageImage = "apppot.img";
inline constexpr std::string_view kStageKernel = "apppot.kernel";
inline constexpr std::string_view kStageChanges = "apppot.changes.tar.gz";
inline constexpr std::string_view kWrapperName = "apppot-job.sh";
inline constexpr std::string_view kStdoutName = "apppot.out";

}  // namespace detail_runner

/// Emits a submission wrapper. generic-batch: a portable sh script that
/// stages whichever inputs the spec names and hands off to `apptool start`;
/// files the spec leaves unset fall back to site-deployed locations via
/// APPPOT_BASE_IMAGE / APPPOT_KERNEL. grid-description: a job description
/// that lists the same files for stage-in and captures the console on
/// standard output.
inline std::string emit_batch_wrapper(const JobSpec& spec, WrapperFlavor flavor) {
  if (spec.memory_mib < kMinMemoryMib) {
    throw Error("memory must be at least " + std::to_string(kMinMemoryMib) + " MiB");
  }
  using namespace detail_runner;
  if (flavor == WrapperFlavor::generic_batch) {
    std::string s;
    s += "#!/bin/sh\n";
    s += "# AppPot batch wrapper (generated by apptool wrap)\n";
    s += "set -eu\n";
    s += "\n";
    s += "# Stage inputs into the job working directory unless already present.\n";
    s += "stage() {\n";
    s += "    [ -e \"$2\" ] || cp -- \"$1\" \"$2\"\n";
    s += "}\n";
    s += "\n";
    if (!spec.image_path.empty()) {
      s += "stage " + shell_quote(spec.image_path) + " " + shell_quote(kStageImage) + "\n";
    }
    if (!spec.kernel_path.empty()) {
      s += "stage " + shell_quote(spec.kernel_path) + " " + shell_quote(kStageKernel) + "\n";
    }
    if (spec.changes_path) {
      s += "stage " + shell_quote(*spec.changes_path) + " " + shell_quote(kStageChanges) + "\n";
    }
    s += "\n";
    s += "exec apptool start \\\n";
    s += "    --backend uml \\\n";
    if (!spec.image_path.empty()) {
      s += "    --image " + shell_quote(kStageImage) + " \\\n";
    } else {
      s += "    --image \"${APPPOT_BASE_IMAGE:?site-deployed base image path}\" \\\n";
    }
    if (!spec.kernel_path.empty()) {
      s += "    --kernel " + shell_quote(kStageKernel) + " \\\n";
    } else {
      s += "    --kernel \"${APPPOT_KERNEL:?site-deployed kernel path}\" \\\n";
    }
    s += "    --mem " + std::to_string(spec.memory_mib);
    if (spec.changes_path) s += " \\\n    --changes " + shell_quote(kStageChanges);
    if (spec.tag) s += " \\\n    --tag " + shell_quote(*spec.tag);
    for (const auto& tok : spec.extra_boot_args) {
      s += " \\\n    --extra-boot-arg " + shell_quote(tok);
    }
    if (spec.job_command) s += " \\\n    --command " + shell_quote(*spec.job_command);
    s += "\n";
    return s;
  }

  // grid-description
  std::string s;
  s += "&(executable = \"" + std::string(kWrapperName) + "\")\n";
  s += " (jobName = \"" + xrsl_quote(spec.tag.value_or("apppot-job")) + "\")\n";
  s += " (stdout = \"" + std::string(kStdoutName) + "\")\n";
  s += " (join = \"yes\")\n";
  s += " (count = \"1\")\n";
  s += " (memory = \"" + std::to_string(spec.memory_mib) + "\")\n";
  s += " (inputFiles = (\"" + std::string(kWrapperName) + "\" \"\")\n";
  if (!spec.image_path.empty()) {
    s += "               (\"" + std::string(kStageImage) + "\" \"" + xrsl_quote(spec.image_path) +
         "\")\n";
  }
  if (!spec.kernel_path.empty()) {
    s += "               (\"" + std::string(kStageKernel) + "\" \"" + xrsl_quote(spec.kernel_path) +
         "\")\n";
  }
  if (spec.changes_path) {
    s += "               (\"" + std::string(kStageChanges) + "\" \"" + xrsl_quote(*spec.changes_path) +
         "\")\n";
  }
  s += " )\n";
  return s;
}

}  // namespace apptool::runner
