#pragma once

// Guest-side boot orchestration: the init program that runs last in the
// appliance boot sequence. It decodes the kernel command line, mounts the
// host working directory, remaps the guest user's identity to the host
// owner of that directory, merges a changes archive, resolves and runs the
// job, then shuts the guest down. All host/guest interaction goes through
// an InitBackend so the whole sequence is testable in-process.

#include <charconv>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "apptool/bootparam.hpp"
#include "apptool/changes.hpp"
#include "apptool/util.hpp"

namespace apptool::init {

inline constexpr std::string_view kDefaultWorkdirMount = "/home/user/job";
inline constexpr std::string_view kDefaultGuestUser = "user";
inline constexpr std::string_view kRunScriptName = "apppot-run";
// Discovery location of the appliance-embedded job script, relative to the
// guest filesystem root.
inline constexpr std::string_view kApplianceScriptPath = "usr/local/bin/apppot-run";

// Exit-status band reserved for init-stage failures, distinguishable from
// job exit codes by batch-side triage.
enum InitExitStatus : int {
  kExitDecodeFailed = 120,
  kExitMountFailed = 121,
  kExitIdentityFailed = 122,
  kExitChangesFailed = 123,
  kExitJobSetupFailed = 124,
  kExitInitFailed = 125,
};

struct InitPlan {
  std::optional<std::string> job_command;   // percent-decoded command line
  std::optional<std::string> changes_path;  // guest-visible archive path
  std::string workdir_mount = std::string(kDefaultWorkdirMount);
  std::optional<int> host_uid;
  std::optional<int> host_gid;
  std::optional<std::string> tag;
};

struct ParsedPlan {
  InitPlan plan;
  std::vector<std::string> warnings;
};

/// Maps recognized boot parameters onto an InitPlan. Unknown apppot.* keys
/// warn, never fail; a uid/gid of 0 (or a non-integer) is refused outright.
inline ParsedPlan parse_plan(const bootparam::BootParams& params) {
  ParsedPlan out;
  auto parse_id = [](std::string_view key, const std::string& value) -> int {
    int id = 0;
    auto [p, rc] = std::from_chars(value.data(), value.data() + value.size(), id);
    if (rc != std::errc() || p != value.data() + value.size()) {
      throw Error(std::string(key) + " is not an integer: '" + value + "'");
    }
    if (id == 0) throw Error("refusing " + std::string(key) + "=0 (will not run for root)");
    if (id < 0) throw Error(std::string(key) + " out of range: " + value);
    return id;
  };

  for (const auto& [key, value] : params.pairs) {
    if (key == bootparam::keys::jobcmd) {
      out.plan.job_command = value;
    } else if (key == bootparam::keys::changes) {
      out.plan.changes_path = value;
    } else if (key == bootparam::keys::workdir) {
      if (value.empty() || value.front() != '/') {
        throw Error("apppot.workdir must be an absolute guest path: '" + value + "'");
      }
      out.plan.workdir_mount = value;
    } else if (key == bootparam::keys::uid) {
      out.plan.host_uid = parse_id(key, value);
    } else if (key == bootparam::keys::gid) {
      out.plan.host_gid = parse_id(key, value);
    } else if (key == bootparam::keys::tag) {
      out.plan.tag = value;
    } else if (key == bootparam::keys::mpi) {
      throw Error("apppot.mpi is reserved and not supported by this build");
    } else {
      out.warnings.push_back("ignoring unknown boot parameter '" + key + "'");
    }
  }
  if (out.plan.host_uid.has_value() != out.plan.host_gid.has_value()) {
    throw Error("apppot.uid and apppot.gid must be given together");
  }
  return out;
}

struct UserAccount {
  std::string name;
  int uid = 0;
  int gid = 0;
  std::string home;
  std::string shell = "/bin/sh";
};

/// View over the guest user database.
class UserDatabase {
 public:
  virtual ~UserDatabase() = default;
  virtual std::optional<UserAccount> lookup(std::string_view name) const = 0;
  virtual void set_ids(std::string_view name, int uid, int gid) = 0;
};

struct IdentityMapping {
  std::string guest_user;
  int from_uid = 0;
  int to_uid = 0;
  int from_gid = 0;
  int to_gid = 0;

  bool is_noop() const { return from_uid == to_uid && from_gid == to_gid; }
};

/// Computes the uid/gid mapping that makes the guest user match the host
/// owner of the working directory. A plan without uid/gid yields a no-op.
inline IdentityMapping remap_identity(const UserDatabase& users, const InitPlan& plan,
                                      std::string_view guest_user = kDefaultGuestUser) {
  auto account = users.lookup(guest_user);
  if (!account) {
    throw Error("guest user '" + std::string(guest_user) + "' not present in the user database");
  }
  IdentityMapping m;
  m.guest_user = account->name;
  m.from_uid = account->uid;
  m.from_gid = account->gid;
  m.to_uid = plan.host_uid.value_or(account->uid);
  m.to_gid = plan.host_gid.value_or(account->gid);
  return m;
}

enum class JobSource { boot_cmdline, appliance_script, workdir_script, interactive };

inline std::string_view to_string(JobSource s) {
  switch (s) {
    case JobSource::boot_cmdline: return "boot-cmdline";
    case JobSource::appliance_script: return "appliance-script";
    case JobSource::workdir_script: return "workdir-script";
    case JobSource::interactive: return "interactive";
  }
  return "?";
}

struct JobCommand {
  JobSource source = JobSource::interactive;
  // Command line (boot-cmdline), guest script path (script sources) or
  // empty (interactive).
  std::string command;
  std::string cwd;  // guest workdir path
};

struct Resolution {
  JobCommand job;
  std::vector<std::string> warnings;
};

namespace detail {

inline bool is_executable_file(const fs::path& p) {
  std::error_code ec;
  auto st = fs::status(p, ec);
  if (ec || !fs::is_regular_file(st)) return false;
  using fs::perms;
  return (st.permissions() & (perms::owner_exec | perms::group_exec | perms::others_exec)) !=
         perms::none;
}

inline bool exists_file(const fs::path& p) {
  std::error_code ec;
  return fs::is_regular_file(p, ec);
}

}  // namespace detail

/// Selects the job to run. Precedence: boot command line, then an
/// executable apppot-run in the working directory, then one embedded in
/// the appliance (at `appliance_script`, relative to the guest root), else
/// an interactive shell. A script that exists but is not executable is
/// skipped with a warning.
inline Resolution resolve_job_command(const InitPlan& plan, const fs::path& appliance_root,
                                      const fs::path& workdir,
                                      std::string_view appliance_script = kApplianceScriptPath) {
  Resolution res;
  std::string mount = plan.workdir_mount.empty() ? std::string(kDefaultWorkdirMount)
                                                 : plan.workdir_mount;
  if (plan.job_command) {
    res.job = {JobSource::boot_cmdline, *plan.job_command, mount};
    return res;
  }
  fs::path workdir_script = workdir / kRunScriptName;
  if (detail::is_executable_file(workdir_script)) {
    res.job = {JobSource::workdir_script, "./" + std::string(kRunScriptName), mount};
    return res;
  }
  if (detail::exists_file(workdir_script)) {
    res.warnings.push_back("apppot-run in the working directory is not executable; skipping");
  }
  fs::path embedded = appliance_root / appliance_script;
  if (detail::is_executable_file(embedded)) {
    res.job = {JobSource::appliance_script, "/" + std::string(appliance_script), mount};
    return res;
  }
  if (detail::exists_file(embedded)) {
    res.warnings.push_back("apppot-run in the appliance is not executable; skipping");
  }
  res.job = {JobSource::interactive, "", mount};
  return res;
}

/// Everything the init sequence needs from its surroundings. The mock
/// backend simulates mount and identity; a real guest backend would touch
/// the actual system.
class InitBackend {
 public:
  virtual ~InitBackend() = default;

  virtual std::string kernel_cmdline() = 0;
  virtual UserDatabase& users() = 0;
  virtual std::string guest_username() const { return std::string(kDefaultGuestUser); }

  /// Host-side path of the guest filesystem root.
  virtual fs::path appliance_root() const = 0;

  /// Makes the host working directory reachable at `mount_point`; returns
  /// the guest path. Throws on failure.
  virtual std::string mount_workdir(const std::string& mount_point) = 0;

  /// Translates a guest path to a host-accessible one.
  virtual fs::path to_host(const std::string& guest_path) const = 0;

  /// Applies an identity mapping: updates the user database and re-owns the
  /// guest user's home subtree. At most once per boot.
  virtual void apply_identity(const IdentityMapping& mapping) = 0;

  /// Runs the resolved job; returns its exit status.
  virtual int run_job(const JobCommand& job) = 0;

  /// Whether a console is attached (interactive fallback is only useful then).
  virtual bool console_interactive() const = 0;

  /// Emits one line on the guest console.
  virtual void console(std::string_view line) = 0;
};

// Console stage banners, in boot order. Stable strings: tests and batch
// log scrapers key on them.
inline constexpr std::string_view kBannerParams = "apppot-init: parsing boot parameters";
inline constexpr std::string_view kBannerMount = "apppot-init: mounting working directory";
inline constexpr std::string_view kBannerIdentity = "apppot-init: remapping user identity";
inline constexpr std::string_view kBannerChanges = "apppot-init: merging changes archive";
inline constexpr std::string_view kBannerJob = "apppot-init: starting job";
inline constexpr std::string_view kBannerShutdown = "apppot-init: shutting down";

/// Runs the full init sequence once. Returns the job's exit status, or a
/// status from the reserved 120-125 band when an init stage fails.
inline int init_main(std::string_view cmdline, InitBackend& backend) {
  auto fail = [&backend](int status, const std::string& what) {
    backend.console("apppot-init: error: " + what);
    backend.console(kBannerShutdown);
    return status;
  };

  backend.console(kBannerParams);
  InitPlan plan;
  try {
    auto decoded = bootparam::decode(cmdline);
    for (const auto& w : decoded.warnings) backend.console("apppot-init: warning: " + w);
    auto parsed = parse_plan(decoded.params);
    for (const auto& w : parsed.warnings) backend.console("apppot-init: warning: " + w);
    plan = std::move(parsed.plan);
  } catch (const Error& e) {
    return fail(kExitDecodeFailed, e.what());
  }
  if (plan.tag) backend.console("apppot-init: run tag: " + *plan.tag);

  backend.console(kBannerMount);
  std::string guest_workdir;
  try {
    guest_workdir = backend.mount_workdir(plan.workdir_mount);
    backend.console("apppot-init: working directory mounted at " + guest_workdir);
  } catch (const Error& e) {
    return fail(kExitMountFailed, e.what());
  }

  backend.console(kBannerIdentity);
  try {
    IdentityMapping mapping = remap_identity(backend.users(), plan, backend.guest_username());
    if (mapping.is_noop()) {
      backend.console("apppot-init: identity unchanged");
    } else {
      backend.apply_identity(mapping);
      backend.console("apppot-init: user " + mapping.guest_user + " remapped to " +
                      std::to_string(mapping.to_uid) + ":" + std::to_string(mapping.to_gid));
    }
  } catch (const Error& e) {
    return fail(kExitIdentityFailed, e.what());
  }

  backend.console(kBannerChanges);
  if (plan.changes_path) {
    try {
      // Relative archive paths are resolved against the mounted workdir.
      std::string guest_path = *plan.changes_path;
      if (guest_path.empty()) throw Error("empty apppot.changes path");
      if (guest_path.front() != '/') guest_path = guest_workdir + "/" + guest_path;
      snap::MergeReport report =
          snap::merge_changes_file(backend.appliance_root(), backend.to_host(guest_path));
      for (const auto& w : report.warnings) {
        backend.console("apppot-init: warning: " + (w.path.empty() ? w.reason : w.path + ": " + w.reason));
      }
      backend.console("apppot-init: merged " + std::to_string(report.applied) + " changed, " +
                      std::to_string(report.deleted) + " deleted");
    } catch (const Error& e) {
      return fail(kExitChangesFailed, e.what());
    }
  } else {
    backend.console("apppot-init: no changes archive to merge");
  }

  backend.console(kBannerJob);
  int status = 0;
  try {
    Resolution res = resolve_job_command(plan, backend.appliance_root(),
                                         backend.to_host(guest_workdir));
    for (const auto& w : res.warnings) backend.console("apppot-init: warning: " + w);
    if (res.job.source == JobSource::interactive && !backend.console_interactive()) {
      backend.console("apppot-init: no job specified");
      backend.console(kBannerShutdown);
      return kExitJobSetupFailed;
    }
    backend.console("apppot-init: job source: " + std::string(to_string(res.job.source)));
    status = backend.run_job(res.job);
    backend.console("apppot-init: job exited with status " + std::to_string(status));
  } catch (const Error& e) {
    return fail(kExitJobSetupFailed, e.what());
  }

  backend.console(kBannerShutdown);
  return status;
}

}  // namespace apptool::init
