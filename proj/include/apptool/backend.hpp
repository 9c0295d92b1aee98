#pragma once

// The mock execution backend: runs the whole init protocol in-process,
// without privileges, a kernel binary or a disk image. The guest
// filesystem is a host directory, the workdir mount is path indirection,
// and identity changes are recorded instead of performed, so tests can
// assert on the effective uid/gid of every operation.

#include <unistd.h>

#include <chrono>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "apptool/detail/spawn.hpp"
#include "apptool/guest_init.hpp"
#include "apptool/util.hpp"

namespace apptool::init {

class MockUserDatabase final : public UserDatabase {
 public:
  void add(UserAccount account) { accounts_[account.name] = std::move(account); }

  std::optional<UserAccount> lookup(std::string_view name) const override {
    auto it = accounts_.find(std::string(name));
    if (it == accounts_.end()) return std::nullopt;
    return it->second;
  }

  void set_ids(std::string_view name, int uid, int gid) override {
    auto it = accounts_.find(std::string(name));
    if (it == accounts_.end()) throw Error("no such user: " + std::string(name));
    it->second.uid = uid;
    it->second.gid = gid;
  }

 private:
  std::map<std::string, UserAccount> accounts_;
};

struct MockConfig {
  fs::path appliance_root;  // host directory standing in for the guest /
  fs::path host_workdir;    // host directory to expose at the workdir mount
  std::string cmdline;
  bool interactive = false;
  UserAccount guest_user{"user", 500, 500, "/home/user", "/bin/sh"};
  std::ostream* echo = nullptr;  // live console sink, in addition to the transcript
};

class MockBackend final : public InitBackend {
 public:
  explicit MockBackend(MockConfig cfg) : cfg_(std::move(cfg)) {
    users_.add(cfg_.guest_user);
    effective_ = {cfg_.guest_user.uid, cfg_.guest_user.gid};
    start_ = clock::now();
  }

  std::string kernel_cmdline() override { return cfg_.cmdline; }
  UserDatabase& users() override { return users_; }
  std::string guest_username() const override { return cfg_.guest_user.name; }
  fs::path appliance_root() const override { return cfg_.appliance_root; }
  bool console_interactive() const override { return cfg_.interactive; }

  std::string mount_workdir(const std::string& mount_point) override {
    if (mount_point.empty() || mount_point.front() != '/') {
      throw Error("workdir mount point must be an absolute guest path: '" + mount_point + "'");
    }
    std::error_code ec;
    if (!fs::is_directory(cfg_.host_workdir, ec)) {
      throw Error("cannot mount working directory: " + cfg_.host_workdir.string() +
                  " is not an accessible directory");
    }
    if (::access(cfg_.host_workdir.c_str(), R_OK | X_OK) != 0) {
      throw Error("cannot mount working directory: no read access to " +
                  cfg_.host_workdir.string());
    }
    mount_point_ = mount_point;
    while (mount_point_.size() > 1 && mount_point_.back() == '/') mount_point_.pop_back();
    mounted_ = true;
    return mount_point_;
  }

  fs::path to_host(const std::string& guest_path) const override {
    if (guest_path.empty() || guest_path.front() != '/') {
      throw Error("guest path must be absolute: '" + guest_path + "'");
    }
    if (mounted_) {
      if (guest_path == mount_point_) return cfg_.host_workdir;
      if (guest_path.size() > mount_point_.size() &&
          guest_path.compare(0, mount_point_.size(), mount_point_) == 0 &&
          guest_path[mount_point_.size()] == '/') {
        return cfg_.host_workdir / guest_path.substr(mount_point_.size() + 1);
      }
    }
    if (guest_path == "/") return cfg_.appliance_root;
    fs::path mapped = cfg_.appliance_root / guest_path.substr(1);
    std::error_code ec;
    if (!fs::exists(fs::symlink_status(mapped, ec)) && fs::exists(fs::symlink_status(guest_path, ec))) {
      // Mock passthrough: fixtures outside the simulated namespaces (for
      // instance a changes archive next to the test) stay reachable.
      return guest_path;
    }
    return mapped;
  }

  void apply_identity(const IdentityMapping& mapping) override {
    if (identity_applied_) throw Error("identity mapping already applied this boot");
    identity_applied_ = true;
    users_.set_ids(mapping.guest_user, mapping.to_uid, mapping.to_gid);
    effective_ = {mapping.to_uid, mapping.to_gid};

    auto account = users_.lookup(mapping.guest_user);
    std::string home = account->home;
    ownership_[home] = effective_;
    fs::path host_home = to_host(home);
    std::error_code ec;
    if (fs::is_directory(host_home, ec)) {
      for (auto it = fs::recursive_directory_iterator(host_home, ec);
           !ec && it != fs::recursive_directory_iterator(); ++it) {
        fs::path rel = fs::relative(it->path(), host_home, ec);
        if (ec) break;
        ownership_[home + "/" + rel.generic_string()] = effective_;
        ++files_reowned_;
      }
    }
  }

  int run_job(const JobCommand& job) override {
    job_effective_ = effective_;
    if (job.source == JobSource::interactive) {
      raw_output("apppot-init: interactive shell (mock backend: returning immediately)\n");
      return 0;
    }
    std::string command = job.command;
    if (job.source == JobSource::appliance_script) {
      command = shell_quote(to_host(job.command).string());
    }
    auto account = users_.lookup(cfg_.guest_user.name);
    std::vector<std::string> argv{account ? account->shell : "/bin/sh", "-c", command};
    auto outcome = apptool::detail::spawn_capture(
        argv, to_host(job.cwd), [this](std::string_view chunk) { raw_output(chunk); });
    return outcome.exit_status;
  }

  void console(std::string_view line) override {
    note_banner(line);
    raw_output(line);
    raw_output("\n");
  }

  // --- inspection surface for tests and the host runner ---

  const std::string& transcript() const { return transcript_; }
  std::pair<int, int> effective_ids() const { return effective_; }
  std::optional<std::pair<int, int>> job_effective_ids() const { return job_effective_; }
  std::uint64_t files_reowned() const { return files_reowned_; }
  bool identity_applied() const { return identity_applied_; }

  /// Recorded guest-side owner of a path, if any identity event touched it.
  std::optional<std::pair<int, int>> owner_of(const std::string& guest_path) const {
    auto it = ownership_.find(guest_path);
    if (it == ownership_.end()) return std::nullopt;
    return it->second;
  }

  /// Wall-clock duration of each init stage, keyed by stage banner.
  std::vector<std::pair<std::string, double>> stage_timings() const {
    std::vector<std::pair<std::string, double>> out;
    for (std::size_t i = 0; i < banners_.size(); ++i) {
      auto end = (i + 1 < banners_.size()) ? banners_[i + 1].second : last_event_;
      out.emplace_back(banners_[i].first, std::chrono::duration<double>(end - banners_[i].second).count());
    }
    return out;
  }

 private:
  using clock = std::chrono::steady_clock;

  void raw_output(std::string_view bytes) {
    transcript_.append(bytes);
    last_event_ = clock::now();
    if (cfg_.echo) {
      cfg_.echo->write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      cfg_.echo->flush();
    }
  }

  void note_banner(std::string_view line) {
    static constexpr std::pair<std::string_view, std::string_view> kStages[] = {
        {kBannerParams, "params"},     {kBannerMount, "mount"},
        {kBannerIdentity, "identity"}, {kBannerChanges, "changes"},
        {kBannerJob, "job"},           {kBannerShutdown, "shutdown"},
    };
    for (const auto& [banner, name] : kStages) {
      if (line == banner) {
        banners_.emplace_back(std::string(name), clock::now());
        return;
      }
    }
  }

  MockConfig cfg_;
  MockUserDatabase users_;
  bool mounted_ = false;
  std::string mount_point_;
  bool identity_applied_ = false;
  std::pair<int, int> effective_{0, 0};
  std::optional<std::pair<int, int>> job_effective_;
  std::map<std::string, std::pair<int, int>> ownership_;
  std::uint64_t files_reowned_ = 0;
  std::string transcript_;
  std::vector<std::pair<std::string, clock::time_point>> banners_;
  clock::time_point start_;
  clock::time_point last_event_;
};

}  // namespace apptool::init
