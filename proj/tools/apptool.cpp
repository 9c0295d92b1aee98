// apptool: prepare, diff, ship and execute batch software appliances.
//
//   apptool snap base <root>        record a base manifest of a tree
//   apptool snap changes <root>     diff a tree against a base manifest
//   apptool snap merge <root>       merge a changes archive into a tree
//   apptool start                   run a job inside an appliance
//   apptool wrap                    emit a batch/grid submission wrapper
//   apptool preflight               check host limits before submitting

#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "apptool/changes.hpp"
#include "apptool/host_runner.hpp"
#include "apptool/manifest.hpp"
#include "apptool/preflight.hpp"

namespace {

using apptool::Error;
namespace fs = std::filesystem;

// If the output file lives inside the tree being walked, it must not be
// recorded itself.
void exclude_if_inside(std::vector<std::string>& excludes, const fs::path& root,
                       const fs::path& file) {
  std::error_code ec;
  fs::path rel = fs::relative(fs::absolute(file), fs::absolute(root), ec);
  if (!ec && !rel.empty() && rel != "." && *rel.begin() != "..") {
    excludes.push_back(rel.generic_string());
  }
}

struct SnapBaseArgs {
  std::string root;
  std::string output;
  std::string label;
  std::vector<std::string> excludes;
  std::int64_t timestamp_ns = 0;
};

int run_snap_base(const SnapBaseArgs& a) {
  apptool::snap::SnapshotOptions opts;
  opts.excludes = a.excludes;
  opts.created_at_ns = a.timestamp_ns;
  opts.root_label = a.label.empty() ? fs::path(a.root).filename().string() : a.label;

  fs::path out = a.output.empty() ? apptool::snap::tree_manifest_path(a.root) : fs::path(a.output);
  exclude_if_inside(opts.excludes, a.root, out);

  apptool::snap::Manifest m = apptool::snap::record_base(a.root, opts);
  fs::create_directories(out.parent_path());
  apptool::snap::write_manifest(m, out);
  std::cout << "recorded " << m.entries.size() << " entries of '" << opts.root_label << "' to "
            << out.string() << "\n";
  return 0;
}

struct SnapChangesArgs {
  std::string root;
  std::string base;
  std::string output;
  std::vector<std::string> excludes;
  bool paranoid = false;
};

int run_snap_changes(const SnapChangesArgs& a) {
  apptool::snap::SnapshotOptions opts;
  opts.excludes = a.excludes;
  opts.paranoid = a.paranoid;

  fs::path out = a.output.empty()
                     ? fs::path(fs::path(a.root).filename().string() +
                                std::string(apptool::snap::kArchiveExtension))
                     : fs::path(a.output);
  exclude_if_inside(opts.excludes, a.root, out);

  apptool::snap::Manifest base = apptool::snap::read_manifest(a.base);
  apptool::snap::ChangesArchive changes = apptool::snap::compute_changes(a.root, base, opts);
  apptool::snap::write_changes_archive(changes, out);
  std::cout << changes.members.size() << " changed, " << changes.whiteouts.size()
            << " deleted relative to '" << changes.base_label << "' -> " << out.string() << "\n";
  return 0;
}

struct SnapMergeArgs {
  std::string root;
  std::string changes;
};

int run_snap_merge(const SnapMergeArgs& a) {
  apptool::snap::MergeReport report = apptool::snap::merge_changes_file(a.root, a.changes);
  for (const auto& w : report.warnings) {
    std::cerr << "apptool: warning: " << (w.path.empty() ? w.reason : w.path + ": " + w.reason)
              << "\n";
  }
  std::cout << "applied " << report.applied << " members, deleted " << report.deleted
            << " paths\n";
  return 0;
}

struct StartArgs {
  apptool::runner::JobSpec spec;
  std::string backend = "mock";
  std::string slirp;
  std::string command_str;
  std::vector<std::string> command_tokens;
  std::string changes;
  std::string cow;
  std::string tag;
  std::string mock_root;
  std::string workdir;
};

apptool::runner::JobSpec finish_spec(StartArgs& a) {
  auto& spec = a.spec;
  if (a.backend == "mock") {
    spec.backend = apptool::runner::Backend::mock;
  } else if (a.backend == "uml") {
    spec.backend = apptool::runner::Backend::uml;
  } else {
    throw Error("unknown backend '" + a.backend + "' (expected mock or uml)");
  }
  spec.workdir = a.workdir.empty() ? fs::current_path() : fs::path(a.workdir);
  if (!a.changes.empty()) spec.changes_path = a.changes;
  if (!a.cow.empty()) spec.cow_path = a.cow;
  if (!a.tag.empty()) spec.tag = a.tag;
  if (!a.mock_root.empty()) spec.mock_appliance_root = a.mock_root;
  if (!a.slirp.empty()) spec.extra_boot_args.push_back("eth0=slirp,," + a.slirp);
  if (!a.command_str.empty() && !a.command_tokens.empty()) {
    throw Error("--command and a trailing command cannot both be given");
  }
  if (!a.command_str.empty()) {
    spec.job_command = a.command_str;
  } else if (!a.command_tokens.empty()) {
    spec.job_command = apptool::shell_join(a.command_tokens);
  }
  return spec;
}

int run_start(StartArgs& a) {
  apptool::runner::JobSpec spec = finish_spec(a);
  apptool::runner::RunOutcome outcome = apptool::runner::launch(spec, std::cout);
  return outcome.exit_status;
}

int run_wrap(StartArgs& a, const std::string& flavor_name) {
  auto flavor = apptool::runner::wrapper_flavor_from_string(flavor_name);
  if (!flavor) {
    throw Error("unknown wrapper flavor '" + flavor_name +
                "' (expected generic-batch or grid-description)");
  }
  apptool::runner::JobSpec spec = finish_spec(a);
  std::cout << apptool::runner::emit_batch_wrapper(spec, *flavor);
  return 0;
}

struct PreflightArgs {
  int mem = 0;
  int cpus = 1;
  std::string scratch;
  long long batch_mem_limit = -1;
  bool json = false;
};

int run_preflight(const PreflightArgs& a) {
  fs::path scratch = a.scratch.empty() ? apptool::scratch_dir() : fs::path(a.scratch);
  std::optional<long long> limit;
  if (a.batch_mem_limit >= 0) limit = a.batch_mem_limit;
  apptool::preflight::HostProbe probe = apptool::preflight::sample_host(scratch, a.cpus, limit);
  auto diags = apptool::preflight::check_host(probe, a.mem);
  for (const auto& d : diags) {
    if (a.json) {
      nlohmann::json numbers = nlohmann::json::object();
      for (const auto& [k, v] : d.numbers) numbers[k] = v;
      nlohmann::json rec = {{"check", std::string(to_string(d.code))},
                            {"severity", std::string(to_string(d.severity))},
                            {"message", d.message},
                            {"numbers", numbers}};
      std::cout << rec.dump() << "\n";
    } else {
      std::string sev(to_string(d.severity));
      for (auto& c : sev) c = static_cast<char>(::toupper(c));
      std::cout << "[" << sev << "] " << to_string(d.code) << ": " << d.message << "\n";
    }
  }
  return apptool::preflight::all_clear(diags) ? 0 : 1;
}

void add_spec_flags(CLI::App* cmd, StartArgs& a, bool for_start) {
  cmd->add_option("--image", a.spec.image_path, "Path to the raw appliance disk image");
  cmd->add_option("--kernel", a.spec.kernel_path, "Path to the guest kernel executable");
  cmd->add_option("--mem", a.spec.memory_mib, "Guest memory in MiB")->capture_default_str();
  cmd->add_option("--changes", a.changes, "Changes archive to merge into the guest at boot");
  cmd->add_option("--tag", a.tag, "Free-form run label");
  cmd->add_option("--extra-boot-arg", a.spec.extra_boot_args,
                  "Extra kernel boot token, passed through verbatim (repeatable)");
  cmd->add_option("--workdir", a.workdir, "Host working directory (default: current directory)");
  cmd->add_option("--cow", a.cow, "Copy-on-write file for the disk image (uml)");
  cmd->add_option("--slirp", a.slirp, "Enable guest networking through this slirp executable");
  cmd->add_option("--command", a.command_str, "Job command line as a single string");
  if (for_start) {
    cmd->add_option("--backend", a.backend, "Execution backend: mock or uml")
        ->capture_default_str();
    cmd->add_option("--mock-root", a.mock_root,
                    "Mock backend: use this directory as the appliance tree");
  }
}

}  // namespace

int main(int argc, char** argv) {
  // Everything after a bare `--` is the job command for `start`.
  std::vector<std::string> tail;
  int cut = argc;
  for (int i = 1; i < argc; ++i) {
    if (std::string_view(argv[i]) == "--") {
      cut = i;
      for (int j = i + 1; j < argc; ++j) tail.emplace_back(argv[j]);
      break;
    }
  }

  CLI::App app{"Batch software appliance toolkit"};
  app.set_version_flag("--version", "apptool 0.1.0");
  app.require_subcommand(1);

  auto* snap = app.add_subcommand("snap", "Record, diff and merge appliance trees");
  snap->require_subcommand(1);

  SnapBaseArgs base_args;
  auto* snap_base = snap->add_subcommand("base", "Record the base state of a tree");
  snap_base->add_option("root", base_args.root, "Appliance tree root")
      ->required()
      ->check(CLI::ExistingDirectory);
  snap_base->add_option("-o,--output", base_args.output,
                        "Manifest output path (default: <root>/.apppot/base.manifest)");
  snap_base->add_option("--label", base_args.label, "Base label (default: root directory name)");
  snap_base->add_option("--exclude", base_args.excludes, "Glob of paths to skip (repeatable)");
  snap_base->add_option("--timestamp", base_args.timestamp_ns,
                        "Manifest creation time, ns since epoch (default 0 for reproducibility)");

  SnapChangesArgs changes_args;
  auto* snap_changes = snap->add_subcommand("changes", "Diff a tree against a base manifest");
  snap_changes->add_option("root", changes_args.root, "Appliance tree root")
      ->required()
      ->check(CLI::ExistingDirectory);
  snap_changes->add_option("-b,--base", changes_args.base, "Base manifest")
      ->required()
      ->check(CLI::ExistingFile);
  snap_changes->add_option("-o,--output", changes_args.output,
                           "Archive output path (default: <root-name>.changes.tar.gz)");
  snap_changes->add_option("--exclude", changes_args.excludes,
                           "Glob of paths to skip (repeatable)");
  snap_changes->add_flag("--paranoid", changes_args.paranoid,
                         "Treat mtime-only differences as changes");

  SnapMergeArgs merge_args;
  auto* snap_merge = snap->add_subcommand("merge", "Merge a changes archive into a tree");
  snap_merge->add_option("root", merge_args.root, "Target tree root")
      ->required()
      ->check(CLI::ExistingDirectory);
  snap_merge->add_option("-c,--changes", merge_args.changes, "Changes archive")
      ->required()
      ->check(CLI::ExistingFile);

  StartArgs start_args;
  auto* start = app.add_subcommand(
      "start", "Run a command inside an appliance (job command after `--`)");
  add_spec_flags(start, start_args, true);

  StartArgs wrap_args;
  std::string wrap_flavor;
  auto* wrap = app.add_subcommand("wrap", "Emit a batch or grid submission wrapper");
  wrap->add_option("--flavor", wrap_flavor, "generic-batch or grid-description")->required();
  add_spec_flags(wrap, wrap_args, false);

  PreflightArgs pf_args;
  auto* preflight = app.add_subcommand("preflight", "Check host limits for an appliance job");
  preflight->add_option("--mem", pf_args.mem, "Guest memory to check, MiB")->required();
  preflight->add_option("--cpus", pf_args.cpus, "CPU slots the job will request")
      ->capture_default_str();
  preflight->add_option("--scratch", pf_args.scratch,
                        "Memory-backing filesystem to check (default: scratch dir)");
  preflight->add_option("--batch-mem-limit", pf_args.batch_mem_limit,
                        "Advertised per-job memory limit in bytes (default: from rlimits)");
  preflight->add_flag("--json", pf_args.json, "One JSON record per diagnostic");

  try {
    app.parse(cut, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  start_args.command_tokens = tail;
  if (!tail.empty() && !start->parsed()) {
    std::cerr << "apptool: error: a trailing command is only meaningful for 'start'\n";
    return 64;
  }

  try {
    if (snap_base->parsed()) return run_snap_base(base_args);
    if (snap_changes->parsed()) return run_snap_changes(changes_args);
    if (snap_merge->parsed()) return run_snap_merge(merge_args);
    if (start->parsed()) return run_start(start_args);
    if (wrap->parsed()) return run_wrap(wrap_args, wrap_flavor);
    if (preflight->parsed()) return run_preflight(pf_args);
  } catch (const Error& e) {
    std::cerr << "apptool: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
