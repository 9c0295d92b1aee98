#pragma once

// Host "doctor" run before submitting an appliance job. Detects the
// classic failure modes of user-mode kernels on batch hosts: the mmap
// segment ceiling (the guest maps one segment per page of guest memory,
// so the default vm.max_map_count caps guest memory at 256 MiB), exhausted
// scratch space backing guest memory, schedulers that double-count shared
// pages, and multi-CPU requests the uniprocessor guest cannot honor.

#include <sys/resource.h>
#include <sys/statvfs.h>
#include <unistd.h>

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "apptool/util.hpp"

namespace apptool::preflight {

struct HostProbe {
  std::optional<long long> max_map_count;    // host limit on mapped segments
  long long page_size = 4096;                // bytes
  std::optional<long long> scratch_free;     // bytes free on the memory-backing filesystem
  std::optional<long long> batch_mem_limit;  // advertised per-job limit, bytes
  int cpus_requested = 1;
};

enum class CheckCode { MAP_LIMIT, SHM_SPACE, BATCH_ACCOUNTING, NO_SMP };
enum class Severity { pass, warn, fail };

inline std::string_view to_string(CheckCode c) {
  switch (c) {
    case CheckCode::MAP_LIMIT: return "MAP_LIMIT";
    case CheckCode::SHM_SPACE: return "SHM_SPACE";
    case CheckCode::BATCH_ACCOUNTING: return "BATCH_ACCOUNTING";
    case CheckCode::NO_SMP: return "NO_SMP";
  }
  return "?";
}

inline std::string_view to_string(Severity s) {
  switch (s) {
    case Severity::pass: return "pass";
    case Severity::warn: return "warn";
    case Severity::fail: return "fail";
  }
  return "?";
}

struct Diagnostic {
  CheckCode code;
  Severity severity = Severity::pass;
  std::string message;
  std::vector<std::pair<std::string, long long>> numbers;
};

inline constexpr int kMinMemoryMib = 16;

/// Evaluates all four checks for a job requesting `requested_mem_mib` of
/// guest memory. Pure: identical inputs yield identical diagnostics.
/// Returns exactly four diagnostics in fixed order.
inline std::vector<Diagnostic> check_host(const HostProbe& probe, int requested_mem_mib) {
  if (requested_mem_mib < kMinMemoryMib) {
    throw Error("requested memory below the " + std::to_string(kMinMemoryMib) + " MiB minimum");
  }
  if (probe.page_size != 4096 && probe.page_size != 16384 && probe.page_size != 65536) {
    throw Error("implausible page size: " + std::to_string(probe.page_size));
  }
  const long long requested_bytes = static_cast<long long>(requested_mem_mib) * (1 << 20);
  std::vector<Diagnostic> out;

  {
    // Worst case: one mapped segment per page of guest memory.
    Diagnostic d{CheckCode::MAP_LIMIT};
    long long needed = (requested_bytes + probe.page_size - 1) / probe.page_size;
    d.numbers = {{"needed_maps", needed}, {"requested_mib", requested_mem_mib}};
    if (!probe.max_map_count) {
      d.severity = Severity::warn;
      d.message = "cannot read the mapped-segment limit; a guest of " +
                  std::to_string(requested_mem_mib) + " MiB needs up to " +
                  std::to_string(needed) + " maps";
    } else {
      d.numbers.emplace_back("max_map_count", *probe.max_map_count);
      if (needed > *probe.max_map_count) {
        d.severity = Severity::fail;
        d.message = "guest memory of " + std::to_string(requested_mem_mib) + " MiB needs up to " +
                    std::to_string(needed) + " mapped segments but the host allows " +
                    std::to_string(*probe.max_map_count) +
                    "; raise vm.max_map_count or lower --mem";
      } else {
        d.severity = Severity::pass;
        d.message = "guest memory of " + std::to_string(requested_mem_mib) + " MiB needs up to " +
                    std::to_string(needed) + " mapped segments; the host allows " +
                    std::to_string(*probe.max_map_count);
      }
    }
    out.push_back(std::move(d));
  }

  {
    // Guest memory is backed by files on the scratch filesystem.
    Diagnostic d{CheckCode::SHM_SPACE};
    d.numbers = {{"requested_bytes", requested_bytes}};
    if (!probe.scratch_free) {
      d.severity = Severity::warn;
      d.message = "cannot determine free space on the memory-backing filesystem; " +
                  std::to_string(requested_bytes) + " bytes will be needed";
    } else {
      d.numbers.emplace_back("scratch_free", *probe.scratch_free);
      if (requested_bytes > *probe.scratch_free) {
        d.severity = Severity::fail;
        d.message = "guest memory needs " + std::to_string(requested_bytes) +
                    " bytes of backing storage but only " + std::to_string(*probe.scratch_free) +
                    " are free on the scratch filesystem (APPTOOL_TMPDIR selects another)";
      } else {
        d.severity = Severity::pass;
        d.message = "backing storage for " + std::to_string(requested_bytes) + " bytes available (" +
                    std::to_string(*probe.scratch_free) + " free)";
      }
    }
    out.push_back(std::move(d));
  }

  {
    // Schedulers sum per-process memory without discounting shared pages,
    // so every guest page is counted once per guest process. A limit can
    // kill jobs that are within their real usage; site policy, never a
    // hard failure here.
    Diagnostic d{CheckCode::BATCH_ACCOUNTING};
    if (probe.batch_mem_limit) {
      d.severity = Severity::warn;
      d.numbers = {{"batch_mem_limit", *probe.batch_mem_limit},
                   {"requested_bytes", requested_bytes}};
      d.message = "a per-job memory limit of " + std::to_string(*probe.batch_mem_limit) +
                  " bytes is enforced; schedulers sum shared pages per process, so the guest's " +
                  std::to_string(requested_bytes) +
                  " bytes may be double-counted and the job killed; ask the site to relax "
                  "enforcement for appliance jobs";
    } else {
      d.severity = Severity::pass;
      d.message = "no per-job memory limit advertised";
    }
    out.push_back(std::move(d));
  }

  {
    Diagnostic d{CheckCode::NO_SMP};
    d.numbers = {{"cpus_requested", probe.cpus_requested}};
    if (probe.cpus_requested > 1) {
      d.severity = Severity::warn;
      d.message = "requested " + std::to_string(probe.cpus_requested) +
                  " CPUs but the guest kernel is uniprocessor; extra slots would idle";
    } else {
      d.severity = Severity::pass;
      d.message = "single CPU requested";
    }
    out.push_back(std::move(d));
  }

  return out;
}

inline bool all_clear(const std::vector<Diagnostic>& diags) {
  for (const auto& d : diags) {
    if (d.severity == Severity::fail) return false;
  }
  return true;
}

/// Samples the live host. Fields that cannot be read stay unset and the
/// corresponding checks degrade to warnings.
inline HostProbe sample_host(const fs::path& scratch, int cpus_requested,
                             std::optional<long long> batch_mem_limit = std::nullopt) {
  HostProbe probe;
  probe.cpus_requested = cpus_requested;
  probe.page_size = ::sysconf(_SC_PAGESIZE);

  std::ifstream mm("/proc/sys/vm/max_map_count");
  long long v = 0;
  if (mm >> v) probe.max_map_count = v;

  struct statvfs sv{};
  if (::statvfs(scratch.c_str(), &sv) == 0) {
    probe.scratch_free = static_cast<long long>(sv.f_bavail) * static_cast<long long>(sv.f_frsize);
  }

  if (batch_mem_limit) {
    probe.batch_mem_limit = batch_mem_limit;
  } else {
    // Batch systems enforce limits through the address-space rlimit.
    struct rlimit rl{};
    if (::getrlimit(RLIMIT_AS, &rl) == 0 && rl.rlim_cur != RLIM_INFINITY) {
      probe.batch_mem_limit = static_cast<long long>(rl.rlim_cur);
    }
  }
  return probe;
}

}  // namespace apptool::preflight
