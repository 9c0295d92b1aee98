#include <catch2/catch_amalgamated.hpp>
#include <random>

#include "apptool/preflight.hpp"

using namespace apptool::preflight;
using apptool::Error;

namespace {

HostProbe probe_4k(long long max_maps, long long scratch_free = 1LL << 40) {
  HostProbe p;
  p.max_map_count = max_maps;
  p.page_size = 4096;
  p.scratch_free = scratch_free;
  p.cpus_requested = 1;
  return p;
}

const Diagnostic& find(const std::vector<Diagnostic>& diags, CheckCode code) {
  for (const auto& d : diags) {
    if (d.code == code) return d;
  }
  throw std::runtime_error("diagnostic missing");
}

}  // namespace

TEST_CASE("check_host: exactly four diagnostics in fixed order") {
  auto diags = check_host(probe_4k(65536), 64);
  REQUIRE(diags.size() == 4);
  CHECK(diags[0].code == CheckCode::MAP_LIMIT);
  CHECK(diags[1].code == CheckCode::SHM_SPACE);
  CHECK(diags[2].code == CheckCode::BATCH_ACCOUNTING);
  CHECK(diags[3].code == CheckCode::NO_SMP);
}

TEST_CASE("MAP_LIMIT: the default segment limit caps guest memory at 256 MiB") {
  // 65536 maps at 4 KiB pages: 256 MiB fits exactly, 257 MiB does not.
  auto at_boundary = check_host(probe_4k(65536), 256);
  CHECK(find(at_boundary, CheckCode::MAP_LIMIT).severity == Severity::pass);

  auto past_boundary = check_host(probe_4k(65536), 257);
  CHECK(find(past_boundary, CheckCode::MAP_LIMIT).severity == Severity::fail);
}

TEST_CASE("MAP_LIMIT: message cites both computed numbers") {
  // ceil(2048 MiB * 2^20 / 4096) = 524288 maps needed.
  auto diags = check_host(probe_4k(65530), 2048);
  const Diagnostic& d = find(diags, CheckCode::MAP_LIMIT);
  CHECK(d.severity == Severity::fail);
  CHECK(d.message.find("524288") != std::string::npos);
  CHECK(d.message.find("65530") != std::string::npos);
  bool needed_found = false, limit_found = false;
  for (const auto& [k, v] : d.numbers) {
    if (k == "needed_maps") {
      needed_found = true;
      CHECK(v == 524288);
    }
    if (k == "max_map_count") {
      limit_found = true;
      CHECK(v == 65530);
    }
  }
  CHECK(needed_found);
  CHECK(limit_found);
}

TEST_CASE("MAP_LIMIT: page size scales the page count") {
  HostProbe p = probe_4k(65536);
  p.page_size = 65536;
  // 256 MiB at 64 KiB pages needs only 4096 maps.
  auto diags = check_host(p, 256);
  const Diagnostic& d = find(diags, CheckCode::MAP_LIMIT);
  CHECK(d.severity == Severity::pass);
  for (const auto& [k, v] : d.numbers) {
    if (k == "needed_maps") CHECK(v == 4096);
  }
}

TEST_CASE("SHM_SPACE: fails when backing storage is short") {
  // 4096 MiB requested, 1 GiB free.
  auto diags = check_host(probe_4k(1 << 30, 1LL << 30), 4096);
  CHECK(find(diags, CheckCode::SHM_SPACE).severity == Severity::fail);

  auto enough = check_host(probe_4k(1 << 30, 5LL << 30), 4096);
  CHECK(find(enough, CheckCode::SHM_SPACE).severity == Severity::pass);
}

TEST_CASE("BATCH_ACCOUNTING: advertised limits warn, never fail") {
  HostProbe p = probe_4k(1 << 30);
  p.batch_mem_limit = 2LL << 30;
  auto diags = check_host(p, 256);
  const Diagnostic& d = find(diags, CheckCode::BATCH_ACCOUNTING);
  CHECK(d.severity == Severity::warn);
  CHECK(d.message.find("shared pages") != std::string::npos);

  p.batch_mem_limit.reset();
  CHECK(find(check_host(p, 256), CheckCode::BATCH_ACCOUNTING).severity == Severity::pass);
}

TEST_CASE("NO_SMP: single cpu passes, more warns") {
  HostProbe p = probe_4k(1 << 30);
  p.cpus_requested = 1;
  CHECK(find(check_host(p, 64), CheckCode::NO_SMP).severity == Severity::pass);
  p.cpus_requested = 8;
  CHECK(find(check_host(p, 64), CheckCode::NO_SMP).severity == Severity::warn);
}

TEST_CASE("check_host: memory below the job minimum is a hard error") {
  CHECK_THROWS_AS(check_host(probe_4k(65536), 15), Error);
  CHECK_NOTHROW(check_host(probe_4k(65536), 16));
}

TEST_CASE("check_host: implausible page size is refused") {
  HostProbe p = probe_4k(65536);
  p.page_size = 1234;
  CHECK_THROWS_AS(check_host(p, 64), Error);
}

TEST_CASE("check_host: unknown probe fields degrade to warnings") {
  HostProbe p;
  p.page_size = 4096;
  p.cpus_requested = 1;
  auto diags = check_host(p, 10240);
  CHECK(find(diags, CheckCode::MAP_LIMIT).severity == Severity::warn);
  CHECK(find(diags, CheckCode::SHM_SPACE).severity == Severity::warn);
  CHECK(all_clear(diags));
}

TEST_CASE("check_host: purity — identical inputs, identical diagnostics") {
  HostProbe p = probe_4k(65536, 123456789);
  p.batch_mem_limit = 1LL << 30;
  p.cpus_requested = 4;
  auto a = check_host(p, 300);
  auto b = check_host(p, 300);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].severity == b[i].severity);
    CHECK(a[i].message == b[i].message);
    CHECK(a[i].numbers == b[i].numbers);
  }
}

TEST_CASE("MAP_LIMIT monotonicity over random probes") {
  std::mt19937_64 rng(42);
  auto pick = [&rng](long long lo, long long hi) {
    return std::uniform_int_distribution<long long>(lo, hi)(rng);
  };
  for (int i = 0; i < 500; ++i) {
    long long maps = pick(1, 1 << 22);
    int mem = static_cast<int>(pick(16, 8192));
    HostProbe p = probe_4k(maps);

    auto sev = [&](long long m, int req) {
      HostProbe q = probe_4k(m);
      return find(check_host(q, req), CheckCode::MAP_LIMIT).severity;
    };
    Severity base = sev(maps, mem);
    // Raising the limit never turns a pass into a fail.
    if (base == Severity::pass) {
      REQUIRE(sev(maps + pick(0, 1 << 20), mem) == Severity::pass);
    }
    // Raising requested memory never turns a fail into a pass.
    if (base == Severity::fail) {
      REQUIRE(sev(maps, mem + static_cast<int>(pick(0, 1024))) == Severity::fail);
    }
  }
}

TEST_CASE("sample_host: fills what the host exposes") {
  HostProbe p = sample_host("/tmp", 2);
  CHECK(p.cpus_requested == 2);
  CHECK((p.page_size == 4096 || p.page_size == 16384 || p.page_size == 65536));
  // On Linux both of these should be readable.
  CHECK(p.max_map_count.has_value());
  CHECK(p.scratch_free.has_value());

  HostProbe q = sample_host("/tmp", 1, 42);
  CHECK(q.batch_mem_limit == 42);
}
