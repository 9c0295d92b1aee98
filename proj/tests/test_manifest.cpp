#include <sys/stat.h>
#include <unistd.h>

#include <catch2/catch_amalgamated.hpp>

#include "apptool/manifest.hpp"
#include "oracle.hpp"
#include "testutil.hpp"

using namespace apptool::snap;
using apptool::Error;
using apptool::TempDir;
using testutil::put_dir;
using testutil::put_file;
using testutil::put_symlink;

// sha256("hello"), a fixed reference value.
static const char* kHelloHash =
    "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824";

TEST_CASE("record_base: empty directory") {
  TempDir t;
  Manifest m = record_base(t.path());
  CHECK(m.format_version == 1);
  CHECK(m.hash_name == "sha256");
  CHECK(m.entries.empty());
}

TEST_CASE("record_base: entries are sorted and match an independent walker") {
  TempDir t;
  put_file(t.path() / "a.txt", "hello", 0644);
  put_dir(t.path() / "sub", 0755);
  put_file(t.path() / "sub/b.bin", std::string("\x01\x02\x03", 3), 0600);

  Manifest m = record_base(t.path());
  REQUIRE(m.entries.size() == 3);
  CHECK(m.entries[0].path == "a.txt");
  CHECK(m.entries[1].path == "sub");
  CHECK(m.entries[2].path == "sub/b.bin");

  CHECK(m.entries[0].kind == EntryKind::file);
  CHECK(m.entries[0].size == 5);
  CHECK(m.entries[0].content_hash == kHelloHash);
  CHECK(m.entries[1].kind == EntryKind::dir);
  CHECK(m.entries[2].size == 3);

  // Cross-check every recorded field against the oracle walker.
  oracle::Tree tree = oracle::walk(t.path().string());
  REQUIRE(tree.size() == m.entries.size());
  for (const auto& e : m.entries) {
    const oracle::Entry& o = tree.at(e.path);
    CHECK(e.mode == o.mode);
    CHECK(e.uid == o.uid);
    CHECK(e.gid == o.gid);
    if (e.kind == EntryKind::file) CHECK(static_cast<long long>(e.size) == o.size);
  }
}

TEST_CASE("record_base: symlinks record their target, not content") {
  TempDir t;
  put_file(t.path() / "a.txt", "hello");
  put_symlink(t.path() / "link", "a.txt");

  Manifest m = record_base(t.path());
  const ManifestEntry* link = m.find("link");
  REQUIRE(link != nullptr);
  CHECK(link->kind == EntryKind::symlink);
  CHECK(link->link_target == "a.txt");
  CHECK(link->content_hash.empty());

  oracle::Tree tree = oracle::walk(t.path().string());
  CHECK(tree.at("link").target == "a.txt");
}

TEST_CASE("record_base: unsupported kinds are hard errors naming the path") {
  TempDir t;
  REQUIRE(::mkfifo((t.path() / "pipe").c_str(), 0644) == 0);
  CHECK_THROWS_WITH(record_base(t.path()), Catch::Matchers::ContainsSubstring("pipe"));
}

TEST_CASE("record_base: unreadable files are hard errors") {
  if (::geteuid() == 0) {
    SKIP("file permissions do not bind root");
  }
  TempDir t;
  put_file(t.path() / "secret", "xx", 0000);
  CHECK_THROWS_WITH(record_base(t.path()), Catch::Matchers::ContainsSubstring("secret"));
}

TEST_CASE("record_base: nonexistent root is an error") {
  CHECK_THROWS_AS(record_base("/nonexistent/path/xyz"), Error);
}

TEST_CASE("record_base: default exclusions and user globs") {
  TempDir t;
  put_file(t.path() / "keep.txt", "k");
  put_file(t.path() / "proc/cpuinfo", "volatile");
  put_file(t.path() / "tmp/scratch", "volatile");
  put_file(t.path() / ".apppot/base.manifest", "self");
  put_file(t.path() / "build/out.log", "log");
  put_file(t.path() / "build/out.bin", "bin");

  SnapshotOptions opts;
  opts.excludes = {"*.log"};
  Manifest m = record_base(t.path(), opts);

  CHECK(m.find("keep.txt"));
  CHECK(m.find("build/out.bin"));
  CHECK_FALSE(m.find("proc"));
  CHECK_FALSE(m.find("proc/cpuinfo"));
  CHECK_FALSE(m.find("tmp/scratch"));
  CHECK_FALSE(m.find(".apppot/base.manifest"));
  CHECK_FALSE(m.find("build/out.log"));
}

TEST_CASE("record_base: deterministic over an unchanged tree") {
  TempDir t;
  put_file(t.path() / "x", "1");
  put_dir(t.path() / "d");
  put_file(t.path() / "d/y", "2");
  std::string a = serialize_manifest(record_base(t.path()));
  std::string b = serialize_manifest(record_base(t.path()));
  CHECK(a == b);
}

TEST_CASE("manifest: serialize/parse round-trip identity") {
  TempDir t;
  put_file(t.path() / "f", "data");
  put_symlink(t.path() / "l", "f");
  SnapshotOptions opts;
  opts.root_label = "base with space";
  opts.created_at_ns = 123456789;
  Manifest m = record_base(t.path(), opts);

  std::string text = serialize_manifest(m);
  Manifest parsed = parse_manifest(text);
  CHECK(parsed == m);
  CHECK(serialize_manifest(parsed) == text);
}

TEST_CASE("manifest: paths with tabs and newlines survive the text format") {
  TempDir t;
  put_file(t.path() / "odd\tname", "1");
  put_file(t.path() / "odd\nline", "2");
  put_symlink(t.path() / "lnk", "odd\ttarget");

  Manifest m = record_base(t.path());
  Manifest parsed = parse_manifest(serialize_manifest(m));
  CHECK(parsed == m);
  CHECK(parsed.find("odd\tname"));
  CHECK(parsed.find("odd\nline"));
  CHECK(parsed.find("lnk")->link_target == "odd\ttarget");
}

TEST_CASE("manifest: parser rejects corrupt input") {
  CHECK_THROWS_AS(parse_manifest("garbage"), Error);
  CHECK_THROWS_AS(parse_manifest("APPPOT-MANIFEST/1 md5 0\n"), Error);

  std::string dup =
      "APPPOT-MANIFEST/1 sha256 0\n"
      "a\tfile\t1\t0\t0644\t0\t0\tdead\n"
      "a\tfile\t1\t0\t0644\t0\t0\tbeef\n";
  CHECK_THROWS_WITH(parse_manifest(dup), Catch::Matchers::ContainsSubstring("duplicate"));

  std::string unsorted =
      "APPPOT-MANIFEST/1 sha256 0\n"
      "b\tfile\t1\t0\t0644\t0\t0\tdead\n"
      "a\tfile\t1\t0\t0644\t0\t0\tbeef\n";
  CHECK_THROWS_WITH(parse_manifest(unsorted), Catch::Matchers::ContainsSubstring("sorted"));

  std::string typebits = "APPPOT-MANIFEST/1 sha256 0\na\tfile\t1\t0\t100644\t0\t0\tdead\n";
  CHECK_THROWS_AS(parse_manifest(typebits), Error);

  std::string badpath = "APPPOT-MANIFEST/1 sha256 0\n../a\tfile\t1\t0\t0644\t0\t0\tdead\n";
  CHECK_THROWS_AS(parse_manifest(badpath), Error);

  std::string dirsize = "APPPOT-MANIFEST/1 sha256 0\na\tdir\t7\t0\t0755\t0\t0\t-\n";
  CHECK_THROWS_AS(parse_manifest(dirsize), Error);
}

TEST_CASE("manifest: serialization golden") {
  Manifest m;
  m.root_label = "golden base";
  m.created_at_ns = 1234567890123456789;
  m.entries = {
      {"etc", EntryKind::dir, 0, 1331000000000000000, 0755, 1000, 1000, "", ""},
      {"etc/motd", EntryKind::file, 18, 1331000001500000000, 0644, 1000, 1000,
       apptool::Sha256::of_bytes("Welcome to AppPot\n"), ""},
      {"etc/motd.link", EntryKind::symlink, 0, 1331000002000000000, 0777, 1000, 1000, "", "motd"},
      {"odd\tname", EntryKind::file, 0, 1331000003000000000, 0600, 1000, 100,
       apptool::Sha256::of_bytes(""), ""},
  };
  std::string text = serialize_manifest(m);
  std::string err = testutil::check_golden("manifest.golden", text);
  CHECK(err == "");
  CHECK(parse_manifest(text) == m);
}
