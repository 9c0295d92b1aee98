#pragma once

// Base-state recording for appliance trees. A manifest captures the state
// of every file under a root so that later edits can be shipped as a small
// changes archive and replayed onto any tree with the same base content.
//
// Manifest file format (UTF-8 text, canonical):
//   APPPOT-MANIFEST/1 <hash-name> <created-at-ns> [<label>]
//   <path> TAB <kind> TAB <size|-> TAB <mtime-ns> TAB <mode> TAB <uid> TAB <gid> TAB <hash|target|->
// Records are sorted by path (byte order). Paths, link targets and the
// label percent-encode bytes that would break the line/field structure.

#include <fnmatch.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "apptool/sha256.hpp"
#include "apptool/util.hpp"

namespace apptool::snap {

enum class EntryKind { file, dir, symlink };

inline std::string_view to_string(EntryKind k) {
  switch (k) {
    case EntryKind::file: return "file";
    case EntryKind::dir: return "dir";
    case EntryKind::symlink: return "symlink";
  }
  return "?";
}

struct ManifestEntry {
  std::string path;  // normalized tree-relative path
  EntryKind kind = EntryKind::file;
  std::uint64_t size = 0;   // files only
  std::int64_t mtime_ns = 0;
  std::uint32_t mode = 0;   // permission bits only (<= 07777)
  std::uint32_t uid = 0;
  std::uint32_t gid = 0;
  std::string content_hash;  // files only, lowercase hex
  std::string link_target;   // symlinks only

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct Manifest {
  int format_version = 1;
  std::string hash_name = std::string(kHashName);
  std::string root_label;
  std::int64_t created_at_ns = 0;
  std::vector<ManifestEntry> entries;  // sorted, unique by path

  friend bool operator==(const Manifest&, const Manifest&) = default;

  const ManifestEntry* find(std::string_view path) const {
    auto it = std::lower_bound(entries.begin(), entries.end(), path,
                               [](const ManifestEntry& e, std::string_view p) { return e.path < p; });
    return (it != entries.end() && it->path == path) ? &*it : nullptr;
  }
};

struct SnapshotOptions {
  std::vector<std::string> excludes;  // glob patterns over tree-relative paths
  bool paranoid = false;              // include mtime in the difference test
  std::string root_label;
  std::int64_t created_at_ns = 0;
};

// Volatile trees never recorded; `.apppot` holds the tree's own metadata
// (including the base manifest).
inline const std::vector<std::string>& default_exclusions() {
  static const std::vector<std::string> dirs = {"proc", "sys", "dev", "tmp", "run", ".apppot"};
  return dirs;
}

namespace detail {

inline bool path_field_escape(unsigned char c) {
  return c == '\t' || c == '\n' || c == '\r';
}

inline bool label_escape(unsigned char c) { return c <= 0x20 || c == 0x7f; }

inline std::string encode_path_field(std::string_view s) {
  return apptool::detail::percent_encode(s, path_field_escape);
}

inline bool excluded(std::string_view rel, const std::vector<std::string>& user_globs) {
  for (const auto& d : default_exclusions()) {
    if (rel == d || (rel.size() > d.size() && rel.substr(0, d.size()) == d && rel[d.size()] == '/')) {
      return true;
    }
  }
  for (const auto& g : user_globs) {
    if (::fnmatch(g.c_str(), std::string(rel).c_str(), 0) == 0) return true;
  }
  return false;
}

struct LstatInfo {
  EntryKind kind;
  std::uint64_t size;
  std::int64_t mtime_ns;
  std::uint32_t mode, uid, gid;
};

inline LstatInfo lstat_entry(const fs::path& full, const std::string& rel) {
  struct stat st{};
  if (::lstat(full.c_str(), &st) != 0) {
    throw Error("cannot stat " + full.string() + ": " + std::strerror(errno));
  }
  LstatInfo info{};
  if (S_ISREG(st.st_mode)) {
    info.kind = EntryKind::file;
    info.size = static_cast<std::uint64_t>(st.st_size);
  } else if (S_ISDIR(st.st_mode)) {
    info.kind = EntryKind::dir;
  } else if (S_ISLNK(st.st_mode)) {
    info.kind = EntryKind::symlink;
  } else {
    throw Error("unsupported file kind at " + rel +
                " (only regular files, directories and symlinks can be recorded)");
  }
  info.mtime_ns = static_cast<std::int64_t>(st.st_mtim.tv_sec) * 1000000000 + st.st_mtim.tv_nsec;
  info.mode = st.st_mode & 07777u;
  info.uid = st.st_uid;
  info.gid = st.st_gid;
  return info;
}

inline std::string read_symlink_target(const fs::path& full) {
  std::error_code ec;
  fs::path t = fs::read_symlink(full, ec);
  if (ec) throw Error("cannot read symlink " + full.string() + ": " + ec.message());
  return t.string();
}

// Walks `root` depth-first with per-directory name ordering, calling `fn`
// for every kept entry. Excluded directories are not descended into.
template <typename Fn>
void walk_tree(const fs::path& root, const std::vector<std::string>& user_globs,
               const std::string& rel_base, Fn&& fn) {
  std::vector<std::string> names;
  {
    std::error_code ec;
    fs::directory_iterator it(root, ec);
    if (ec) throw Error("cannot read directory " + root.string() + ": " + ec.message());
    for (const auto& de : it) names.push_back(de.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  for (const auto& name : names) {
    std::string rel = rel_base.empty() ? name : rel_base + "/" + name;
    if (excluded(rel, user_globs)) continue;
    fs::path full = root / name;
    LstatInfo info = lstat_entry(full, rel);
    fn(rel, full, info);
    if (info.kind == EntryKind::dir) walk_tree(full, user_globs, rel, fn);
  }
}

}  // namespace detail

/// Records the state of all files under `root` (excluding the root itself
/// and the exclusion list). Deterministic: the same tree always yields the
/// same manifest.
inline Manifest record_base(const fs::path& root, const SnapshotOptions& opts = {}) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) {
    throw Error("snapshot root is not a readable directory: " + root.string());
  }
  Manifest m;
  m.root_label = opts.root_label;
  m.created_at_ns = opts.created_at_ns;
  detail::walk_tree(root, opts.excludes, "", [&](const std::string& rel, const fs::path& full,
                                                 const detail::LstatInfo& info) {
    ManifestEntry e;
    e.path = rel;
    e.kind = info.kind;
    e.mtime_ns = info.mtime_ns;
    e.mode = info.mode;
    e.uid = info.uid;
    e.gid = info.gid;
    if (info.kind == EntryKind::file) {
      e.size = info.size;
      e.content_hash = Sha256::of_file(full);
    } else if (info.kind == EntryKind::symlink) {
      e.link_target = detail::read_symlink_target(full);
    }
    m.entries.push_back(std::move(e));
  });
  std::sort(m.entries.begin(), m.entries.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) { return a.path < b.path; });
  return m;
}

inline std::string serialize_manifest(const Manifest& m) {
  if (m.format_version != 1) throw Error("unsupported manifest version");
  std::string out = "APPPOT-MANIFEST/1 " + m.hash_name + " " + std::to_string(m.created_at_ns);
  if (!m.root_label.empty()) {
    out += " " + apptool::detail::percent_encode(m.root_label, detail::label_escape);
  }
  out += "\n";
  for (const auto& e : m.entries) {
    out += detail::encode_path_field(e.path);
    out += '\t';
    out += to_string(e.kind);
    out += '\t';
    out += e.kind == EntryKind::file ? std::to_string(e.size) : "-";
    out += '\t';
    out += std::to_string(e.mtime_ns);
    out += '\t';
    char mode[8];
    std::snprintf(mode, sizeof mode, "%04o", e.mode);
    out += mode;
    out += '\t';
    out += std::to_string(e.uid);
    out += '\t';
    out += std::to_string(e.gid);
    out += '\t';
    switch (e.kind) {
      case EntryKind::file: out += e.content_hash; break;
      case EntryKind::symlink: out += detail::encode_path_field(e.link_target); break;
      case EntryKind::dir: out += '-'; break;
    }
    out += '\n';
  }
  return out;
}

namespace detail {

template <typename T>
T parse_int_field(std::string_view s, std::string_view what) {
  T v{};
  auto [p, rc] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (rc != std::errc() || p != s.data() + s.size()) {
    throw Error("corrupt manifest: bad " + std::string(what) + " field '" + std::string(s) + "'");
  }
  return v;
}

}  // namespace detail

inline Manifest parse_manifest(std::string_view text) {
  auto lines = apptool::detail::split(text, '\n');
  if (lines.empty() || lines[0].substr(0, 18) != "APPPOT-MANIFEST/1 ") {
    throw Error("corrupt manifest: bad header line");
  }
  Manifest m;
  {
    auto fields = apptool::detail::split(lines[0], ' ');
    if (fields.size() < 3 || fields.size() > 4) throw Error("corrupt manifest: bad header line");
    m.hash_name = std::string(fields[1]);
    if (m.hash_name != kHashName) {
      throw Error("unsupported manifest hash algorithm: " + m.hash_name);
    }
    m.created_at_ns = detail::parse_int_field<std::int64_t>(fields[2], "created-at");
    if (fields.size() == 4) {
      m.root_label = apptool::detail::percent_decode(fields[3], "manifest label");
    }
  }
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) {
      if (i + 1 != lines.size()) throw Error("corrupt manifest: blank line");
      continue;  // trailing newline
    }
    auto f = apptool::detail::split(lines[i], '\t');
    if (f.size() != 8) throw Error("corrupt manifest: expected 8 fields on line " + std::to_string(i + 1));
    ManifestEntry e;
    e.path = apptool::detail::percent_decode(f[0], "manifest path");
    if (!is_normalized_rel_path(e.path)) {
      throw Error("corrupt manifest: path not normalized: " + e.path);
    }
    if (f[1] == "file") e.kind = EntryKind::file;
    else if (f[1] == "dir") e.kind = EntryKind::dir;
    else if (f[1] == "symlink") e.kind = EntryKind::symlink;
    else throw Error("corrupt manifest: unknown kind '" + std::string(f[1]) + "'");
    if (e.kind == EntryKind::file) {
      e.size = detail::parse_int_field<std::uint64_t>(f[2], "size");
    } else if (f[2] != "-") {
      throw Error("corrupt manifest: size given for non-file " + e.path);
    }
    e.mtime_ns = detail::parse_int_field<std::int64_t>(f[3], "mtime");
    {
      auto [p, rc] = std::from_chars(f[4].data(), f[4].data() + f[4].size(), e.mode, 8);
      if (rc != std::errc() || p != f[4].data() + f[4].size()) {
        throw Error("corrupt manifest: bad mode field '" + std::string(f[4]) + "'");
      }
    }
    if (e.mode > 07777u) throw Error("corrupt manifest: mode has type bits: " + e.path);
    e.uid = detail::parse_int_field<std::uint32_t>(f[5], "uid");
    e.gid = detail::parse_int_field<std::uint32_t>(f[6], "gid");
    switch (e.kind) {
      case EntryKind::file:
        e.content_hash = std::string(f[7]);
        break;
      case EntryKind::symlink:
        e.link_target = apptool::detail::percent_decode(f[7], "symlink target");
        break;
      case EntryKind::dir:
        if (f[7] != "-") throw Error("corrupt manifest: directory with content field: " + e.path);
        break;
    }
    if (!m.entries.empty()) {
      if (m.entries.back().path == e.path) throw Error("corrupt manifest: duplicate path " + e.path);
      if (m.entries.back().path > e.path) throw Error("corrupt manifest: entries not sorted");
    }
    m.entries.push_back(std::move(e));
  }
  return m;
}

inline void write_manifest(const Manifest& m, const fs::path& out) {
  write_file(out, serialize_manifest(m));
}

inline Manifest read_manifest(const fs::path& in) { return parse_manifest(read_file(in)); }

/// Conventional location of a tree's own base manifest.
inline fs::path tree_manifest_path(const fs::path& root) {
  return root / ".apppot" / "base.manifest";
}

}  // namespace apptool::snap
