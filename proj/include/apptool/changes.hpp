#pragma once

// Changes archives: the portable diff between a live appliance tree and a
// recorded base manifest, plus the merge that replays it onto another tree
// with the same base content.
//
// Container: gzip-compressed ustar stream (.changes.tar.gz). Two reserved
// members come first: `.apppot/MANIFEST-LABEL` (the base label) and
// `.apppot/WHITEOUTS` (newline-separated sorted paths deleted relative to
// the base). Changed/added entries follow, sorted by path.

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "apptool/gzip.hpp"
#include "apptool/manifest.hpp"
#include "apptool/tar.hpp"
#include "apptool/util.hpp"

namespace apptool::snap {

inline constexpr std::string_view kLabelMember = ".apppot/MANIFEST-LABEL";
inline constexpr std::string_view kWhiteoutsMember = ".apppot/WHITEOUTS";
inline constexpr std::string_view kArchiveExtension = ".changes.tar.gz";

struct ChangesMember {
  std::string path;
  EntryKind kind = EntryKind::file;
  std::uint32_t mode = 0;
  std::uint32_t uid = 0;
  std::uint32_t gid = 0;
  std::int64_t mtime_ns = 0;
  std::uint64_t size = 0;    // files only
  std::string link_target;   // symlinks only
  std::string content;       // file bytes, when held in memory
  std::string source_path;   // when set, file bytes are streamed from here

  friend bool operator==(const ChangesMember&, const ChangesMember&) = default;
};

struct ChangesArchive {
  int format_version = 1;
  std::string base_label;
  std::vector<ChangesMember> members;    // sorted by path
  std::vector<std::string> whiteouts;    // sorted paths deleted relative to base

  bool empty() const { return members.empty() && whiteouts.empty(); }
};

struct MergeWarning {
  std::string path;
  std::string reason;
};

struct MergeReport {
  std::uint64_t applied = 0;  // members written
  std::uint64_t deleted = 0;  // whiteouts that removed something
  std::vector<MergeWarning> warnings;
};

/// Raised when a merge fails after partial application; carries what had
/// been applied up to the failure.
class MergeError : public Error {
 public:
  MergeError(const std::string& what, MergeReport partial)
      : Error(what), partial_report(std::move(partial)) {}
  MergeReport partial_report;
};

namespace detail {

inline void validate_base(const Manifest& base) {
  for (std::size_t i = 1; i < base.entries.size(); ++i) {
    if (base.entries[i - 1].path == base.entries[i].path) {
      throw Error("corrupt manifest: duplicate path " + base.entries[i].path);
    }
    if (base.entries[i - 1].path > base.entries[i].path) {
      throw Error("corrupt manifest: entries not sorted");
    }
  }
}

// Difference test between the recorded base entry and the live entry.
// mtime participates only in paranoid mode; the content hash is computed
// last and only when everything cheaper matches.
inline bool entry_changed(const ManifestEntry& base, const LstatInfo& live, const fs::path& full,
                          const std::string& live_target, bool paranoid) {
  if (base.kind != live.kind) return true;
  if (base.mode != live.mode || base.uid != live.uid || base.gid != live.gid) return true;
  if (paranoid && base.mtime_ns != live.mtime_ns) return true;
  switch (live.kind) {
    case EntryKind::file:
      if (base.size != live.size) return true;
      return Sha256::of_file(full) != base.content_hash;
    case EntryKind::symlink:
      return live_target != base.link_target;
    case EntryKind::dir:
      return false;
  }
  return false;
}

}  // namespace detail

/// Diffs `root` against the recorded base. Members carry everything needed
/// to recreate the entry; file content is streamed from the tree at archive
/// write time.
inline ChangesArchive compute_changes(const fs::path& root, const Manifest& base,
                                      const SnapshotOptions& opts = {}) {
  detail::validate_base(base);
  ChangesArchive out;
  out.base_label = base.root_label;

  std::set<std::string> seen;
  detail::walk_tree(root, opts.excludes, "", [&](const std::string& rel, const fs::path& full,
                                                 const detail::LstatInfo& info) {
    seen.insert(rel);
    std::string target;
    if (info.kind == EntryKind::symlink) target = detail::read_symlink_target(full);
    const ManifestEntry* b = base.find(rel);
    if (b && !detail::entry_changed(*b, info, full, target, opts.paranoid)) return;
    ChangesMember m;
    m.path = rel;
    m.kind = info.kind;
    m.mode = info.mode;
    m.uid = info.uid;
    m.gid = info.gid;
    m.mtime_ns = info.mtime_ns;
    if (info.kind == EntryKind::file) {
      m.size = info.size;
      m.source_path = full.string();
    } else if (info.kind == EntryKind::symlink) {
      m.link_target = target;
    }
    out.members.push_back(std::move(m));
  });
  std::sort(out.members.begin(), out.members.end(),
            [](const ChangesMember& a, const ChangesMember& b) { return a.path < b.path; });

  for (const auto& e : base.entries) {
    if (!seen.count(e.path) && !detail::excluded(e.path, opts.excludes)) {
      out.whiteouts.push_back(e.path);
    }
  }
  return out;
}

namespace detail {

struct MemberInfo {
  std::string path;
  EntryKind kind;
  std::uint32_t mode, uid, gid;
  std::int64_t mtime_ns;
  std::string link_target;
};

// Pushes file content chunks into a sink.
using ContentProvider = std::function<void(const std::function<void(std::string_view)>&)>;

inline void set_times(const fs::path& p, std::int64_t mtime_ns, bool follow) {
  timespec times[2];
  times[0].tv_sec = 0;
  times[0].tv_nsec = UTIME_OMIT;
  times[1].tv_sec = static_cast<time_t>(mtime_ns / 1000000000);
  times[1].tv_nsec = static_cast<long>(mtime_ns % 1000000000);
  if (times[1].tv_nsec < 0) {
    times[1].tv_sec -= 1;
    times[1].tv_nsec += 1000000000;
  }
  ::utimensat(AT_FDCWD, p.c_str(), times, follow ? 0 : AT_SYMLINK_NOFOLLOW);
}

inline void restore_ownership(const fs::path& p, std::uint32_t uid, std::uint32_t gid,
                              const std::string& rel, MergeReport& report) {
  struct stat st{};
  if (::lstat(p.c_str(), &st) != 0) return;
  if (st.st_uid == uid && st.st_gid == gid) return;
  if (::lchown(p.c_str(), uid, gid) != 0) {
    report.warnings.push_back({rel, "ownership not restored: " + std::string(std::strerror(errno))});
  }
}

inline void remove_existing(const fs::path& p, MergeReport& report) {
  struct stat st{};
  if (::lstat(p.c_str(), &st) != 0) return;
  std::error_code ec;
  if (S_ISDIR(st.st_mode)) {
    fs::remove_all(p, ec);
  } else {
    fs::remove(p, ec);
  }
  if (ec) throw MergeError("cannot replace " + p.string() + ": " + ec.message(), report);
}

inline void materialize(const fs::path& root, const MemberInfo& m,
                        const ContentProvider& content, MergeReport& report) {
  if (!is_normalized_rel_path(m.path)) {
    throw MergeError("changes archive member path not normalized: " + m.path, report);
  }
  fs::path target = root / m.path;
  std::error_code ec;
  fs::path parent = target.parent_path();
  if (!fs::exists(fs::symlink_status(parent, ec))) {
    fs::create_directories(parent, ec);
    if (ec) throw MergeError("cannot create parent directory for " + m.path + ": " + ec.message(), report);
  }

  struct stat st{};
  bool exists = ::lstat(target.c_str(), &st) == 0;
  switch (m.kind) {
    case EntryKind::dir: {
      if (exists && !S_ISDIR(st.st_mode)) {
        remove_existing(target, report);
        exists = false;
      }
      if (!exists && ::mkdir(target.c_str(), m.mode) != 0) {
        throw MergeError("cannot create directory " + m.path + ": " + std::string(std::strerror(errno)),
                         report);
      }
      if (::chmod(target.c_str(), m.mode) != 0) {
        throw MergeError("cannot set mode on " + m.path + ": " + std::string(std::strerror(errno)),
                         report);
      }
      break;
    }
    case EntryKind::file: {
      // Always recreate: replacing in place would fail on read-only files
      // and would write through hard links.
      if (exists) remove_existing(target, report);
      std::ofstream out(target, std::ios::binary | std::ios::trunc);
      if (!out) throw MergeError("cannot write " + m.path, report);
      content([&](std::string_view chunk) {
        out.write(chunk.data(), static_cast<std::streamsize>(chunk.size()));
      });
      out.close();
      if (!out) throw MergeError("write failure on " + m.path, report);
      if (::chmod(target.c_str(), m.mode) != 0) {
        throw MergeError("cannot set mode on " + m.path + ": " + std::string(std::strerror(errno)),
                         report);
      }
      set_times(target, m.mtime_ns, true);
      break;
    }
    case EntryKind::symlink: {
      if (exists) remove_existing(target, report);
      if (::symlink(m.link_target.c_str(), target.c_str()) != 0) {
        throw MergeError("cannot create symlink " + m.path + ": " + std::string(std::strerror(errno)),
                         report);
      }
      set_times(target, m.mtime_ns, false);
      break;
    }
  }
  restore_ownership(target, m.uid, m.gid, m.path, report);
  report.applied += 1;
}

// Whiteouts are applied deepest-first so listing every absent base path
// (including children of deleted directories) never double-deletes.
inline void apply_whiteouts(const fs::path& root, std::vector<std::string> whiteouts,
                            MergeReport& report) {
  std::sort(whiteouts.begin(), whiteouts.end(), std::greater<>());
  for (const auto& w : whiteouts) {
    if (!is_normalized_rel_path(w)) {
      throw MergeError("changes archive whiteout path not normalized: " + w, report);
    }
    fs::path target = root / w;
    struct stat st{};
    if (::lstat(target.c_str(), &st) != 0) {
      report.warnings.push_back({w, "whiteout target absent"});
      continue;
    }
    std::error_code ec;
    if (S_ISDIR(st.st_mode)) {
      fs::remove_all(target, ec);
    } else {
      fs::remove(target, ec);
    }
    if (ec) throw MergeError("cannot delete " + w + ": " + ec.message(), report);
    report.deleted += 1;
  }
}

// Directory mtimes are restored after all members landed, children first,
// since writing into a directory bumps its mtime.
inline void restore_dir_times(const fs::path& root,
                              std::vector<std::pair<std::string, std::int64_t>> dirs) {
  std::sort(dirs.begin(), dirs.end(), std::greater<>());
  for (const auto& [rel, mtime_ns] : dirs) set_times(root / rel, mtime_ns, true);
}

}  // namespace detail

/// Replays a changes archive onto `root`: whiteouts removed (recursively
/// for directories), members materialized with parents created as needed
/// and existing objects replaced.
inline MergeReport apply_changes(const fs::path& root, const ChangesArchive& changes) {
  MergeReport report;
  {
    std::set<std::string_view> wh(changes.whiteouts.begin(), changes.whiteouts.end());
    for (const auto& m : changes.members) {
      if (wh.count(m.path)) {
        throw Error("corrupt changes archive: " + m.path + " is both member and whiteout");
      }
    }
  }
  detail::apply_whiteouts(root, changes.whiteouts, report);

  std::vector<const ChangesMember*> ordered;
  ordered.reserve(changes.members.size());
  for (const auto& m : changes.members) ordered.push_back(&m);
  std::sort(ordered.begin(), ordered.end(),
            [](const ChangesMember* a, const ChangesMember* b) { return a->path < b->path; });

  std::vector<std::pair<std::string, std::int64_t>> dirs;
  for (const ChangesMember* m : ordered) {
    detail::MemberInfo info{m->path, m->kind, m->mode, m->uid, m->gid, m->mtime_ns, m->link_target};
    detail::ContentProvider content = [m](const std::function<void(std::string_view)>& sink) {
      if (!m->source_path.empty()) {
        std::ifstream in(m->source_path, std::ios::binary);
        if (!in) throw Error("cannot open " + m->source_path + " for reading");
        char buf[1 << 16];
        while (in.read(buf, sizeof buf) || in.gcount() > 0) {
          sink(std::string_view(buf, static_cast<std::size_t>(in.gcount())));
        }
      } else {
        sink(m->content);
      }
    };
    detail::materialize(root, info, content, report);
    if (m->kind == EntryKind::dir) dirs.emplace_back(m->path, m->mtime_ns);
  }
  detail::restore_dir_times(root, std::move(dirs));
  return report;
}

/// Writes the tar-level byte stream (used by write_changes_archive and by
/// layout tests that inspect the uncompressed container).
inline void write_changes_tar(const ChangesArchive& changes, tar::Writer& w) {
  tar::Header label;
  label.name = std::string(kLabelMember);
  label.mode = 0644;
  std::string label_content = changes.base_label + "\n";
  label.size = label_content.size();
  w.add(label, label_content);

  tar::Header wh;
  wh.name = std::string(kWhiteoutsMember);
  wh.mode = 0644;
  std::string wh_content;
  for (const auto& p : changes.whiteouts) {
    wh_content += p;
    wh_content += '\n';
  }
  wh.size = wh_content.size();
  w.add(wh, wh_content);

  std::vector<const ChangesMember*> ordered;
  for (const auto& m : changes.members) ordered.push_back(&m);
  std::sort(ordered.begin(), ordered.end(),
            [](const ChangesMember* a, const ChangesMember* b) { return a->path < b->path; });

  for (const ChangesMember* m : ordered) {
    tar::Header h;
    h.name = m->path;
    h.mode = m->mode;
    h.uid = m->uid;
    h.gid = m->gid;
    h.mtime = m->mtime_ns / 1000000000;
    switch (m->kind) {
      case EntryKind::dir:
        h.typeflag = '5';
        h.name += '/';
        w.add(h, "");
        break;
      case EntryKind::symlink:
        h.typeflag = '2';
        h.linkname = m->link_target;
        w.add(h, "");
        break;
      case EntryKind::file: {
        h.typeflag = '0';
        h.size = m->size;
        if (!m->source_path.empty()) {
          std::ifstream in(m->source_path, std::ios::binary);
          if (!in) throw Error("cannot open " + m->source_path + " for reading");
          w.add_stream(h, [&in](char* buf, std::size_t len) -> std::size_t {
            in.read(buf, static_cast<std::streamsize>(len));
            return static_cast<std::size_t>(in.gcount());
          });
        } else {
          w.add(h, m->content);
        }
        break;
      }
    }
  }
  w.finish();
}

/// Writes the archive to `out` as a canonical gzip-compressed tar stream.
inline void write_changes_archive(const ChangesArchive& changes, const fs::path& out) {
  GzipWriter gz(out);
  tar::Writer w([&gz](std::string_view bytes) { gz.write(bytes); });
  write_changes_tar(changes, w);
  gz.finish();
}

namespace detail {

inline ChangesMember member_from_tar_header(const tar::Header& h) {
  ChangesMember m;
  m.path = h.name;
  switch (h.typeflag) {
    case '0': m.kind = EntryKind::file; break;
    case '5': m.kind = EntryKind::dir; break;
    case '2': m.kind = EntryKind::symlink; break;
    default:
      throw Error("unsupported member type in changes archive: " + h.name);
  }
  if (m.kind == EntryKind::dir && !m.path.empty() && m.path.back() == '/') m.path.pop_back();
  if (!is_normalized_rel_path(m.path)) {
    throw Error("changes archive member path not normalized: " + m.path);
  }
  m.mode = h.mode;
  m.uid = h.uid;
  m.gid = h.gid;
  m.mtime_ns = h.mtime * 1000000000;
  m.size = h.size;
  m.link_target = h.linkname;
  return m;
}

// Opens an archive and reads the two reserved leading members.
struct ArchiveHead {
  GzipReader gz;
  tar::Reader reader;
  std::string base_label;
  std::vector<std::string> whiteouts;

  explicit ArchiveHead(const fs::path& in)
      : gz(in), reader([this](char* buf, std::size_t len) { return gz.read(buf, len); }) {
    auto label = reader.next();
    if (!label || label->name != kLabelMember) {
      throw Error(in.string() + " is not an apptool changes archive");
    }
    base_label = reader.content_string();
    if (!base_label.empty() && base_label.back() == '\n') base_label.pop_back();

    auto wh = reader.next();
    if (!wh || wh->name != kWhiteoutsMember) {
      throw Error(in.string() + " is not an apptool changes archive (missing whiteout list)");
    }
    std::string wh_content = reader.content_string();
    for (auto line : apptool::detail::split(wh_content, '\n')) {
      if (!line.empty()) whiteouts.emplace_back(line);
    }
    std::sort(whiteouts.begin(), whiteouts.end());
  }
};

}  // namespace detail

/// Reads an archive back into memory (member contents included).
inline ChangesArchive read_changes_archive(const fs::path& in) {
  detail::ArchiveHead head(in);
  ChangesArchive out;
  out.base_label = std::move(head.base_label);
  out.whiteouts = std::move(head.whiteouts);

  while (auto h = head.reader.next()) {
    ChangesMember m = detail::member_from_tar_header(*h);
    if (m.kind == EntryKind::file) {
      m.content = head.reader.content_string();
      m.size = m.content.size();
    }
    out.members.push_back(std::move(m));
  }
  std::sort(out.members.begin(), out.members.end(),
            [](const ChangesMember& a, const ChangesMember& b) { return a.path < b.path; });
  for (std::size_t i = 1; i < out.members.size(); ++i) {
    if (out.members[i - 1].path == out.members[i].path) {
      throw Error("corrupt changes archive: duplicate member " + out.members[i].path);
    }
  }
  return out;
}

/// Reads just the recorded base label of a tree, if the tree carries one.
inline std::optional<std::string> read_tree_label(const fs::path& root) {
  fs::path mf = tree_manifest_path(root);
  std::ifstream in(mf);
  if (!in) return std::nullopt;
  std::string line;
  if (!std::getline(in, line)) return std::nullopt;
  auto fields = apptool::detail::split(line, ' ');
  if (fields.size() != 4 || fields[0] != "APPPOT-MANIFEST/1") return std::nullopt;
  return apptool::detail::percent_decode(fields[3], "manifest label");
}

/// Merges an archive file into `root`, streaming member contents straight
/// from the tar layer. Warns (does not fail) when the archive was diffed
/// against a different base than the tree records.
inline MergeReport merge_changes_file(const fs::path& root, const fs::path& archive_path) {
  detail::ArchiveHead head(archive_path);
  MergeReport report;
  if (auto tree_label = read_tree_label(root)) {
    if (*tree_label != head.base_label) {
      report.warnings.push_back({"", "archive base label '" + head.base_label +
                                         "' does not match tree base label '" + *tree_label +
                                         "'; merging anyway"});
    }
  }
  detail::apply_whiteouts(root, head.whiteouts, report);

  std::vector<std::pair<std::string, std::int64_t>> dirs;
  while (auto h = head.reader.next()) {
    ChangesMember m = detail::member_from_tar_header(*h);
    detail::MemberInfo info{m.path, m.kind, m.mode, m.uid, m.gid, m.mtime_ns, m.link_target};
    detail::ContentProvider content = [&head](const std::function<void(std::string_view)>& sink) {
      head.reader.read_content(sink);
    };
    detail::materialize(root, info, content, report);
    if (m.kind == EntryKind::dir) dirs.emplace_back(m.path, m.mtime_ns);
  }
  detail::restore_dir_times(root, std::move(dirs));
  return report;
}

}  // namespace apptool::snap
