#pragma once

// Independent tree oracle used by the test suites. Walks directories with
// raw POSIX opendir/readdir + lstat and compares trees byte by byte. Kept
// deliberately separate from the library's own tree-walking code so the two
// can check each other.

#include <dirent.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace oracle {

enum class Kind { file, dir, symlink, other };

struct Entry {
  Kind kind = Kind::other;
  unsigned mode = 0;  // permission bits
  long long size = 0;
  unsigned uid = 0;
  unsigned gid = 0;
  std::string target;  // symlink
};

using Tree = std::map<std::string, Entry>;

inline std::string read_link(const std::string& p) {
  char buf[4096];
  ssize_t n = ::readlink(p.c_str(), buf, sizeof buf);
  if (n < 0) throw std::runtime_error("oracle: readlink failed on " + p);
  return std::string(buf, static_cast<size_t>(n));
}

inline void walk_into(const std::string& dir, const std::string& rel, Tree& out) {
  DIR* d = ::opendir(dir.c_str());
  if (!d) throw std::runtime_error("oracle: opendir failed on " + dir);
  std::vector<std::string> names;
  while (dirent* e = ::readdir(d)) {
    if (std::strcmp(e->d_name, ".") == 0 || std::strcmp(e->d_name, "..") == 0) continue;
    names.emplace_back(e->d_name);
  }
  ::closedir(d);
  for (const auto& name : names) {
    std::string full = dir + "/" + name;
    std::string r = rel.empty() ? name : rel + "/" + name;
    struct stat st{};
    if (::lstat(full.c_str(), &st) != 0) throw std::runtime_error("oracle: lstat failed on " + full);
    Entry ent;
    ent.mode = st.st_mode & 07777u;
    ent.uid = st.st_uid;
    ent.gid = st.st_gid;
    if (S_ISREG(st.st_mode)) {
      ent.kind = Kind::file;
      ent.size = st.st_size;
    } else if (S_ISDIR(st.st_mode)) {
      ent.kind = Kind::dir;
    } else if (S_ISLNK(st.st_mode)) {
      ent.kind = Kind::symlink;
      ent.target = read_link(full);
    } else {
      ent.kind = Kind::other;
    }
    out.emplace(r, ent);
    if (ent.kind == Kind::dir) walk_into(full, r, out);
  }
}

inline Tree walk(const std::string& root) {
  Tree t;
  walk_into(root, "", t);
  return t;
}

inline std::string slurp(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("oracle: cannot open " + p);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Recursive byte-level comparison: same paths, kinds, permission bits,
// symlink targets and file contents. Returns a human-readable description
// of the first difference, or "" when the trees are equal.
inline std::string diff_trees(const std::string& a, const std::string& b) {
  Tree ta = walk(a);
  Tree tb = walk(b);
  for (const auto& [path, ea] : ta) {
    auto it = tb.find(path);
    if (it == tb.end()) return "only in left tree: " + path;
    const Entry& eb = it->second;
    if (ea.kind != eb.kind) return "kind differs: " + path;
    if (ea.mode != eb.mode) return "mode differs: " + path;
    if (ea.kind == Kind::symlink && ea.target != eb.target) return "target differs: " + path;
    if (ea.kind == Kind::file) {
      if (ea.size != eb.size) return "size differs: " + path;
      if (slurp(a + "/" + path) != slurp(b + "/" + path)) return "content differs: " + path;
    }
  }
  for (const auto& [path, eb] : tb) {
    if (!ta.count(path)) return "only in right tree: " + path;
  }
  return "";
}

inline bool trees_equal(const std::string& a, const std::string& b) {
  return diff_trees(a, b).empty();
}

}  // namespace oracle
