#pragma once

#include <stdlib.h>

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace apptool {

namespace fs = std::filesystem;

/// Base class for all hard errors raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline constexpr char kHexDigits[] = "0123456789ABCDEF";

inline int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

// Percent-encodes every byte for which `needs_escape` returns true.
// '%' itself is always escaped so decoding is unambiguous.
template <typename Pred>
std::string percent_encode(std::string_view in, Pred needs_escape) {
  std::string out;
  out.reserve(in.size());
  for (unsigned char c : in) {
    if (c == '%' || needs_escape(c)) {
      out += '%';
      out += kHexDigits[c >> 4];
      out += kHexDigits[c & 0xf];
    } else {
      out += static_cast<char>(c);
    }
  }
  return out;
}

inline std::string percent_decode(std::string_view in, std::string_view what) {
  std::string out;
  out.reserve(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (in[i] != '%') {
      out += in[i];
      continue;
    }
    if (i + 2 >= in.size()) {  // need two digits after '%'
      throw Error("malformed percent escape in " + std::string(what));
    }
    int hi = hex_value(in[i + 1]);
    int lo = hex_value(in[i + 2]);
    if (hi < 0 || lo < 0) throw Error("malformed percent escape in " + std::string(what));
    out += static_cast<char>((hi << 4) | lo);
    i += 2;
  }
  return out;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == sep) {
      out.push_back(s.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

}  // namespace detail

/// True if `path` is a normalized tree-relative path: '/'-separated,
/// non-empty, no empty, "." or ".." segments, no leading or trailing '/'.
inline bool is_normalized_rel_path(std::string_view path) {
  if (path.empty() || path.front() == '/' || path.back() == '/') return false;
  for (auto seg : detail::split(path, '/')) {
    if (seg.empty() || seg == "." || seg == "..") return false;
  }
  return true;
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot open " + p.string() + " for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw Error("read error on " + p.string());
  return buf.str();
}

inline void write_file(const fs::path& p, std::string_view bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + p.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write error on " + p.string());
}

/// Scratch location for temporary state. APPTOOL_TMPDIR overrides TMPDIR
/// overrides /tmp (the same variable also redirects the hypervisor's
/// memory backing files, see the host runner).
inline fs::path scratch_dir() {
  if (const char* p = std::getenv("APPTOOL_TMPDIR"); p && *p) return p;
  if (const char* p = std::getenv("TMPDIR"); p && *p) return p;
  return "/tmp";
}

/// Unique temporary directory, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& prefix = "apptool") {
    std::string tmpl = (scratch_dir() / (prefix + "-XXXXXX")).string();
    if (!::mkdtemp(tmpl.data())) throw Error("cannot create temporary directory under " + tmpl);
    path_ = tmpl;
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

/// Quotes `s` for POSIX sh. Returns `s` unchanged when it consists only of
/// characters that need no quoting.
inline std::string shell_quote(std::string_view s) {
  static constexpr std::string_view safe =
      "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"
      "_@%+=:,./-";
  if (!s.empty() && s.find_first_not_of(safe) == std::string_view::npos) {
    return std::string(s);
  }
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') {
      out += "'\\''";
    } else {
      out += c;
    }
  }
  out += "'";
  return out;
}

/// Joins argv tokens into a single sh command line, quoting where needed.
inline std::string shell_join(std::span<const std::string> argv) {
  std::string out;
  for (const auto& a : argv) {
    if (!out.empty()) out += ' ';
    out += shell_quote(a);
  }
  return out;
}

}  // namespace apptool
