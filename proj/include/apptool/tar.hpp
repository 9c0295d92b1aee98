#pragma once

// Minimal POSIX ustar writer/reader, enough for the changes-archive
// container: regular files, directories and symlinks, numeric owners,
// long paths via the ustar prefix field. The on-disk layout is canonical:
// identical input always yields identical bytes.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <functional>
#include <optional>
#include <string>
#include <string_view>

#include "apptool/util.hpp"

namespace apptool::tar {

inline constexpr std::size_t kBlockSize = 512;

struct Header {
  std::string name;  // '/'-separated; directory names end with '/'
  std::uint32_t mode = 0644;
  std::uint32_t uid = 0;
  std::uint32_t gid = 0;
  std::uint64_t size = 0;
  std::int64_t mtime = 0;  // seconds since epoch
  char typeflag = '0';     // '0' file, '5' dir, '2' symlink
  std::string linkname;
};

namespace detail {

inline void put_octal(char* field, std::size_t width, std::uint64_t value) {
  // width-1 octal digits, zero padded, NUL terminated.
  field[width - 1] = '\0';
  for (std::size_t i = width - 1; i-- > 0;) {
    field[i] = static_cast<char>('0' + (value & 7));
    value >>= 3;
  }
  if (value != 0) throw Error("tar: field value too large for octal encoding");
}

inline std::uint64_t get_octal(const char* field, std::size_t width) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < width; ++i) {
    char c = field[i];
    if (c == '\0' || c == ' ') break;
    if (c < '0' || c > '7') throw Error("tar: malformed octal field");
    v = (v << 3) | static_cast<std::uint64_t>(c - '0');
  }
  return v;
}

}  // namespace detail

using Sink = std::function<void(std::string_view)>;
using Source = std::function<std::size_t(char*, std::size_t)>;

class Writer {
 public:
  explicit Writer(Sink sink) : sink_(std::move(sink)) {}

  /// Adds an entry whose content is fully in memory.
  void add(const Header& h, std::string_view content) {
    if (h.typeflag == '0' && content.size() != h.size) {
      throw Error("tar: content size does not match header for " + h.name);
    }
    write_header(h);
    write_padded(content);
  }

  /// Adds a file entry streaming exactly h.size bytes from `src`.
  void add_stream(const Header& h, const Source& src) {
    write_header(h);
    char buf[1 << 16];
    std::uint64_t left = h.size;
    while (left > 0) {
      std::size_t want = static_cast<std::size_t>(std::min<std::uint64_t>(left, sizeof buf));
      std::size_t got = src(buf, want);
      if (got == 0) throw Error("tar: content source ended early for " + h.name);
      sink_(std::string_view(buf, got));
      left -= got;
    }
    pad(h.size);
  }

  /// Writes the end-of-archive marker. Must be called exactly once.
  void finish() {
    char zeros[kBlockSize * 2] = {};
    sink_(std::string_view(zeros, sizeof zeros));
  }

 private:
  void write_header(const Header& h) {
    char block[kBlockSize] = {};
    std::string name = h.name;
    std::string prefix;
    if (name.size() > 100) {
      // Split at a '/' so that name fits 100 bytes and prefix fits 155.
      std::size_t cut = std::string::npos;
      for (std::size_t i = 0; i < name.size(); ++i) {
        if (name[i] == '/' && name.size() - i - 1 <= 100 && i <= 155) cut = i;
      }
      if (cut == std::string::npos) throw Error("tar: path too long: " + h.name);
      prefix = name.substr(0, cut);
      name = name.substr(cut + 1);
    }
    if (h.linkname.size() > 100) throw Error("tar: link target too long: " + h.linkname);

    std::memcpy(block, name.data(), name.size());
    detail::put_octal(block + 100, 8, h.mode & 07777u);
    detail::put_octal(block + 108, 8, h.uid);
    detail::put_octal(block + 116, 8, h.gid);
    detail::put_octal(block + 124, 12, h.typeflag == '0' ? h.size : 0);
    detail::put_octal(block + 136, 12, h.mtime < 0 ? 0 : static_cast<std::uint64_t>(h.mtime));
    std::memset(block + 148, ' ', 8);  // checksum computed over spaces
    block[156] = h.typeflag;
    std::memcpy(block + 157, h.linkname.data(), h.linkname.size());
    std::memcpy(block + 257, "ustar", 6);
    block[263] = '0';
    block[264] = '0';
    std::memcpy(block + 345, prefix.data(), prefix.size());

    unsigned sum = 0;
    for (unsigned char c : block) sum += c;
    detail::put_octal(block + 148, 7, sum);
    block[155] = ' ';

    sink_(std::string_view(block, kBlockSize));
  }

  void write_padded(std::string_view content) {
    if (!content.empty()) sink_(content);
    pad(content.size());
  }

  void pad(std::uint64_t size) {
    std::size_t rem = size % kBlockSize;
    if (rem != 0) {
      char zeros[kBlockSize] = {};
      sink_(std::string_view(zeros, kBlockSize - rem));
    }
  }

  Sink sink_;
};

class Reader {
 public:
  explicit Reader(Source src) : src_(std::move(src)) {}

  /// Returns the next entry header, or nullopt at end of archive. The
  /// caller must consume the content (content_string/skip_content) before
  /// calling next() again.
  std::optional<Header> next() {
    if (pending_ > 0) skip_content();
    char block[kBlockSize];
    if (!read_block(block)) return std::nullopt;
    if (is_zero(block)) {
      // End marker: a second zero block normally follows; tolerate EOF.
      read_block(block);
      return std::nullopt;
    }
    if (std::memcmp(block + 257, "ustar", 5) != 0) {
      throw Error("tar: missing ustar magic");
    }
    unsigned stored = static_cast<unsigned>(detail::get_octal(block + 148, 8));
    unsigned sum = 0;
    for (std::size_t i = 0; i < kBlockSize; ++i) {
      sum += (i >= 148 && i < 156) ? ' ' : static_cast<unsigned char>(block[i]);
    }
    if (sum != stored) throw Error("tar: header checksum mismatch");

    Header h;
    h.name.assign(block, strnlen(block, 100));
    char prefix[156] = {};
    std::memcpy(prefix, block + 345, 155);
    if (prefix[0] != '\0') h.name = std::string(prefix) + "/" + h.name;
    h.mode = static_cast<std::uint32_t>(detail::get_octal(block + 100, 8)) & 07777u;
    h.uid = static_cast<std::uint32_t>(detail::get_octal(block + 108, 8));
    h.gid = static_cast<std::uint32_t>(detail::get_octal(block + 116, 8));
    h.size = detail::get_octal(block + 124, 12);
    h.mtime = static_cast<std::int64_t>(detail::get_octal(block + 136, 12));
    h.typeflag = block[156] == '\0' ? '0' : block[156];
    h.linkname.assign(block + 157, strnlen(block + 157, 100));
    pending_ = h.typeflag == '0' ? h.size : 0;
    return h;
  }

  /// Streams the current entry's content into `cb`.
  void read_content(const std::function<void(std::string_view)>& cb) {
    char buf[1 << 16];
    std::uint64_t left = pending_;
    while (left > 0) {
      std::size_t want = static_cast<std::size_t>(std::min<std::uint64_t>(left, sizeof buf));
      fill(buf, want);
      cb(std::string_view(buf, want));
      left -= want;
    }
    skip_padding(pending_);
    pending_ = 0;
  }

  std::string content_string() {
    std::string out;
    out.reserve(static_cast<std::size_t>(pending_));
    read_content([&](std::string_view chunk) { out.append(chunk); });
    return out;
  }

  void skip_content() {
    read_content([](std::string_view) {});
  }

 private:
  bool read_block(char* block) {
    std::size_t got = 0;
    while (got < kBlockSize) {
      std::size_t n = src_(block + got, kBlockSize - got);
      if (n == 0) {
        if (got == 0) return false;
        throw Error("tar: truncated archive");
      }
      got += n;
    }
    return true;
  }

  void fill(char* out, std::size_t want) {
    std::size_t got = 0;
    while (got < want) {
      std::size_t n = src_(out + got, want - got);
      if (n == 0) throw Error("tar: truncated archive");
      got += n;
    }
  }

  void skip_padding(std::uint64_t size) {
    std::size_t rem = static_cast<std::size_t>(size % kBlockSize);
    if (rem != 0) {
      char buf[kBlockSize];
      fill(buf, kBlockSize - rem);
    }
  }

  static bool is_zero(const char* block) {
    for (std::size_t i = 0; i < kBlockSize; ++i) {
      if (block[i] != '\0') return false;
    }
    return true;
  }

  Source src_;
  std::uint64_t pending_ = 0;
};

}  // namespace apptool::tar
