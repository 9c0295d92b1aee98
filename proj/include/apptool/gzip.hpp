#pragma once

#include <zlib.h>

#include <cstdio>
#include <string>

#include "apptool/util.hpp"

namespace apptool {

/// Streams bytes into a gzip-framed file. Compression settings are fixed so
/// identical input produces identical archive bytes.
class GzipWriter {
 public:
  explicit GzipWriter(const fs::path& path) : path_(path.string()) {
    file_ = std::fopen(path_.c_str(), "wb");
    if (!file_) throw Error("cannot open " + path_ + " for writing");
    stream_.zalloc = nullptr;
    stream_.zfree = nullptr;
    stream_.opaque = nullptr;
    // windowBits 15+16 selects the gzip wrapper (MTIME fixed at 0).
    if (deflateInit2(&stream_, 6, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) != Z_OK) {
      std::fclose(file_);
      file_ = nullptr;
      throw Error("gzip: deflateInit failed");
    }
    open_ = true;
  }

  GzipWriter(const GzipWriter&) = delete;
  GzipWriter& operator=(const GzipWriter&) = delete;

  ~GzipWriter() {
    if (open_) deflateEnd(&stream_);
    if (file_) std::fclose(file_);
  }

  void write(const void* data, std::size_t len) {
    stream_.next_in = static_cast<Bytef*>(const_cast<void*>(data));
    stream_.avail_in = static_cast<uInt>(len);
    pump(Z_NO_FLUSH);
  }

  void write(std::string_view bytes) { write(bytes.data(), bytes.size()); }

  /// Flushes the stream and closes the file. Must be called on success paths.
  void finish() {
    stream_.next_in = nullptr;
    stream_.avail_in = 0;
    pump(Z_FINISH);
    deflateEnd(&stream_);
    open_ = false;
    if (std::fclose(file_) != 0) {
      file_ = nullptr;
      throw Error("write error on " + path_);
    }
    file_ = nullptr;
  }

 private:
  void pump(int flush) {
    char buf[1 << 16];
    do {
      stream_.next_out = reinterpret_cast<Bytef*>(buf);
      stream_.avail_out = sizeof buf;
      int rc = deflate(&stream_, flush);
      if (rc == Z_STREAM_ERROR) throw Error("gzip: deflate failed");
      std::size_t have = sizeof buf - stream_.avail_out;
      if (have > 0 && std::fwrite(buf, 1, have, file_) != have) {
        throw Error("write error on " + path_);
      }
      if (rc == Z_STREAM_END) break;
    } while (stream_.avail_out == 0 || stream_.avail_in > 0);
  }

  std::string path_;
  std::FILE* file_ = nullptr;
  z_stream stream_{};
  bool open_ = false;
};

/// Reads a gzip-framed file as a byte stream.
class GzipReader {
 public:
  explicit GzipReader(const fs::path& path) : path_(path.string()) {
    file_ = std::fopen(path_.c_str(), "rb");
    if (!file_) throw Error("cannot open " + path_ + " for reading");
    stream_.zalloc = nullptr;
    stream_.zfree = nullptr;
    stream_.opaque = nullptr;
    // windowBits 15+32: accept gzip or zlib framing.
    if (inflateInit2(&stream_, 15 + 32) != Z_OK) {
      std::fclose(file_);
      file_ = nullptr;
      throw Error("gzip: inflateInit failed");
    }
    open_ = true;
  }

  GzipReader(const GzipReader&) = delete;
  GzipReader& operator=(const GzipReader&) = delete;

  ~GzipReader() {
    if (open_) inflateEnd(&stream_);
    if (file_) std::fclose(file_);
  }

  /// Reads up to `len` decompressed bytes. Returns 0 at end of stream.
  std::size_t read(void* out, std::size_t len) {
    if (done_) return 0;
    stream_.next_out = static_cast<Bytef*>(out);
    stream_.avail_out = static_cast<uInt>(len);
    while (stream_.avail_out > 0) {
      if (stream_.avail_in == 0) {
        in_len_ = std::fread(in_buf_, 1, sizeof in_buf_, file_);
        if (in_len_ == 0) {
          if (std::ferror(file_)) throw Error("read error on " + path_);
          throw Error("truncated gzip stream in " + path_);
        }
        stream_.next_in = reinterpret_cast<Bytef*>(in_buf_);
        stream_.avail_in = static_cast<uInt>(in_len_);
      }
      int rc = inflate(&stream_, Z_NO_FLUSH);
      if (rc == Z_STREAM_END) {
        done_ = true;
        break;
      }
      if (rc != Z_OK) throw Error("corrupt gzip stream in " + path_);
    }
    return len - stream_.avail_out;
  }

  /// Reads the entire remaining stream.
  std::string read_all() {
    std::string out;
    char buf[1 << 16];
    std::size_t n;
    while ((n = read(buf, sizeof buf)) > 0) out.append(buf, n);
    return out;
  }

 private:
  std::string path_;
  std::FILE* file_ = nullptr;
  z_stream stream_{};
  char in_buf_[1 << 16];
  std::size_t in_len_ = 0;
  bool open_ = false;
  bool done_ = false;
};

}  // namespace apptool
