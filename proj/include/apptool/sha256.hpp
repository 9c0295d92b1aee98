#pragma once

#include <openssl/evp.h>

#include <cstdio>
#include <memory>
#include <string>
#include <string_view>

#include "apptool/util.hpp"

namespace apptool {

inline constexpr std::string_view kHashName = "sha256";

/// Incremental SHA-256 over OpenSSL's EVP interface.
class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
      throw Error("sha256: digest init failed");
    }
  }

  void update(const void* data, std::size_t len) {
    if (EVP_DigestUpdate(ctx_.get(), data, len) != 1) {
      throw Error("sha256: digest update failed");
    }
  }

  /// Finalizes and returns the lowercase hex digest.
  std::string hex_digest() {
    unsigned char raw[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), raw, &len) != 1) {
      throw Error("sha256: digest final failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
      out += hex[raw[i] >> 4];
      out += hex[raw[i] & 0xf];
    }
    return out;
  }

  static std::string of_bytes(std::string_view bytes) {
    Sha256 h;
    h.update(bytes.data(), bytes.size());
    return h.hex_digest();
  }

  static std::string of_file(const fs::path& p) {
    std::FILE* f = std::fopen(p.c_str(), "rb");
    if (!f) throw Error("cannot open " + p.string() + " for hashing");
    Sha256 h;
    char buf[1 << 16];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) h.update(buf, n);
    bool bad = std::ferror(f);
    std::fclose(f);
    if (bad) throw Error("read error while hashing " + p.string());
    return h.hex_digest();
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

}  // namespace apptool
