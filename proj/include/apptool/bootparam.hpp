#pragma once

// Kernel boot command-line codec: the one-way host -> guest channel. The
// host launcher appends `apppot.*` key=value tokens to the kernel command
// line; the guest init program picks them back out. Values are
// percent-encoded so they survive the kernel's whitespace tokenization;
// everything else on the line passes through untouched.

#include <algorithm>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "apptool/util.hpp"

namespace apptool::bootparam {

inline constexpr std::string_view kKeyPrefix = "apppot.";

// Registry of reserved keys (versioned with the toolkit).
namespace keys {
inline constexpr std::string_view jobcmd = "apppot.jobcmd";
inline constexpr std::string_view changes = "apppot.changes";
inline constexpr std::string_view uid = "apppot.uid";
inline constexpr std::string_view gid = "apppot.gid";
inline constexpr std::string_view workdir = "apppot.workdir";
inline constexpr std::string_view tag = "apppot.tag";
inline constexpr std::string_view mpi = "apppot.mpi";  // reserved for multi-instance runs; rejected by init
}  // namespace keys

struct BootParams {
  // apppot.* key -> value, in insertion order; keys unique.
  std::vector<std::pair<std::string, std::string>> pairs;
  // Tokens without the apppot. prefix (hypervisor-native arguments), in order.
  std::vector<std::string> passthrough;

  friend bool operator==(const BootParams&, const BootParams&) = default;

  std::optional<std::string> get(std::string_view key) const {
    for (const auto& [k, v] : pairs) {
      if (k == key) return v;
    }
    return std::nullopt;
  }

  void set(std::string_view key, std::string_view value) {
    for (auto& [k, v] : pairs) {
      if (k == key) {
        v = value;
        return;
      }
    }
    pairs.emplace_back(std::string(key), std::string(value));
  }
};

/// True for keys of the form apppot.[a-z0-9_.]+
inline bool valid_key(std::string_view key) {
  if (key.size() <= kKeyPrefix.size() || key.substr(0, kKeyPrefix.size()) != kKeyPrefix) {
    return false;
  }
  auto tail = key.substr(kKeyPrefix.size());
  return std::all_of(tail.begin(), tail.end(), [](unsigned char c) {
    return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_' || c == '.';
  });
}

namespace detail {

inline bool is_cmdline_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

// Escape set for values: whitespace and control bytes (they would break
// tokenization), '=' (the key/value separator), '%' and non-ASCII.
inline bool value_needs_escape(unsigned char c) {
  return c <= 0x20 || c == 0x7f || c >= 0x80 || c == '=' || c == '%';
}

}  // namespace detail

/// Renders params as a kernel command line: `key=value` tokens first (values
/// percent-encoded), then passthrough tokens verbatim, single-space separated.
inline std::string encode(const BootParams& params) {
  std::string out;
  std::vector<std::string_view> seen;
  for (const auto& [key, value] : params.pairs) {
    if (!valid_key(key)) throw Error("invalid boot parameter key: " + key);
    if (std::find(seen.begin(), seen.end(), std::string_view(key)) != seen.end()) {
      throw Error("duplicate boot parameter key: " + key);
    }
    seen.push_back(key);
    if (!out.empty()) out += ' ';
    out += key;
    out += '=';
    out += apptool::detail::percent_encode(value, detail::value_needs_escape);
  }
  for (const auto& tok : params.passthrough) {
    if (tok.empty()) throw Error("empty passthrough boot token");
    for (unsigned char c : tok) {
      if (detail::is_cmdline_space(c) || c < 0x21 || c == 0x7f) {
        throw Error("passthrough boot token contains whitespace or control bytes: " + tok);
      }
    }
    if (!out.empty()) out += ' ';
    out += tok;
  }
  return out;
}

struct Decoded {
  BootParams params;
  std::vector<std::string> warnings;
};

/// Parses a kernel command line. Tokens are split on runs of whitespace;
/// an `apppot.*=...` token with a well-formed key becomes a pair (value
/// percent-decoded), everything else is kept as passthrough. On duplicate
/// keys the last occurrence wins and a warning records the dropped one.
inline Decoded decode(std::string_view cmdline) {
  Decoded out;
  std::size_t i = 0;
  while (i < cmdline.size()) {
    while (i < cmdline.size() && detail::is_cmdline_space(cmdline[i])) ++i;
    std::size_t start = i;
    while (i < cmdline.size() && !detail::is_cmdline_space(cmdline[i])) ++i;
    if (i == start) break;
    std::string_view token = cmdline.substr(start, i - start);

    auto eq = token.find('=');
    if (token.substr(0, kKeyPrefix.size()) == kKeyPrefix && eq != std::string_view::npos &&
        valid_key(token.substr(0, eq))) {
      std::string key(token.substr(0, eq));
      std::string value = apptool::detail::percent_decode(
          token.substr(eq + 1), "boot token '" + std::string(token) + "'");
      auto dup = std::find_if(out.params.pairs.begin(), out.params.pairs.end(),
                              [&](const auto& kv) { return kv.first == key; });
      if (dup != out.params.pairs.end()) {
        out.warnings.push_back("duplicate boot parameter '" + key +
                               "'; earlier value dropped");
        out.params.pairs.erase(dup);
      }
      out.params.pairs.emplace_back(std::move(key), std::move(value));
    } else {
      out.params.passthrough.emplace_back(token);
    }
  }
  return out;
}

}  // namespace apptool::bootparam
