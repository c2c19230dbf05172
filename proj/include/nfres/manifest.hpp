#pragma once

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "nfres/resnet.hpp"

#ifndef NFRES_VERSION
#define NFRES_VERSION "0.1.0"
#endif

namespace nfres {

inline constexpr const char* kVersion = NFRES_VERSION;

/// Shortest decimal that round-trips to the same double.
inline std::string format_real(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string arch_manifest(const ArchDescription& a) {
  return "arch=" + a.arch_name() + " variant=" + std::string(to_string(a.variant)) +
         " init=" + std::string(to_string(a.init.kind)) + " seed=" + std::to_string(a.seed) +
         " classes=" + std::to_string(a.num_classes);
}

/// UTC time as YYYY-MM-DDTHH:MM:SSZ. SOURCE_DATE_EPOCH overrides the clock.
inline std::string utc_timestamp() {
  std::time_t t = std::time(nullptr);
  if (const char* env = std::getenv("SOURCE_DATE_EPOCH")) {
    long long v = 0;
    const char* end = env + std::char_traits<char>::length(env);
    if (std::from_chars(env, end, v).ec == std::errc{}) t = static_cast<std::time_t>(v);
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Header carried as `#` comment lines by every output file.
struct RunManifest {
  std::string command;
  std::vector<std::pair<std::string, std::string>> flags;
  std::uint64_t master_seed = 0;
  std::string version = kVersion;
  std::string timestamp = utc_timestamp();

  std::string flag_line() const {
    std::string s;
    for (const auto& [k, v] : flags) {
      if (!s.empty()) s += ' ';
      s += "--" + k;
      if (!v.empty()) s += ' ' + v;
    }
    return s;
  }

  void write(std::ostream& os) const {
    os << "# nfres " << version << '\n';
    os << "# command: " << command << '\n';
    os << "# flags: " << flag_line() << '\n';
    os << "# seed: " << master_seed << '\n';
    os << "# timestamp: " << timestamp << '\n';
  }
};

}  // namespace nfres
