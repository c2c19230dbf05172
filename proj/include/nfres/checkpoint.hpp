#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "nfres/error.hpp"
#include "nfres/manifest.hpp"
#include "nfres/resnet.hpp"

namespace nfres {

// Layout, all integers little-endian:
//   "NFRESCKP" | u32 version | u32 len, manifest | u32 count |
//   count x (u32 len, name | u32 rank | rank x u64 extent | float32 data)
// Batchnorm running statistics follow the parameters as "<layer>#mean" and
// "<layer>#var".
inline constexpr char kCheckpointMagic[8] = {'N', 'F', 'R', 'E', 'S', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_string(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint64_t get_le(std::istream& is, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) throw FormatError("checkpoint: unexpected end of file");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}
inline std::string get_string(std::istream& is) {
  const auto n = static_cast<std::size_t>(get_le(is, 4));
  if (n > (1u << 20)) throw FormatError("checkpoint: implausible string length");
  std::string s(n, '\0');
  if (!is.read(s.data(), static_cast<std::streamsize>(n))) throw FormatError("checkpoint: unexpected end of file");
  return s;
}

template <typename T>
void put_tensor(std::ostream& os, const std::string& name, const Tensor<T>& t) {
  put_string(os, name);
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) put_u64(os, e);
  for (T v : t.data()) put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

}  // namespace detail

template <typename T>
void save_checkpoint(const Network<T>& net, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path.string() + "' for writing");
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_u32(os, kCheckpointVersion);
  detail::put_string(os, arch_manifest(net.arch));
  detail::put_u32(os, static_cast<std::uint32_t>(net.params.size() + 2 * net.buffers.size()));
  for (const auto& [name, p] : net.params) detail::put_tensor(os, name, p.value);
  for (const auto& [name, b] : net.buffers) {
    detail::put_tensor(os, name + "#mean", b.mean);
    detail::put_tensor(os, name + "#var", b.var);
  }
  if (!os.flush()) throw FormatError("write to '" + path.string() + "' failed");
}

/// Restores parameters and running statistics into a network with the same
/// architecture manifest.
template <typename T>
void load_checkpoint(Network<T>& net, const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint '" + path.string() + "'");
  char magic[sizeof(kCheckpointMagic)];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw FormatError("'" + path.string() + "' is not a checkpoint");
  }
  const auto version = detail::get_le(is, 4);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const std::string manifest = detail::get_string(is);
  if (manifest != arch_manifest(net.arch)) {
    throw FormatError("checkpoint architecture '" + manifest + "' does not match '" + arch_manifest(net.arch) + "'");
  }
  const auto count = detail::get_le(is, 4);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = detail::get_string(is);
    const auto rank = detail::get_le(is, 4);
    if (rank < 1 || rank > 4) throw FormatError("checkpoint: bad rank for '" + name + "'");
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(detail::get_le(is, 8));
    validate_shape(shape);
    std::vector<T> values(shape_size(shape));
    for (auto& v : values) v = static_cast<T>(std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(is, 4))));
    Tensor<T> t(shape, std::move(values));
    const auto hash = name.find('#');
    if (hash == std::string::npos) {
      net.params.set_value(name, std::move(t));
      continue;
    }
    auto& stats = net.buffers[name.substr(0, hash)];
    (name.substr(hash + 1) == "mean" ? stats.mean : stats.var) = std::move(t);
  }
}

}  // namespace nfres
