#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "nfres/error.hpp"
#include "nfres/rng.hpp"
#include "nfres/tensor.hpp"

namespace nfres {

inline constexpr std::size_t kCifarClasses = 10;
inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarPixels = 3 * kCifarSide * kCifarSide;
inline constexpr std::size_t kCifarRecord = 1 + kCifarPixels;

/// Undecoded records: one label byte, then R, G and B planes, row-major.
struct RawImages {
  std::vector<std::uint8_t> pixels;  // count * 3072
  std::vector<int> labels;
  std::size_t size() const { return labels.size(); }

  void append(const RawImages& o, std::size_t limit) {
    const std::size_t n = std::min(limit, o.size());
    pixels.insert(pixels.end(), o.pixels.begin(), o.pixels.begin() + static_cast<std::ptrdiff_t>(n * kCifarPixels));
    labels.insert(labels.end(), o.labels.begin(), o.labels.begin() + static_cast<std::ptrdiff_t>(n));
  }
};

inline RawImages parse_cifar_bytes(const std::vector<std::uint8_t>& bytes, const std::string& source) {
  if (bytes.size() % kCifarRecord != 0) {
    const std::size_t offset = bytes.size() - bytes.size() % kCifarRecord;
    throw FormatError(source + ": truncated record at byte offset " + std::to_string(offset) + " (file length " +
                      std::to_string(bytes.size()) + " is not a multiple of " + std::to_string(kCifarRecord) + ")");
  }
  RawImages out;
  const std::size_t n = bytes.size() / kCifarRecord;
  out.labels.resize(n);
  out.pixels.resize(n * kCifarPixels);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kCifarRecord;
    if (rec[0] >= kCifarClasses) {
      throw FormatError(source + ": label " + std::to_string(rec[0]) + " out of range at record " +
                        std::to_string(i) + " (byte offset " + std::to_string(i * kCifarRecord) + ")");
    }
    out.labels[i] = rec[0];
    std::copy(rec + 1, rec + kCifarRecord, out.pixels.begin() + static_cast<std::ptrdiff_t>(i * kCifarPixels));
  }
  return out;
}

inline RawImages read_cifar_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("missing CIFAR-10 file '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return parse_cifar_bytes(bytes, path.string());
}

inline void write_cifar_file(const std::filesystem::path& path, const RawImages& raw) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path.string() + "' for writing");
  for (std::size_t i = 0; i < raw.size(); ++i) {
    os.put(static_cast<char>(raw.labels[i]));
    os.write(reinterpret_cast<const char*>(raw.pixels.data() + i * kCifarPixels), kCifarPixels);
  }
  if (!os.flush()) throw FormatError("write to '" + path.string() + "' failed");
}

struct ChannelStats {
  std::array<double, 3> mean{};
  std::array<double, 3> std{};
};

/// Per-channel mean and population deviation of pixels mapped to [0, 1].
inline ChannelStats channel_stats(const RawImages& raw) {
  if (raw.size() == 0) throw InvalidArgument("channel_stats: empty dataset");
  ChannelStats s;
  const std::size_t plane = kCifarSide * kCifarSide;
  const double count = static_cast<double>(raw.size() * plane);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double sum = 0.0;
    for (std::size_t i = 0; i < raw.size(); ++i) {
      const std::uint8_t* p = raw.pixels.data() + i * kCifarPixels + ch * plane;
      for (std::size_t j = 0; j < plane; ++j) sum += p[j] / 255.0;
    }
    const double m = sum / count;
    double q = 0.0;
    for (std::size_t i = 0; i < raw.size(); ++i) {
      const std::uint8_t* p = raw.pixels.data() + i * kCifarPixels + ch * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        const double d = p[j] / 255.0 - m;
        q += d * d;
      }
    }
    const double sd = std::sqrt(q / count);
    if (!(sd > 0.0)) throw DegenerateGroup("channel_stats: channel " + std::to_string(ch) + " is constant");
    s.mean[ch] = m;
    s.std[ch] = sd;
  }
  return s;
}

struct Dataset {
  Tensor<float> images;  // [N, 3, 32, 32]
  std::vector<int> labels;
  std::string split;
  std::size_t size() const { return labels.size(); }
};

inline Dataset make_dataset(const RawImages& raw, const ChannelStats& stats, std::string split) {
  if (raw.size() == 0) throw InvalidArgument("make_dataset: empty " + split + " split");
  Dataset d;
  d.split = std::move(split);
  d.labels = raw.labels;
  d.images = Tensor<float>({raw.size(), 3, kCifarSide, kCifarSide});
  auto out = d.images.mutable_data();
  const std::size_t plane = kCifarSide * kCifarSide;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const std::size_t base = i * kCifarPixels + ch * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        out[base + j] = static_cast<float>((raw.pixels[base + j] / 255.0 - stats.mean[ch]) / stats.std[ch]);
      }
    }
  }
  return d;
}

/// Train and test splits, normalized with statistics of the loaded training
/// records. A limit of 0 keeps every record.
inline std::pair<Dataset, Dataset> load_cifar10(const std::filesystem::path& dir, std::size_t train_limit = 0,
                                                std::size_t test_limit = 0) {
  if (!std::filesystem::is_directory(dir)) throw FormatError("CIFAR-10 directory '" + dir.string() + "' not found");
  for (int b = 1; b <= 5; ++b) {
    const auto p = dir / ("data_batch_" + std::to_string(b) + ".bin");
    if (!std::filesystem::exists(p)) throw FormatError("missing CIFAR-10 file '" + p.string() + "'");
  }
  if (!std::filesystem::exists(dir / "test_batch.bin")) {
    throw FormatError("missing CIFAR-10 file '" + (dir / "test_batch.bin").string() + "'");
  }
  const std::size_t train_cap = train_limit ? train_limit : SIZE_MAX;
  const std::size_t test_cap = test_limit ? test_limit : SIZE_MAX;
  RawImages train, test;
  for (int b = 1; b <= 5 && train.size() < train_cap; ++b) {
    train.append(read_cifar_file(dir / ("data_batch_" + std::to_string(b) + ".bin")), train_cap - train.size());
  }
  test.append(read_cifar_file(dir / "test_batch.bin"), test_cap);
  const ChannelStats stats = channel_stats(train);
  return {make_dataset(train, stats, "train"), make_dataset(test, stats, "test")};
}

/// Class-conditional images: a fixed random template per class plus
/// independent pixel noise, clipped to bytes. Linearly separable in
/// expectation; used where real data is unavailable or unnecessary.
inline RawImages synthetic_cifar(std::size_t count, std::uint64_t seed, double noise = 40.0,
                                 std::size_t classes = kCifarClasses) {
  if (classes < 2 || classes > kCifarClasses) throw InvalidArgument("synthetic_cifar: classes must be in [2, 10]");
  std::vector<std::vector<double>> templates(classes, std::vector<double>(kCifarPixels));
  for (std::size_t k = 0; k < classes; ++k) {
    RngStream t(0x5eed, "synthetic/template/" + std::to_string(k));
    for (auto& v : templates[k]) v = 128.0 + 48.0 * t.gaussian(0.0, 1.0);
  }
  RngStream stream(seed, "synthetic/samples");
  RawImages raw;
  raw.labels.resize(count);
  raw.pixels.resize(count * kCifarPixels);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t k = static_cast<std::size_t>(stream.below(classes));
    raw.labels[i] = static_cast<int>(k);
    for (std::size_t j = 0; j < kCifarPixels; ++j) {
      const double v = std::round(templates[k][j] + stream.gaussian(0.0, noise));
      raw.pixels[i * kCifarPixels + j] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
    }
  }
  return raw;
}

/// Writes a directory laid out like the binary CIFAR-10 distribution.
inline void write_synthetic_cifar_dir(const std::filesystem::path& dir, std::size_t per_batch, std::size_t test_count,
                                      std::uint64_t seed, double noise = 40.0) {
  std::filesystem::create_directories(dir);
  for (int b = 1; b <= 5; ++b) {
    write_cifar_file(dir / ("data_batch_" + std::to_string(b) + ".bin"),
                     synthetic_cifar(per_batch, seed * 16 + static_cast<std::uint64_t>(b), noise));
  }
  write_cifar_file(dir / "test_batch.bin", synthetic_cifar(test_count, seed * 16, noise));
}

// ---------------------------------------------------------------------------
// Augmentation on normalized [N, 3, 32, 32] batches.

template <typename T>
void flip_horizontal(T* image, std::size_t channels, std::size_t side) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t r = 0; r < side; ++r) {
      T* row = image + (c * side + r) * side;
      std::reverse(row, row + side);
    }
  }
}

/// Window at (oy, ox) of the image zero-padded by `pad` on every side;
/// (pad, pad) returns the image unchanged.
template <typename T>
void crop_padded(T* image, std::size_t channels, std::size_t side, std::size_t pad, std::size_t oy, std::size_t ox) {
  if (oy > 2 * pad || ox > 2 * pad) throw InvalidArgument("crop_padded: offset outside the padded canvas");
  std::vector<T> src(image, image + channels * side * side);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t r = 0; r < side; ++r) {
      for (std::size_t q = 0; q < side; ++q) {
        const std::ptrdiff_t sr = static_cast<std::ptrdiff_t>(r + oy) - static_cast<std::ptrdiff_t>(pad);
        const std::ptrdiff_t sq = static_cast<std::ptrdiff_t>(q + ox) - static_cast<std::ptrdiff_t>(pad);
        const bool inside = sr >= 0 && sq >= 0 && sr < static_cast<std::ptrdiff_t>(side) &&
                            sq < static_cast<std::ptrdiff_t>(side);
        image[(c * side + r) * side + q] =
            inside ? src[(c * side + static_cast<std::size_t>(sr)) * side + static_cast<std::size_t>(sq)] : T{0};
      }
    }
  }
}

struct AugmentConfig {
  bool enabled = true;
  double flip_p = 0.5;
  std::size_t pad = 4;
};

/// Random horizontal flip and random crop from the zero-padded canvas,
/// drawn independently per image.
template <typename T>
Tensor<T> augment(const Tensor<T>& batch, RngStream& stream, const AugmentConfig& cfg = {}) {
  if (!cfg.enabled) return batch;
  if (batch.rank() != 4 || batch.dim(2) != batch.dim(3)) throw InvalidArgument("augment: expected [N, C, S, S]");
  Tensor<T> out = batch;
  auto d = out.mutable_data();
  const std::size_t c = batch.dim(1), side = batch.dim(2), per = c * side * side;
  for (std::size_t i = 0; i < batch.dim(0); ++i) {
    T* img = d.data() + i * per;
    if (stream.bernoulli(cfg.flip_p)) flip_horizontal(img, c, side);
    const std::size_t oy = static_cast<std::size_t>(stream.below(2 * cfg.pad + 1));
    const std::size_t ox = static_cast<std::size_t>(stream.below(2 * cfg.pad + 1));
    if (oy != cfg.pad || ox != cfg.pad) crop_padded(img, c, side, cfg.pad, oy, ox);
  }
  return out;
}

/// Rows `indices` of `images` stacked into a batch.
template <typename T>
Tensor<T> gather_batch(const Tensor<T>& images, const std::vector<std::size_t>& indices, std::size_t first,
                       std::size_t count) {
  const std::size_t per = images.size() / images.dim(0);
  Tensor<T> out({count, images.dim(1), images.dim(2), images.dim(3)});
  auto d = out.mutable_data();
  for (std::size_t i = 0; i < count; ++i) {
    const T* src = images.data().data() + indices[first + i] * per;
    std::copy(src, src + per, d.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

}  // namespace nfres
