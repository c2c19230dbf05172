#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "nfres/error.hpp"
#include "nfres/layers.hpp"
#include "nfres/manifest.hpp"
#include "nfres/resnet.hpp"
#include "nfres/rng.hpp"
#include "nfres/tensor.hpp"

namespace nfres {

enum class BackwardMode { inject, loss };

inline std::string_view to_string(BackwardMode m) { return m == BackwardMode::inject ? "inject" : "loss"; }

inline BackwardMode parse_backward_mode(std::string_view s) {
  if (s == "inject") return BackwardMode::inject;
  if (s == "loss") return BackwardMode::loss;
  throw InvalidArgument("unknown backward mode '" + std::string(s) + "'");
}

struct SppRecord {
  std::size_t block_index = 0;
  std::size_t stage = 0;
  double forward_var = 0.0;
  double backward_var = 0.0;
  // Mean over channels of the per-channel variance (batch and spatial pooled).
  double forward_channel_var = 0.0;
  double backward_channel_var = 0.0;
};

struct SppSeries {
  std::vector<SppRecord> records;
  std::string manifest;
  std::size_t batch_size = 0;
  std::uint64_t seed = 0;
  BackwardMode mode = BackwardMode::inject;

  std::vector<double> forward() const { return column(&SppRecord::forward_var); }
  std::vector<double> backward() const { return column(&SppRecord::backward_var); }
  std::vector<double> forward_channel() const { return column(&SppRecord::forward_channel_var); }
  std::vector<double> backward_channel() const { return column(&SppRecord::backward_channel_var); }
  std::vector<std::size_t> stages() const {
    std::vector<std::size_t> s;
    for (const auto& r : records) s.push_back(r.stage);
    return s;
  }

 private:
  std::vector<double> column(double SppRecord::*field) const {
    std::vector<double> v;
    v.reserve(records.size());
    for (const auto& r : records) v.push_back(r.*field);
    return v;
  }
};

struct SppConfig {
  ArchDescription arch;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;  // data seed: input batch, injected gradient, labels
  BackwardMode mode = BackwardMode::inject;
};

/// Pooled variance over all elements, and the mean of per-channel variances.
template <typename T>
std::pair<double, double> spp_variances(const Tensor<T>& t) {
  const double pooled = population_moments(t.data()).second;
  const std::size_t n = t.dim(0), c = t.dim(1), hw = t.dim(2) * t.dim(3);
  double acc = 0.0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0, ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const T* p = t.data().data() + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) s += static_cast<double>(p[j]);
    }
    const double m = s / static_cast<double>(n * hw);
    for (std::size_t i = 0; i < n; ++i) {
      const T* p = t.data().data() + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        const double d = static_cast<double>(p[j]) - m;
        ss += d * d;
      }
    }
    acc += ss / static_cast<double>(n * hw);
  }
  return {pooled, acc / static_cast<double>(c)};
}

template <typename T>
Tensor<T> spp_input(std::size_t batch, std::uint64_t seed) {
  if (batch < 2) throw InvalidArgument("spp batch must be >= 2");
  RngStream stream(seed, "spp/input");
  return gaussian_sample<T>({batch, kInputChannels, kInputResolution, kInputResolution}, 0.0, 1.0, stream);
}

/// Forward sweep on `x`; fills records[].forward_*. The cache is kept for
/// the backward sweep.
template <typename T>
void spp_forward(Network<T>& net, const Tensor<T>& x, NetworkCache<T>& cache, SppSeries& series,
                 Tensor<T>* features = nullptr) {
  series.records.assign(net.blocks.size(), SppRecord{});
  Tensor<T> out = net.forward_features(x, PassMode{BnMode::train, false}, cache, [&](std::size_t idx, const Tensor<T>& y) {
    auto [pooled, chan] = spp_variances(y);
    auto& r = series.records[idx - 1];
    r.block_index = idx;
    r.stage = net.blocks[idx - 1].stage;
    r.forward_var = pooled;
    r.forward_channel_var = chan;
  });
  if (features) *features = std::move(out);
}

/// Backward sweep from the last forward; fills records[].backward_*.
template <typename T>
void spp_backward(Network<T>& net, NetworkCache<T>& cache, const Tensor<T>& features, BackwardMode mode,
                  std::uint64_t seed, SppSeries& series) {
  Tensor<T> dfeat;
  if (mode == BackwardMode::inject) {
    RngStream stream(seed, "spp/gradient");
    dfeat = gaussian_sample<T>(features.shape(), 0.0, 1.0, stream);
  } else {
    Tensor<T> logits = net.forward_head(features, PassMode{BnMode::train, false}, cache);
    RngStream stream(seed, "spp/labels");
    std::vector<int> labels(logits.dim(0));
    for (auto& l : labels) l = static_cast<int>(stream.below(net.arch.num_classes));
    auto xent = softmax_xent(logits, std::span<const int>(labels));
    dfeat = net.backward_head(cache, xent.dlogits, false);
  }
  net.backward_features(cache, dfeat, false, [&](std::size_t idx, const Tensor<T>& g) {
    auto [pooled, chan] = spp_variances(g);
    auto& r = series.records[idx - 1];
    r.backward_var = pooled;
    r.backward_channel_var = chan;
  });
}

template <typename T>
SppSeries spp_run(Network<T>& net, std::size_t batch_size, std::uint64_t seed, BackwardMode mode) {
  SppSeries series;
  series.manifest = arch_manifest(net.arch);
  series.batch_size = batch_size;
  series.seed = seed;
  series.mode = mode;
  NetworkCache<T> cache;
  Tensor<T> features;
  {
    Tensor<T> x = spp_input<T>(batch_size, seed);
    spp_forward(net, x, cache, series, &features);
  }
  spp_backward(net, cache, features, mode, seed, series);
  for (const auto& r : series.records) {
    if (!(r.forward_var > 0.0 && std::isfinite(r.forward_var) && r.backward_var > 0.0 &&
          std::isfinite(r.backward_var))) {
      throw NonFinite("spp_run: block " + std::to_string(r.block_index) + " has a degenerate variance");
    }
  }
  return series;
}

template <typename T = float>
SppSeries spp_run(const SppConfig& config) {
  Network<T> net = build_resnet<T>(config.arch);
  return spp_run(net, config.batch_size, config.seed, config.mode);
}

inline void spp_write_csv(const SppSeries& s, std::ostream& os, const RunManifest* run = nullptr) {
  if (run) run->write(os);
  os << "# " << s.manifest << " batch=" << s.batch_size << " data_seed=" << s.seed
     << " backward=" << to_string(s.mode) << '\n';
  os << "block_index,stage,forward_var,backward_var,forward_channel_var,backward_channel_var\n";
  for (const auto& r : s.records) {
    os << r.block_index << ',' << r.stage << ',' << format_real(r.forward_var) << ','
       << format_real(r.backward_var) << ',' << format_real(r.forward_channel_var) << ','
       << format_real(r.backward_channel_var) << '\n';
  }
}

inline std::string spp_csv_string(const SppSeries& s, const RunManifest* run = nullptr) {
  std::ostringstream os;
  spp_write_csv(s, os, run);
  return os.str();
}

inline void spp_to_csv(const SppSeries& s, const std::string& path, const RunManifest* run = nullptr) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  spp_write_csv(s, os, run);
  if (!os.flush()) throw FormatError("write to '" + path + "' failed");
}

// ---------------------------------------------------------------------------
// Regime analysis.

struct SppThresholds {
  double flat_ratio = 2.0;          // max/min of a preserved series
  double explode_factor = 100.0;    // first-to-last block ratio of a runaway series
  double band_low = 0.5;            // forward band
  double band_high = 2.0;
  double flat_slope = std::numbers::ln2 / 8.0;  // per block, log scale
  double explode_slope = 0.1823215567939546;    // ln 1.2 per block
  double bn_factor = 4.0;
};

inline double max_min_ratio(const std::vector<double>& v) {
  if (v.empty()) throw InvalidArgument("max_min_ratio: empty series");
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  return *hi / *lo;
}

inline bool within_band(const std::vector<double>& v, double lo, double hi) {
  return std::all_of(v.begin(), v.end(), [&](double x) { return x >= lo && x <= hi; });
}

/// Least-squares slope of log(v) against block index with a separate
/// intercept per stage, so the step changes at transitions do not count.
/// Stages with a single block contribute nothing.
inline double stage_slope(const std::vector<double>& v, const std::vector<std::size_t>& stage) {
  if (v.size() != stage.size()) throw InvalidArgument("stage_slope: length mismatch");
  double sxy = 0.0, sxx = 0.0;
  std::size_t i = 0;
  while (i < v.size()) {
    std::size_t j = i;
    while (j < v.size() && stage[j] == stage[i]) ++j;
    const double n = static_cast<double>(j - i);
    double mx = 0.0, my = 0.0;
    for (std::size_t k = i; k < j; ++k) {
      mx += static_cast<double>(k);
      my += std::log(v[k]);
    }
    mx /= n;
    my /= n;
    for (std::size_t k = i; k < j; ++k) {
      const double dx = static_cast<double>(k) - mx;
      sxy += dx * (std::log(v[k]) - my);
      sxx += dx * dx;
    }
    i = j;
  }
  if (sxx == 0.0) throw InvalidArgument("stage_slope: no stage has two blocks");
  return sxy / sxx;
}

/// Largest max/min ratio within any one stage.
inline double worst_stage_ratio(const std::vector<double>& v, const std::vector<std::size_t>& stage) {
  double worst = 1.0;
  std::size_t i = 0;
  while (i < v.size()) {
    std::size_t j = i;
    while (j < v.size() && stage[j] == stage[i]) ++j;
    worst = std::max(worst, max_min_ratio(std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(i),
                                                              v.begin() + static_cast<std::ptrdiff_t>(j))));
    i = j;
  }
  return worst;
}

inline std::vector<double> stage_medians(const std::vector<double>& v, const std::vector<std::size_t>& stage) {
  std::vector<double> out;
  std::size_t i = 0;
  while (i < v.size()) {
    std::size_t j = i;
    while (j < v.size() && stage[j] == stage[i]) ++j;
    std::vector<double> s(v.begin() + static_cast<std::ptrdiff_t>(i), v.begin() + static_cast<std::ptrdiff_t>(j));
    std::sort(s.begin(), s.end());
    const std::size_t m = s.size();
    out.push_back(m % 2 ? s[m / 2] : 0.5 * (s[m / 2 - 1] + s[m / 2]));
    i = j;
  }
  return out;
}

/// Element-wise geometric mean of several runs of the same network.
inline SppSeries geometric_mean(const std::vector<SppSeries>& runs) {
  if (runs.empty()) throw InvalidArgument("geometric_mean: no runs");
  SppSeries out = runs.front();
  for (std::size_t b = 0; b < out.records.size(); ++b) {
    double f = 0.0, g = 0.0, fc = 0.0, gc = 0.0;
    for (const auto& r : runs) {
      if (r.records.size() != out.records.size()) throw InvalidArgument("geometric_mean: run lengths differ");
      f += std::log(r.records[b].forward_var);
      g += std::log(r.records[b].backward_var);
      fc += std::log(r.records[b].forward_channel_var);
      gc += std::log(r.records[b].backward_channel_var);
    }
    const double n = static_cast<double>(runs.size());
    out.records[b].forward_var = std::exp(f / n);
    out.records[b].backward_var = std::exp(g / n);
    out.records[b].forward_channel_var = std::exp(fc / n);
    out.records[b].backward_channel_var = std::exp(gc / n);
  }
  return out;
}

}  // namespace nfres
