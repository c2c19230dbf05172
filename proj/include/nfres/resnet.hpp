#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "nfres/error.hpp"
#include "nfres/init.hpp"
#include "nfres/layers.hpp"
#include "nfres/params.hpp"
#include "nfres/tensor.hpp"

namespace nfres {

/// Residual summation variants of x_l = c * (h(x_{l-1}) + f_l(x_{l-1})).
enum class Variant { standard, batchnorm, id_short, learn_scalar, conv_short };
enum class BlockKind { basic, bottleneck };

inline constexpr Variant kAllVariants[] = {Variant::standard, Variant::batchnorm, Variant::id_short,
                                           Variant::learn_scalar, Variant::conv_short};

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::standard: return "standard";
    case Variant::batchnorm: return "batchnorm";
    case Variant::id_short: return "idshort";
    case Variant::learn_scalar: return "learnscalar";
    case Variant::conv_short: return "convshort";
  }
  return "?";
}

inline Variant parse_variant(std::string_view name) {
  for (Variant v : kAllVariants) {
    if (to_string(v) == name) return v;
  }
  throw InvalidArgument("unknown variant '" + std::string(name) + "'");
}

/// True for the three variance-preserving variants (c = sqrt(0.5)).
inline bool is_scaled(Variant v) {
  return v == Variant::id_short || v == Variant::learn_scalar || v == Variant::conv_short;
}

struct ResidualBlockSpec {
  Variant variant = Variant::id_short;
  BlockKind kind = BlockKind::basic;
  std::size_t in_channels = 0;
  std::size_t mid_channels = 0;
  std::size_t out_channels = 0;
  std::size_t stride = 1;
  std::size_t stage = 1;  // 1-based
  std::size_t index = 1;  // 1-based position among all blocks, from the input
  std::string name;
  double c_squared = 1.0;
  bool conv_skip = false;
  bool learnable_alpha = false;
  bool has_bn = false;

  double c() const { return std::sqrt(c_squared); }
  bool changes_geometry() const { return stride != 1 || in_channels != out_channels; }
  std::size_t conv_count() const { return kind == BlockKind::basic ? 2 : 3; }

  /// Shape of the i-th branch convolution and its stride.
  Shape conv_shape(std::size_t i) const {
    if (kind == BlockKind::basic) {
      return i == 0 ? Shape{out_channels, in_channels, 3, 3} : Shape{out_channels, out_channels, 3, 3};
    }
    if (i == 0) return {mid_channels, in_channels, 1, 1};
    if (i == 1) return {mid_channels, mid_channels, 3, 3};
    return {out_channels, mid_channels, 1, 1};
  }
  std::size_t conv_stride(std::size_t i) const {
    return (kind == BlockKind::basic ? i == 0 : i == 1) ? stride : 1;
  }
  Shape skip_shape() const { return {out_channels, in_channels, 1, 1}; }
  /// Channels entering the i-th branch convolution (batchnorm width).
  std::size_t conv_input_channels(std::size_t i) const { return conv_shape(i)[1]; }

  std::string conv_name(std::size_t i) const { return name + ".conv" + std::to_string(i + 1) + ".weight"; }
  std::string bn_name(std::size_t i) const { return name + ".bn" + std::to_string(i + 1); }
  std::string skip_name() const { return name + ".skip.weight"; }
  std::string alpha_name() const { return name + ".alpha"; }
};

/// Fills in the variant-dependent fields. The skip path becomes a strided
/// 1x1 convolution whenever resolution or width changes, for every variant.
inline ResidualBlockSpec make_block_spec(Variant variant, BlockKind kind, std::size_t in, std::size_t mid,
                                         std::size_t out, std::size_t stride, std::size_t stage, std::size_t index,
                                         std::size_t index_in_stage) {
  if (in == 0 || mid == 0 || out == 0) throw InvalidArgument("block channels must be positive");
  if (stride != 1 && stride != 2) throw InvalidArgument("block stride must be 1 or 2");
  ResidualBlockSpec s;
  s.variant = variant;
  s.kind = kind;
  s.in_channels = in;
  s.mid_channels = mid;
  s.out_channels = out;
  s.stride = stride;
  s.stage = stage;
  s.index = index;
  s.name = "stage" + std::to_string(stage) + ".block" + std::to_string(index_in_stage);
  s.c_squared = is_scaled(variant) ? 0.5 : 1.0;
  s.has_bn = variant == Variant::batchnorm;
  s.learnable_alpha = variant == Variant::learn_scalar;
  s.conv_skip = s.changes_geometry() || variant == Variant::conv_short;
  return s;
}

inline std::vector<ParamSpec> block_param_specs(const ResidualBlockSpec& s) {
  std::vector<ParamSpec> specs;
  for (std::size_t i = 0; i < s.conv_count(); ++i) {
    if (s.has_bn) {
      const std::size_t ch = s.conv_input_channels(i);
      specs.push_back({s.bn_name(i) + ".gamma", {ch}, ParamRole::bn_gamma});
      specs.push_back({s.bn_name(i) + ".beta", {ch}, ParamRole::bn_beta});
    }
    specs.push_back({s.conv_name(i), s.conv_shape(i), ParamRole::conv_weight});
  }
  if (s.conv_skip) specs.push_back({s.skip_name(), s.skip_shape(), ParamRole::conv_weight});
  if (s.learnable_alpha) specs.push_back({s.alpha_name(), {1}, ParamRole::alpha});
  return specs;
}

/// Batchnorm running statistics, keyed by layer name. Not learnable.
template <typename T>
using BnBuffers = std::map<std::string, BnRunningStats<T>>;

struct PassMode {
  BnMode bn = BnMode::train;
  bool param_grads = true;
};

template <typename T>
struct BlockCache {
  ResidualBlockSpec spec;
  std::vector<BnCache<T>> bn;
  std::vector<ReluCache<T>> relu;
  std::vector<ConvCache<T>> conv;
  std::optional<ConvCache<T>> skip_conv;
  Tensor<T> skip_value;  // skip path before alpha; kept only for LearnScalar
  double alpha = 1.0;
  CacheGuard guard;
};

namespace detail {

inline std::size_t same_pad(const Shape& w) { return (w[2] - 1) / 2; }

template <typename T>
Tensor<T> scaled_sum(double c, const Tensor<T>& a, double alpha_b, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw InvalidArgument("residual sum: branch shapes differ " + shape_string(a.shape()) + " vs " +
                          shape_string(b.shape()));
  }
  Tensor<T> y(a.shape());
  auto yd = y.mutable_data();
  const T cc = static_cast<T>(c), ab = static_cast<T>(alpha_b);
  for (std::size_t i = 0; i < yd.size(); ++i) yd[i] = cc * (a[i] + ab * b[i]);
  return y;
}

}  // namespace detail

/// y = c * (h(x) + f(x)) with a pre-activated branch f (each conv preceded by
/// ReLU, and by batchnorm in the batchnorm variant). A convolutional skip
/// reads the same pre-activation as the first branch conv.
template <typename T>
Tensor<T> block_forward(const Tensor<T>& x, const ResidualBlockSpec& spec, const ParamSet<T>& params,
                        BnBuffers<T>& buffers, PassMode mode, BlockCache<T>& cache) {
  if (x.rank() != 4 || x.dim(1) != spec.in_channels) {
    throw InvalidArgument(spec.name + ": expected input with " + std::to_string(spec.in_channels) +
                          " channels, got " + shape_string(x.shape()));
  }
  cache = BlockCache<T>{};
  cache.spec = spec;
  Tensor<T> a = x;
  Tensor<T> pre;
  for (std::size_t i = 0; i < spec.conv_count(); ++i) {
    if (spec.has_bn) {
      const std::string bn = spec.bn_name(i);
      auto it = buffers.find(bn);
      if (it == buffers.end()) it = buffers.emplace(bn, BnRunningStats<T>::fresh(a.dim(1))).first;
      auto out = batchnorm(a, params.value(bn + ".gamma"), params.value(bn + ".beta"), mode.bn, it->second);
      a = std::move(out.y);
      cache.bn.push_back(std::move(out.cache));
    }
    auto r = relu(a);
    cache.relu.push_back(std::move(r.cache));
    if (i == 0) pre = r.y;
    const Tensor<T>& w = params.value(spec.conv_name(i));
    auto c = conv2d(r.y, w, spec.conv_stride(i), detail::same_pad(w.shape()));
    a = std::move(c.y);
    cache.conv.push_back(std::move(c.cache));
  }
  Tensor<T> skip = x;
  if (spec.conv_skip) {
    auto c = conv2d(pre, params.value(spec.skip_name()), spec.stride, 0);
    skip = std::move(c.y);
    cache.skip_conv = std::move(c.cache);
  }
  if (spec.learnable_alpha) {
    cache.alpha = static_cast<double>(params.value(spec.alpha_name())[0]);
    cache.skip_value = skip;
  }
  cache.guard.arm();
  Tensor<T> y = detail::scaled_sum(spec.c(), a, cache.alpha, skip);
  ensure_finite(y, "block_forward");
  return y;
}

/// Returns dL/dx and accumulates parameter gradients into `params` when
/// `param_grads` is set. dalpha = c * sum(dy * skip).
template <typename T>
Tensor<T> block_backward(BlockCache<T>& cache, const Tensor<T>& dy, ParamSet<T>& params, bool param_grads) {
  cache.guard.consume("block_backward");
  const ResidualBlockSpec& spec = cache.spec;
  const double c = spec.c();
  Tensor<T> dsum(dy.shape());
  {
    auto d = dsum.mutable_data();
    const T cc = static_cast<T>(c);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = cc * dy[i];
  }

  Tensor<T> df = dsum;
  for (std::size_t i = spec.conv_count(); i-- > 1;) {
    auto g = conv2d_backward(cache.conv[i], df, param_grads);
    if (param_grads) params.accumulate_grad(spec.conv_name(i), g.dw);
    df = relu_backward(cache.relu[i], g.dx);
    if (spec.has_bn) {
      auto b = batchnorm_backward(cache.bn[i], df);
      if (param_grads) {
        params.accumulate_grad(spec.bn_name(i) + ".gamma", b.dgamma);
        params.accumulate_grad(spec.bn_name(i) + ".beta", b.dbeta);
      }
      df = std::move(b.dx);
    }
  }
  auto g0 = conv2d_backward(cache.conv[0], df, param_grads);
  if (param_grads) params.accumulate_grad(spec.conv_name(0), g0.dw);
  Tensor<T> dpre = std::move(g0.dx);

  // Skip path: h = alpha * s, s = x or W_s * pre.
  Tensor<T> ds = dsum;
  if (spec.learnable_alpha) {
    if (param_grads) {
      double dalpha = 0.0;
      for (std::size_t i = 0; i < dsum.size(); ++i) {
        dalpha += static_cast<double>(dsum[i]) * static_cast<double>(cache.skip_value[i]);
      }
      params.accumulate_grad(spec.alpha_name(), Tensor<T>({1}, std::vector<T>{static_cast<T>(dalpha)}));
    }
    auto d = ds.mutable_data();
    const T al = static_cast<T>(cache.alpha);
    for (auto& v : d) v *= al;
    cache.skip_value = {};
  }
  Tensor<T> dx_skip;
  if (spec.conv_skip) {
    auto gs = conv2d_backward(*cache.skip_conv, ds, param_grads);
    if (param_grads) params.accumulate_grad(spec.skip_name(), gs.dw);
    auto d = dpre.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += gs.dx[i];
  } else {
    dx_skip = std::move(ds);
  }

  Tensor<T> dx = relu_backward(cache.relu[0], dpre);
  if (spec.has_bn) {
    auto b = batchnorm_backward(cache.bn[0], dx);
    if (param_grads) {
      params.accumulate_grad(spec.bn_name(0) + ".gamma", b.dgamma);
      params.accumulate_grad(spec.bn_name(0) + ".beta", b.dbeta);
    }
    dx = std::move(b.dx);
  }
  if (!dx_skip.empty()) {
    auto d = dx.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += dx_skip[i];
  }
  ensure_finite(dx, "block_backward");
  return dx;
}

// ---------------------------------------------------------------------------

struct StageLayout {
  BlockKind kind;
  std::vector<std::size_t> blocks;
  std::vector<std::size_t> widths;  // branch width (mid for bottleneck)
  std::size_t expansion;
};

inline StageLayout stage_layout(std::size_t depth) {
  switch (depth) {
    case 18: return {BlockKind::basic, {2, 2, 2, 2}, {64, 128, 256, 512}, 1};
    case 50: return {BlockKind::bottleneck, {3, 4, 6, 3}, {64, 128, 256, 512}, 4};
    case 101: return {BlockKind::bottleneck, {3, 4, 23, 3}, {64, 128, 256, 512}, 4};
    default: throw InvalidArgument("unsupported depth " + std::to_string(depth) + " (expected 18, 50 or 101)");
  }
}

inline std::size_t parse_depth(std::string_view arch) {
  if (arch == "resnet18") return 18;
  if (arch == "resnet50") return 50;
  if (arch == "resnet101") return 101;
  throw InvalidArgument("unknown architecture '" + std::string(arch) + "'");
}

inline constexpr std::size_t kStemChannels = 64;
inline constexpr std::size_t kInputChannels = 3;
inline constexpr std::size_t kInputResolution = 32;

struct ArchDescription {
  std::size_t depth = 18;
  Variant variant = Variant::id_short;
  InitScheme init = InitScheme::fan_out();
  std::uint64_t seed = 0;
  std::size_t num_classes = 10;

  std::string arch_name() const { return "resnet" + std::to_string(depth); }
};

inline std::vector<ResidualBlockSpec> build_block_specs(std::size_t depth, Variant variant) {
  const StageLayout layout = stage_layout(depth);
  std::vector<ResidualBlockSpec> specs;
  std::size_t in = kStemChannels;
  std::size_t index = 1;
  for (std::size_t s = 0; s < layout.blocks.size(); ++s) {
    const std::size_t mid = layout.widths[s];
    const std::size_t out = mid * layout.expansion;
    for (std::size_t b = 0; b < layout.blocks[s]; ++b) {
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      specs.push_back(make_block_spec(variant, layout.kind, in, mid, out, stride, s + 1, index++, b + 1));
      in = out;
    }
  }
  return specs;
}

inline std::vector<ParamSpec> network_param_specs(const ArchDescription& arch) {
  if (arch.num_classes < 2) throw InvalidArgument("num_classes must be >= 2");
  std::vector<ParamSpec> specs;
  specs.push_back({"stem.weight", {kStemChannels, kInputChannels, 3, 3}, ParamRole::conv_weight, false});
  const auto blocks = build_block_specs(arch.depth, arch.variant);
  for (const auto& b : blocks) {
    auto bs = block_param_specs(b);
    specs.insert(specs.end(), bs.begin(), bs.end());
  }
  const std::size_t features = blocks.back().out_channels;
  if (arch.variant == Variant::batchnorm) {
    specs.push_back({"final.bn.gamma", {features}, ParamRole::bn_gamma});
    specs.push_back({"final.bn.beta", {features}, ParamRole::bn_beta});
  }
  specs.push_back({"head.weight", {arch.num_classes, features}, ParamRole::linear_weight});
  specs.push_back({"head.bias", {arch.num_classes}, ParamRole::bias});
  return specs;
}

template <typename T>
struct NetworkCache {
  ConvCache<T> stem;
  std::vector<BlockCache<T>> blocks;
  std::optional<BnCache<T>> final_bn;
  ReluCache<T> final_relu;
  PoolCache<T> pool;
  LinearCache<T> head;
  bool has_head = false;
};

/// Called with (1-based block index, tensor at that block's output).
template <typename T>
using BlockObserver = std::function<void(std::size_t, const Tensor<T>&)>;

/// Pre-activated ResNet for 32x32 inputs: 3x3 stem, residual stages,
/// final ReLU (after batchnorm in the batchnorm variant), global average
/// pool and a linear classifier.
template <typename T>
class Network {
 public:
  ArchDescription arch;
  std::vector<ResidualBlockSpec> blocks;
  ParamSet<T> params;
  BnBuffers<T> buffers;

  std::size_t feature_channels() const { return blocks.back().out_channels; }

  Tensor<T> forward_features(const Tensor<T>& x, PassMode mode, NetworkCache<T>& cache,
                             const BlockObserver<T>& observe = {}) {
    if (x.rank() != 4 || x.dim(1) != kInputChannels) {
      throw InvalidArgument("network input must be [N, 3, H, W], got " + shape_string(x.shape()));
    }
    cache = NetworkCache<T>{};
    auto stem = conv2d(x, params.value("stem.weight"), 1, 1);
    cache.stem = std::move(stem.cache);
    Tensor<T> a = std::move(stem.y);
    cache.blocks.resize(blocks.size());
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      a = block_forward(a, blocks[i], params, buffers, mode, cache.blocks[i]);
      if (observe) observe(blocks[i].index, a);
    }
    return a;
  }

  Tensor<T> forward_head(const Tensor<T>& features, PassMode mode, NetworkCache<T>& cache) {
    Tensor<T> a = features;
    if (arch.variant == Variant::batchnorm) {
      auto it = buffers.find("final.bn");
      if (it == buffers.end()) it = buffers.emplace("final.bn", BnRunningStats<T>::fresh(a.dim(1))).first;
      auto b = batchnorm(a, params.value("final.bn.gamma"), params.value("final.bn.beta"), mode.bn, it->second);
      a = std::move(b.y);
      cache.final_bn = std::move(b.cache);
    }
    auto r = relu(a);
    cache.final_relu = std::move(r.cache);
    auto p = global_avg_pool(r.y);
    cache.pool = std::move(p.cache);
    auto l = linear(p.y, params.value("head.weight"), params.value("head.bias"));
    cache.head = std::move(l.cache);
    cache.has_head = true;
    return std::move(l.y);
  }

  Tensor<T> forward(const Tensor<T>& x, PassMode mode, NetworkCache<T>& cache,
                    const BlockObserver<T>& observe = {}) {
    Tensor<T> features = forward_features(x, mode, cache, observe);
    return forward_head(features, mode, cache);
  }

  /// Gradient w.r.t. the last block output, from the classifier gradient.
  Tensor<T> backward_head(NetworkCache<T>& cache, const Tensor<T>& dlogits, bool param_grads) {
    if (!cache.has_head) throw CacheReuse("backward_head: forward_head was not run");
    cache.has_head = false;
    auto l = linear_backward(cache.head, dlogits);
    if (param_grads) {
      params.accumulate_grad("head.weight", l.dw);
      params.accumulate_grad("head.bias", l.db);
    }
    Tensor<T> d = global_avg_pool_backward(cache.pool, l.dx);
    d = relu_backward(cache.final_relu, d);
    if (cache.final_bn) {
      auto b = batchnorm_backward(*cache.final_bn, d);
      if (param_grads) {
        params.accumulate_grad("final.bn.gamma", b.dgamma);
        params.accumulate_grad("final.bn.beta", b.dbeta);
      }
      d = std::move(b.dx);
    }
    return d;
  }

  /// Back-propagates `dfeatures` (gradient at the last block output) down
  /// to the stem. The observer sees the gradient arriving at each block
  /// output, deepest first.
  void backward_features(NetworkCache<T>& cache, const Tensor<T>& dfeatures, bool param_grads,
                         const BlockObserver<T>& observe = {}) {
    if (cache.blocks.size() != blocks.size()) throw CacheReuse("backward_features: cache does not match network");
    Tensor<T> d = dfeatures;
    for (std::size_t i = blocks.size(); i-- > 0;) {
      if (observe) observe(blocks[i].index, d);
      d = block_backward(cache.blocks[i], d, params, param_grads);
    }
    if (param_grads) {
      auto g = conv2d_backward(cache.stem, d, true);
      params.accumulate_grad("stem.weight", g.dw);
    } else {
      cache.stem.guard.consume("stem");
    }
  }

  void backward(NetworkCache<T>& cache, const Tensor<T>& dlogits, bool param_grads,
                const BlockObserver<T>& observe = {}) {
    Tensor<T> d = backward_head(cache, dlogits, param_grads);
    backward_features(cache, d, param_grads, observe);
  }
};

template <typename T>
Network<T> build_resnet(const ArchDescription& arch) {
  Network<T> net;
  net.arch = arch;
  net.blocks = build_block_specs(arch.depth, arch.variant);
  net.params = init_network<T>(network_param_specs(arch), arch.init, arch.seed);
  return net;
}

template <typename T>
Network<T> build_resnet(std::size_t depth, Variant variant, std::size_t num_classes, InitScheme init,
                        std::uint64_t seed) {
  return build_resnet<T>(ArchDescription{depth, variant, init, seed, num_classes});
}

/// Learnable scalars: weights, biases, batchnorm affine terms, alphas.
template <typename T>
std::size_t count_params(const Network<T>& net) {
  return net.params.scalar_count();
}

struct FlopCount {
  std::uint64_t macs = 0;
  std::uint64_t flops_mac_as_2() const { return 2 * macs; }
  std::uint64_t flops_mac_as_1() const { return macs; }
};

/// Multiply-accumulates of convolutions and the linear head for one image.
inline FlopCount count_flops(const ArchDescription& arch, std::size_t resolution) {
  FlopCount f;
  auto conv = [&](const Shape& w, std::size_t out_res) {
    f.macs += static_cast<std::uint64_t>(out_res * out_res) * w[0] * w[1] * w[2] * w[3];
  };
  std::size_t res = resolution;
  conv({kStemChannels, kInputChannels, 3, 3}, res);
  for (const auto& b : build_block_specs(arch.depth, arch.variant)) {
    const std::size_t out_res = (res - 1) / b.stride + 1;
    for (std::size_t i = 0; i < b.conv_count(); ++i) {
      const bool before_stride = b.kind == BlockKind::bottleneck && i == 0;
      conv(b.conv_shape(i), before_stride ? res : out_res);
    }
    if (b.conv_skip) conv(b.skip_shape(), out_res);
    res = out_res;
  }
  const auto blocks = build_block_specs(arch.depth, arch.variant);
  f.macs += static_cast<std::uint64_t>(blocks.back().out_channels) * arch.num_classes;
  return f;
}

template <typename T>
FlopCount count_flops(const Network<T>& net, std::size_t resolution) {
  return count_flops(net.arch, resolution);
}

}  // namespace nfres
