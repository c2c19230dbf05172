#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "nfres/error.hpp"
#include "nfres/params.hpp"
#include "nfres/rng.hpp"
#include "nfres/tensor.hpp"

namespace nfres {

enum class InitKind { he_fan_in, he_fan_out, brock_channelwise };

/// 2 / (1 - 1/pi): ReLU correction factor of the channel-wise scheme.
inline constexpr double kBrockGain = 2.0 / (1.0 - 1.0 / std::numbers::pi);

struct InitScheme {
  InitKind kind = InitKind::he_fan_out;
  double gain = 2.0;

  static InitScheme fan_in() { return {InitKind::he_fan_in, 2.0}; }
  static InitScheme fan_out() { return {InitKind::he_fan_out, 2.0}; }
  static InitScheme brock() { return {InitKind::brock_channelwise, kBrockGain}; }

  /// The same rule for a layer whose input is not rectified (gain 1).
  InitScheme linear_input() const { return {kind, 1.0}; }

  Grouping grouping() const {
    return kind == InitKind::brock_channelwise ? Grouping::per_output_channel : Grouping::whole_tensor;
  }
};

inline std::string_view to_string(InitKind kind) {
  switch (kind) {
    case InitKind::he_fan_in: return "fanin";
    case InitKind::he_fan_out: return "fanout";
    case InitKind::brock_channelwise: return "brock";
  }
  return "?";
}

inline InitScheme parse_init(std::string_view name) {
  if (name == "fanin") return InitScheme::fan_in();
  if (name == "fanout") return InitScheme::fan_out();
  if (name == "brock") return InitScheme::brock();
  throw InvalidArgument("unknown init scheme '" + std::string(name) + "'");
}

/// Fan-in k*k*c and fan-out k*k*d of a [d, c, k, k] kernel or [d, c] matrix.
struct Fans {
  std::size_t in = 0;
  std::size_t out = 0;
};

inline Fans kernel_fans(const Shape& shape) {
  if ((shape.size() != 4 && shape.size() != 2) || shape_size(shape) == 0) {
    throw InvalidArgument("degenerate weight shape " + shape_string(shape));
  }
  for (auto e : shape) {
    if (e == 0) throw InvalidArgument("degenerate weight shape " + shape_string(shape));
  }
  const std::size_t kk = shape.size() == 4 ? shape[2] * shape[3] : 1;
  return {kk * shape[1], kk * shape[0]};
}

/// Target variance of each standardization group under `scheme`.
inline double target_variance(const Shape& shape, const InitScheme& scheme) {
  if (!(scheme.gain > 0.0)) throw InvalidArgument("init gain must be positive");
  const Fans f = kernel_fans(shape);
  const std::size_t n = scheme.kind == InitKind::he_fan_out ? f.out : f.in;
  return scheme.gain / static_cast<double>(n);
}

/// Gaussian draw followed by empirical standardization to mean 0 and the
/// scheme's target variance, over the whole tensor (He) or per output
/// channel (Brock).
template <typename T>
Tensor<T> init_weight(const Shape& shape, const InitScheme& scheme, RngStream& stream) {
  const double var = target_variance(shape, scheme);
  auto raw = gaussian_sample<T>(shape, 0.0, std::sqrt(var), stream);
  return standardize_empirical(raw, 0.0, var, scheme.grouping());
}

template <typename T>
Tensor<T> he_fan_in(const Shape& shape, RngStream& stream) {
  return init_weight<T>(shape, InitScheme::fan_in(), stream);
}

template <typename T>
Tensor<T> he_fan_out(const Shape& shape, RngStream& stream) {
  return init_weight<T>(shape, InitScheme::fan_out(), stream);
}

template <typename T>
Tensor<T> brock_channelwise(const Shape& shape, RngStream& stream) {
  return init_weight<T>(shape, InitScheme::brock(), stream);
}

/// Draws every tensor of an architecture. Convolution and linear weights
/// follow `scheme`. A layer reading raw data (the stem) takes the fan-in
/// form with gain 1, so its output has unit variance. Biases and
/// batchnorm shifts start at 0, batchnorm scales and skip scalars at 1.
/// Each tensor has its own stream keyed by its name, so adding a layer does
/// not reshuffle the others.
template <typename T>
ParamSet<T> init_network(const std::vector<ParamSpec>& specs, const InitScheme& scheme,
                         std::uint64_t master_seed) {
  ParamSet<T> params;
  for (const auto& spec : specs) {
    switch (spec.role) {
      case ParamRole::conv_weight:
      case ParamRole::linear_weight: {
        InitScheme s = scheme;
        // The linear head always uses the fan-in form of the scheme.
        if (spec.role == ParamRole::linear_weight && s.kind == InitKind::he_fan_out) s.kind = InitKind::he_fan_in;
        if (!spec.rectified_input) {
          s = s.linear_input();
          if (s.kind == InitKind::he_fan_out) s.kind = InitKind::he_fan_in;
        }
        RngStream stream(master_seed, spec.name);
        std::string tag(to_string(s.kind));
        if (!spec.rectified_input) tag += "/gain1";
        params.add(spec.name, init_weight<T>(spec.shape, s, stream), tag, spec.role);
        break;
      }
      case ParamRole::bias:
      case ParamRole::bn_beta:
        params.add(spec.name, Tensor<T>(spec.shape, T{0}), "zero", spec.role);
        break;
      case ParamRole::bn_gamma:
      case ParamRole::alpha:
        params.add(spec.name, Tensor<T>(spec.shape, T{1}), "one", spec.role);
        break;
      default:
        throw InvalidArgument("init_network: unknown layer kind for '" + spec.name + "'");
    }
  }
  return params;
}

}  // namespace nfres
