#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nfres/blas.hpp"
#include "nfres/error.hpp"
#include "nfres/tensor.hpp"

namespace nfres {

/// Tracks that a cache is handed to exactly one backward call.
class CacheGuard {
 public:
  void arm() noexcept { live_ = true; }
  bool live() const noexcept { return live_; }
  void consume(const char* layer) {
    if (!live_) throw CacheReuse(std::string(layer) + ": cache already consumed or never filled");
    live_ = false;
  }

 private:
  bool live_ = false;
};

template <typename T, typename Cache>
struct LayerOutput {
  Tensor<T> y;
  Cache cache;
};

// ---------------------------------------------------------------------------
// conv2d: cross-correlation, square kernel, no bias.

template <typename T>
struct ConvCache {
  Tensor<T> input;
  Tensor<T> weight;
  std::size_t stride = 1;
  std::size_t pad = 0;
  CacheGuard guard;
};

template <typename T>
struct ConvGrads {
  Tensor<T> dx;
  Tensor<T> dw;  // empty when weight gradients were not requested
};

namespace detail {

struct ConvGeometry {
  std::size_t n, c, h, w;   // input
  std::size_t d, k;         // filters
  std::size_t stride, pad;
  std::size_t ho, wo;       // output

  std::size_t patch() const { return c * k * k; }
  std::size_t pixels() const { return ho * wo; }
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, std::size_t stride, std::size_t pad) {
  if (x.size() != 4 || w.size() != 4) {
    throw InvalidArgument("conv2d: expected 4-d input and kernel, got " + shape_string(x) + " and " +
                          shape_string(w));
  }
  if (w[2] != w[3]) throw InvalidArgument("conv2d: kernel must be square, got " + shape_string(w));
  if (x[1] != w[1]) {
    throw InvalidArgument("conv2d: input has " + std::to_string(x[1]) + " channels, kernel expects " +
                          std::to_string(w[1]));
  }
  if (stride != 1 && stride != 2) throw InvalidArgument("conv2d: stride must be 1 or 2");
  const std::size_t k = w[2];
  if (pad != (k - 1) / 2 || k % 2 == 0) {
    throw InvalidArgument("conv2d: odd kernel with pad (k-1)/2 required, got k=" + std::to_string(k) +
                          " pad=" + std::to_string(pad));
  }
  if (x[2] + 2 * pad < k || x[3] + 2 * pad < k) throw InvalidArgument("conv2d: input smaller than kernel");
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], k, stride, pad, 0, 0};
  g.ho = (g.h + 2 * pad - k) / stride + 1;
  g.wo = (g.w + 2 * pad - k) / stride + 1;
  return g;
}

/// Output columns [lo, hi) whose input column ow*stride + kj - pad is in range.
inline std::pair<std::size_t, std::size_t> valid_span(std::size_t kj, std::size_t pad, std::size_t stride,
                                                      std::size_t in, std::size_t out) {
  const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kj) - static_cast<std::ptrdiff_t>(pad);
  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t lo = shift >= 0 ? 0 : (-shift + s - 1) / s;
  std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(in) - 1 - shift) / s + 1;
  if (static_cast<std::ptrdiff_t>(in) - 1 - shift < 0) hi = 0;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(out));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

/// Images [first, first+count) unrolled into col[patch, count*pixels].
template <typename T>
void im2col(const ConvGeometry& g, const T* x, std::size_t first, std::size_t count, T* col) {
  const std::size_t cols = count * g.pixels();
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        T* row = col + ((c * g.k + ki) * g.k + kj) * cols;
        const auto [lo, hi] = valid_span(kj, g.pad, g.stride, g.w, g.wo);
        const std::size_t shift = lo * g.stride + kj - g.pad;  // input column of output column lo
        for (std::size_t n = 0; n < count; ++n) {
          const T* plane = x + ((first + n) * g.c + c) * g.h * g.w;
          for (std::size_t oh = 0; oh < g.ho; ++oh) {
            T* out = row + (n * g.ho + oh) * g.wo;
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) {
              std::fill(out, out + g.wo, T{0});
              continue;
            }
            const T* src = plane + static_cast<std::size_t>(ih) * g.w + shift;
            std::fill(out, out + lo, T{0});
            if (g.stride == 1) {
              std::copy(src, src + (hi - lo), out + lo);
            } else {
              for (std::size_t ow = lo; ow < hi; ++ow) out[ow] = src[(ow - lo) * g.stride];
            }
            std::fill(out + hi, out + g.wo, T{0});
          }
        }
      }
}

/// Adjoint of im2col: accumulates col back into dx.
template <typename T>
void col2im(const ConvGeometry& g, const T* col, std::size_t first, std::size_t count, T* dx) {
  const std::size_t cols = count * g.pixels();
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const T* row = col + ((c * g.k + ki) * g.k + kj) * cols;
        const auto [lo, hi] = valid_span(kj, g.pad, g.stride, g.w, g.wo);
        const std::size_t shift = lo * g.stride + kj - g.pad;
        for (std::size_t n = 0; n < count; ++n) {
          T* plane = dx + ((first + n) * g.c + c) * g.h * g.w;
          for (std::size_t oh = 0; oh < g.ho; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) continue;
            const T* in = row + (n * g.ho + oh) * g.wo;
            T* dst = plane + static_cast<std::size_t>(ih) * g.w + shift;
            if (g.stride == 1) {
              for (std::size_t ow = lo; ow < hi; ++ow) dst[ow - lo] += in[ow];
            } else {
              for (std::size_t ow = lo; ow < hi; ++ow) dst[(ow - lo) * g.stride] += in[ow];
            }
          }
        }
      }
}

/// Number of images unrolled per GEMM call; bounds the col buffer.
inline std::size_t conv_chunk(const ConvGeometry& g) {
  constexpr std::size_t kMaxColElements = std::size_t{1} << 19;
  const std::size_t per_image = g.patch() * g.pixels();
  return std::clamp<std::size_t>(kMaxColElements / std::max<std::size_t>(per_image, 1), 1, g.n);
}

}  // namespace detail

template <typename T>
LayerOutput<T, ConvCache<T>> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride,
                                    std::size_t pad) {
  const auto g = detail::conv_geometry(x.shape(), w.shape(), stride, pad);
  Tensor<T> y({g.n, g.d, g.ho, g.wo});
  auto yd = y.mutable_data();
  const bool direct = g.k == 1 && g.stride == 1;  // input planes already are the columns
  const std::size_t chunk = direct ? 1 : detail::conv_chunk(g);
  std::vector<T> col(direct ? 0 : g.patch() * chunk * g.pixels());
  std::vector<T> tmp(chunk == 1 ? 0 : g.d * chunk * g.pixels());
  for (std::size_t first = 0; first < g.n; first += chunk) {
    const std::size_t count = std::min(chunk, g.n - first);
    const int cols = static_cast<int>(count * g.pixels());
    const T* src_cols = x.data().data() + first * g.c * g.pixels();
    if (!direct) {
      detail::im2col(g, x.data().data(), first, count, col.data());
      src_cols = col.data();
    }
    if (count == 1) {
      blas::gemm<T>(false, false, static_cast<int>(g.d), cols, static_cast<int>(g.patch()), T{1},
                    w.data().data(), static_cast<int>(g.patch()), src_cols, cols, T{0},
                    yd.data() + first * g.d * g.pixels(), cols);
      continue;
    }
    blas::gemm<T>(false, false, static_cast<int>(g.d), cols, static_cast<int>(g.patch()), T{1},
                  w.data().data(), static_cast<int>(g.patch()), src_cols, cols, T{0}, tmp.data(), cols);
    for (std::size_t n = 0; n < count; ++n)
      for (std::size_t d = 0; d < g.d; ++d) {
        const T* src = tmp.data() + d * cols + n * g.pixels();
        std::copy(src, src + g.pixels(), yd.data() + ((first + n) * g.d + d) * g.pixels());
      }
  }
  ensure_finite(y, "conv2d");
  LayerOutput<T, ConvCache<T>> out{std::move(y), ConvCache<T>{x, w, stride, pad, {}}};
  out.cache.guard.arm();
  return out;
}

/// Exact gradients of sum(y * dy) with respect to the input and the kernel.
template <typename T>
ConvGrads<T> conv2d_backward(ConvCache<T>& cache, const Tensor<T>& dy, bool want_dw = true) {
  cache.guard.consume("conv2d_backward");
  const auto g = detail::conv_geometry(cache.input.shape(), cache.weight.shape(), cache.stride, cache.pad);
  if (dy.shape() != Shape{g.n, g.d, g.ho, g.wo}) {
    throw InvalidArgument("conv2d_backward: gradient shape " + shape_string(dy.shape()) + " does not match output");
  }
  ConvGrads<T> grads;
  grads.dx = Tensor<T>(cache.input.shape());
  if (want_dw) grads.dw = Tensor<T>(cache.weight.shape());
  auto dx = grads.dx.mutable_data();
  const T* w = cache.weight.data().data();
  const int patch = static_cast<int>(g.patch());
  if (g.k == 1 && g.stride == 1) {
    const int cols = static_cast<int>(g.pixels());
    for (std::size_t n = 0; n < g.n; ++n) {
      const T* dyn = dy.data().data() + n * g.d * g.pixels();
      const T* xn = cache.input.data().data() + n * g.c * g.pixels();
      if (want_dw) {
        blas::gemm<T>(false, true, static_cast<int>(g.d), patch, cols, T{1}, dyn, cols, xn, cols, T{1},
                      grads.dw.mutable_data().data(), patch);
      }
      blas::gemm<T>(true, false, patch, cols, static_cast<int>(g.d), T{1}, w, patch, dyn, cols, T{0},
                    dx.data() + n * g.c * g.pixels(), cols);
    }
  } else {
    const std::size_t chunk = detail::conv_chunk(g);
    std::vector<T> col(g.patch() * chunk * g.pixels());
    std::vector<T> dyc(chunk == 1 ? 0 : g.d * chunk * g.pixels());
    for (std::size_t first = 0; first < g.n; first += chunk) {
      const std::size_t count = std::min(chunk, g.n - first);
      const int cols = static_cast<int>(count * g.pixels());
      const T* dy_cols = dy.data().data() + first * g.d * g.pixels();
      if (count > 1) {
        for (std::size_t n = 0; n < count; ++n)
          for (std::size_t d = 0; d < g.d; ++d) {
            const T* src = dy.data().data() + ((first + n) * g.d + d) * g.pixels();
            std::copy(src, src + g.pixels(), dyc.data() + d * cols + n * g.pixels());
          }
        dy_cols = dyc.data();
      }
      if (want_dw) {
        detail::im2col(g, cache.input.data().data(), first, count, col.data());
        blas::gemm<T>(false, true, static_cast<int>(g.d), patch, cols, T{1}, dy_cols, cols, col.data(), cols, T{1},
                      grads.dw.mutable_data().data(), patch);
      }
      blas::gemm<T>(true, false, patch, cols, static_cast<int>(g.d), T{1}, w, patch, dy_cols, cols, T{0},
                    col.data(), cols);
      detail::col2im(g, col.data(), first, count, dx.data());
    }
  }
  cache.input = {};
  cache.weight = {};
  ensure_finite(grads.dx, "conv2d_backward");
  if (want_dw) ensure_finite(grads.dw, "conv2d_backward");
  return grads;
}

// ---------------------------------------------------------------------------
// relu. The derivative at exactly zero is zero.

template <typename T>
struct ReluCache {
  Tensor<T> output;  // y > 0 exactly where x > 0
  CacheGuard guard;
};

template <typename T>
LayerOutput<T, ReluCache<T>> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  auto yd = y.mutable_data();
  auto xd = x.data();
  for (std::size_t i = 0; i < xd.size(); ++i) yd[i] = xd[i] > T{0} ? xd[i] : T{0};
  ensure_finite(y, "relu");
  LayerOutput<T, ReluCache<T>> out{y, ReluCache<T>{y, {}}};
  out.cache.guard.arm();
  return out;
}

template <typename T>
Tensor<T> relu_backward(ReluCache<T>& cache, const Tensor<T>& dy) {
  cache.guard.consume("relu_backward");
  if (dy.shape() != cache.output.shape()) throw InvalidArgument("relu_backward: gradient shape mismatch");
  Tensor<T> dx(dy.shape());
  auto out = dx.mutable_data();
  auto y = cache.output.data();
  auto g = dy.data();
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = y[i] > T{0} ? g[i] : T{0};
  cache.output = {};
  ensure_finite(dx, "relu_backward");
  return dx;
}

// ---------------------------------------------------------------------------
// batchnorm over (batch, row, column) per channel.

enum class BnMode { train, eval };

inline constexpr double kBnEpsilon = 1e-5;
inline constexpr double kBnMomentum = 0.1;

template <typename T>
struct BnRunningStats {
  Tensor<T> mean;
  Tensor<T> var;

  static BnRunningStats fresh(std::size_t channels) {
    return {Tensor<T>({channels}, T{0}), Tensor<T>({channels}, T{1})};
  }
};

template <typename T>
struct BnCache {
  Tensor<T> xhat;
  std::vector<double> inv_std;
  Tensor<T> gamma;
  BnMode mode = BnMode::train;
  CacheGuard guard;
};

template <typename T>
struct BnGrads {
  Tensor<T> dx, dgamma, dbeta;
};

template <typename T>
LayerOutput<T, BnCache<T>> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                                     BnMode mode, BnRunningStats<T>& running) {
  if (x.rank() != 4) throw InvalidArgument("batchnorm: expected 4-d input, got " + shape_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw InvalidArgument("batchnorm: gamma/beta must have shape [" + std::to_string(c) + "]");
  }
  if (mode == BnMode::train && n < 2) throw InvalidArgument("batchnorm: train mode needs batch >= 2");
  if (running.mean.shape() != Shape{c} || running.var.shape() != Shape{c}) {
    throw InvalidArgument("batchnorm: running statistics have the wrong shape");
  }
  const double m = static_cast<double>(n * hw);
  std::vector<double> mean(c), var(c), inv_std(c);
  auto xd = x.data();
  if (mode == BnMode::train) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = xd.data() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += static_cast<double>(p[i]);
      }
      mean[ch] = s / m;
      double q = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = xd.data() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = static_cast<double>(p[i]) - mean[ch];
          q += d * d;
        }
      }
      var[ch] = q / m;
    }
    auto rm = running.mean.mutable_data();
    auto rv = running.var.mutable_data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      rm[ch] = static_cast<T>((1.0 - kBnMomentum) * static_cast<double>(rm[ch]) + kBnMomentum * mean[ch]);
      rv[ch] = static_cast<T>((1.0 - kBnMomentum) * static_cast<double>(rv[ch]) + kBnMomentum * var[ch]);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = static_cast<double>(running.mean[ch]);
      var[ch] = static_cast<double>(running.var[ch]);
    }
  }
  for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = 1.0 / std::sqrt(var[ch] + kBnEpsilon);

  Tensor<T> xhat(x.shape()), y(x.shape());
  auto xh = xhat.mutable_data();
  auto yd = y.mutable_data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * hw;
      const double g = static_cast<double>(gamma[ch]), be = static_cast<double>(beta[ch]);
      for (std::size_t i = 0; i < hw; ++i) {
        const double v = (static_cast<double>(xd[base + i]) - mean[ch]) * inv_std[ch];
        xh[base + i] = static_cast<T>(v);
        yd[base + i] = static_cast<T>(g * v + be);
      }
    }
  ensure_finite(y, "batchnorm");
  LayerOutput<T, BnCache<T>> out{std::move(y), BnCache<T>{std::move(xhat), std::move(inv_std), gamma, mode, {}}};
  out.cache.guard.arm();
  return out;
}

template <typename T>
BnGrads<T> batchnorm_backward(BnCache<T>& cache, const Tensor<T>& dy) {
  cache.guard.consume("batchnorm_backward");
  if (dy.shape() != cache.xhat.shape()) throw InvalidArgument("batchnorm_backward: gradient shape mismatch");
  const std::size_t n = dy.dim(0), c = dy.dim(1), hw = dy.dim(2) * dy.dim(3);
  const double m = static_cast<double>(n * hw);
  BnGrads<T> g{Tensor<T>(dy.shape()), Tensor<T>({c}), Tensor<T>({c})};
  auto dx = g.dx.mutable_data();
  auto dgamma = g.dgamma.mutable_data();
  auto dbeta = g.dbeta.mutable_data();
  auto dyd = dy.data();
  auto xh = cache.xhat.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t base = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        sum_dy += static_cast<double>(dyd[base + i]);
        sum_dy_xhat += static_cast<double>(dyd[base + i]) * static_cast<double>(xh[base + i]);
      }
    }
    dgamma[ch] = static_cast<T>(sum_dy_xhat);
    dbeta[ch] = static_cast<T>(sum_dy);
    const double scale = static_cast<double>(cache.gamma[ch]) * cache.inv_std[ch];
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t base = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const double d = static_cast<double>(dyd[base + i]);
        if (cache.mode == BnMode::train) {
          dx[base + i] = static_cast<T>(scale * (d - sum_dy / m - static_cast<double>(xh[base + i]) * sum_dy_xhat / m));
        } else {
          dx[base + i] = static_cast<T>(scale * d);
        }
      }
    }
  }
  cache.xhat = {};
  ensure_finite(g.dx, "batchnorm_backward");
  return g;
}

// ---------------------------------------------------------------------------
// linear head: y = x W^T + b, W is [out, in].

template <typename T>
struct LinearCache {
  Tensor<T> input;
  Tensor<T> weight;
  CacheGuard guard;
};

template <typename T>
struct LinearGrads {
  Tensor<T> dx, dw, db;
};

template <typename T>
LayerOutput<T, LinearCache<T>> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1) || b.shape() != Shape{w.dim(0)}) {
    throw InvalidArgument("linear: incompatible shapes " + shape_string(x.shape()) + " x " +
                          shape_string(w.shape()) + " + " + shape_string(b.shape()));
  }
  const std::size_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
  Tensor<T> y({n, out});
  auto yd = y.mutable_data();
  for (std::size_t i = 0; i < n; ++i) std::copy(b.data().begin(), b.data().end(), yd.begin() + i * out);
  blas::gemm<T>(false, true, static_cast<int>(n), static_cast<int>(out), static_cast<int>(in), T{1},
                x.data().data(), static_cast<int>(in), w.data().data(), static_cast<int>(in), T{1}, yd.data(),
                static_cast<int>(out));
  ensure_finite(y, "linear");
  LayerOutput<T, LinearCache<T>> res{std::move(y), LinearCache<T>{x, w, {}}};
  res.cache.guard.arm();
  return res;
}

template <typename T>
LinearGrads<T> linear_backward(LinearCache<T>& cache, const Tensor<T>& dy) {
  cache.guard.consume("linear_backward");
  const std::size_t n = cache.input.dim(0), in = cache.input.dim(1), out = cache.weight.dim(0);
  if (dy.shape() != Shape{n, out}) throw InvalidArgument("linear_backward: gradient shape mismatch");
  LinearGrads<T> g{Tensor<T>({n, in}), Tensor<T>({out, in}), Tensor<T>({out})};
  blas::gemm<T>(false, false, static_cast<int>(n), static_cast<int>(in), static_cast<int>(out), T{1},
                dy.data().data(), static_cast<int>(out), cache.weight.data().data(), static_cast<int>(in), T{0},
                g.dx.mutable_data().data(), static_cast<int>(in));
  blas::gemm<T>(true, false, static_cast<int>(out), static_cast<int>(in), static_cast<int>(n), T{1},
                dy.data().data(), static_cast<int>(out), cache.input.data().data(), static_cast<int>(in), T{0},
                g.dw.mutable_data().data(), static_cast<int>(in));
  auto db = g.db.mutable_data();
  for (std::size_t j = 0; j < out; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(dy.data()[i * out + j]);
    db[j] = static_cast<T>(s);
  }
  cache.input = {};
  cache.weight = {};
  ensure_finite(g.dx, "linear_backward");
  return g;
}

// ---------------------------------------------------------------------------
// global average pool: [N, C, H, W] -> [N, C]

template <typename T>
struct PoolCache {
  Shape input_shape;
  CacheGuard guard;
};

template <typename T>
LayerOutput<T, PoolCache<T>> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw InvalidArgument("global_avg_pool: expected 4-d input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> y({n, c});
  auto yd = y.mutable_data();
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < hw; ++j) s += static_cast<double>(x.data()[i * hw + j]);
    yd[i] = static_cast<T>(s / static_cast<double>(hw));
  }
  ensure_finite(y, "global_avg_pool");
  LayerOutput<T, PoolCache<T>> out{std::move(y), PoolCache<T>{x.shape(), {}}};
  out.cache.guard.arm();
  return out;
}

template <typename T>
Tensor<T> global_avg_pool_backward(PoolCache<T>& cache, const Tensor<T>& dy) {
  cache.guard.consume("global_avg_pool_backward");
  const auto& s = cache.input_shape;
  if (dy.shape() != Shape{s[0], s[1]}) throw InvalidArgument("global_avg_pool_backward: gradient shape mismatch");
  const std::size_t hw = s[2] * s[3];
  Tensor<T> dx(s);
  auto dxd = dx.mutable_data();
  for (std::size_t i = 0; i < s[0] * s[1]; ++i) {
    const T v = static_cast<T>(static_cast<double>(dy.data()[i]) / static_cast<double>(hw));
    std::fill(dxd.begin() + static_cast<std::ptrdiff_t>(i * hw), dxd.begin() + static_cast<std::ptrdiff_t>((i + 1) * hw), v);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// softmax cross-entropy with label smoothing, mean over the batch.

template <typename T>
struct XentResult {
  double loss = 0.0;
  Tensor<T> dlogits;
  std::size_t correct = 0;  // argmax hits, for accuracy bookkeeping
};

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw InvalidArgument("softmax: expected [batch, classes]");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Tensor<T> p(logits.shape());
  auto pd = p.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.data().data() + i * k;
    const double mx = static_cast<double>(*std::max_element(row, row + k));
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    for (std::size_t j = 0; j < k; ++j) pd[i * k + j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - mx) / z);
  }
  return p;
}

/// Targets are (1 - eps) * onehot + eps / K; dlogits = (softmax - target) / batch.
template <typename T>
XentResult<T> softmax_xent(const Tensor<T>& logits, std::span<const int> labels, double smoothing = 0.0) {
  if (logits.rank() != 2) throw InvalidArgument("softmax_xent: expected [batch, classes] logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) throw InvalidArgument("softmax_xent: label count does not match batch");
  if (!(smoothing >= 0.0 && smoothing < 1.0)) throw InvalidArgument("softmax_xent: smoothing must be in [0, 1)");
  XentResult<T> r;
  r.dlogits = Tensor<T>(logits.shape());
  auto g = r.dlogits.mutable_data();
  const double off = smoothing / static_cast<double>(k);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw InvalidArgument("softmax_xent: label " + std::to_string(label) + " out of range [0, " +
                            std::to_string(k) + ")");
    }
    const T* row = logits.data().data() + i * k;
    const std::size_t arg = static_cast<std::size_t>(std::max_element(row, row + k) - row);
    if (arg == static_cast<std::size_t>(label)) ++r.correct;
    const double mx = static_cast<double>(row[arg]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    const double log_z = std::log(z) + mx;
    for (std::size_t j = 0; j < k; ++j) {
      const double target = off + (j == static_cast<std::size_t>(label) ? 1.0 - smoothing : 0.0);
      const double logp = static_cast<double>(row[j]) - log_z;
      total -= target * logp;
      g[i * k + j] = static_cast<T>((std::exp(logp) - target) / static_cast<double>(n));
    }
  }
  r.loss = total / static_cast<double>(n);
  if (!std::isfinite(r.loss)) throw NonFinite("non-finite value produced by softmax_xent");
  ensure_finite(r.dlogits, "softmax_xent");
  return r;
}

}  // namespace nfres
