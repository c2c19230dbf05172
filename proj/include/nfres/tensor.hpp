#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nfres/error.hpp"
#include "nfres/rng.hpp"

namespace nfres {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline void validate_shape(const Shape& shape) {
  if (shape.empty() || shape.size() > 4) {
    throw InvalidArgument("tensor rank must be 1..4, got shape " + shape_string(shape));
  }
  for (std::size_t e : shape) {
    if (e == 0) throw InvalidArgument("tensor extents must be positive: " + shape_string(shape));
  }
}

/// Dense row-major tensor of rank 1..4, layout (batch, channel, row, column).
///
/// Storage is shared between copies and cloned on the first write through
/// mutable_data(), so passing tensors into layer caches costs nothing.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_ = std::make_shared<std::vector<T>>(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
    validate_shape(shape_);
    if (values.size() != shape_size(shape_)) {
      throw InvalidArgument("data length " + std::to_string(values.size()) +
                            " does not match shape " + shape_string(shape_));
    }
    data_ = std::make_shared<std::vector<T>>(std::move(values));
  }

  bool empty() const noexcept { return !data_; }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_ ? data_->size() : 0; }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::span<const T> data() const noexcept {
    return data_ ? std::span<const T>(*data_) : std::span<const T>{};
  }

  /// Write access; detaches from any other tensor sharing the buffer.
  std::span<T> mutable_data() {
    if (!data_) return {};
    if (data_.use_count() > 1) data_ = std::make_shared<std::vector<T>>(*data_);
    return std::span<T>(*data_);
  }

  T operator[](std::size_t i) const { return (*data_)[i]; }

  /// Same storage viewed under another shape of equal size.
  Tensor reshaped(Shape shape) const {
    validate_shape(shape);
    if (shape_size(shape) != size()) {
      throw InvalidArgument("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = data_;
    return out;
  }

  bool shares_storage_with(const Tensor& other) const noexcept { return data_ && data_ == other.data_; }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> v(size());
    std::transform(data().begin(), data().end(), v.begin(), [](T x) { return static_cast<U>(x); });
    return Tensor<U>(shape_, std::move(v));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && std::equal(a.data().begin(), a.data().end(), b.data().begin());
  }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
};

/// Throws NonFinite naming `where` if any element is NaN or Inf.
template <typename T>
void ensure_finite(const Tensor<T>& t, const char* where) {
  for (T v : t.data()) {
    if (!std::isfinite(v)) throw NonFinite(std::string("non-finite value produced by ") + where);
  }
}

/// Shape padded on the left to four axes.
inline std::array<std::size_t, 4> as_4d(const Shape& shape) {
  std::array<std::size_t, 4> out{1, 1, 1, 1};
  std::copy(shape.begin(), shape.end(), out.begin() + static_cast<std::ptrdiff_t>(4 - shape.size()));
  return out;
}

template <typename T>
Tensor<T> gaussian_sample(const Shape& shape, double mean, double stddev, RngStream& stream) {
  if (!(stddev >= 0.0)) throw InvalidArgument("gaussian_sample: std must be >= 0");
  Tensor<T> t(shape);
  for (T& v : t.mutable_data()) v = static_cast<T>(stream.gaussian(mean, stddev));
  return t;
}

template <typename T>
struct Moments {
  Tensor<T> mean;
  Tensor<T> variance;
};

/// Population mean and variance (divide by N) over `axes`, accumulated in
/// double with two passes. Reduced axes are dropped from the output shape;
/// a full reduction yields shape [1].
template <typename T>
Moments<T> moments(const Tensor<T>& t, const std::vector<std::size_t>& axes) {
  if (axes.empty()) throw InvalidArgument("moments: empty reduction set");
  if (t.empty()) throw InvalidArgument("moments: empty tensor");
  std::array<bool, 4> reduce{};
  const std::size_t offset = 4 - t.rank();
  for (std::size_t a : axes) {
    if (a >= t.rank()) throw InvalidArgument("moments: axis " + std::to_string(a) + " out of range");
    reduce[a + offset] = true;
  }
  for (std::size_t a = 0; a < offset; ++a) reduce[a] = true;

  const auto d = as_4d(t.shape());
  Shape out_shape;
  for (std::size_t a = 0; a < t.rank(); ++a) {
    if (!reduce[a + offset]) out_shape.push_back(t.dim(a));
  }
  if (out_shape.empty()) out_shape = {1};

  // Output strides over the 4-d index space (zero on reduced axes).
  std::array<std::size_t, 4> ostride{};
  std::size_t s = 1;
  for (int a = 3; a >= 0; --a) {
    if (!reduce[a]) {
      ostride[a] = s;
      s *= d[a];
    }
  }
  const std::size_t out_n = shape_size(out_shape);
  const double count = static_cast<double>(t.size() / out_n);
  auto src = t.data();

  auto for_each = [&](auto&& fn) {
    std::size_t i = 0;
    for (std::size_t n = 0; n < d[0]; ++n)
      for (std::size_t c = 0; c < d[1]; ++c)
        for (std::size_t h = 0; h < d[2]; ++h) {
          const std::size_t base = n * ostride[0] + c * ostride[1] + h * ostride[2];
          for (std::size_t w = 0; w < d[3]; ++w, ++i) fn(base + w * ostride[3], src[i]);
        }
  };

  std::vector<double> sum(out_n, 0.0);
  for_each([&](std::size_t o, T v) { sum[o] += static_cast<double>(v); });
  for (double& m : sum) m /= count;
  std::vector<double> sq(out_n, 0.0);
  for_each([&](std::size_t o, T v) {
    const double dv = static_cast<double>(v) - sum[o];
    sq[o] += dv * dv;
  });

  std::vector<T> mean(out_n), var(out_n);
  for (std::size_t o = 0; o < out_n; ++o) {
    mean[o] = static_cast<T>(sum[o]);
    var[o] = static_cast<T>(sq[o] / count);
  }
  return {Tensor<T>(out_shape, std::move(mean)), Tensor<T>(out_shape, std::move(var))};
}

/// Mean and variance over every element, in double.
template <typename T>
std::pair<double, double> population_moments(std::span<const T> v) {
  if (v.empty()) throw InvalidArgument("population_moments: empty range");
  double m = 0.0;
  for (T x : v) m += static_cast<double>(x);
  m /= static_cast<double>(v.size());
  double q = 0.0;
  for (T x : v) {
    const double d = static_cast<double>(x) - m;
    q += d * d;
  }
  return {m, q / static_cast<double>(v.size())};
}

enum class Grouping { whole_tensor, per_output_channel };

/// Affine re-normalization so each group's empirical mean and population
/// variance equal the targets. Groups are the whole tensor or slices along
/// axis 0.
template <typename T>
Tensor<T> standardize_empirical(const Tensor<T>& t, double target_mean, double target_var,
                                Grouping grouping) {
  if (t.empty()) throw InvalidArgument("standardize_empirical: empty tensor");
  if (!(target_var > 0.0)) throw InvalidArgument("standardize_empirical: target variance must be > 0");
  const std::size_t groups = grouping == Grouping::whole_tensor ? 1 : t.dim(0);
  const std::size_t group_size = t.size() / groups;
  if (group_size < 2) {
    throw DegenerateGroup("standardize_empirical: group of " + std::to_string(group_size) +
                          " element(s) in shape " + shape_string(t.shape()));
  }
  Tensor<T> out = t;
  auto dst = out.mutable_data();
  for (std::size_t g = 0; g < groups; ++g) {
    auto slice = t.data().subspan(g * group_size, group_size);
    const auto [m, v] = population_moments(slice);
    if (!(v > 0.0)) {
      throw DegenerateGroup("standardize_empirical: zero variance in group " + std::to_string(g));
    }
    const double scale = std::sqrt(target_var / v);
    for (std::size_t i = 0; i < group_size; ++i) {
      dst[g * group_size + i] = static_cast<T>((static_cast<double>(slice[i]) - m) * scale + target_mean);
    }
  }
  return out;
}

}  // namespace nfres
