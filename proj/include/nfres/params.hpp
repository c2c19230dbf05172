#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "nfres/error.hpp"
#include "nfres/tensor.hpp"

namespace nfres {

enum class ParamRole { conv_weight, linear_weight, bias, bn_gamma, bn_beta, alpha };

/// Declaration of one learnable tensor, produced by the architecture builder.
struct ParamSpec {
  std::string name;
  Shape shape;
  ParamRole role = ParamRole::conv_weight;
  bool rectified_input = true;  // false for the stem, whose input is raw data
};

template <typename T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;
  std::string init_tag;
  ParamRole role = ParamRole::conv_weight;
};

/// Named learnable tensors with shape-congruent gradient buffers.
/// Iteration order is lexicographic by name, which fixes checkpoint order.
template <typename T>
class ParamSet {
 public:
  void add(const std::string& name, Tensor<T> value, std::string init_tag, ParamRole role) {
    Tensor<T> grad(value.shape());
    auto [it, inserted] = entries_.emplace(name, Param<T>{std::move(value), std::move(grad), std::move(init_tag), role});
    if (!inserted) throw InvalidArgument("duplicate parameter '" + name + "'");
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  Param<T>& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw InvalidArgument("unknown parameter '" + name + "'");
    return it->second;
  }
  const Param<T>& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw InvalidArgument("unknown parameter '" + name + "'");
    return it->second;
  }

  const Tensor<T>& value(const std::string& name) const { return at(name).value; }

  /// Replaces a value; the shape must not change.
  void set_value(const std::string& name, Tensor<T> v) {
    auto& p = at(name);
    if (v.shape() != p.value.shape()) {
      throw InvalidArgument("set_value: shape mismatch for '" + name + "': " + shape_string(v.shape()));
    }
    p.value = std::move(v);
  }

  void accumulate_grad(const std::string& name, const Tensor<T>& g) {
    auto& p = at(name);
    if (g.shape() != p.grad.shape()) throw InvalidArgument("gradient shape mismatch for '" + name + "'");
    auto dst = p.grad.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
  }

  void zero_grad() {
    for (auto& [name, p] : entries_) {
      auto g = p.grad.mutable_data();
      std::fill(g.begin(), g.end(), T{0});
    }
  }

  /// Total number of learnable scalars.
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : entries_) n += p.value.size();
    return n;
  }

  std::size_t size() const noexcept { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::map<std::string, Param<T>> entries_;
};

}  // namespace nfres
