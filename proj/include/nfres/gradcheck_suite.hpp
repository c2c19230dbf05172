#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nfres/gradcheck.hpp"
#include "nfres/layers.hpp"
#include "nfres/resnet.hpp"
#include "nfres/rng.hpp"

namespace nfres {

struct GradSuiteOptions {
  std::size_t instances = 20;
  double tolerance = 1e-5;
  std::uint64_t seed = 0;
  bool perturb_conv = false;  // scales the conv kernel gradient by 1.001
};

struct GradCaseResult {
  std::string group;  // "layer" or "block"
  std::string name;
  std::size_t instances = 0;
  std::size_t checked = 0;
  std::size_t kinks_skipped = 0;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct GradSuiteReport {
  std::vector<GradCaseResult> cases;

  bool all_passed() const {
    return std::all_of(cases.begin(), cases.end(), [](const auto& c) { return c.passed; });
  }
  std::size_t count(const std::string& group) const {
    return static_cast<std::size_t>(
        std::count_if(cases.begin(), cases.end(), [&](const auto& c) { return c.group == group; }));
  }
};

namespace detail {

using D = double;

inline Tensor<D> random_tensor(const Shape& shape, RngStream& s, double scale = 1.0) {
  return gaussian_sample<D>(shape, 0.0, scale, s);
}

inline std::size_t pick(RngStream& s, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(s.below(hi - lo + 1));
}

/// One randomized instance: fills inputs and analytic gradients, returns
/// the loss closure.
struct Instance {
  std::vector<Tensor<D>> inputs;
  std::vector<Tensor<D>> analytic;
  std::function<double(const std::vector<Tensor<D>>&)> loss;
  double step = 1e-4;
};

using InstanceFactory = std::function<Instance(RngStream&, const GradSuiteOptions&)>;

inline Instance conv_instance(RngStream& s, const GradSuiteOptions& opt, std::size_t k, std::size_t stride) {
  const std::size_t n = pick(s, 1, 2), c = pick(s, 1, 3), d = pick(s, 1, 4), h = pick(s, 3, 6);
  Instance inst;
  inst.inputs = {random_tensor({n, c, h, h}, s), random_tensor({d, c, k, k}, s, 0.5)};
  const std::size_t pad = (k - 1) / 2;
  const std::size_t ho = (h + 2 * pad - k) / stride + 1;
  auto r = random_tensor({n, d, ho, ho}, s);
  inst.loss = [=](const std::vector<Tensor<D>>& in) { return projected_sum(conv2d(in[0], in[1], stride, pad).y, r); };
  auto out = conv2d(inst.inputs[0], inst.inputs[1], stride, pad);
  auto g = conv2d_backward(out.cache, r, true);
  if (opt.perturb_conv) {
    for (auto& v : g.dw.mutable_data()) v *= 1.001;
  }
  inst.analytic = {g.dx, g.dw};
  return inst;
}

inline Instance relu_instance(RngStream& s, const GradSuiteOptions&) {
  const Shape shape{pick(s, 1, 3), pick(s, 1, 3), pick(s, 2, 4), pick(s, 2, 4)};
  Instance inst;
  inst.inputs = {random_tensor(shape, s)};
  auto r = random_tensor(shape, s);
  inst.loss = [=](const std::vector<Tensor<D>>& in) { return projected_sum(relu(in[0]).y, r); };
  auto out = relu(inst.inputs[0]);
  inst.analytic = {relu_backward(out.cache, r)};
  return inst;
}

inline Instance batchnorm_instance(RngStream& s, const GradSuiteOptions&, BnMode mode) {
  const std::size_t n = pick(s, 2, 3), c = pick(s, 1, 3), h = pick(s, 2, 4);
  Instance inst;
  inst.inputs = {random_tensor({n, c, h, h}, s, 1.5), random_tensor({c}, s, 0.5), random_tensor({c}, s)};
  for (auto& g : inst.inputs[1].mutable_data()) g += 1.0;
  BnRunningStats<D> stats = BnRunningStats<D>::fresh(c);
  stats.mean = random_tensor({c}, s, 0.3);
  for (auto& v : stats.var.mutable_data()) v = 0.5 + s.uniform();
  auto r = random_tensor({n, c, h, h}, s);
  inst.loss = [=](const std::vector<Tensor<D>>& in) {
    BnRunningStats<D> st = stats;
    return projected_sum(batchnorm(in[0], in[1], in[2], mode, st).y, r);
  };
  BnRunningStats<D> st = stats;
  auto out = batchnorm(inst.inputs[0], inst.inputs[1], inst.inputs[2], mode, st);
  auto g = batchnorm_backward(out.cache, r);
  inst.analytic = {g.dx, g.dgamma, g.dbeta};
  return inst;
}

inline Instance linear_instance(RngStream& s, const GradSuiteOptions&) {
  const std::size_t n = pick(s, 1, 4), in = pick(s, 1, 6), out = pick(s, 1, 5);
  Instance inst;
  inst.inputs = {random_tensor({n, in}, s), random_tensor({out, in}, s), random_tensor({out}, s)};
  auto r = random_tensor({n, out}, s);
  inst.loss = [=](const std::vector<Tensor<D>>& v) { return projected_sum(linear(v[0], v[1], v[2]).y, r); };
  auto o = linear(inst.inputs[0], inst.inputs[1], inst.inputs[2]);
  auto g = linear_backward(o.cache, r);
  inst.analytic = {g.dx, g.dw, g.db};
  return inst;
}

inline Instance pool_instance(RngStream& s, const GradSuiteOptions&) {
  const Shape shape{pick(s, 1, 3), pick(s, 1, 4), pick(s, 1, 5), pick(s, 1, 5)};
  Instance inst;
  inst.inputs = {random_tensor(shape, s)};
  auto r = random_tensor({shape[0], shape[1]}, s);
  inst.loss = [=](const std::vector<Tensor<D>>& in) { return projected_sum(global_avg_pool(in[0]).y, r); };
  auto o = global_avg_pool(inst.inputs[0]);
  inst.analytic = {global_avg_pool_backward(o.cache, r)};
  return inst;
}

inline Instance xent_instance(RngStream& s, const GradSuiteOptions&) {
  const std::size_t n = pick(s, 1, 5), k = pick(s, 2, 10);
  const double eps = 0.2 * s.uniform();
  std::vector<int> labels(n);
  for (auto& l : labels) l = static_cast<int>(s.below(k));
  Instance inst;
  inst.inputs = {random_tensor({n, k}, s, 2.0)};
  inst.loss = [=](const std::vector<Tensor<D>>& in) {
    return softmax_xent(in[0], std::span<const int>(labels), eps).loss;
  };
  inst.analytic = {softmax_xent(inst.inputs[0], std::span<const int>(labels), eps).dlogits};
  return inst;
}

inline Instance block_instance(RngStream& s, const GradSuiteOptions&, Variant variant, BlockKind kind) {
  const std::size_t in = pick(s, 2, 4);
  const bool transition = s.bernoulli(0.5);
  const std::size_t stride = transition && s.bernoulli(0.5) ? 2 : 1;
  const std::size_t out = transition ? pick(s, 2, 5) : in;
  const std::size_t mid = kind == BlockKind::basic ? out : pick(s, 1, 3);
  const std::size_t n = 2, h = pick(s, 3, 5);
  const auto spec = make_block_spec(variant, kind, in, mid, out, stride, 1, 1, 1);
  const auto specs = block_param_specs(spec);

  Instance inst;
  inst.inputs.push_back(random_tensor({n, in, h, h}, s));
  for (const auto& p : specs) {
    Tensor<D> t = random_tensor(p.shape, s, p.role == ParamRole::conv_weight ? 0.5 : 0.3);
    if (p.role == ParamRole::bn_gamma || p.role == ParamRole::alpha) {
      for (auto& v : t.mutable_data()) v += 1.0;
    }
    inst.inputs.push_back(std::move(t));
  }
  const std::size_t ho = (h - 1) / stride + 1;
  auto r = random_tensor({n, out, ho, ho}, s);

  auto make_params = [specs](const std::vector<Tensor<D>>& v) {
    ParamSet<D> params;
    for (std::size_t i = 0; i < specs.size(); ++i) params.add(specs[i].name, v[i + 1], "test", specs[i].role);
    return params;
  };
  inst.loss = [=](const std::vector<Tensor<D>>& v) {
    ParamSet<D> params = make_params(v);
    BnBuffers<D> buffers;
    BlockCache<D> cache;
    return projected_sum(block_forward(v[0], spec, params, buffers, PassMode{}, cache), r);
  };
  ParamSet<D> params = make_params(inst.inputs);
  BnBuffers<D> buffers;
  BlockCache<D> cache;
  block_forward(inst.inputs[0], spec, params, buffers, PassMode{}, cache);
  inst.analytic.push_back(block_backward(cache, r, params, true));
  for (const auto& p : specs) inst.analytic.push_back(params.at(p.name).grad);
  return inst;
}

inline GradCaseResult run_case(const std::string& group, const std::string& name, const InstanceFactory& make,
                               const GradSuiteOptions& opt) {
  GradCaseResult res;
  res.group = group;
  res.name = name;
  for (std::size_t i = 0; i < opt.instances; ++i) {
    RngStream s(opt.seed, "gradcheck/" + name + "/" + std::to_string(i));
    Instance inst = make(s, opt);
    std::vector<Tensor<D>*> ptrs;
    for (auto& t : inst.inputs) ptrs.push_back(&t);
    auto report = finite_difference_check([&] { return inst.loss(inst.inputs); }, ptrs, inst.analytic, inst.step);
    res.checked += report.checked;
    res.kinks_skipped += report.kinks_skipped;
    res.max_rel_error = std::max(res.max_rel_error, report.max_rel_error);
    ++res.instances;
  }
  res.passed = res.checked > 0 && res.max_rel_error < opt.tolerance;
  return res;
}

}  // namespace detail

/// Finite-difference verification of every layer kind and of a full
/// residual block per variant and block kind, in 64-bit precision.
inline GradSuiteReport run_gradcheck_suite(const GradSuiteOptions& opt = {},
                                           const std::function<void(const GradCaseResult&)>& on_case = {}) {
  using namespace detail;
  GradSuiteReport report;
  auto add = [&](const std::string& group, const std::string& name, InstanceFactory make) {
    report.cases.push_back(run_case(group, name, make, opt));
    if (on_case) on_case(report.cases.back());
  };
  add("layer", "conv2d_3x3", [](RngStream& s, const GradSuiteOptions& o) { return conv_instance(s, o, 3, 1); });
  add("layer", "conv2d_3x3_stride2", [](RngStream& s, const GradSuiteOptions& o) { return conv_instance(s, o, 3, 2); });
  add("layer", "conv2d_1x1", [](RngStream& s, const GradSuiteOptions& o) { return conv_instance(s, o, 1, 1); });
  add("layer", "conv2d_1x1_stride2", [](RngStream& s, const GradSuiteOptions& o) { return conv_instance(s, o, 1, 2); });
  add("layer", "relu", relu_instance);
  add("layer", "batchnorm_train",
      [](RngStream& s, const GradSuiteOptions& o) { return batchnorm_instance(s, o, BnMode::train); });
  add("layer", "batchnorm_eval",
      [](RngStream& s, const GradSuiteOptions& o) { return batchnorm_instance(s, o, BnMode::eval); });
  add("layer", "linear", linear_instance);
  add("layer", "global_avg_pool", pool_instance);
  add("layer", "softmax_xent", xent_instance);
  for (Variant v : kAllVariants) {
    for (BlockKind k : {BlockKind::basic, BlockKind::bottleneck}) {
      const std::string name =
          "block_" + std::string(to_string(v)) + (k == BlockKind::basic ? "_basic" : "_bottleneck");
      add("block", name, [v, k](RngStream& s, const GradSuiteOptions& o) { return block_instance(s, o, v, k); });
    }
  }
  return report;
}

}  // namespace nfres
