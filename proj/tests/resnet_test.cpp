#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "nfres/resnet.hpp"

using namespace nfres;

namespace {

// Hand count of the basic-block network: stem, 3x3 convs, 1x1 skips at the
// three transitions, and the 512 -> 10 head with bias.
std::size_t resnet18_hand_count(bool skip_everywhere) {
  const std::size_t stem = 64 * 3 * 9;
  const std::size_t w[] = {64, 128, 256, 512};
  std::size_t total = stem;
  std::size_t in = 64;
  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t b = 0; b < 2; ++b) {
      total += w[s] * in * 9 + w[s] * w[s] * 9;
      if (in != w[s] || skip_everywhere) total += w[s] * in;
      in = w[s];
    }
  }
  return total + 10 * 512 + 10;
}

ParamSet<double> random_block_params(const ResidualBlockSpec& spec, RngStream& s) {
  ParamSet<double> p;
  for (const auto& ps : block_param_specs(spec)) {
    Tensor<double> t = gaussian_sample<double>(ps.shape, 0.0, 0.3, s);
    if (ps.role == ParamRole::bn_gamma || ps.role == ParamRole::alpha) {
      for (auto& v : t.mutable_data()) v += 1.0;
    }
    p.add(ps.name, t, "test", ps.role);
  }
  return p;
}

Tensor<double> run_block(const Tensor<double>& x, const ResidualBlockSpec& spec, const ParamSet<double>& p) {
  BnBuffers<double> buffers;
  BlockCache<double> cache;
  return block_forward(x, spec, p, buffers, PassMode{}, cache);
}

}  // namespace

TEST(ParamCount, ResNet18HandArithmetic) {
  EXPECT_EQ(resnet18_hand_count(false), 11164362u);
  EXPECT_EQ(resnet18_hand_count(true), 11516618u);
}

TEST(ParamCount, FrozenTotals) {
  auto count = [](std::size_t depth, Variant v) {
    return count_params(build_resnet<float>(depth, v, 10, InitScheme::fan_out(), 0));
  };
  EXPECT_EQ(count(18, Variant::id_short), 11164362u);
  EXPECT_EQ(count(18, Variant::conv_short), 11516618u);
  EXPECT_EQ(count(18, Variant::batchnorm), 11172170u);
  EXPECT_EQ(count(50, Variant::id_short), 23467722u);
  EXPECT_EQ(count(50, Variant::conv_short), 38016714u);
}

TEST(ParamCount, LearnScalarAddsOnePerBlock) {
  for (std::size_t depth : {18u, 50u, 101u}) {
    const auto id = count_params(build_resnet<float>(depth, Variant::id_short, 10, InitScheme::fan_out(), 0));
    const auto ls = count_params(build_resnet<float>(depth, Variant::learn_scalar, 10, InitScheme::fan_out(), 0));
    EXPECT_EQ(ls - id, build_block_specs(depth, Variant::learn_scalar).size()) << depth;
  }
}

TEST(Layout, BlockCountsAndStages) {
  EXPECT_EQ(build_block_specs(18, Variant::id_short).size(), 8u);
  EXPECT_EQ(build_block_specs(50, Variant::id_short).size(), 16u);
  EXPECT_EQ(build_block_specs(101, Variant::id_short).size(), 33u);
  auto specs = build_block_specs(50, Variant::id_short);
  for (std::size_t i = 0; i < specs.size(); ++i) EXPECT_EQ(specs[i].index, i + 1);
  EXPECT_EQ(specs.front().name, "stage1.block1");
  EXPECT_EQ(specs.back().out_channels, 2048u);
  EXPECT_EQ(specs[3].stride, 2u);
  EXPECT_EQ(specs[3].stage, 2u);
  EXPECT_THROW(stage_layout(34), InvalidArgument);
  EXPECT_THROW(parse_depth("resnet34"), InvalidArgument);
}

TEST(Layout, SkipConvolutions) {
  for (Variant v : kAllVariants) {
    for (const auto& b : build_block_specs(50, v)) {
      const bool geometry = b.stride != 1 || b.in_channels != b.out_channels;
      EXPECT_EQ(b.conv_skip, geometry || v == Variant::conv_short) << b.name;
      EXPECT_EQ(b.c_squared, is_scaled(v) ? 0.5 : 1.0);
      EXPECT_EQ(b.has_bn, v == Variant::batchnorm);
      EXPECT_EQ(b.learnable_alpha, v == Variant::learn_scalar);
    }
  }
}

TEST(Variants, NamesRoundTrip) {
  for (Variant v : kAllVariants) EXPECT_EQ(parse_variant(to_string(v)), v);
  EXPECT_THROW(parse_variant("resnet"), InvalidArgument);
}

TEST(Block, DeadBranchScalesIdentityByRootHalf) {
  RngStream s(1, "dead");
  const auto spec = make_block_spec(Variant::id_short, BlockKind::basic, 4, 4, 4, 1, 1, 1, 1);
  auto p = random_block_params(spec, s);
  p.set_value(spec.conv_name(1), Tensor<double>(spec.conv_shape(1), 0.0));
  auto x = gaussian_sample<double>({2, 4, 5, 5}, 0, 1, s);
  auto y = run_block(x, spec, p);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], std::sqrt(0.5) * x[i], 1e-15);
}

TEST(Block, StandardDeadBranchIsIdentity) {
  RngStream s(2, "dead");
  const auto spec = make_block_spec(Variant::standard, BlockKind::bottleneck, 8, 2, 8, 1, 1, 1, 1);
  auto p = random_block_params(spec, s);
  p.set_value(spec.conv_name(2), Tensor<double>(spec.conv_shape(2), 0.0));
  auto x = gaussian_sample<double>({2, 8, 4, 4}, 0, 1, s);
  EXPECT_EQ(run_block(x, spec, p), x);
}

TEST(Block, LearnScalarAtOneMatchesIdShort) {
  for (BlockKind kind : {BlockKind::basic, BlockKind::bottleneck}) {
    for (std::size_t stride : {1u, 2u}) {
      RngStream s(3, "ls");
      const std::size_t out = stride == 2 ? 6 : 3;
      const auto id = make_block_spec(Variant::id_short, kind, 3, 2, out, stride, 1, 1, 1);
      const auto ls = make_block_spec(Variant::learn_scalar, kind, 3, 2, out, stride, 1, 1, 1);
      auto p = random_block_params(ls, s);
      p.set_value(ls.alpha_name(), Tensor<double>({1}, 1.0));
      auto x = gaussian_sample<double>({2, 3, 5, 5}, 0, 1, s);
      auto a = run_block(x, id, p);
      auto b = run_block(x, ls, p);
      for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-14);
    }
  }
}

TEST(Block, LearnScalarIsAffineInAlpha) {
  RngStream s(4, "alpha");
  const auto spec = make_block_spec(Variant::learn_scalar, BlockKind::basic, 3, 3, 3, 1, 1, 1, 1);
  auto p = random_block_params(spec, s);
  auto x = gaussian_sample<double>({2, 3, 4, 4}, 0, 1, s);
  p.set_value(spec.alpha_name(), Tensor<double>({1}, 0.0));
  auto y0 = run_block(x, spec, p);
  p.set_value(spec.alpha_name(), Tensor<double>({1}, 2.5));
  auto y1 = run_block(x, spec, p);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y1[i] - y0[i], std::sqrt(0.5) * 2.5 * x[i], 1e-13);
}

TEST(Block, BackwardIsLinearInUpstreamGradient) {
  for (Variant v : kAllVariants) {
    RngStream s(5, "lin");
    const auto spec = make_block_spec(v, BlockKind::bottleneck, 4, 2, 8, 2, 2, 4, 1);
    auto p = random_block_params(spec, s);
    auto x = gaussian_sample<double>({3, 4, 6, 6}, 0, 1, s);
    auto g1 = gaussian_sample<double>({3, 8, 3, 3}, 0, 1, s);
    auto g2 = gaussian_sample<double>({3, 8, 3, 3}, 0, 1, s);
    Tensor<double> g12(g1.shape());
    for (std::size_t i = 0; i < g12.size(); ++i) g12.mutable_data()[i] = 2.0 * g1[i] - 3.0 * g2[i];
    auto back = [&](const Tensor<double>& g) {
      BnBuffers<double> buffers;
      BlockCache<double> cache;
      block_forward(x, spec, p, buffers, PassMode{}, cache);
      return block_backward(cache, g, p, false);
    };
    auto d1 = back(g1), d2 = back(g2), d12 = back(g12);
    for (std::size_t i = 0; i < d12.size(); ++i) EXPECT_NEAR(d12[i], 2.0 * d1[i] - 3.0 * d2[i], 1e-12);
  }
}

TEST(Block, RejectsWrongInputChannels) {
  RngStream s(6, "bad");
  const auto spec = make_block_spec(Variant::id_short, BlockKind::basic, 4, 4, 4, 1, 1, 1, 1);
  auto p = random_block_params(spec, s);
  EXPECT_THROW(run_block(Tensor<double>({1, 3, 4, 4}), spec, p), InvalidArgument);
}

TEST(Block, BackwardCacheIsSingleUse) {
  RngStream s(7, "once");
  const auto spec = make_block_spec(Variant::id_short, BlockKind::basic, 2, 2, 2, 1, 1, 1, 1);
  auto p = random_block_params(spec, s);
  BnBuffers<double> buffers;
  BlockCache<double> cache;
  auto y = block_forward(gaussian_sample<double>({1, 2, 3, 3}, 0, 1, s), spec, p, buffers, PassMode{}, cache);
  block_backward(cache, y, p, false);
  EXPECT_THROW(block_backward(cache, y, p, false), CacheReuse);
}

TEST(Network, ForwardShapesAndDeterminism) {
  auto a = build_resnet<float>(18, Variant::batchnorm, 10, InitScheme::fan_in(), 9);
  auto b = build_resnet<float>(18, Variant::batchnorm, 10, InitScheme::fan_in(), 9);
  RngStream s(1, "x");
  auto x = gaussian_sample<float>({2, 3, 32, 32}, 0, 1, s);
  NetworkCache<float> ca, cb;
  std::size_t seen = 0;
  auto la = a.forward(x, PassMode{BnMode::train, false}, ca, [&](std::size_t idx, const Tensor<float>& t) {
    EXPECT_EQ(idx, ++seen);
    EXPECT_EQ(t.dim(0), 2u);
  });
  auto lb = b.forward(x, PassMode{BnMode::train, false}, cb);
  EXPECT_EQ(seen, 8u);
  EXPECT_EQ(la.shape(), (Shape{2, 10}));
  EXPECT_EQ(la, lb);
}

TEST(Network, DifferentSeedsDifferentWeights) {
  auto a = build_resnet<float>(18, Variant::id_short, 10, InitScheme::fan_out(), 1);
  auto b = build_resnet<float>(18, Variant::id_short, 10, InitScheme::fan_out(), 2);
  EXPECT_FALSE(a.params.value("stage1.block1.conv1.weight") == b.params.value("stage1.block1.conv1.weight"));
}

TEST(Flops, ResNet18HandArithmetic) {
  // Stem at 32x32, then four stages at 32, 16, 8, 4 with three transitions.
  const std::uint64_t stem = 32ull * 32 * 64 * 3 * 9;
  const std::uint64_t stage1 = 4ull * 32 * 32 * 64 * 64 * 9;
  const std::uint64_t later = 134217728;  // each later stage: 2^27 MACs
  const std::uint64_t head = 5120;
  ArchDescription arch;
  arch.depth = 18;
  arch.variant = Variant::id_short;
  const auto f = count_flops(arch, 32);
  EXPECT_EQ(f.macs, stem + stage1 + 3 * later + head);
  EXPECT_EQ(f.flops_mac_as_2(), 2 * f.macs);
  EXPECT_EQ(f.flops_mac_as_1(), f.macs);
}
