#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "nfres/checkpoint.hpp"

using namespace nfres;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "nfres_checkpoint_test";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Checkpoint, RoundTripRestoresParametersAndBuffers) {
  auto a = build_resnet<float>(18, Variant::batchnorm, 10, InitScheme::fan_in(), 1);
  RngStream s(2, "x");
  NetworkCache<float> cache;
  a.forward(gaussian_sample<float>({2, 3, 32, 32}, 0, 1, s), PassMode{BnMode::train, false}, cache);
  ASSERT_FALSE(a.buffers.empty());
  const auto path = scratch("bn.ckpt");
  save_checkpoint(a, path);

  auto b = build_resnet<float>(18, Variant::batchnorm, 10, InitScheme::fan_in(), 1);
  b.params.set_value("head.bias", Tensor<float>({10}, 3.0f));
  load_checkpoint(b, path);
  for (const auto& [name, p] : a.params) EXPECT_EQ(p.value, b.params.value(name)) << name;
  ASSERT_EQ(a.buffers.size(), b.buffers.size());
  for (const auto& [name, st] : a.buffers) {
    EXPECT_EQ(st.mean, b.buffers.at(name).mean) << name;
    EXPECT_EQ(st.var, b.buffers.at(name).var) << name;
  }
}

TEST(Checkpoint, ArchitectureMismatchIsRejected) {
  auto a = build_resnet<float>(18, Variant::id_short, 10, InitScheme::fan_out(), 1);
  const auto path = scratch("id.ckpt");
  save_checkpoint(a, path);
  auto b = build_resnet<float>(18, Variant::learn_scalar, 10, InitScheme::fan_out(), 1);
  EXPECT_THROW(load_checkpoint(b, path), FormatError);
}

TEST(Checkpoint, TruncatedFileIsRejected) {
  auto a = build_resnet<float>(18, Variant::id_short, 10, InitScheme::fan_out(), 1);
  const auto path = scratch("cut.ckpt");
  save_checkpoint(a, path);
  fs::resize_file(path, fs::file_size(path) / 2);
  EXPECT_THROW(load_checkpoint(a, path), FormatError);
}

TEST(Checkpoint, ForeignFileIsRejected) {
  const auto path = scratch("foreign.ckpt");
  std::ofstream(path) << "not a checkpoint at all";
  auto a = build_resnet<float>(18, Variant::id_short, 10, InitScheme::fan_out(), 1);
  EXPECT_THROW(load_checkpoint(a, path), FormatError);
  EXPECT_THROW(load_checkpoint(a, scratch("absent.ckpt")), FormatError);
}
