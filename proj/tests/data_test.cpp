#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "nfres/data.hpp"

using namespace nfres;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("nfres_data_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::uint8_t> records(std::size_t n, std::uint8_t label = 3) {
  std::vector<std::uint8_t> b(n * kCifarRecord, 0);
  for (std::size_t i = 0; i < n; ++i) {
    b[i * kCifarRecord] = label;
    for (std::size_t j = 1; j < kCifarRecord; ++j) b[i * kCifarRecord + j] = static_cast<std::uint8_t>((i + j) % 256);
  }
  return b;
}

}  // namespace

TEST(CifarParse, RecordArithmetic) {
  auto raw = parse_cifar_bytes(records(10000), "batch");
  EXPECT_EQ(raw.size(), 10000u);
  EXPECT_EQ(raw.pixels.size(), 10000u * 3072u);
  EXPECT_EQ(raw.labels[9999], 3);
  EXPECT_EQ(raw.pixels[3071], static_cast<std::uint8_t>(3072 % 256));
}

TEST(CifarParse, TruncationNamesByteOffset) {
  auto b = records(2);
  b.push_back(7);
  try {
    parse_cifar_bytes(b, "data_batch_1.bin");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset 6146"), std::string::npos) << e.what();
  }
}

TEST(CifarParse, LabelOutOfRange) {
  auto b = records(3);
  b[2 * kCifarRecord] = 10;
  EXPECT_THROW(parse_cifar_bytes(b, "x"), FormatError);
}

TEST(CifarFiles, MissingFiles) {
  auto dir = scratch_dir("missing");
  EXPECT_THROW(read_cifar_file(dir / "nope.bin"), FormatError);
  EXPECT_THROW(load_cifar10(dir), FormatError);
  EXPECT_THROW(load_cifar10(dir / "absent"), FormatError);
}

TEST(CifarFiles, WriteReadRoundTrip) {
  auto dir = scratch_dir("roundtrip");
  auto raw = synthetic_cifar(5, 1);
  write_cifar_file(dir / "b.bin", raw);
  auto back = read_cifar_file(dir / "b.bin");
  EXPECT_EQ(back.labels, raw.labels);
  EXPECT_EQ(back.pixels, raw.pixels);
  EXPECT_EQ(fs::file_size(dir / "b.bin"), 5u * kCifarRecord);
}

TEST(CifarFiles, LoaderNormalizesWithTrainStatistics) {
  auto dir = scratch_dir("load");
  write_synthetic_cifar_dir(dir, 40, 30, 2);
  auto [train, test] = load_cifar10(dir, 150, 20);
  EXPECT_EQ(train.size(), 150u);
  EXPECT_EQ(test.size(), 20u);
  EXPECT_EQ(train.split, "train");
  auto m = moments(train.images.cast<double>(), {0, 2, 3});
  for (std::size_t ch = 0; ch < 3; ++ch) {
    EXPECT_NEAR(m.mean[ch], 0.0, 1e-6);
    EXPECT_NEAR(m.variance[ch], 1.0, 1e-6);
  }
}

TEST(CifarFiles, LimitTakesLeadingRecords) {
  auto dir = scratch_dir("limit");
  write_synthetic_cifar_dir(dir, 10, 5, 3);
  auto full = read_cifar_file(dir / "data_batch_1.bin");
  auto second = read_cifar_file(dir / "data_batch_2.bin");
  auto [train, test] = load_cifar10(dir, 12, 0);
  ASSERT_EQ(train.size(), 12u);
  EXPECT_EQ(test.size(), 5u);
  EXPECT_TRUE(std::equal(full.labels.begin(), full.labels.end(), train.labels.begin()));
  EXPECT_EQ(train.labels[10], second.labels[0]);
}

TEST(Synthetic, DeterministicAndBalancedEnough) {
  auto a = synthetic_cifar(500, 4), b = synthetic_cifar(500, 4);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_EQ(a.labels, b.labels);
  std::array<int, 10> counts{};
  for (int l : a.labels) ++counts[static_cast<std::size_t>(l)];
  for (int c : counts) EXPECT_GT(c, 20);
  EXPECT_THROW(synthetic_cifar(1, 0, 40.0, 11), InvalidArgument);
}

class AugmentTest : public ::testing::Test {
 protected:
  Tensor<double> batch() {
    RngStream s(1, "img");
    return gaussian_sample<double>({3, 3, 32, 32}, 0, 1, s);
  }
};

TEST_F(AugmentTest, DisabledIsIdentity) {
  auto x = batch();
  RngStream s(0, "aug");
  EXPECT_EQ(augment(x, s, AugmentConfig{false}), x);
}

TEST_F(AugmentTest, FlipIsAnInvolution) {
  auto x = batch();
  auto y = x;
  auto d = y.mutable_data();
  flip_horizontal(d.data(), 3, 32);
  EXPECT_FALSE(y == x);
  EXPECT_EQ(d[0], x[31]);
  flip_horizontal(d.data(), 3, 32);
  EXPECT_EQ(y, x);
}

TEST_F(AugmentTest, ForcedFlipTwiceIsIdentity) {
  auto x = batch();
  AugmentConfig cfg{true, 1.0, 0};  // always flip, no crop room
  RngStream s(0, "aug");
  EXPECT_EQ(augment(augment(x, s, cfg), s, cfg), x);
}

TEST_F(AugmentTest, CenteredCropIsIdentity) {
  auto x = batch();
  auto y = x;
  crop_padded(y.mutable_data().data(), 3, 32, 4, 4, 4);
  EXPECT_EQ(y, x);
}

TEST_F(AugmentTest, ShiftedCropMovesAndZeroFills) {
  auto x = batch();
  auto y = x;
  auto d = y.mutable_data();
  crop_padded(d.data(), 3, 32, 4, 0, 8);  // up 4 rows of padding, right by 4 columns
  EXPECT_EQ(d[0], 0.0);                      // row 0 comes from the padding
  EXPECT_EQ(d[4 * 32 + 0], x[0 * 32 + 4]);   // output (4, 0) <- input (0, 4)
  EXPECT_EQ(d[31 * 32 + 31], 0.0);           // column 31 <- input column 35
  EXPECT_THROW(crop_padded(d.data(), 3, 32, 4, 9, 0), InvalidArgument);
}

TEST_F(AugmentTest, SameStreamSameOutput) {
  auto x = batch();
  RngStream a(9, "aug"), b(9, "aug");
  EXPECT_EQ(augment(x, a), augment(x, b));
}

TEST(GatherBatch, SelectsRows) {
  Tensor<float> images(Shape{3, 1, 1, 2}, std::vector<float>{0, 1, 2, 3, 4, 5});
  auto b = gather_batch(images, {2, 0, 1}, 1, 2);
  EXPECT_EQ(b, (Tensor<float>(Shape{2, 1, 1, 2}, std::vector<float>{0, 1, 2, 3})));
}
