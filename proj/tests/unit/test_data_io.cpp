#include <gtest/gtest.h>

#include <filesystem>

#include "fscil/checkpoint.hpp"
#include "fscil/data.hpp"
#include "fscil/ssl.hpp"

using namespace fscil;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> cifar_fixture(std::size_t records) {
  std::vector<std::uint8_t> bytes;
  for (std::size_t r = 0; r < records; ++r) {
    bytes.push_back(static_cast<std::uint8_t>(r + 3));       // coarse
    bytes.push_back(static_cast<std::uint8_t>(97 - 11 * r));  // fine
    for (std::size_t i = 0; i < 3072; ++i) bytes.push_back(static_cast<std::uint8_t>((i * 7 + r * 31) % 256));
  }
  return bytes;
}

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("fscil_test_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

}  // namespace

TEST(Cifar, ParsesRecordFields) {
  const auto s = parse_cifar100_binary(cifar_fixture(3));
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s.labels, (std::vector<int>{97, 86, 75}));
  EXPECT_EQ(s.coarse_labels, (std::vector<std::uint8_t>{3, 4, 5}));
  EXPECT_EQ(s.channels, 3u);
  EXPECT_EQ(s.height, 32u);
  // Record 1, first green-plane byte: (1024·7 + 31) mod 256.
  EXPECT_FLOAT_EQ(s.image(1)[1024], static_cast<float>((1024 * 7 + 31) % 256) / 255.0f);
}

TEST(Cifar, EncodeRoundTripsBitwise) {
  const auto bytes = cifar_fixture(3);
  EXPECT_EQ(encode_cifar100_binary(parse_cifar100_binary(bytes)), bytes);
}

TEST(Cifar, TruncationReportsOffset) {
  auto bytes = cifar_fixture(3);
  bytes.resize(2 * 3074 + 100);
  try {
    parse_cifar100_binary(bytes);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset 6148"), std::string::npos) << e.what();
  }
  EXPECT_TRUE(parse_cifar100_binary(std::vector<std::uint8_t>{}).empty());
}

TEST(Cifar, EncodeRejectsWrongShape) {
  LabeledImageSet s;
  s.channels = 1;
  s.height = s.width = 4;
  s.push_back(std::vector<float>(16, 0.0f), 0);
  EXPECT_THROW(encode_cifar100_binary(s), ShapeError);
}

TEST_F(TempDir, CifarFileRoundTrip) {
  const auto s = parse_cifar100_binary(cifar_fixture(2));
  save_cifar100_binary(s, dir_ / "train.bin");
  const auto back = load_cifar100_binary(dir_ / "train.bin");
  EXPECT_EQ(back.pixels, s.pixels);
  EXPECT_EQ(back.labels, s.labels);
  EXPECT_THROW(load_cifar100_binary(dir_ / "missing.bin"), std::exception);
}

TEST_F(TempDir, RawTensorDatasetRoundTrip) {
  const auto s = generate_synthetic(3, 2, 6, 7, {}, 1);
  save_raw_tensor_dataset(s, dir_ / "raw");
  const auto back = load_raw_tensor_dataset(dir_ / "raw");
  EXPECT_EQ(back.pixels, s.pixels);
  EXPECT_EQ(back.labels, s.labels);
  EXPECT_EQ(back.height, 6u);
  fs::resize_file(dir_ / "raw" / "data.f32", 10);
  EXPECT_THROW(load_raw_tensor_dataset(dir_ / "raw"), FormatError);
  EXPECT_THROW(load_raw_tensor_dataset(dir_ / "nowhere"), FormatError);
}

TEST(Synthetic, DeterministicAndStreamSeparated) {
  const auto a = generate_synthetic(4, 3, 8, 11, {}, 1);
  const auto b = generate_synthetic(4, 3, 8, 11, {}, 1);
  const auto c = generate_synthetic(4, 3, 8, 11, {}, 2);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_NE(a.pixels, c.pixels);
  EXPECT_EQ(a.size(), 12u);
  for (float v : a.pixels) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Synthetic, DihedralPoseMatchesViewTransforms) {
  Rng rng(1);
  std::vector<float> img(2 * 5 * 5);
  for (auto& v : img) v = static_cast<float>(rng.uniform());
  EXPECT_EQ(dihedral_pose(img, 5, 4, false), img);
  const ViewTransform turns[] = {ViewTransform::identity, ViewTransform::rot90, ViewTransform::rot180,
                                 ViewTransform::rot270};
  for (unsigned k = 0; k < 4; ++k) {
    EXPECT_EQ(dihedral_pose(img, 5, k, false), transform_planes<float>(img, 2, 5, 5, turns[k]));
  }
  const auto rotated = transform_planes<float>(img, 2, 5, 5, ViewTransform::rot90);
  EXPECT_EQ(dihedral_pose(img, 5, 1, true), transform_planes<float>(rotated, 2, 5, 5, ViewTransform::hflip));
}

TEST(Split, SessionsAndShots) {
  const auto train = generate_synthetic(10, 6, 4, 1, {}, 1);
  const auto test = generate_synthetic(10, 2, 4, 1, {}, 2);
  SplitPlan plan;
  plan.base_classes = 6;
  plan.way = 2;
  plan.shot = 3;
  plan.sessions = 2;
  plan.sample_seed = 5;
  const auto specs = split_sessions(train, test, plan);
  ASSERT_EQ(specs.size(), 3u);
  EXPECT_EQ(specs[0].support.size(), 36u);
  EXPECT_EQ(specs[1].class_ids, (std::vector<int>{6, 7}));
  EXPECT_EQ(specs[2].support.size(), 6u);
  EXPECT_EQ(specs[2].query.size(), 4u);
  plan.sessions = 3;
  EXPECT_THROW(split_sessions(train, test, plan), PlanError);
  plan.sessions = 2;
  plan.shot = 7;
  EXPECT_THROW(split_sessions(train, test, plan), PlanError);
  plan.shot = 3;
  plan.class_order = {0, 1, 2};
  EXPECT_THROW(split_sessions(train, test, plan), PlanError);
}

TEST(Split, FileRoundTripReproducesSessions) {
  const auto train = generate_synthetic(8, 5, 4, 1, {}, 1);
  const auto test = generate_synthetic(8, 2, 4, 1, {}, 2);
  SplitPlan plan;
  plan.base_classes = 4;
  plan.way = 2;
  plan.shot = 2;
  plan.sessions = 2;
  plan.class_order = {7, 6, 5, 4, 3, 2, 1, 0};
  const auto specs = split_sessions(train, test, plan);
  const auto again = split_sessions_from_file(train, test, parse_split_file(format_split_file(specs)));
  ASSERT_EQ(again.size(), specs.size());
  for (std::size_t t = 0; t < specs.size(); ++t) {
    EXPECT_EQ(again[t].class_ids, specs[t].class_ids);
    EXPECT_EQ(again[t].support_indices, specs[t].support_indices);
    EXPECT_EQ(again[t].query.labels, specs[t].query.labels);
  }
}

TEST(Split, FileErrors) {
  EXPECT_THROW(parse_split_file("# nothing\n"), FormatError);
  EXPECT_THROW(parse_split_file("session 1 classes 0\n"), FormatError);
  EXPECT_THROW(parse_split_file("bogus 0\n"), FormatError);
  const auto train = generate_synthetic(4, 2, 4, 1, {}, 1);
  EXPECT_THROW(split_sessions_from_file(train, train, parse_split_file("session 0 classes 0 1\nsession 1 classes 1\n")),
               PlanError);
  EXPECT_THROW(
      split_sessions_from_file(train, train, parse_split_file("session 0 classes 0\nsession 1 classes 2\nsupport 1 0\n")),
      PlanError);
}

TEST_F(TempDir, CheckpointRoundTripsStateAndBuffers) {
  const auto train = generate_synthetic(4, 4, 8, 1, {}, 1);
  const auto test = generate_synthetic(4, 2, 8, 1, {}, 2);
  SplitPlan plan;
  plan.base_classes = 4;
  plan.sessions = 0;
  const auto specs = split_sessions(train, test, plan);
  ProtocolConfig cfg;
  cfg.base_epochs = 1;
  cfg.batch_size = 8;
  cfg.patchmix.n = 4;
  cfg.patchmix.k_min = 1;
  cfg.patchmix.k_max = 2;
  NetConfig nc;
  nc.backbone.stage_channels = {4, 8};
  const auto st = run_base_session<double>(specs[0], cfg, nc);
  save_checkpoint(st, dir_ / "s.ckpt");
  const auto ck = load_checkpoint<double>(dir_ / "s.ckpt");
  EXPECT_EQ(ck.seen_classes, st.seen_classes);
  EXPECT_EQ(ck.buffer.size(), st.buffer.size());
  const auto a = st.net.named_state(), b = ck.net.named_state();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    for (std::size_t j = 0; j < a[i].tensor.numel(); ++j) ASSERT_EQ(a[i].tensor[j], b[i].tensor[j]) << a[i].name;
  }
  auto bytes = encode_checkpoint(st);
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint<double>(bytes), FormatError);
  bytes = encode_checkpoint(st);
  bytes.resize(bytes.size() / 2);
  EXPECT_THROW(decode_checkpoint<double>(bytes), FormatError);
}
