#include <gtest/gtest.h>

#include <set>

#include "c3s3/volumes.hpp"
#include "temp_dir.hpp"

using namespace c3s3;

namespace {

using Kind = VolumeIoError::Kind;

Kind load_error_kind(const std::string& bytes) {
  try {
    decode_volume(bytes);
  } catch (const VolumeIoError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "decode_volume accepted corrupt bytes";
  return Kind::io;
}

Volume ramp(const Extent3& s) {
  Volume v(s);
  for (std::size_t i = 0; i < v.size(); ++i) v.voxels[i] = static_cast<float>(i) / static_cast<float>(v.size());
  return v;
}

}  // namespace

// --- generation -------------------------------------------------------------

TEST(Generate, SameSeedIsBitIdentical) {
  const auto a = generate_dataset(3, {16, 16, 16}, 42);
  const auto b = generate_dataset(3, {16, 16, 16}, 42);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].label, b[i].label);
  }
}

TEST(Generate, DistinctSeedsDiffer) {
  EXPECT_NE(generate_dataset(1, {16, 16, 16}, 1)[0].image, generate_dataset(1, {16, 16, 16}, 2)[0].image);
}

TEST(Generate, SampleDependsOnlyOnSeedAndIndex) {
  const auto few = generate_dataset(2, {16, 16, 16}, 9);
  const auto many = generate_dataset(5, {16, 16, 16}, 9);
  EXPECT_EQ(few[1].image, many[1].image);
}

TEST(Generate, RespectsIntensityAndForegroundBounds) {
  const GeneratorOptions opt;
  for (const auto& g : generate_dataset_with_blobs(12, {16, 20, 24}, 5, opt)) {
    const auto& s = g.sample;
    for (float v : s.image.voxels) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
    const double frac = static_cast<double>(count_foreground(s.label)) / static_cast<double>(s.label.size());
    EXPECT_GE(frac, opt.min_foreground_fraction);
    EXPECT_LE(frac, opt.max_foreground_fraction);
    // Labels are exactly the union of the returned ellipsoids.
    for (std::size_t d = 0; d < 16; d += 3)
      for (std::size_t h = 0; h < 20; h += 3)
        for (std::size_t w = 0; w < 24; w += 3) {
          bool inside = false;
          for (const auto& e : g.blobs) inside = inside || e.level(double(d), double(h), double(w)) <= 1.0;
          EXPECT_EQ(s.label.at(d, h, w), inside ? 1 : 0);
        }
  }
}

TEST(Generate, DegenerateShapesAreRejected) {
  EXPECT_THROW(generate_dataset(1, {8, 16, 16}, 0), ShapeError);
  EXPECT_THROW(generate_dataset(1, {16, 16, 0}, 0), ShapeError);
  EXPECT_THROW(generate_dataset(0, {16, 16, 16}, 0), std::invalid_argument);
}

// --- partitioning -----------------------------------------------------------

TEST(Split, FortyVolumesGiveTenSixTwentyFour) {
  const auto s = split_sizes(40, 0.2, 0.25);
  EXPECT_EQ(s.test, 10u);
  EXPECT_EQ(s.labeled, 6u);
  EXPECT_EQ(s.unlabeled, 24u);
}

TEST(Split, DefaultToySplitIsFourSixteenTwenty) {
  const auto s = split_sizes(40, 0.2, 0.5);
  EXPECT_EQ(s.test, 20u);
  EXPECT_EQ(s.labeled, 4u);
  EXPECT_EQ(s.unlabeled, 16u);
}

TEST(Split, InvalidFractionsAreConfigErrors) {
  EXPECT_THROW(split_sizes(40, 1.5, 0.25), ConfigError);
  EXPECT_THROW(split_sizes(40, 0.0, 0.25), ConfigError);
  EXPECT_THROW(split_sizes(40, 0.2, 1.0), ConfigError);
  EXPECT_THROW(split_sizes(40, 0.6, 0.25), ConfigError);  // fewer unlabeled than labeled
  EXPECT_THROW(split_sizes(3, 0.2, 0.0), ConfigError);    // no labeled sample
}

TEST(Split, PartitionsAreDisjoint) {
  const auto split = generate_split(16, {16, 16, 16}, 0.25, 0.25, 4);
  std::set<std::vector<float>> seen;
  for (const auto& s : split.test) EXPECT_TRUE(seen.insert(s.image.voxels).second);
  for (const auto& s : split.labeled) EXPECT_TRUE(seen.insert(s.image.voxels).second);
  for (const auto& v : split.unlabeled) EXPECT_TRUE(seen.insert(v.voxels).second);
  EXPECT_GE(split.unlabeled.size(), split.labeled.size());
}

// --- augmentation -----------------------------------------------------------

TEST(Augment, FlipTwiceIsIdentity) {
  const auto s = generate_dataset(1, {16, 16, 16}, 3)[0];
  for (int axis = 0; axis < 3; ++axis) {
    const auto once = augment(s.image, s.label, Augmentation::flip(axis));
    const auto twice = augment(once.image, once.label, Augmentation::flip(axis));
    EXPECT_EQ(twice.image, s.image);
    EXPECT_EQ(*twice.label, s.label);
    EXPECT_EQ(count_foreground(*once.label), count_foreground(s.label));
  }
}

TEST(Augment, FlipMovesMarkedVoxel) {
  LabelVolume l({8, 8, 8});
  l.at(1, 2, 3) = 1;
  const auto out = augment(Volume({8, 8, 8}), l, Augmentation::flip(0));
  EXPECT_EQ(out.label->at(6, 2, 3), 1);
  EXPECT_EQ(count_foreground(*out.label), 1u);
}

TEST(Augment, ZeroNoiseLeavesImageUnchanged) {
  const Volume v = ramp({8, 8, 8});
  EXPECT_EQ(augment(v, std::nullopt, Augmentation::noise(0.0, 1)).image, v);
}

TEST(Augment, NoiseIsClampedAndSparesLabels) {
  const auto s = generate_dataset(1, {16, 16, 16}, 8)[0];
  const auto out = augment(s.image, s.label, Augmentation::noise(0.5, 77));
  EXPECT_NE(out.image, s.image);
  EXPECT_EQ(*out.label, s.label);
  for (float v : out.image.voxels) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Augment, CropThatContainsTheBlobKeepsForegroundCount) {
  LabelVolume l({16, 16, 16});
  for (std::size_t d = 5; d < 9; ++d)
    for (std::size_t h = 6; h < 10; ++h) l.at(d, h, 7) = 1;
  const auto out = augment(Volume({16, 16, 16}), l, Augmentation::crop_pad({2, -3, 4}));
  EXPECT_EQ(count_foreground(*out.label), count_foreground(l));
  EXPECT_EQ(out.label->at(7, 3, 11), 1);
}

TEST(Augment, MismatchedLabelIsRejected) {
  EXPECT_THROW(augment(Volume({8, 8, 8}), LabelVolume({8, 8, 9}), Augmentation::flip(0)), ShapeError);
}

// --- file format ------------------------------------------------------------

TEST(VolumeFile, RoundTripIsBitIdentical) {
  TempDir dir;
  const auto s = generate_dataset(1, {16, 16, 16}, 12)[0];
  save_volume(dir / "img.vol", s.image);
  save_label(dir / "lab.vol", s.label);
  EXPECT_EQ(load_volume(dir / "img.vol"), s.image);
  EXPECT_EQ(load_label(dir / "lab.vol"), s.label);
}

TEST(VolumeFile, RowMajorOffsets) {
  Volume v({4, 4, 4});
  v.at(1, 2, 3) = 0.75f;
  EXPECT_EQ(v.index(1, 2, 3), 27u);
  const std::string bytes = encode_volume(v);
  const std::size_t header = bytes.size() - 64 * 4;
  float stored = 0.0f;
  std::memcpy(&stored, bytes.data() + header + 27 * 4, 4);
  EXPECT_EQ(stored, 0.75f);
  EXPECT_EQ(decode_volume(bytes).voxels[27], 0.75f);
}

TEST(VolumeFile, CorruptionKindsAreDistinct) {
  const std::string good = encode_volume(ramp({4, 4, 4}));
  EXPECT_EQ(load_error_kind(good.substr(0, good.size() - 5)), Kind::truncated_payload);
  EXPECT_EQ(load_error_kind(good + "xyzw"), Kind::extent_mismatch);
  EXPECT_EQ(load_error_kind("NOTAVOL1" + good.substr(8)), Kind::bad_magic);

  std::string bad_json = good;
  bad_json[12] = '[';
  EXPECT_EQ(load_error_kind(bad_json), Kind::malformed_header);
  EXPECT_EQ(load_error_kind(encode_label(LabelVolume({4, 4, 4}))), Kind::wrong_kind);
}

TEST(VolumeFile, MissingFileIsIoError) {
  TempDir dir;
  try {
    load_volume(dir / "absent.vol");
    FAIL();
  } catch (const VolumeIoError& e) {
    EXPECT_EQ(e.kind(), Kind::io);
  }
}

TEST(SplitFiles, SaveLoadRoundTrip) {
  TempDir dir;
  const auto split = generate_split(8, {16, 16, 16}, 0.25, 0.25, 21);
  save_split(dir.path(), split);
  const auto back = load_split(dir.path());
  EXPECT_EQ(back.seed, 21u);
  ASSERT_EQ(back.labeled.size(), split.labeled.size());
  ASSERT_EQ(back.unlabeled.size(), split.unlabeled.size());
  ASSERT_EQ(back.test.size(), split.test.size());
  EXPECT_EQ(back.labeled[0].label, split.labeled[0].label);
  EXPECT_EQ(back.unlabeled.back(), split.unlabeled.back());
  EXPECT_EQ(back.test[1].image, split.test[1].image);
}

TEST(SplitFiles, MissingManifestIsDataError) {
  TempDir dir;
  EXPECT_THROW(load_split(dir.path()), DataError);
}
