// Volumes, images, their on-disk formats, and the seeded RNG.

#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "transvert/volume.hpp"

namespace fs = std::filesystem;
using namespace transvert;

namespace {

fs::path temp_dir() {
  static int counter = 0;
  fs::path d = fs::temp_directory_path() /
               ("transvert_volume_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter++));
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST(Volume, IndexingIsXFastest) {
  Volume v = Volume::zeros({3, 4, 5}, {1, 1, 1}, {0, 0, 0}, VolumeDtype::U8);
  EXPECT_EQ(v.voxel_count(), 60u);
  EXPECT_EQ(v.index(0, 0, 0), 0u);
  EXPECT_EQ(v.index(1, 0, 0), 1u);
  EXPECT_EQ(v.index(0, 1, 0), 3u);
  EXPECT_EQ(v.index(0, 0, 1), 12u);
  v.at_u8(2, 3, 4) = 7;
  EXPECT_EQ(v.u8[v.index(2, 3, 4)], 7);
  EXPECT_TRUE(v.contains(2, 3, 4));
  EXPECT_FALSE(v.contains(3, 0, 0));
  EXPECT_FALSE(v.contains(-1, 0, 0));
}

TEST(Volume, WorldVoxelRoundTrip) {
  Volume v = Volume::zeros({10, 12, 14}, {0.7, 1.1, 2.0}, {-3, 4, -5}, VolumeDtype::F32);
  const Vec3 idx{2.5, 7.25, 13.0};
  const Vec3 p = voxel_to_world(v, idx);
  const Vec3 back = world_to_voxel(v, p);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(back[k], idx[k], 1e-12);
  const Vec3 origin = voxel_to_world(v, Vec3{0, 0, 0});
  for (int k = 0; k < 3; ++k) EXPECT_DOUBLE_EQ(origin[k], v.origin_mm[k]);
}

TEST(Volume, FileRoundTripU8) {
  const fs::path dir = temp_dir();
  Volume v = Volume::zeros({4, 3, 2}, {1, 2, 3}, {-1, 0, 1}, VolumeDtype::U8);
  for (std::size_t i = 0; i < v.u8.size(); ++i) v.u8[i] = std::uint8_t(i * 7 % 251);
  write_volume(v, dir / "a.vhdr");
  const Volume r = read_volume(dir / "a.vhdr");
  EXPECT_EQ(r.shape, v.shape);
  EXPECT_EQ(r.spacing_mm, v.spacing_mm);
  EXPECT_EQ(r.origin_mm, v.origin_mm);
  EXPECT_EQ(r.dtype, VolumeDtype::U8);
  EXPECT_EQ(r.u8, v.u8);
  fs::remove_all(dir);
}

TEST(Volume, FileRoundTripF32IsBitwise) {
  const fs::path dir = temp_dir();
  Volume v = Volume::zeros({5, 5, 5}, {0.5, 0.5, 0.5}, {0, 0, 0}, VolumeDtype::F32);
  Rng rng(11);
  for (float& x : v.f32) x = float(rng.normal());
  write_volume(v, dir / "b.vhdr");
  const Volume r = read_volume(dir / "b.vhdr");
  ASSERT_EQ(r.f32.size(), v.f32.size());
  for (std::size_t i = 0; i < v.f32.size(); ++i) {
    EXPECT_EQ(std::bit_cast<std::uint32_t>(r.f32[i]),
              std::bit_cast<std::uint32_t>(v.f32[i]));
  }
  fs::remove_all(dir);
}

TEST(Volume, ReadErrors) {
  const fs::path dir = temp_dir();
  EXPECT_THROW(read_volume(dir / "missing.vhdr"), DataError);
  Volume v = Volume::zeros({2, 2, 2}, {1, 1, 1}, {0, 0, 0}, VolumeDtype::U8);
  EXPECT_THROW(write_volume(v, dir / "bad.txt"), DataError);
  write_volume(v, dir / "ok.vhdr");
  // Truncate the payload and expect a size complaint.
  std::ofstream(dir / "ok.vraw", std::ios::binary | std::ios::trunc) << "xy";
  EXPECT_THROW(read_volume(dir / "ok.vhdr"), DataError);
  fs::remove_all(dir);
}

TEST(Image2D, FileRoundTrip) {
  const fs::path dir = temp_dir();
  Image2D img = Image2D::zeros({3, 4}, {1.2, 1.2}, {-1.2, -1.8});
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = float(i) * 0.25f;
  write_image(img, dir / "i.ihdr");
  const Image2D r = read_image(dir / "i.ihdr");
  EXPECT_EQ(r.shape, img.shape);
  EXPECT_EQ(r.spacing_mm, img.spacing_mm);
  EXPECT_EQ(r.origin_mm, img.origin_mm);
  EXPECT_EQ(r.data, img.data);
  // Row-major with u fastest.
  EXPECT_EQ(img.index(1, 2), std::size_t(1 + 3 * 2));
  fs::remove_all(dir);
}

TEST(Rng, DeterministicAndBounded) {
  Rng a(42), b(42), c(43);
  bool all_equal = true, any_diff_seed_diff = false;
  for (int i = 0; i < 100; ++i) {
    const std::uint64_t va = a.next_u64(), vb = b.next_u64(), vc = c.next_u64();
    all_equal = all_equal && (va == vb);
    any_diff_seed_diff = any_diff_seed_diff || (va != vc);
  }
  EXPECT_TRUE(all_equal);
  EXPECT_TRUE(any_diff_seed_diff);

  Rng r(7);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(r.below(13), 13u);
  }
}

TEST(Rng, ShuffleIsAPermutation) {
  std::vector<int> v(100);
  for (int i = 0; i < 100; ++i) v[std::size_t(i)] = i;
  Rng r(5);
  r.shuffle(v);
  std::set<int> seen(v.begin(), v.end());
  EXPECT_EQ(seen.size(), 100u);
  EXPECT_EQ(*seen.begin(), 0);
  EXPECT_EQ(*seen.rbegin(), 99);
}

TEST(Rng, NormalHasReasonableMoments) {
  Rng r(9);
  double sum = 0, sq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    sum += x;
    sq += x * x;
  }
  EXPECT_NEAR(sum / n, 0.0, 0.05);
  EXPECT_NEAR(sq / n, 1.0, 0.05);
}

TEST(Seeding, DeriveSeedSeparatesStreams) {
  const std::uint64_t s = 1234;
  EXPECT_NE(derive_seed(s, "a"), derive_seed(s, "b"));
  EXPECT_NE(derive_seed(s, "a", 0), derive_seed(s, "a", 1));
  EXPECT_EQ(derive_seed(s, "a", 3), derive_seed(s, "a", 3));
  EXPECT_NE(derive_seed(s, "a"), derive_seed(s + 1, "a"));
}

TEST(Labels, ValidRange) {
  EXPECT_EQ(kLabelMin, 8);
  EXPECT_EQ(kLabelMax, 24);
  Volume v = Volume::zeros({2, 2, 2}, {1, 1, 1}, {0, 0, 0}, VolumeDtype::U8);
  v.u8[0] = 8;
  v.u8[1] = 24;
  EXPECT_TRUE(v.valid_labels());
  v.u8[2] = 25;
  EXPECT_FALSE(v.valid_labels());
}
