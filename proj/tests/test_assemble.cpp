// Two-view centroid fusion and spine stacking.

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <map>

#include "transvert/transvert.hpp"

using namespace transvert;
namespace asm_ = transvert::assemble;

namespace {

drr::ConeBeamGeometry geometry(drr::View v) {
  drr::ConeBeamGeometry g;
  g.view = v;
  g.detector_shape = {129, 129};
  return g;
}

Volume ball_mask(std::array<int, 3> shape, Vec3 center_vox, double r, int label) {
  Volume m = Volume::zeros(shape, {1, 1, 1}, {0, 0, 0}, VolumeDtype::U8);
  for (int z = 0; z < shape[2]; ++z)
    for (int y = 0; y < shape[1]; ++y)
      for (int x = 0; x < shape[0]; ++x) {
        const double dx = x - center_vox[0], dy = y - center_vox[1],
                     dz = z - center_vox[2];
        if (dx * dx + dy * dy + dz * dz <= r * r)
          m.u8[m.index(x, y, z)] = std::uint8_t(label);
      }
  return m;
}

std::map<int, std::int64_t> label_counts(const Volume& v) {
  std::map<int, std::int64_t> c;
  for (std::uint8_t x : v.u8)
    if (x != 0) c[int(x)] += 1;
  return c;
}

}  // namespace

TEST(Fusion, RecoversSyntheticCentroidsExactly) {
  const auto gs = geometry(drr::View::Sagittal);
  const auto gc = geometry(drr::View::Coronal);
  Rng rng(15);
  for (int i = 0; i < 25; ++i) {
    const Vec3 p{rng.uniform(-60, 60), rng.uniform(-60, 60), rng.uniform(-120, 120)};
    const Vec2 c_sag = drr::project_point(gs, p);
    const Vec2 c_cor = drr::project_point(gc, p);
    std::vector<std::string> warnings;
    const Vec3 back = asm_::fuse_centroids(c_sag, c_cor, gs, gc, &warnings);
    EXPECT_NEAR(back[0], p[0], 1e-6);
    EXPECT_NEAR(back[1], p[1], 1e-6);
    EXPECT_NEAR(back[2], p[2], 1e-6);
    EXPECT_TRUE(warnings.empty());
  }
}

TEST(Fusion, HandlesShiftedIsocenterAndValidates) {
  auto gs = geometry(drr::View::Sagittal);
  auto gc = geometry(drr::View::Coronal);
  gs.isocenter_mm = gc.isocenter_mm = {10.0, -5.0, 40.0};
  const Vec3 p{14.0, -1.0, 52.0};
  const Vec3 back = asm_::fuse_centroids(drr::project_point(gs, p),
                                         drr::project_point(gc, p), gs, gc);
  EXPECT_NEAR(back[0], p[0], 1e-6);
  EXPECT_NEAR(back[1], p[1], 1e-6);
  EXPECT_NEAR(back[2], p[2], 1e-6);

  // Geometry misuse is rejected.
  EXPECT_THROW(asm_::fuse_centroids({0, 0}, {0, 0}, gc, gs), DataError);
  auto gc_shifted = gc;
  gc_shifted.isocenter_mm[0] += 1.0;
  EXPECT_THROW(asm_::fuse_centroids({0, 0}, {0, 0}, gs, gc_shifted), DataError);
}

TEST(Fusion, WarnsOnViewDisagreementInZ) {
  const auto gs = geometry(drr::View::Sagittal);
  const auto gc = geometry(drr::View::Coronal);
  const Vec3 p{5.0, 8.0, 30.0};
  const Vec2 c_sag = drr::project_point(gs, p);
  Vec2 c_cor = drr::project_point(gc, p);
  c_cor[1] += 20.0;  // corrupt the coronal z measurement
  std::vector<std::string> warnings;
  const Vec3 back = asm_::fuse_centroids(c_sag, c_cor, gs, gc, &warnings);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("z disagreement"), std::string::npos);
  EXPECT_NEAR(back[2], p[2], 1e-6);  // sagittal z wins
}

TEST(Stacking, PreservesVoxelCountsForDisjointPredictions) {
  const Volume m1 = ball_mask({16, 16, 16}, {8, 8, 8}, 4.0, 8);
  const Volume m2 = ball_mask({16, 16, 16}, {8, 8, 8}, 3.0, 9);
  const std::int64_t n1 = label_counts(m1)[8], n2 = label_counts(m2)[9];
  ASSERT_GT(n1, 0);
  ASSERT_GT(n2, 0);

  const std::vector<Vec3> centroids{{-10.0, 0.0, -12.0}, {6.0, 2.0, 14.0}};
  const auto model = asm_::stack_spine({{m1, 8}, {m2, 9}}, centroids, {48, 48, 64},
                                       {1, 1, 1});
  const auto counts = label_counts(model.canvas);
  EXPECT_EQ(counts.at(8), n1);
  EXPECT_EQ(counts.at(9), n2);
  EXPECT_TRUE(model.warnings.empty());
  ASSERT_EQ(model.placed.size(), 2u);
  EXPECT_EQ(model.placed[0].label, 8);

  // The placed mass sits where the centroid asked: the canvas centroid of
  // each label is within a voxel of the requested position.
  for (int which = 0; which < 2; ++which) {
    const int label = 8 + which;
    double sx = 0, sy = 0, sz = 0;
    std::int64_t n = 0;
    for (int z = 0; z < 64; ++z)
      for (int y = 0; y < 48; ++y)
        for (int x = 0; x < 48; ++x)
          if (model.canvas.at_u8(x, y, z) == label) {
            const Vec3 w = voxel_to_world(model.canvas, x, y, z);
            sx += w[0];
            sy += w[1];
            sz += w[2];
            n += 1;
          }
    ASSERT_GT(n, 0);
    EXPECT_NEAR(sx / double(n), centroids[std::size_t(which)][0], 1.0);
    EXPECT_NEAR(sy / double(n), centroids[std::size_t(which)][1], 1.0);
    EXPECT_NEAR(sz / double(n), centroids[std::size_t(which)][2], 1.0);
  }
}

TEST(Stacking, OverlapGoesToNearerCentroidTieToLowerLabel) {
  // Two identical balls asked to sit 2 voxels apart: the overlap belongs to
  // whichever centroid is closer; equidistant voxels go to the lower label.
  const Volume m = ball_mask({12, 12, 12}, {6, 6, 6}, 3.5, 8);
  Volume m2 = m;
  for (std::uint8_t& v : m2.u8)
    if (v) v = 9;
  const std::vector<Vec3> centroids{{0.0, 0.0, -1.0}, {0.0, 0.0, 1.0}};
  const auto model =
      asm_::stack_spine({{m, 8}, {m2, 9}}, centroids, {32, 32, 32}, {1, 1, 1});
  const auto counts = label_counts(model.canvas);
  ASSERT_GT(counts.at(8), 0);
  ASSERT_GT(counts.at(9), 0);
  for (int z = 0; z < 32; ++z)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        const std::uint8_t v = model.canvas.at_u8(x, y, z);
        if (v == 0) continue;
        const Vec3 w = voxel_to_world(model.canvas, x, y, z);
        const double d8 = asm_::detail::sq_dist(w, centroids[0]);
        const double d9 = asm_::detail::sq_dist(w, centroids[1]);
        if (v == 8)
          ASSERT_LE(d8, d9);
        else
          ASSERT_LT(d9, d8);  // label 9 never wins a tie against 8
      }
}

TEST(Stacking, ClipWarnsAndValidates) {
  const Volume m = ball_mask({10, 10, 10}, {5, 5, 5}, 3.0, 10);
  // Centroid near the canvas corner pushes part of the ball outside.
  const auto model =
      asm_::stack_spine({{m, 10}}, {{-7.0, -7.0, -7.0}}, {16, 16, 16}, {1, 1, 1});
  ASSERT_EQ(model.warnings.size(), 1u);
  EXPECT_NE(model.warnings[0].find("clipped"), std::string::npos);
  EXPECT_LT(label_counts(model.canvas).at(10), label_counts(m).at(10));

  EXPECT_THROW(asm_::stack_spine({}, {}, {8, 8, 8}, {1, 1, 1}), DataError);
  EXPECT_THROW(asm_::stack_spine({{m, 10}}, {{0, 0, 0}, {1, 1, 1}}, {8, 8, 8},
                                 {1, 1, 1}),
               DataError);
  EXPECT_THROW(asm_::stack_spine({{m, 10}, {m, 10}}, {{0, 0, 0}, {4, 0, 0}},
                                 {16, 16, 16}, {1, 1, 1}),
               DataError);  // duplicate label
  EXPECT_THROW(asm_::stack_spine({{m, 7}}, {{0, 0, 0}}, {16, 16, 16}, {1, 1, 1}),
               DataError);  // label out of range
  Volume empty = Volume::zeros({4, 4, 4}, {1, 1, 1}, {0, 0, 0}, VolumeDtype::U8);
  EXPECT_THROW(asm_::stack_spine({{empty, 10}}, {{0, 0, 0}}, {16, 16, 16}, {1, 1, 1}),
               DataError);
  EXPECT_THROW(asm_::stack_spine({{m, 10}}, {{0, 0, 0}}, {16, 16, 16}, {2, 2, 2}),
               DataError);  // spacing mismatch
}

TEST(AssemblyCsv, RoundTrips) {
  const std::string path = "assembly_test.csv";
  std::vector<asm_::AssemblyInput> rows;
  rows.push_back({9, {1.25, -3.5}, {0.125, 44.0}});
  rows.push_back({10, {-0.75, 2.0}, {8.5, -1.0}});
  asm_::write_assembly_csv(path, rows);
  const auto back = asm_::read_assembly_csv(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].label, 9);
  EXPECT_EQ(back[0].c_sag, (Vec2{1.25, -3.5}));
  EXPECT_EQ(back[1].c_cor, (Vec2{8.5, -1.0}));
  std::remove(path.c_str());
  EXPECT_THROW(asm_::read_assembly_csv(path), DataError);
}
