// Cone-beam projection and DRR rendering: geometry math, chord-length
// calibration on a uniform cube, magnification, linearity, determinism.

#include <gtest/gtest.h>

#include <cmath>

#include "transvert/transvert.hpp"

using namespace transvert;
namespace drr = transvert::drr;

namespace {

// Uniform-density cube of `n` voxels per side at 1 mm spacing, centered on
// the world origin. The trilinear field integrates to exactly n mm along
// any axis-aligned line through the center (interior plus two half-voxel
// ramps at the faces).
Volume uniform_cube(int n, float value) {
  const double o = -(n - 1) / 2.0;
  Volume v = Volume::zeros({n, n, n}, {1, 1, 1}, {o, o, o}, VolumeDtype::F32);
  for (float& x : v.f32) x = value;
  return v;
}

drr::ConeBeamGeometry default_geometry(drr::View view) {
  drr::ConeBeamGeometry g;
  g.view = view;
  g.detector_shape = {65, 65};
  g.detector_spacing_mm = {1.0, 1.0};
  return g;
}

}  // namespace

TEST(Projection, MagnificationIsExactAtIsocenterPlane) {
  const auto g = default_geometry(drr::View::Sagittal);
  ASSERT_DOUBLE_EQ(g.magnification(), 1.2);
  // A point in the isocenter plane (depth 0 along x for sagittal).
  const Vec2 uv = drr::project_point(g, {0.0, 20.0, 5.0});
  EXPECT_NEAR(uv[0], 20.0 * 1.2, 1e-12);
  EXPECT_NEAR(uv[1], 5.0 * 1.2, 1e-12);

  const auto gc = default_geometry(drr::View::Coronal);
  const Vec2 uvc = drr::project_point(gc, {-7.0, 0.0, 3.0});
  EXPECT_NEAR(uvc[0], -7.0 * 1.2, 1e-12);
  EXPECT_NEAR(uvc[1], 3.0 * 1.2, 1e-12);

  // Depth changes the scale: closer to the source magnifies more.
  const Vec2 near_src = drr::project_point(g, {100.0, 10.0, 0.0});
  EXPECT_GT(near_src[0], 12.0);
  EXPECT_THROW(drr::project_point(g, {1500.0, 0.0, 0.0}), DataError);
}

TEST(Projection, PixelMmRoundTrip) {
  const auto g = default_geometry(drr::View::Sagittal);
  const Vec2 px = g.mm_to_pixel({0.0, 0.0});
  EXPECT_DOUBLE_EQ(px[0], 32.0);
  EXPECT_DOUBLE_EQ(px[1], 32.0);
  const Vec2 mm = g.pixel_to_mm({40.0, 10.0});
  const Vec2 back = g.mm_to_pixel(mm);
  EXPECT_DOUBLE_EQ(back[0], 40.0);
  EXPECT_DOUBLE_EQ(back[1], 10.0);
}

TEST(Drr, CentralRayMatchesCubeChordWithinOnePercent) {
  const int n = 40;
  const Volume cube = uniform_cube(n, 1.0f);
  for (drr::View view : {drr::View::Sagittal, drr::View::Coronal}) {
    const auto g = default_geometry(view);
    const Image2D img = drr::render_drr(cube, g);
    // Central pixel (32,32) maps to detector mm (0,0): the axial ray.
    const double got = img.at(32, 32);
    EXPECT_NEAR(got, double(n), 0.01 * n) << drr::view_name(view);
  }
}

TEST(Drr, OffCenterBallProjectsAtMagnifiedOffsetWithinOnePixel) {
  const int n = 41;
  const double c = (n - 1) / 2.0;
  Volume vol = uniform_cube(n, 0.0f);
  // Ball of radius 3 at world (0, +10, +6): sagittal u axis is y, v is z.
  const Vec3 ball{0.0, 10.0, 6.0};
  for (int iz = 0; iz < n; ++iz)
    for (int iy = 0; iy < n; ++iy)
      for (int ix = 0; ix < n; ++ix) {
        const double dx = ix - c - ball[0], dy = iy - c - ball[1],
                     dz = iz - c - ball[2];
        if (dx * dx + dy * dy + dz * dz <= 9.0)
          vol.f32[vol.index(ix, iy, iz)] = 1.0f;
      }
  const auto g = default_geometry(drr::View::Sagittal);
  const Image2D img = drr::render_drr(vol, g);
  int bu = -1, bv = -1;
  float best = -1.0f;
  for (int v = 0; v < img.shape[1]; ++v)
    for (int u = 0; u < img.shape[0]; ++u)
      if (img.at(u, v) > best) {
        best = img.at(u, v);
        bu = u;
        bv = v;
      }
  ASSERT_GT(best, 0.0f);
  const Vec2 expect_px = g.mm_to_pixel({10.0 * 1.2, 6.0 * 1.2});
  EXPECT_LE(std::fabs(bu - expect_px[0]), 1.0);
  EXPECT_LE(std::fabs(bv - expect_px[1]), 1.0);
}

TEST(Drr, RenderIsLinearInDensity) {
  const int n = 24;
  Volume a = uniform_cube(n, 0.0f), b = uniform_cube(n, 0.0f);
  Rng rng(3);
  for (std::size_t i = 0; i < a.f32.size(); ++i) {
    a.f32[i] = float(rng.uniform(0.0, 1.0));
    b.f32[i] = float(rng.uniform(0.0, 1.0));
  }
  Volume mix = uniform_cube(n, 0.0f);
  const float ca = 0.7f, cb = 2.5f;
  for (std::size_t i = 0; i < a.f32.size(); ++i)
    mix.f32[i] = ca * a.f32[i] + cb * b.f32[i];

  const auto g = default_geometry(drr::View::Coronal);
  const Image2D ia = drr::render_drr(a, g);
  const Image2D ib = drr::render_drr(b, g);
  const Image2D im = drr::render_drr(mix, g);
  for (std::size_t i = 0; i < im.data.size(); ++i) {
    const double want = double(ca) * ia.data[i] + double(cb) * ib.data[i];
    EXPECT_NEAR(im.data[i], want, 1e-5 * (1.0 + std::fabs(want)));
  }
}

TEST(Drr, ThreadCountDoesNotChangePixels) {
  const Volume cube = uniform_cube(20, 0.8f);
  const auto g = default_geometry(drr::View::Sagittal);
  set_thread_count(1);
  const Image2D one = drr::render_drr(cube, g);
  set_thread_count(3);
  const Image2D three = drr::render_drr(cube, g);
  set_thread_count(1);
  EXPECT_EQ(one.data, three.data);
}

TEST(Drr, FitDetectorCoversVolume) {
  const Volume cube = uniform_cube(50, 1.0f);
  auto g = default_geometry(drr::View::Sagittal);
  g.detector_shape = {1, 1};
  drr::fit_detector(g, cube);
  EXPECT_GT(g.detector_shape[0], 50);  // magnified footprint plus margin
  const Image2D img = drr::render_drr(cube, g);
  // Border pixels see no volume: rays at the margin miss the support box.
  for (int u = 0; u < g.detector_shape[0]; ++u) {
    EXPECT_EQ(img.at(u, 0), 0.0f);
    EXPECT_EQ(img.at(u, g.detector_shape[1] - 1), 0.0f);
  }
}

TEST(Patch, ExtractReplicatesEdges) {
  Image2D img = Image2D::zeros({8, 8}, {1.0, 1.0}, {0.0, 0.0});
  for (int v = 0; v < 8; ++v)
    for (int u = 0; u < 8; ++u) img.at(u, v) = float(u + 10 * v);
  const Image2D p = drr::extract_patch(img, {1.0, 1.0}, 4);
  ASSERT_EQ(p.shape, (std::array<int, 2>{4, 4}));
  // u0 = v0 = -1: first row/col replicate index 0.
  EXPECT_EQ(p.at(0, 0), img.at(0, 0));
  EXPECT_EQ(p.at(1, 0), img.at(0, 0));
  EXPECT_EQ(p.at(2, 1), img.at(1, 0));
  EXPECT_EQ(p.at(3, 3), img.at(2, 2));
  EXPECT_THROW(drr::extract_patch(img, {1.0, 1.0}, 5), DataError);
}

TEST(Annotation, TypesAndShapes) {
  const Image2D c2v = drr::make_annotation(drr::AnnotationType::C2V, {32.2, 31.8},
                                           nullptr, 64);
  double sum = 0;
  for (float v : c2v.data) sum += v;
  EXPECT_EQ(sum, 5.0);  // plus-shaped disc of radius 1
  EXPECT_EQ(c2v.at(32, 32), 1.0f);
  EXPECT_EQ(c2v.at(33, 32), 1.0f);
  EXPECT_EQ(c2v.at(33, 33), 0.0f);

  const Image2D none =
      drr::make_annotation(drr::AnnotationType::None, {5, 5}, nullptr, 64);
  for (float v : none.data) ASSERT_EQ(v, 0.0f);

  Image2D mask = Image2D::zeros({64, 64});
  mask.at(3, 4) = 2.5f;
  const Image2D b2v =
      drr::make_annotation(drr::AnnotationType::B2V, {0, 0}, &mask, 64);
  EXPECT_EQ(b2v.at(3, 4), 1.0f);
  EXPECT_EQ(b2v.at(3, 5), 0.0f);
  EXPECT_THROW(drr::make_annotation(drr::AnnotationType::V2V, {0, 0}, nullptr, 64),
               DataError);

  // Centroid disc clips at the border instead of wrapping.
  const Image2D corner =
      drr::make_annotation(drr::AnnotationType::C2V, {0.0, 0.0}, nullptr, 64);
  double csum = 0;
  for (float v : corner.data) csum += v;
  EXPECT_EQ(csum, 3.0);
}

TEST(Annotation, NameRoundTrip) {
  for (auto t : {drr::AnnotationType::None, drr::AnnotationType::C2V,
                 drr::AnnotationType::B2V, drr::AnnotationType::V2V})
    EXPECT_EQ(drr::annotation_from_string(drr::annotation_name(t)), t);
  EXPECT_THROW(drr::annotation_from_string("x2v"), DataError);
}

TEST(Zscore, NormalizesAndRejectsConstant) {
  Image2D img = Image2D::zeros({4, 4});
  Rng rng(8);
  for (float& v : img.data) v = float(rng.uniform(0.0, 9.0));
  const Image2D z = drr::zscore(img);
  double mean = 0, var = 0;
  for (float v : z.data) mean += v / 16.0;
  for (float v : z.data) var += v * v / 16.0;
  EXPECT_NEAR(mean, 0.0, 1e-6);
  EXPECT_NEAR(var, 1.0, 1e-5);
  Image2D flat = Image2D::zeros({4, 4});
  EXPECT_THROW(drr::zscore(flat), DataError);
}
