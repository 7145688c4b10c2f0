// Dataset preparation: label masks, cropping, per-vertebra patch extraction,
// full rendering of a spine into samples, and the on-disk manifest layout.

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "transvert/transvert.hpp"

namespace tv = transvert;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() /
           ("transvert_data_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

tv::phantom::SpinePhantom small_spine(int n_vertebrae = 2, std::uint64_t seed = 3) {
  tv::phantom::SpineParams sp;
  sp.n_vertebrae = n_vertebrae;
  sp.seed = seed;
  sp.canvas_xy = 80;
  return tv::phantom::make_spine(sp);
}

std::size_t count_value(const std::vector<std::uint8_t>& v, int val) {
  std::size_t n = 0;
  for (std::uint8_t x : v)
    if (int(x) == val) ++n;
  return n;
}

}  // namespace

TEST(LabelMask, SelectsExactlyOneLabel) {
  tv::Volume labels =
      tv::Volume::zeros({3, 2, 2}, {1, 1, 1}, {0, 0, 0}, tv::VolumeDtype::U8);
  labels.at_u8(0, 0, 0) = 8;
  labels.at_u8(1, 0, 0) = 9;
  labels.at_u8(2, 1, 1) = 9;
  tv::Volume m = tv::data::make_label_mask(labels, 9);
  EXPECT_EQ(m.dtype, tv::VolumeDtype::F32);
  EXPECT_EQ(m.shape, labels.shape);
  std::size_t ones = 0;
  for (float v : m.f32) {
    EXPECT_TRUE(v == 0.0f || v == 1.0f);
    if (v == 1.0f) ++ones;
  }
  EXPECT_EQ(ones, 2u);
  EXPECT_EQ(m.f32[m.index(1, 0, 0)], 1.0f);
  EXPECT_EQ(m.f32[m.index(0, 0, 0)], 0.0f);

  tv::Volume f32vol =
      tv::Volume::zeros({2, 2, 2}, {1, 1, 1}, {0, 0, 0}, tv::VolumeDtype::F32);
  EXPECT_THROW(tv::data::make_label_mask(f32vol, 8), tv::DataError);
}

TEST(Crop, TightBoundingBoxWithShiftedOrigin) {
  tv::Volume v =
      tv::Volume::zeros({6, 5, 4}, {2, 2, 2}, {10, 20, 30}, tv::VolumeDtype::F32);
  v.f32[v.index(2, 1, 1)] = 1.5f;
  v.f32[v.index(4, 3, 2)] = 2.5f;
  tv::Volume c = tv::data::crop_to_foreground(v);
  EXPECT_EQ(c.shape, (std::array<int, 3>{3, 3, 2}));
  // Origin moves by start voxel * spacing.
  EXPECT_DOUBLE_EQ(c.origin_mm[0], 10 + 2 * 2.0);
  EXPECT_DOUBLE_EQ(c.origin_mm[1], 20 + 1 * 2.0);
  EXPECT_DOUBLE_EQ(c.origin_mm[2], 30 + 1 * 2.0);
  EXPECT_EQ(c.f32[c.index(0, 0, 0)], 1.5f);
  EXPECT_EQ(c.f32[c.index(2, 2, 1)], 2.5f);

  tv::Volume empty =
      tv::Volume::zeros({2, 2, 2}, {1, 1, 1}, {0, 0, 0}, tv::VolumeDtype::F32);
  EXPECT_THROW(tv::data::crop_to_foreground(empty), tv::DataError);
  tv::Volume u8vol =
      tv::Volume::zeros({2, 2, 2}, {1, 1, 1}, {0, 0, 0}, tv::VolumeDtype::U8);
  EXPECT_THROW(tv::data::crop_to_foreground(u8vol), tv::DataError);
}

TEST(LabelPatch, CentersOnCentroidAndClearsForeignLabels) {
  tv::Volume labels =
      tv::Volume::zeros({40, 40, 40}, {1, 1, 1}, {-20, -20, -20}, tv::VolumeDtype::U8);
  // A 3x3x3 block of label 10 around voxel (20,20,20) = world (0,0,0), and a
  // neighboring voxel of label 11 that must not survive extraction.
  for (int z = 19; z <= 21; ++z)
    for (int y = 19; y <= 21; ++y)
      for (int x = 19; x <= 21; ++x) labels.at_u8(x, y, z) = 10;
  labels.at_u8(24, 20, 20) = 11;

  tv::Volume patch = tv::data::extract_label_patch(labels, {0, 0, 0}, 10, 16);
  EXPECT_EQ(patch.shape, (std::array<int, 3>{16, 16, 16}));
  EXPECT_EQ(count_value(patch.u8, 10), 27u);
  EXPECT_EQ(count_value(patch.u8, 11), 0u);
  // Centroid voxel lands at the patch center (patch/2 after rounding).
  EXPECT_EQ(int(patch.u8[patch.index(8, 8, 8)]), 10);
  // Patch origin maps back onto the source grid.
  EXPECT_DOUBLE_EQ(patch.origin_mm[0], -20 + (20 - 8) * 1.0);

  // A centroid near the volume edge pads with background instead of throwing.
  tv::Volume edge = tv::data::extract_label_patch(labels, {-19, -19, -19}, 10, 16);
  EXPECT_EQ(count_value(edge.u8, 10), 0u);
}

TEST(RenderSamples, ProducesOneSamplePerVertebra) {
  const auto spine = small_spine(2);
  tv::data::RenderOptions opts;
  opts.patch = 64;
  const auto samples = tv::data::render_samples(spine, opts);
  ASSERT_EQ(samples.size(), 2u);

  std::set<int> labels;
  for (const auto& s : samples) {
    labels.insert(s.label);
    // Image patches are 64x64 and z-scored.
    EXPECT_EQ(s.x_s.shape, (std::array<int, 2>{64, 64}));
    EXPECT_EQ(s.x_c.shape, (std::array<int, 2>{64, 64}));
    double mean = 0;
    for (float v : s.x_s.data) mean += v;
    mean /= double(s.x_s.data.size());
    EXPECT_NEAR(mean, 0.0, 1e-4);
    double var = 0;
    for (float v : s.x_s.data) var += (v - mean) * (v - mean);
    var /= double(s.x_s.data.size());
    EXPECT_NEAR(std::sqrt(var), 1.0, 1e-3);

    // Annotations are binary and nonempty (the vertebra is visible in both
    // views); the centroid disc has exactly the 5-pixel plus shape.
    double c2v_sum = 0;
    for (float v : s.c2v_s.data) c2v_sum += v;
    EXPECT_EQ(c2v_sum, 5.0);
    for (const tv::Image2D* ann : {&s.b2v_s, &s.b2v_c, &s.v2v_s, &s.v2v_c}) {
      double sum = 0;
      for (float v : ann->data) {
        EXPECT_TRUE(v == 0.0f || v == 1.0f);
        sum += v;
      }
      EXPECT_GT(sum, 0.0);
    }
    // V2V covers at least as much of the detector as B2V (body is a subset
    // of the full vertebra, and projection preserves containment).
    double b2v = 0, v2v = 0;
    for (float v : s.b2v_s.data) b2v += v;
    for (float v : s.v2v_s.data) v2v += v;
    EXPECT_GE(v2v, b2v);

    // Target patch holds only {0, label} and its foreground count matches
    // the full phantom's count for that label (nothing clipped for an
    // interior vertebra of a small spine).
    EXPECT_EQ(s.y.shape, (std::array<int, 3>{64, 64, 64}));
    std::set<int> vals;
    for (std::uint8_t v : s.y.u8) vals.insert(int(v));
    EXPECT_LE(vals.size(), 2u);
    EXPECT_TRUE(vals.count(0) == 1 || vals.count(s.label) == 1);
    EXPECT_EQ(count_value(s.y.u8, s.label), count_value(spine.labels.u8, s.label));
  }
  EXPECT_EQ(labels.size(), 2u);
}

TEST(Manifests, PhantomManifestRoundTripAndValidation) {
  TempDir dir("phman");
  const std::string path = dir.str() + "/manifest.txt";
  std::vector<tv::data::SpineRef> refs = {{dir.str() + "/spine_000", "train"},
                                          {dir.str() + "/spine_001", "val"}};
  tv::data::write_phantom_manifest(path, refs);
  const auto back = tv::data::read_phantom_manifest(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].dir, refs[0].dir);
  EXPECT_EQ(back[0].split, "train");
  EXPECT_EQ(back[1].split, "val");

  EXPECT_THROW(tv::data::read_phantom_manifest(dir.str() + "/missing.txt"),
               tv::DataError);
  std::ofstream bad(dir.str() + "/bad.txt");
  bad << "something-else 1\n";
  bad.close();
  EXPECT_THROW(tv::data::read_phantom_manifest(dir.str() + "/bad.txt"), tv::DataError);
  std::ofstream badline(dir.str() + "/badline.txt");
  badline << "transvert-phantoms 1\nnot-a-spine-entry\n";
  badline.close();
  EXPECT_THROW(tv::data::read_phantom_manifest(dir.str() + "/badline.txt"),
               tv::DataError);
}

TEST(Manifests, SamplesManifestRoundTripAndValidation) {
  TempDir dir("sman");
  const std::string path = dir.str() + "/samples.txt";
  std::vector<tv::data::SampleRef> refs = {{dir.str() + "/s0", 8, "train"},
                                           {dir.str() + "/s1", 9, "val"}};
  tv::data::write_samples_manifest(path, refs);
  const auto back = tv::data::read_samples_manifest(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].label, 8);
  EXPECT_EQ(back[1].split, "val");

  std::ofstream bad(dir.str() + "/bad.txt");
  bad << "transvert-samples 2\n";
  bad.close();
  EXPECT_THROW(tv::data::read_samples_manifest(dir.str() + "/bad.txt"), tv::DataError);
}

TEST(SpineIo, SaveLoadRoundTripsVolumesAndCentroids) {
  const auto spine = small_spine(2, 5);
  TempDir dir("spineio");
  tv::data::save_spine(dir.str() + "/sp", spine);
  const auto back = tv::data::load_spine(dir.str() + "/sp");
  EXPECT_TRUE(back.labels.u8 == spine.labels.u8);
  EXPECT_TRUE(back.body_labels.u8 == spine.body_labels.u8);
  EXPECT_TRUE(back.density.f32 == spine.density.f32);
  EXPECT_EQ(back.labels.shape, spine.labels.shape);
  EXPECT_EQ(back.density.origin_mm, spine.density.origin_mm);
  ASSERT_EQ(back.centroids.size(), spine.centroids.size());
  for (std::size_t i = 0; i < back.centroids.size(); ++i) {
    EXPECT_EQ(back.centroids[i].label, spine.centroids[i].label);
    for (int ax = 0; ax < 3; ++ax)
      EXPECT_DOUBLE_EQ(back.centroids[i].position_mm[std::size_t(ax)],
                       spine.centroids[i].position_mm[std::size_t(ax)]);
  }
  EXPECT_THROW(tv::data::load_spine(dir.str() + "/nothing"), tv::DataError);
}

TEST(SampleIo, SaveLoadRoundTripsEveryAnnotationFlavor) {
  const auto spine = small_spine(2, 7);
  tv::data::RenderOptions opts;
  const auto rendered = tv::data::render_samples(spine, opts);
  ASSERT_FALSE(rendered.empty());
  const auto& r = rendered[0];

  TempDir dir("sampleio");
  const std::string sdir = dir.str() + "/s0";
  tv::data::save_sample(sdir, r);
  tv::data::SampleRef ref{sdir, r.label, "train"};

  using AT = tv::drr::AnnotationType;
  for (AT ann : {AT::None, AT::C2V, AT::B2V, AT::V2V}) {
    const tv::data::Sample s = tv::data::load_sample(ref, ann);
    EXPECT_EQ(s.label, r.label);
    EXPECT_TRUE(s.x_s.data == r.x_s.data);
    EXPECT_TRUE(s.x_c.data == r.x_c.data);
    EXPECT_TRUE(s.y.u8 == r.y.u8);
    // The in-memory converter picks the identical annotation pair.
    const tv::data::Sample mem = tv::data::to_sample(r, ann, "mem");
    EXPECT_TRUE(s.y_s.data == mem.y_s.data) << tv::drr::annotation_name(ann);
    EXPECT_TRUE(s.y_c.data == mem.y_c.data) << tv::drr::annotation_name(ann);
    if (ann == AT::None) {
      for (float v : s.y_s.data) EXPECT_EQ(v, 0.0f);
    }
  }

  // Label range and foreign-label validation.
  tv::data::SampleRef bad_label{sdir, 99, "train"};
  EXPECT_THROW(tv::data::load_sample(bad_label, AT::C2V), tv::DataError);
  tv::data::SampleRef wrong_label{sdir, r.label == 8 ? 9 : 8, "train"};
  EXPECT_THROW(tv::data::load_sample(wrong_label, AT::C2V), tv::DataError);

  // Centroid metadata survives the round trip.
  const tv::Vec3 c = tv::data::load_sample_centroid(sdir);
  for (int ax = 0; ax < 3; ++ax)
    EXPECT_DOUBLE_EQ(c[std::size_t(ax)], r.centroid_mm[std::size_t(ax)]);
}

TEST(GeometryFor, FitsDetectorWhenShapeUnset) {
  const auto spine = small_spine(2, 9);
  tv::data::RenderOptions opts;
  const auto g = tv::data::geometry_for(tv::drr::View::Sagittal, opts, spine.density);
  EXPECT_GT(g.detector_shape[0], 1);
  EXPECT_GT(g.detector_shape[1], 1);
  // An explicit shape is honored untouched.
  opts.detector_shape = {127, 255};
  const auto g2 = tv::data::geometry_for(tv::drr::View::Coronal, opts, spine.density);
  EXPECT_EQ(g2.detector_shape, (std::array<int, 2>{127, 255}));
  EXPECT_EQ(g2.view, tv::drr::View::Coronal);
}
