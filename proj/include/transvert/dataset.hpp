#pragma once

// Turning spine phantoms into network-ready samples: orthogonal full-spine
// DRRs, per-vertebra 64x64 patches, every annotation flavor, the matching
// 64^3 target volume, and the on-disk sample/manifest layout shared by the
// CLI subcommands.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "transvert/drr.hpp"
#include "transvert/phantom.hpp"
#include "transvert/volume.hpp"

namespace transvert::data {

struct RenderOptions {
  double sdd_mm = 1800.0;
  double sod_mm = 1500.0;
  Vec2 detector_spacing_mm{1.2, 1.2};
  std::array<int, 2> detector_shape{0, 0};  // {0,0} = fit to the volume
  int patch = 64;
};

inline drr::ConeBeamGeometry geometry_for(drr::View view, const RenderOptions& opts,
                                          const Volume& vol) {
  drr::ConeBeamGeometry g;
  g.sdd_mm = opts.sdd_mm;
  g.sod_mm = opts.sod_mm;
  g.view = view;
  g.detector_spacing_mm = opts.detector_spacing_mm;
  g.isocenter_mm = {0, 0, 0};
  if (opts.detector_shape[0] > 0 && opts.detector_shape[1] > 0) {
    g.detector_shape = opts.detector_shape;
  } else {
    g.detector_shape = {1, 1};
    drr::fit_detector(g, vol);
  }
  g.validate();
  return g;
}

/// 1.0/0.0 f32 mask of one label in a u8 label volume.
inline Volume make_label_mask(const Volume& labels, int label) {
  if (labels.dtype != VolumeDtype::U8) throw DataError("label mask needs a u8 volume");
  Volume m = Volume::zeros(labels.shape, labels.spacing_mm, labels.origin_mm,
                           VolumeDtype::F32);
  for (std::size_t i = 0; i < labels.u8.size(); ++i)
    if (int(labels.u8[i]) == label) m.f32[i] = 1.0f;
  return m;
}

/// Tight crop to the nonzero bounding box (same spacing, shifted origin).
/// Rendering a cropped mask is much cheaper: rays that miss the small box
/// exit at the clipping test.
inline Volume crop_to_foreground(const Volume& v) {
  if (v.dtype != VolumeDtype::F32) throw DataError("crop_to_foreground needs f32");
  std::array<int, 3> lo{v.shape[0], v.shape[1], v.shape[2]}, hi{-1, -1, -1};
  for (int z = 0; z < v.shape[2]; ++z)
    for (int y = 0; y < v.shape[1]; ++y)
      for (int x = 0; x < v.shape[0]; ++x)
        if (v.f32[v.index(x, y, z)] != 0.0f) {
          lo = {std::min(lo[0], x), std::min(lo[1], y), std::min(lo[2], z)};
          hi = {std::max(hi[0], x), std::max(hi[1], y), std::max(hi[2], z)};
        }
  if (hi[0] < 0) throw DataError("crop_to_foreground: empty volume");
  Volume out = Volume::zeros({hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1},
                             v.spacing_mm,
                             {v.origin_mm[0] + lo[0] * v.spacing_mm[0],
                              v.origin_mm[1] + lo[1] * v.spacing_mm[1],
                              v.origin_mm[2] + lo[2] * v.spacing_mm[2]},
                             VolumeDtype::F32);
  for (int z = 0; z < out.shape[2]; ++z)
    for (int y = 0; y < out.shape[1]; ++y)
      for (int x = 0; x < out.shape[0]; ++x)
        out.f32[out.index(x, y, z)] = v.f32[v.index(lo[0] + x, lo[1] + y, lo[2] + z)];
  return out;
}

/// 64^3 u8 crop of `labels` centered on the rounded centroid voxel, keeping
/// only the requested label (other vertebrae leaking into a patch corner
/// are cleared — the target is one vertebra).
inline Volume extract_label_patch(const Volume& labels, const Vec3& centroid_mm,
                                  int label, int patch) {
  const Vec3 cv = world_to_voxel(labels, centroid_mm);
  std::array<int, 3> start{};
  for (std::size_t ax = 0; ax < 3; ++ax)
    start[ax] = int(std::lround(cv[ax])) - patch / 2;
  Volume out = Volume::zeros({patch, patch, patch}, labels.spacing_mm,
                             {labels.origin_mm[0] + start[0] * labels.spacing_mm[0],
                              labels.origin_mm[1] + start[1] * labels.spacing_mm[1],
                              labels.origin_mm[2] + start[2] * labels.spacing_mm[2]},
                             VolumeDtype::U8);
  for (int z = 0; z < patch; ++z)
    for (int y = 0; y < patch; ++y)
      for (int x = 0; x < patch; ++x) {
        const int sx = start[0] + x, sy = start[1] + y, sz = start[2] + z;
        if (!labels.contains(sx, sy, sz)) continue;
        if (int(labels.u8[labels.index(sx, sy, sz)]) == label)
          out.u8[out.index(x, y, z)] = std::uint8_t(label);
      }
  return out;
}

/// One vertebra's worth of prepared inputs, all annotation flavors included
/// so one rendered dataset serves every ablation cell.
struct RenderedSample {
  int label = 0;
  Vec3 centroid_mm{};
  Image2D x_s, x_c;  // z-scored image patches
  Image2D c2v_s, c2v_c, b2v_s, b2v_c, v2v_s, v2v_c;
  Volume y;  // u8 patch, values {0, label}
};

namespace detail {

inline Image2D mask_annotation(const Volume& mask_vol, const drr::ConeBeamGeometry& g,
                               const Vec2& center_px, int patch,
                               drr::AnnotationType t) {
  const Volume cropped = crop_to_foreground(mask_vol);
  const Image2D proj = drr::render_drr(cropped, g);
  const Image2D mask_patch = drr::extract_patch(proj, center_px, patch);
  return drr::make_annotation(t, {0, 0}, &mask_patch, patch);
}

}  // namespace detail

/// Render both views of a spine and cut per-vertebra samples around each
/// centroid.
inline std::vector<RenderedSample> render_samples(const phantom::SpinePhantom& spine,
                                                  const RenderOptions& opts) {
  const drr::ConeBeamGeometry g_s =
      geometry_for(drr::View::Sagittal, opts, spine.density);
  const drr::ConeBeamGeometry g_c =
      geometry_for(drr::View::Coronal, opts, spine.density);
  const Image2D full_s = drr::render_drr(spine.density, g_s);
  const Image2D full_c = drr::render_drr(spine.density, g_c);

  std::vector<RenderedSample> out;
  out.reserve(spine.centroids.size());
  for (const Centroid& c : spine.centroids) {
    RenderedSample s;
    s.label = c.label;
    s.centroid_mm = c.position_mm;
    const Vec2 px_s = g_s.mm_to_pixel(drr::project_point(g_s, c.position_mm));
    const Vec2 px_c = g_c.mm_to_pixel(drr::project_point(g_c, c.position_mm));
    s.x_s = drr::zscore(drr::extract_patch(full_s, px_s, opts.patch));
    s.x_c = drr::zscore(drr::extract_patch(full_c, px_c, opts.patch));

    // Patch-local centroid pixel for the disc annotation.
    auto local = [&](const Vec2& px) -> Vec2 {
      const double u0 = std::lround(px[0]) - opts.patch / 2;
      const double v0 = std::lround(px[1]) - opts.patch / 2;
      return {px[0] - u0, px[1] - v0};
    };
    s.c2v_s = drr::make_annotation(drr::AnnotationType::C2V, local(px_s), nullptr,
                                   opts.patch);
    s.c2v_c = drr::make_annotation(drr::AnnotationType::C2V, local(px_c), nullptr,
                                   opts.patch);

    const Volume body_mask = make_label_mask(spine.body_labels, c.label);
    const Volume full_mask = make_label_mask(spine.labels, c.label);
    s.b2v_s = detail::mask_annotation(body_mask, g_s, px_s, opts.patch,
                                      drr::AnnotationType::B2V);
    s.b2v_c = detail::mask_annotation(body_mask, g_c, px_c, opts.patch,
                                      drr::AnnotationType::B2V);
    s.v2v_s = detail::mask_annotation(full_mask, g_s, px_s, opts.patch,
                                      drr::AnnotationType::V2V);
    s.v2v_c = detail::mask_annotation(full_mask, g_c, px_c, opts.patch,
                                      drr::AnnotationType::V2V);

    s.y = extract_label_patch(spine.labels, c.position_mm, c.label, opts.patch);
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// On-disk layout
// ---------------------------------------------------------------------------
//
// phantom dataset dir:
//   manifest.txt            "transvert-phantoms 1" + "spine <dir> <split>" lines
//   <spine>/labels.vhdr     u8 label volume (+ .vraw)
//   <spine>/body.vhdr       u8 vertebral-body-only labels
//   <spine>/density.vhdr    f32 attenuation volume
//   <spine>/centroids.csv   label,x_mm,y_mm,z_mm
//
// sample dataset dir:
//   samples.txt             "transvert-samples 1" + "sample <dir> <label> <split>"
//   <sample>/x_s.ihdr …     z-scored image patches, annotation patches,
//   <sample>/y.vhdr         target volume, meta.txt

struct SpineRef {
  std::string dir;
  std::string split;  // "train" or "val"
};

struct SampleRef {
  std::string dir;
  int label = 0;
  std::string split;
};

/// Model-ready sample: images, the chosen annotation pair, and the target.
struct Sample {
  std::string id;
  int label = 0;
  Image2D x_s, x_c;
  Image2D y_s, y_c;  // binary annotations ({0,1}); all-zero for None
  Volume y;          // u8, values {0, label}
};

inline void save_spine(const std::string& dir, const phantom::SpinePhantom& spine) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  write_volume(spine.labels, dir + "/labels.vhdr");
  write_volume(spine.body_labels, dir + "/body.vhdr");
  write_volume(spine.density, dir + "/density.vhdr");
  std::ofstream csv(dir + "/centroids.csv", std::ios::trunc);
  if (!csv) throw DataError("cannot write " + dir + "/centroids.csv");
  csv << "label,x_mm,y_mm,z_mm\n";
  csv.precision(17);
  for (const Centroid& c : spine.centroids)
    csv << c.label << "," << c.position_mm[0] << "," << c.position_mm[1] << ","
        << c.position_mm[2] << "\n";
}

inline phantom::SpinePhantom load_spine(const std::string& dir) {
  phantom::SpinePhantom s;
  s.labels = read_volume(dir + "/labels.vhdr");
  s.body_labels = read_volume(dir + "/body.vhdr");
  s.density = read_volume(dir + "/density.vhdr");
  std::ifstream csv(dir + "/centroids.csv");
  if (!csv) throw DataError("cannot open " + dir + "/centroids.csv");
  std::string line;
  std::getline(csv, line);  // header
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    Centroid c;
    char comma;
    std::istringstream is(line);
    if (!(is >> c.label >> comma >> c.position_mm[0] >> comma >> c.position_mm[1] >>
          comma >> c.position_mm[2]))
      throw DataError("malformed centroid row in " + dir + "/centroids.csv");
    s.centroids.push_back(c);
  }
  return s;
}

inline void write_phantom_manifest(const std::string& path,
                                   const std::vector<SpineRef>& refs) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write manifest: " + path);
  f << "transvert-phantoms 1\n";
  for (const auto& r : refs) f << "spine " << r.dir << " " << r.split << "\n";
}

inline std::vector<SpineRef> read_phantom_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open manifest: " + path);
  std::string line;
  if (!std::getline(f, line) || line != "transvert-phantoms 1")
    throw DataError("unrecognized phantom manifest: " + path);
  std::vector<SpineRef> refs;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string kind;
    SpineRef r;
    if (!(is >> kind >> r.dir >> r.split) || kind != "spine")
      throw DataError("malformed phantom manifest line: " + line);
    refs.push_back(std::move(r));
  }
  return refs;
}

inline void save_sample(const std::string& dir, const RenderedSample& s) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  write_image(s.x_s, dir + "/x_s.ihdr");
  write_image(s.x_c, dir + "/x_c.ihdr");
  write_image(s.c2v_s, dir + "/ann_c2v_s.ihdr");
  write_image(s.c2v_c, dir + "/ann_c2v_c.ihdr");
  write_image(s.b2v_s, dir + "/ann_b2v_s.ihdr");
  write_image(s.b2v_c, dir + "/ann_b2v_c.ihdr");
  write_image(s.v2v_s, dir + "/ann_v2v_s.ihdr");
  write_image(s.v2v_c, dir + "/ann_v2v_c.ihdr");
  write_volume(s.y, dir + "/y.vhdr");
  std::ofstream meta(dir + "/meta.txt", std::ios::trunc);
  if (!meta) throw DataError("cannot write " + dir + "/meta.txt");
  meta.precision(17);
  meta << "label " << s.label << "\n";
  meta << "centroid_mm " << s.centroid_mm[0] << " " << s.centroid_mm[1] << " "
       << s.centroid_mm[2] << "\n";
}

inline void write_samples_manifest(const std::string& path,
                                   const std::vector<SampleRef>& refs) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write manifest: " + path);
  f << "transvert-samples 1\n";
  for (const auto& r : refs)
    f << "sample " << r.dir << " " << r.label << " " << r.split << "\n";
}

inline std::vector<SampleRef> read_samples_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open manifest: " + path);
  std::string line;
  if (!std::getline(f, line) || line != "transvert-samples 1")
    throw DataError("unrecognized samples manifest: " + path);
  std::vector<SampleRef> refs;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string kind;
    SampleRef r;
    if (!(is >> kind >> r.dir >> r.label >> r.split) || kind != "sample")
      throw DataError("malformed samples manifest line: " + line);
    refs.push_back(std::move(r));
  }
  return refs;
}

inline Vec3 load_sample_centroid(const std::string& dir) {
  std::ifstream meta(dir + "/meta.txt");
  if (!meta) throw DataError("cannot open " + dir + "/meta.txt");
  std::string key;
  Vec3 c{};
  int label = 0;
  while (meta >> key) {
    if (key == "label") meta >> label;
    else if (key == "centroid_mm") meta >> c[0] >> c[1] >> c[2];
    else { std::string rest; std::getline(meta, rest); }
  }
  return c;
}

inline Sample load_sample(const SampleRef& ref, drr::AnnotationType ann) {
  Sample s;
  s.id = ref.dir;
  s.label = ref.label;
  if (s.label < kLabelMin || s.label > kLabelMax)
    throw DataError("sample label out of range: " + std::to_string(s.label));
  s.x_s = read_image(ref.dir + "/x_s.ihdr");
  s.x_c = read_image(ref.dir + "/x_c.ihdr");
  switch (ann) {
    case drr::AnnotationType::None:
      s.y_s = Image2D::zeros(s.x_s.shape, s.x_s.spacing_mm, s.x_s.origin_mm);
      s.y_c = Image2D::zeros(s.x_c.shape, s.x_c.spacing_mm, s.x_c.origin_mm);
      break;
    case drr::AnnotationType::C2V:
      s.y_s = read_image(ref.dir + "/ann_c2v_s.ihdr");
      s.y_c = read_image(ref.dir + "/ann_c2v_c.ihdr");
      break;
    case drr::AnnotationType::B2V:
      s.y_s = read_image(ref.dir + "/ann_b2v_s.ihdr");
      s.y_c = read_image(ref.dir + "/ann_b2v_c.ihdr");
      break;
    case drr::AnnotationType::V2V:
      s.y_s = read_image(ref.dir + "/ann_v2v_s.ihdr");
      s.y_c = read_image(ref.dir + "/ann_v2v_c.ihdr");
      break;
  }
  s.y = read_volume(ref.dir + "/y.vhdr");
  if (s.y.dtype != VolumeDtype::U8) throw DataError("sample target must be u8");
  for (std::uint8_t v : s.y.u8)
    if (v != 0 && int(v) != s.label)
      throw DataError("sample target contains foreign labels: " + ref.dir);
  return s;
}

/// Build a RenderedSample in memory into the Sample form (used by in-process
/// pipelines that skip the disk round trip).
inline Sample to_sample(const RenderedSample& r, drr::AnnotationType ann,
                        const std::string& id) {
  Sample s;
  s.id = id;
  s.label = r.label;
  s.x_s = r.x_s;
  s.x_c = r.x_c;
  switch (ann) {
    case drr::AnnotationType::None:
      s.y_s = Image2D::zeros(r.x_s.shape, r.x_s.spacing_mm, r.x_s.origin_mm);
      s.y_c = Image2D::zeros(r.x_c.shape, r.x_c.spacing_mm, r.x_c.origin_mm);
      break;
    case drr::AnnotationType::C2V: s.y_s = r.c2v_s; s.y_c = r.c2v_c; break;
    case drr::AnnotationType::B2V: s.y_s = r.b2v_s; s.y_c = r.b2v_c; break;
    case drr::AnnotationType::V2V: s.y_s = r.v2v_s; s.y_c = r.v2v_c; break;
  }
  s.y = r.y;
  return s;
}

}  // namespace transvert::data
