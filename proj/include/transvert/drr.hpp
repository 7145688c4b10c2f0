#pragma once

// Cone-beam DRR rendering and the 2D input preparation around it:
// perspective projection, 64x64 patch extraction, VOI annotations, and
// z-score normalization.

#include <array>
#include <cmath>
#include <limits>
#include <optional>

#ifdef TRANSVERT_HAS_OPENMP
#include <omp.h>
#endif

#include "transvert/common.hpp"
#include "transvert/volume.hpp"

namespace transvert::drr {

enum class View { Sagittal, Coronal };

/// Which 2D image marks the vertebra of interest.
enum class AnnotationType { None, C2V, B2V, V2V };

inline const char* view_name(View v) {
  return v == View::Sagittal ? "sagittal" : "coronal";
}

/// Source/detector arrangement for one orthogonal view. The source sits on
/// the positive side of the integration axis (x for sagittal, y for
/// coronal); the detector plane is perpendicular to it, sdd - sod beyond
/// the isocenter. Detector coordinates are mm offsets from the detector
/// center: u along the in-plane transverse axis (y for sagittal, x for
/// coronal), v along z.
struct ConeBeamGeometry {
  double sdd_mm = 1800.0;
  double sod_mm = 1500.0;
  View view = View::Sagittal;
  Vec2 detector_spacing_mm{1.2, 1.2};
  std::array<int, 2> detector_shape{128, 128};
  Vec3 isocenter_mm{0, 0, 0};

  void validate() const {
    if (!(sod_mm > 0 && sod_mm < sdd_mm))
      throw DataError("degenerate cone-beam geometry: need 0 < sod < sdd");
    if (detector_spacing_mm[0] <= 0 || detector_spacing_mm[1] <= 0)
      throw DataError("detector spacing must be positive");
    if (detector_shape[0] <= 0 || detector_shape[1] <= 0)
      throw DataError("detector shape must be positive");
  }

  double magnification() const { return sdd_mm / sod_mm; }

  int depth_axis() const { return view == View::Sagittal ? 0 : 1; }
  int u_axis() const { return view == View::Sagittal ? 1 : 0; }
  int v_axis() const { return 2; }

  Vec3 source_mm() const {
    Vec3 s = isocenter_mm;
    s[std::size_t(depth_axis())] += sod_mm;
    return s;
  }

  /// World position of a detector point given its (u, v) mm offsets.
  Vec3 detector_point_mm(double u, double v) const {
    Vec3 p = isocenter_mm;
    p[std::size_t(depth_axis())] -= sdd_mm - sod_mm;
    p[std::size_t(u_axis())] += u;
    p[std::size_t(v_axis())] += v;
    return p;
  }

  /// Continuous pixel coordinates of a detector-mm position (center pixel
  /// of the detector maps to detector mm (0,0)).
  Vec2 mm_to_pixel(const Vec2& mm) const {
    return {mm[0] / detector_spacing_mm[0] + (detector_shape[0] - 1) / 2.0,
            mm[1] / detector_spacing_mm[1] + (detector_shape[1] - 1) / 2.0};
  }

  Vec2 pixel_to_mm(const Vec2& px) const {
    return {(px[0] - (detector_shape[0] - 1) / 2.0) * detector_spacing_mm[0],
            (px[1] - (detector_shape[1] - 1) / 2.0) * detector_spacing_mm[1]};
  }
};

/// Perspective projection of a world point onto the detector, in detector
/// mm. Points at the isocenter plane magnify by sdd/sod.
inline Vec2 project_point(const ConeBeamGeometry& g, const Vec3& p_mm) {
  g.validate();
  const std::size_t d = std::size_t(g.depth_axis());
  const double depth = p_mm[d] - g.isocenter_mm[d];
  if (depth >= g.sod_mm)
    throw DataError("cannot project a point at or behind the source");
  const double t = g.sdd_mm / (g.sod_mm - depth);
  return {(p_mm[std::size_t(g.u_axis())] - g.isocenter_mm[std::size_t(g.u_axis())]) * t,
          (p_mm[std::size_t(g.v_axis())] - g.isocenter_mm[std::size_t(g.v_axis())]) * t};
}

namespace detail {

/// Trilinear interpolation over voxel centers, zero outside the lattice.
inline double sample_trilinear(const Volume& vol, const Vec3& p_mm) {
  const Vec3 f = world_to_voxel(vol, p_mm);
  const int ix = int(std::floor(f[0]));
  const int iy = int(std::floor(f[1]));
  const int iz = int(std::floor(f[2]));
  const double fx = f[0] - ix, fy = f[1] - iy, fz = f[2] - iz;
  double acc = 0.0;
  for (int c = 0; c < 8; ++c) {
    const int dx = c & 1, dy = (c >> 1) & 1, dz = (c >> 2) & 1;
    const int jx = ix + dx, jy = iy + dy, jz = iz + dz;
    if (!vol.contains(jx, jy, jz)) continue;
    const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
    acc += w * double(vol.f32[vol.index(jx, jy, jz)]);
  }
  return acc;
}

/// Clip segment p(t) = a + t (b - a), t in [0,1], against the volume's
/// support box (one voxel beyond the outermost centers, where the
/// interpolated field reaches zero). Returns false if the ray misses.
inline bool clip_to_support(const Volume& vol, const Vec3& a, const Vec3& b,
                            double& t0, double& t1) {
  t0 = 0.0;
  t1 = 1.0;
  for (std::size_t ax = 0; ax < 3; ++ax) {
    const double lo = vol.origin_mm[ax] - vol.spacing_mm[ax];
    const double hi = vol.origin_mm[ax] + vol.shape[ax] * vol.spacing_mm[ax];
    const double d = b[ax] - a[ax];
    if (std::abs(d) < 1e-12) {
      if (a[ax] < lo || a[ax] > hi) return false;
      continue;
    }
    double ta = (lo - a[ax]) / d;
    double tb = (hi - a[ax]) / d;
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  return t0 < t1;
}

}  // namespace detail

/// Ray-cast DRR: for every detector pixel, the line integral of the
/// trilinearly interpolated density from the source to the pixel center,
/// sampled at a fixed step of half the smallest voxel spacing (midpoint
/// rule). Pixels whose ray misses the volume are 0. Units: density * mm.
inline Image2D render_drr(const Volume& density, const ConeBeamGeometry& g) {
  g.validate();
  if (density.dtype != VolumeDtype::F32)
    throw DataError("render_drr needs an f32 density volume");
  const int nu = g.detector_shape[0], nv = g.detector_shape[1];
  Image2D img = Image2D::zeros(
      {nu, nv}, g.detector_spacing_mm,
      {-(nu - 1) / 2.0 * g.detector_spacing_mm[0],
       -(nv - 1) / 2.0 * g.detector_spacing_mm[1]});
  const Vec3 src = g.source_mm();
  const double step =
      0.5 * std::min({density.spacing_mm[0], density.spacing_mm[1], density.spacing_mm[2]});

  const std::int64_t n_px = std::int64_t(nu) * nv;
#ifdef TRANSVERT_HAS_OPENMP
#pragma omp parallel for schedule(static) num_threads(thread_count()) \
    if (thread_count() > 1)
#endif
  for (std::int64_t px = 0; px < n_px; ++px) {
    const int iu = int(px % nu), iv = int(px / nu);
    const Vec2 det_mm = g.pixel_to_mm({double(iu), double(iv)});
    const Vec3 dst = g.detector_point_mm(det_mm[0], det_mm[1]);
    double t0, t1;
    if (!detail::clip_to_support(density, src, dst, t0, t1)) continue;
    const Vec3 dir{dst[0] - src[0], dst[1] - src[1], dst[2] - src[2]};
    const double seg_len =
        (t1 - t0) * std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
    const int n_samples = std::max(1, int(std::ceil(seg_len / step)));
    const double dt = (t1 - t0) / n_samples;
    double acc = 0.0;
    for (int s = 0; s < n_samples; ++s) {
      const double t = t0 + (s + 0.5) * dt;
      acc += detail::sample_trilinear(
          density, {src[0] + t * dir[0], src[1] + t * dir[1], src[2] + t * dir[2]});
    }
    img.data[img.index(iu, iv)] = float(acc * seg_len / n_samples);
  }
  return img;
}

/// Grow the detector until the volume's support box projects fully inside,
/// with a small margin. Used when the config leaves the shape at 0 (auto).
inline void fit_detector(ConeBeamGeometry& g, const Volume& vol, int margin_px = 4) {
  double max_u = 0, max_v = 0;
  for (int corner = 0; corner < 8; ++corner) {
    Vec3 p;
    for (std::size_t ax = 0; ax < 3; ++ax) {
      const double lo = vol.origin_mm[ax] - vol.spacing_mm[ax];
      const double hi = vol.origin_mm[ax] + vol.shape[ax] * vol.spacing_mm[ax];
      p[ax] = ((corner >> ax) & 1) ? hi : lo;
    }
    const Vec2 uv = project_point(g, p);
    max_u = std::max(max_u, std::abs(uv[0]));
    max_v = std::max(max_v, std::abs(uv[1]));
  }
  g.detector_shape = {
      2 * (int(std::ceil(max_u / g.detector_spacing_mm[0])) + margin_px) + 1,
      2 * (int(std::ceil(max_v / g.detector_spacing_mm[1])) + margin_px) + 1};
}

/// Square crop centered at the rounded center pixel; out-of-bounds pixels
/// replicate the nearest edge value. The result keeps the source image's
/// mm mapping.
inline Image2D extract_patch(const Image2D& img, const Vec2& center_px, int size = 64) {
  if (size <= 0 || size % 2 != 0) throw DataError("patch size must be even and positive");
  const int cu = int(std::lround(center_px[0]));
  const int cv = int(std::lround(center_px[1]));
  const int u0 = cu - size / 2, v0 = cv - size / 2;
  Image2D patch = Image2D::zeros(
      {size, size}, img.spacing_mm,
      {img.origin_mm[0] + u0 * img.spacing_mm[0],
       img.origin_mm[1] + v0 * img.spacing_mm[1]});
  for (int j = 0; j < size; ++j) {
    const int iv = std::clamp(v0 + j, 0, img.shape[1] - 1);
    for (int i = 0; i < size; ++i) {
      const int iu = std::clamp(u0 + i, 0, img.shape[0] - 1);
      patch.at(i, j) = img.at(iu, iv);
    }
  }
  return patch;
}

/// Binary {0,1} VOI-annotation patch. C2V marks the disc of radius 1
/// around the rounded centroid pixel (5 pixels); B2V/V2V binarize a
/// projected mask patch; None is all zeros.
inline Image2D make_annotation(AnnotationType t, const Vec2& centroid_px,
                               const Image2D* projected_mask, int size = 64) {
  if (t == AnnotationType::B2V || t == AnnotationType::V2V) {
    if (projected_mask == nullptr)
      throw DataError("B2V/V2V annotation needs a projected mask");
    Image2D ann = *projected_mask;
    for (float& v : ann.data) v = v > 0.0f ? 1.0f : 0.0f;
    return ann;
  }
  Image2D ann = Image2D::zeros({size, size});
  if (t == AnnotationType::None) return ann;
  const int cu = int(std::lround(centroid_px[0]));
  const int cv = int(std::lround(centroid_px[1]));
  for (int dv = -1; dv <= 1; ++dv)
    for (int du = -1; du <= 1; ++du) {
      if (du * du + dv * dv > 1) continue;
      const int iu = cu + du, iv = cv + dv;
      if (iu >= 0 && iv >= 0 && iu < size && iv < size) ann.at(iu, iv) = 1.0f;
    }
  return ann;
}

/// (I - mean) / std over all pixels. Population standard deviation;
/// constant images are rejected.
inline Image2D zscore(const Image2D& img) {
  if (img.data.empty()) throw DataError("z-score of an empty image");
  double sum = 0.0;
  for (float v : img.data) sum += v;
  const double mean = sum / double(img.data.size());
  double ss = 0.0;
  for (float v : img.data) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / double(img.data.size()));
  if (sd == 0.0) throw DataError("z-score undefined for a constant image");
  Image2D out = img;
  for (float& v : out.data) v = float((v - mean) / sd);
  return out;
}

inline AnnotationType annotation_from_string(const std::string& s) {
  if (s == "none") return AnnotationType::None;
  if (s == "c2v") return AnnotationType::C2V;
  if (s == "b2v") return AnnotationType::B2V;
  if (s == "v2v") return AnnotationType::V2V;
  throw DataError("unknown annotation type: " + s);
}

inline const char* annotation_name(AnnotationType t) {
  switch (t) {
    case AnnotationType::None: return "none";
    case AnnotationType::C2V: return "c2v";
    case AnnotationType::B2V: return "b2v";
    case AnnotationType::V2V: return "v2v";
  }
  return "?";
}

}  // namespace transvert::drr
