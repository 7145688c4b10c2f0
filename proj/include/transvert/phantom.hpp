#pragma once

// Procedural vertebra and spine phantoms. A vertebra is an ellipsoidal
// body fused with a cylindrical posterior process; a spine is a stack of
// those inside a soft-tissue torso, bowed along y to emulate curvature.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "transvert/common.hpp"
#include "transvert/volume.hpp"

namespace transvert::phantom {

constexpr int kPatchSize = 64;  // vertebra patches are 64^3 voxels

constexpr float kDensityBody = 1.0f;
constexpr float kDensitySoftTissue = 0.2f;
constexpr float kDensityAir = 0.0f;

struct PhantomParams {
  Vec3 body_radii_mm{13.0, 9.0, 7.5};   // (x, y, z) semi-axes of the body
  double process_length_mm = 15.0;      // posterior reach beyond the body surface
  double process_radius_mm = 3.2;
  double size_growth_per_index = 0.015; // linear scale per (label - 8)
  Vec3 rotation_deg{0.0, 0.0, 0.0};     // intrinsic rotations about x, y, z
  std::uint64_t seed = 0;

  void validate() const {
    if (body_radii_mm[0] <= 0 || body_radii_mm[1] <= 0 || body_radii_mm[2] <= 0)
      throw DataError("phantom body radii must be positive");
    if (process_length_mm <= 0 || process_radius_mm <= 0)
      throw DataError("phantom process dimensions must be positive");
    if (size_growth_per_index < 0)
      throw DataError("phantom size growth must be non-negative");
    for (double r : rotation_deg)
      if (r < -45.0 || r > 45.0)
        throw DataError("phantom rotations must lie in [-45, 45] degrees");
  }
};

struct SpinePhantom {
  Volume labels;                   // u8, values {0} + consecutive labels
  Volume body_labels;              // u8, ellipsoid bodies only (process excluded)
  Volume density;                  // f32 attenuation, arbitrary units >= 0
  std::vector<Centroid> centroids; // strictly increasing z, one per label
};

namespace detail {

inline std::array<double, 9> rotation_matrix(const Vec3& deg) {
  const double ax = deg[0] * std::numbers::pi / 180.0;
  const double ay = deg[1] * std::numbers::pi / 180.0;
  const double az = deg[2] * std::numbers::pi / 180.0;
  const double cx = std::cos(ax), sx = std::sin(ax);
  const double cy = std::cos(ay), sy = std::sin(ay);
  const double cz = std::cos(az), sz = std::sin(az);
  // R = Rz * Ry * Rx
  return {cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx,
          sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx,
          -sy,     cy * sx,                cy * cx};
}

// Membership test in the vertebra's local frame (origin at body center).
struct VertebraShape {
  Vec3 radii;          // effective body semi-axes
  double proc_len;     // cylinder spans y in [-(radii_y + proc_len), 0]
  double proc_radius;
  std::array<double, 9> rot_inv;  // world->local (transpose of rotation)

  bool body(const Vec3& p) const {
    const Vec3 q = apply(rot_inv, p);
    const double a = q[0] / radii[0], b = q[1] / radii[1], c = q[2] / radii[2];
    return a * a + b * b + c * c <= 1.0;
  }

  bool contains(const Vec3& p) const {
    const Vec3 q = apply(rot_inv, p);
    const double a = q[0] / radii[0], b = q[1] / radii[1], c = q[2] / radii[2];
    if (a * a + b * b + c * c <= 1.0) return true;
    if (q[1] <= 0.0 && q[1] >= -(radii[1] + proc_len)) {
      const double r2 = q[0] * q[0] + q[2] * q[2];
      return r2 <= proc_radius * proc_radius;
    }
    return false;
  }

  static Vec3 apply(const std::array<double, 9>& m, const Vec3& p) {
    return {m[0] * p[0] + m[1] * p[1] + m[2] * p[2],
            m[3] * p[0] + m[4] * p[1] + m[5] * p[2],
            m[6] * p[0] + m[7] * p[1] + m[8] * p[2]};
  }
};

inline VertebraShape make_shape(int label, const PhantomParams& params) {
  const double scale = 1.0 + (label - kLabelMin) * params.size_growth_per_index;
  VertebraShape s;
  s.radii = {params.body_radii_mm[0] * scale, params.body_radii_mm[1] * scale,
             params.body_radii_mm[2] * scale};
  s.proc_len = params.process_length_mm * scale;
  s.proc_radius = params.process_radius_mm;
  const auto rot = rotation_matrix(params.rotation_deg);
  // Orthonormal, so the inverse is the transpose.
  s.rot_inv = {rot[0], rot[3], rot[6], rot[1], rot[4], rot[7], rot[2], rot[5], rot[8]};
  return s;
}

}  // namespace detail

/// Rasterize one vertebra into a 64^3 u8 patch (1 mm spacing, origin 0).
/// The body center sits at voxel ((n-1)/2, anterior_offset, (n-1)/2) so the
/// voxel set is mirror-symmetric in x when rotation is zero.
inline Volume make_vertebra(int label, const PhantomParams& params) {
  if (label < kLabelMin || label > kLabelMax)
    throw DataError("vertebra label out of range 8..24: " + std::to_string(label));
  params.validate();

  const auto shape = detail::make_shape(label, params);
  const int n = kPatchSize;
  Volume patch = Volume::zeros({n, n, n}, {1, 1, 1}, {0, 0, 0}, VolumeDtype::U8);
  const double cx = (n - 1) / 2.0;
  const double cy = cx + 7.0;  // shifted anterior so the process stays inside
  const double cz = cx;
  for (int iz = 0; iz < n; ++iz)
    for (int iy = 0; iy < n; ++iy)
      for (int ix = 0; ix < n; ++ix) {
        const Vec3 p{ix - cx, iy - cy, iz - cz};
        if (shape.contains(p)) patch.at_u8(ix, iy, iz) = std::uint8_t(label);
      }
  return patch;
}

/// Body-only companion of make_vertebra (for B2V annotations).
inline Volume make_vertebra_body(int label, const PhantomParams& params) {
  if (label < kLabelMin || label > kLabelMax)
    throw DataError("vertebra label out of range 8..24: " + std::to_string(label));
  params.validate();
  const auto shape = detail::make_shape(label, params);
  const int n = kPatchSize;
  Volume patch = Volume::zeros({n, n, n}, {1, 1, 1}, {0, 0, 0}, VolumeDtype::U8);
  const double cx = (n - 1) / 2.0;
  const double cy = cx + 7.0;
  const double cz = cx;
  for (int iz = 0; iz < n; ++iz)
    for (int iy = 0; iy < n; ++iy)
      for (int ix = 0; ix < n; ++ix)
        if (shape.body({ix - cx, iy - cy, iz - cz}))
          patch.at_u8(ix, iy, iz) = std::uint8_t(label);
  return patch;
}

struct SpineParams {
  int n_vertebrae = 5;        // 2..17, labelled 8..8+n-1
  double curvature_mm = 6.0;  // max anterior bow of the centroid line
  double gap_mm = 4.0;        // slab spacing between consecutive patches
  std::uint64_t seed = 0;
  int canvas_xy = 96;         // transverse canvas size in voxels (1 mm)
  PhantomParams base;         // jittered per vertebra from `seed`
};

/// Stack jittered vertebrae along z inside a soft-tissue torso.
/// Consecutive centroids are one 64-voxel slab plus gap_mm apart in z and
/// displaced along y by a half-sine bow scaled by curvature_mm.
inline SpinePhantom make_spine(const SpineParams& sp) {
  if (sp.n_vertebrae < 2 || sp.n_vertebrae > 17)
    throw DataError("spine must have 2..17 vertebrae");
  if (sp.gap_mm <= 0) throw DataError("gap_mm must be positive");
  const int n = sp.n_vertebrae;
  const int patch = kPatchSize;
  const int margin = 8;
  const double pitch = patch + sp.gap_mm;
  const int nz = int(std::ceil(2 * margin + n * patch + (n - 1) * sp.gap_mm));
  const int nxy = sp.canvas_xy;
  if (nxy < patch) throw DataError("canvas_xy smaller than a vertebra patch");

  const Vec3 origin{-(nxy - 1) / 2.0, -(nxy - 1) / 2.0, -(nz - 1) / 2.0};
  SpinePhantom out;
  out.labels = Volume::zeros({nxy, nxy, nz}, {1, 1, 1}, origin, VolumeDtype::U8);
  out.body_labels = Volume::zeros({nxy, nxy, nz}, {1, 1, 1}, origin, VolumeDtype::U8);
  out.density = Volume::zeros({nxy, nxy, nz}, {1, 1, 1}, origin, VolumeDtype::F32);

  const double cx = (nxy - 1) / 2.0;  // spine axis, voxel coords
  const double y_base = (nxy - 1) / 2.0 - 4.0;
  for (int k = 0; k < n; ++k) {
    const int label = kLabelMin + k;
    Rng rng(derive_seed(sp.seed, "vertebra", std::uint64_t(k)));
    PhantomParams p = sp.base;
    const double s = rng.uniform(0.92, 1.08);
    p.body_radii_mm = {p.body_radii_mm[0] * s, p.body_radii_mm[1] * s,
                       p.body_radii_mm[2] * s};
    p.process_length_mm *= rng.uniform(0.9, 1.1);
    p.rotation_deg = {rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(-8, 8)};
    p.seed = derive_seed(sp.seed, "vertebra-params", std::uint64_t(k));

    const Volume vert = make_vertebra(label, p);
    const Volume body = make_vertebra_body(label, p);

    const double bow = n > 1 ? std::sin(std::numbers::pi * k / (n - 1)) : 0.0;
    const int ox = int(std::lround(cx - (patch - 1) / 2.0));
    const int oy = int(std::lround(y_base + sp.curvature_mm * bow - (patch - 1) / 2.0));
    const int oz = int(std::lround(margin + k * pitch));

    // The centroid is the placed body center (the patch's rasterization
    // origin), matching how clinical centroid annotations mark the body.
    const Vec3 body_center_vox{ox + (patch - 1) / 2.0,
                               oy + (patch - 1) / 2.0 + 7.0,
                               oz + (patch - 1) / 2.0};
    out.centroids.push_back(
        Centroid{voxel_to_world(out.labels, body_center_vox), label});

    for (int iz = 0; iz < patch; ++iz)
      for (int iy = 0; iy < patch; ++iy)
        for (int ix = 0; ix < patch; ++ix) {
          if (vert.at_u8(ix, iy, iz) == 0) continue;
          const int gx = ix + ox, gy = iy + oy, gz = iz + oz;
          if (!out.labels.contains(gx, gy, gz))
            throw DataError("spine phantom exceeds canvas; enlarge canvas_xy");
          if (out.labels.at_u8(gx, gy, gz) != 0)
            throw DataError("spine phantom vertebrae overlap; increase gap_mm");
          out.labels.at_u8(gx, gy, gz) = std::uint8_t(label);
          if (body.at_u8(ix, iy, iz) != 0)
            out.body_labels.at_u8(gx, gy, gz) = std::uint8_t(label);
        }
  }

  // Density: bone inside vertebrae, soft tissue inside the torso cylinder.
  const double torso_r = (nxy - 1) / 2.0 - 1.0;
  for (int iz = 0; iz < nz; ++iz)
    for (int iy = 0; iy < nxy; ++iy)
      for (int ix = 0; ix < nxy; ++ix) {
        const std::size_t i = out.density.index(ix, iy, iz);
        if (out.labels.u8[i] != 0) {
          out.density.f32[i] = kDensityBody;
        } else {
          const double dx = ix - cx, dy = iy - cx;
          out.density.f32[i] =
              dx * dx + dy * dy <= torso_r * torso_r ? kDensitySoftTissue : kDensityAir;
        }
      }

  // Each centroid voxel must carry its own label.
  for (const Centroid& c : out.centroids) {
    const Vec3 v = world_to_voxel(out.labels, c.position_mm);
    const int ix = int(std::lround(v[0])), iy = int(std::lround(v[1])),
              iz = int(std::lround(v[2]));
    if (!out.labels.contains(ix, iy, iz) ||
        out.labels.at_u8(ix, iy, iz) != c.label)
      throw DataError("centroid fell outside its vertebra");
  }
  return out;
}

/// The i-th spine of a seeded population: vertebra count and curvature are
/// jittered around the base parameters, everything else derives from the
/// per-spine seed.
inline SpinePhantom varied_spine(int index, std::uint64_t seed,
                                 const SpineParams& base = {}) {
  SpineParams sp = base;
  sp.seed = derive_seed(seed, "spine", std::uint64_t(index));
  Rng vary(derive_seed(seed, "spine-shape", std::uint64_t(index)));
  sp.n_vertebrae = base.n_vertebrae + int(vary.below(3)) - 1;
  sp.n_vertebrae = std::clamp(sp.n_vertebrae, 2, 17);
  sp.curvature_mm = base.curvature_mm * vary.uniform(0.5, 1.5);
  return make_spine(sp);
}

/// Deterministic 5:1 train/validation split of generated spines.
/// Validation gets floor(n/6) samples; assignment is a seeded permutation.
inline std::pair<std::vector<SpinePhantom>, std::vector<SpinePhantom>> dataset(
    int n_samples, std::uint64_t seed, const SpineParams& base = {}) {
  if (n_samples < 6) throw DataError("dataset needs at least 6 samples for a 5:1 split");
  std::vector<std::size_t> order(static_cast<std::size_t>(n_samples));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(order);
  const std::size_t n_val = std::size_t(n_samples / 6);

  std::vector<bool> is_val(std::size_t(n_samples), false);
  for (std::size_t i = 0; i < n_val; ++i) is_val[order[i]] = true;

  std::pair<std::vector<SpinePhantom>, std::vector<SpinePhantom>> out;
  for (int i = 0; i < n_samples; ++i) {
    auto spine = varied_spine(i, seed, base);
    (is_val[std::size_t(i)] ? out.second : out.first).push_back(std::move(spine));
  }
  return out;
}

}  // namespace transvert::phantom
