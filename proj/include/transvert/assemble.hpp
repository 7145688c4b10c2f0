#pragma once

// Spine assembly: recover 3D vertebra centroids from their detector
// coordinates in the two orthogonal views, then stack per-vertebra
// predicted masks onto a shared canvas at those positions.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "transvert/drr.hpp"
#include "transvert/volume.hpp"

namespace transvert::assemble {

/// Recover the 3D point (mm) whose cone-beam projections are c_sag on the
/// sagittal detector and c_cor on the coronal detector (both in detector mm
/// with 0 at the detector center).
///
/// The sagittal view measures (y,z) magnified by sdd/(sod-x) and the coronal
/// view measures (x,z) magnified by sdd/(sod-y), so each view supplies the
/// depth coordinate the other one needs; solving the resulting 2x2 system
/// gives the exact in-plane position, degenerating to plain sod/sdd
/// de-magnification when the point sits on the other view's axis plane.
/// z is taken from the sagittal view; if the coronal view's z disagrees by
/// more than 5 mm a warning is recorded and the sagittal value wins.
inline Vec3 fuse_centroids(const Vec2& c_sag, const Vec2& c_cor,
                           const drr::ConeBeamGeometry& g_sag,
                           const drr::ConeBeamGeometry& g_cor,
                           std::vector<std::string>* warnings = nullptr) {
  if (g_sag.view != drr::View::Sagittal || g_cor.view != drr::View::Coronal)
    throw DataError("fuse_centroids: geometries must be (sagittal, coronal)");
  for (int k = 0; k < 3; ++k)
    if (g_sag.isocenter_mm[k] != g_cor.isocenter_mm[k])
      throw DataError("fuse_centroids: geometries do not share an isocenter");
  g_sag.validate();
  g_cor.validate();

  const double a = c_sag[0] / g_sag.sdd_mm;  // y / (sod_s - x)
  const double b = c_cor[0] / g_cor.sdd_mm;  // x / (sod_c - y)
  const double denom = 1.0 - a * b;
  if (std::abs(denom) < 1e-12)
    throw NumericError("fuse_centroids: degenerate view pair");
  const double x = b * (g_cor.sod_mm - a * g_sag.sod_mm) / denom;
  const double y = a * (g_sag.sod_mm - x);
  const double z = c_sag[1] * (g_sag.sod_mm - x) / g_sag.sdd_mm;
  const double z_cor = c_cor[1] * (g_cor.sod_mm - y) / g_cor.sdd_mm;
  if (std::abs(z - z_cor) > 5.0 && warnings != nullptr) {
    std::ostringstream os;
    os << "view z disagreement " << std::abs(z - z_cor)
       << " mm exceeds 5 mm; keeping sagittal z";
    warnings->push_back(os.str());
  }
  return Vec3{x + g_sag.isocenter_mm[0], y + g_sag.isocenter_mm[1],
              z + g_sag.isocenter_mm[2]};
}

struct Placement {
  int label = 0;
  Vec3 centroid_mm{0, 0, 0};
};

struct SpineModel {
  Volume canvas;
  std::vector<Placement> placed;
  std::vector<std::string> warnings;
};

namespace detail {

inline double sq_dist(const Vec3& p, const Vec3& q) {
  const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
  return dx * dx + dy * dy + dz * dz;
}

inline Vec3 mask_centroid_voxel(const Volume& mask, int label) {
  double sx = 0, sy = 0, sz = 0;
  std::int64_t n = 0;
  for (int z = 0; z < mask.shape[2]; ++z)
    for (int y = 0; y < mask.shape[1]; ++y)
      for (int x = 0; x < mask.shape[0]; ++x) {
        const std::uint8_t v = mask.at_u8(x, y, z);
        if (v == 0) continue;
        if (int(v) != label)
          throw DataError("stack_spine: mask carries foreign label " +
                          std::to_string(int(v)));
        sx += x;
        sy += y;
        sz += z;
        n += 1;
      }
  if (n == 0) throw DataError("stack_spine: empty prediction mask");
  return Vec3{sx / double(n), sy / double(n), sz / double(n)};
}

}  // namespace detail

/// Place each predicted mask so its own foreground centroid lands on its
/// fused 3D centroid, rounded to the nearest whole-voxel shift. Voxels
/// claimed by several vertebrae go to the one whose centroid is nearer
/// (ties to the lower label); voxels shifted outside the canvas are dropped
/// with a warning. The canvas is centered on the world origin.
inline SpineModel stack_spine(const std::vector<std::pair<Volume, int>>& preds,
                              const std::vector<Vec3>& centroids_mm,
                              const std::array<int, 3>& canvas_shape,
                              const Vec3& spacing_mm) {
  if (preds.size() != centroids_mm.size())
    throw DataError("stack_spine: one centroid required per prediction");
  if (preds.empty()) throw DataError("stack_spine: no predictions");
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int li = preds[i].second;
    if (li < kLabelMin || li > kLabelMax)
      throw DataError("stack_spine: label out of range: " + std::to_string(li));
    for (std::size_t j = i + 1; j < preds.size(); ++j)
      if (preds[j].second == li)
        throw DataError("stack_spine: duplicate label " + std::to_string(li));
  }

  SpineModel model;
  Vec3 origin{-0.5 * (canvas_shape[0] - 1) * spacing_mm[0],
              -0.5 * (canvas_shape[1] - 1) * spacing_mm[1],
              -0.5 * (canvas_shape[2] - 1) * spacing_mm[2]};
  model.canvas = Volume::zeros(canvas_shape, spacing_mm, origin, VolumeDtype::U8);
  std::vector<int> owner(model.canvas.u8.size(), -1);

  for (std::size_t k = 0; k < preds.size(); ++k) {
    const Volume& mask = preds[k].first;
    const int label = preds[k].second;
    if (mask.dtype != VolumeDtype::U8)
      throw DataError("stack_spine: predictions must be u8 masks");
    for (int ax = 0; ax < 3; ++ax)
      if (mask.spacing_mm[ax] != spacing_mm[ax])
        throw DataError("stack_spine: prediction spacing differs from canvas");

    const Vec3 src = detail::mask_centroid_voxel(mask, label);
    const Vec3 dst = world_to_voxel(model.canvas, centroids_mm[k]);
    const int shift[3] = {int(std::lround(dst[0] - src[0])),
                          int(std::lround(dst[1] - src[1])),
                          int(std::lround(dst[2] - src[2]))};

    std::int64_t clipped = 0;
    for (int z = 0; z < mask.shape[2]; ++z)
      for (int y = 0; y < mask.shape[1]; ++y)
        for (int x = 0; x < mask.shape[0]; ++x) {
          if (mask.at_u8(x, y, z) == 0) continue;
          const int cx = x + shift[0], cy = y + shift[1], cz = z + shift[2];
          if (!model.canvas.contains(cx, cy, cz)) {
            clipped += 1;
            continue;
          }
          const std::size_t idx = model.canvas.index(cx, cy, cz);
          if (owner[idx] < 0) {
            owner[idx] = int(k);
            continue;
          }
          const Vec3 p = voxel_to_world(model.canvas, cx, cy, cz);
          const double d_new = detail::sq_dist(p, centroids_mm[k]);
          const double d_old = detail::sq_dist(p, centroids_mm[std::size_t(owner[idx])]);
          const int old_label = preds[std::size_t(owner[idx])].second;
          if (d_new < d_old || (d_new == d_old && label < old_label))
            owner[idx] = int(k);
        }
    if (clipped > 0) {
      std::ostringstream os;
      os << "label " << label << ": " << clipped
         << " voxels clipped at the canvas boundary";
      model.warnings.push_back(os.str());
    }
    model.placed.push_back({label, centroids_mm[k]});
  }

  for (std::size_t i = 0; i < owner.size(); ++i)
    if (owner[i] >= 0)
      model.canvas.u8[i] = std::uint8_t(preds[std::size_t(owner[i])].second);
  return model;
}

// --- CLI-facing CSV formats -------------------------------------------------

/// One vertebra awaiting assembly: its label and the detector-mm centroid in
/// each view. Row format: label,u_sag_mm,v_sag_mm,u_cor_mm,v_cor_mm.
struct AssemblyInput {
  int label = 0;
  Vec2 c_sag{0, 0};
  Vec2 c_cor{0, 0};
};

inline void write_assembly_csv(const std::string& path,
                               const std::vector<AssemblyInput>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write assembly csv: " + path);
  f << "label,u_sag_mm,v_sag_mm,u_cor_mm,v_cor_mm\n";
  char line[256];
  for (const AssemblyInput& r : rows) {
    std::snprintf(line, sizeof(line), "%d,%.17g,%.17g,%.17g,%.17g\n", r.label,
                  r.c_sag[0], r.c_sag[1], r.c_cor[0], r.c_cor[1]);
    f << line;
  }
}

inline std::vector<AssemblyInput> read_assembly_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read assembly csv: " + path);
  std::string line;
  if (!std::getline(f, line) || line != "label,u_sag_mm,v_sag_mm,u_cor_mm,v_cor_mm")
    throw DataError("assembly csv has an unexpected header: " + path);
  std::vector<AssemblyInput> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    AssemblyInput r;
    char c1, c2, c3, c4;
    if (!(ss >> r.label >> c1 >> r.c_sag[0] >> c2 >> r.c_sag[1] >> c3 >>
          r.c_cor[0] >> c4 >> r.c_cor[1]) ||
        c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',')
      throw DataError("malformed assembly csv row: " + line);
    rows.push_back(r);
  }
  return rows;
}

/// Fused 3D placements. Row format: label,x_mm,y_mm,z_mm.
inline void write_placed_csv(const std::string& path,
                             const std::vector<Placement>& placed) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write placement csv: " + path);
  f << "label,x_mm,y_mm,z_mm\n";
  char line[256];
  for (const Placement& p : placed) {
    std::snprintf(line, sizeof(line), "%d,%.17g,%.17g,%.17g\n", p.label,
                  p.centroid_mm[0], p.centroid_mm[1], p.centroid_mm[2]);
    f << line;
  }
}

}  // namespace transvert::assemble
