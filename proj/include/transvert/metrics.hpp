#pragma once

// Segmentation metrics on voxel volumes and point clouds: binarization of
// regressed label volumes, Dice overlap, exact symmetric Hausdorff distance
// in millimetres, seeded surface point-cloud sampling, and symmetric Chamfer
// distance with per-point details.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "transvert/volume.hpp"

namespace transvert::metrics {

/// Threshold a regressed volume (label units) at label/2; foreground becomes
/// the label value, everything else 0.
inline Volume binarize(const Volume& pred, int label) {
  if (pred.dtype != VolumeDtype::F32) throw DataError("binarize: expected f32 volume");
  if (label < kLabelMin || label > kLabelMax)
    throw DataError("binarize: label out of range: " + std::to_string(label));
  Volume out = Volume::zeros(pred.shape, pred.spacing_mm, pred.origin_mm, VolumeDtype::U8);
  const float thr = float(label) / 2.0f;
  for (std::size_t i = 0; i < pred.f32.size(); ++i)
    out.u8[i] = pred.f32[i] > thr ? std::uint8_t(label) : 0;
  return out;
}

/// 2|A.B| / (|A|+|B|) over nonzero voxel sets; both empty -> 1.
inline double dice(const Volume& a, const Volume& b) {
  if (a.dtype != VolumeDtype::U8 || b.dtype != VolumeDtype::U8)
    throw DataError("dice: expected u8 volumes");
  if (a.shape != b.shape) throw DataError("dice: shape mismatch");
  std::int64_t na = 0, nb = 0, ni = 0;
  for (std::size_t i = 0; i < a.u8.size(); ++i) {
    const bool fa = a.u8[i] != 0, fb = b.u8[i] != 0;
    na += fa;
    nb += fb;
    ni += fa && fb;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * double(ni) / double(na + nb);
}

namespace detail {

struct VoxelIndex {
  int x, y, z;
};

inline std::vector<VoxelIndex> foreground(const Volume& v) {
  if (v.dtype != VolumeDtype::U8) throw DataError("expected u8 mask volume");
  std::vector<VoxelIndex> out;
  for (int z = 0; z < v.shape[2]; ++z)
    for (int y = 0; y < v.shape[1]; ++y)
      for (int x = 0; x < v.shape[0]; ++x)
        if (v.at_u8(x, y, z) != 0) out.push_back({x, y, z});
  return out;
}

inline bool is_foreground(const Volume& v, int x, int y, int z) {
  return v.contains(x, y, z) && v.at_u8(x, y, z) != 0;
}

/// Foreground voxels with at least one of the 6 face neighbors background
/// (or outside the volume).
inline std::vector<VoxelIndex> surface_voxels(const Volume& v) {
  std::vector<VoxelIndex> out;
  for (int z = 0; z < v.shape[2]; ++z)
    for (int y = 0; y < v.shape[1]; ++y)
      for (int x = 0; x < v.shape[0]; ++x) {
        if (v.at_u8(x, y, z) == 0) continue;
        if (!is_foreground(v, x - 1, y, z) || !is_foreground(v, x + 1, y, z) ||
            !is_foreground(v, x, y - 1, z) || !is_foreground(v, x, y + 1, z) ||
            !is_foreground(v, x, y, z - 1) || !is_foreground(v, x, y, z + 1))
          out.push_back({x, y, z});
      }
  return out;
}

inline double sq_dist_mm(const Vec3& p, const Vec3& q) {
  const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
  return dx * dx + dy * dy + dz * dz;
}

inline bool same_lattice(const Volume& a, const Volume& b) {
  return a.shape == b.shape && a.spacing_mm == b.spacing_mm &&
         a.origin_mm == b.origin_mm;
}

/// max over points of A of the distance to the nearest point of B, in mm.
/// When both volumes live on the same lattice, a point of A inside B has
/// distance 0 and the nearest B voxel to an outside point always lies on
/// B's 6-neighbor surface, so only surface voxels need scanning; the scan
/// for one point stops early once its minimum can no longer raise the max.
inline double directed_hausdorff_sq(const Volume& a, const Volume& b) {
  const std::vector<VoxelIndex> pa = foreground(a);
  if (pa.empty()) throw DataError("hausdorff: empty voxel set");
  const bool shared = same_lattice(a, b);
  std::vector<VoxelIndex> pb = shared ? surface_voxels(b) : foreground(b);
  if (pb.empty()) throw DataError("hausdorff: empty voxel set");
  std::vector<Vec3> qb(pb.size());
  for (std::size_t j = 0; j < pb.size(); ++j)
    qb[j] = voxel_to_world(b, pb[j].x, pb[j].y, pb[j].z);
  double max_sq = 0.0;
  for (const VoxelIndex& vi : pa) {
    if (shared && b.at_u8(vi.x, vi.y, vi.z) != 0) continue;  // distance 0
    const Vec3 p = voxel_to_world(a, vi.x, vi.y, vi.z);
    double min_sq = std::numeric_limits<double>::infinity();
    for (const Vec3& q : qb) {
      const double d = sq_dist_mm(p, q);
      if (d < min_sq) {
        min_sq = d;
        if (min_sq <= max_sq) break;  // cannot raise the running max
      }
    }
    if (min_sq > max_sq) max_sq = min_sq;
  }
  return max_sq;
}

}  // namespace detail

/// Exact symmetric Hausdorff distance between the nonzero voxel-center sets
/// of two masks, in world millimetres. Errors on an empty set.
inline double hausdorff_mm(const Volume& a, const Volume& b) {
  const double d2 = std::max(detail::directed_hausdorff_sq(a, b),
                             detail::directed_hausdorff_sq(b, a));
  return std::sqrt(d2);
}

/// n world-mm centers of surface voxels of the mask, sampled uniformly:
/// without replacement when the surface has at least n voxels, with
/// replacement otherwise. Deterministic for a given seed.
inline std::vector<Vec3> surface_points(const Volume& mask, int n, std::uint64_t seed) {
  if (n <= 0) throw DataError("surface_points: n must be positive");
  std::vector<detail::VoxelIndex> surf = detail::surface_voxels(mask);
  if (surf.empty()) throw DataError("surface_points: empty mask");
  Rng rng(seed);
  std::vector<Vec3> out;
  out.reserve(std::size_t(n));
  if (surf.size() >= std::size_t(n)) {
    for (int i = 0; i < n; ++i) {
      const std::size_t j =
          std::size_t(i) + std::size_t(rng.below(std::uint64_t(surf.size() - std::size_t(i))));
      std::swap(surf[std::size_t(i)], surf[j]);
      out.push_back(voxel_to_world(mask, surf[std::size_t(i)].x, surf[std::size_t(i)].y,
                                   surf[std::size_t(i)].z));
    }
  } else {
    for (int i = 0; i < n; ++i) {
      const std::size_t j = std::size_t(rng.below(std::uint64_t(surf.size())));
      out.push_back(voxel_to_world(mask, surf[j].x, surf[j].y, surf[j].z));
    }
  }
  return out;
}

struct ChamferResult {
  double chamfer_mm = 0;
  std::vector<double> dist_a;  // per point of a: distance to nearest of b
  std::vector<double> dist_b;  // per point of b: distance to nearest of a
};

/// Symmetric Chamfer distance: (mean_a min-dist + mean_b min-dist) / 2,
/// with the per-point nearest distances kept for export.
inline ChamferResult chamfer_mm(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  if (a.empty() || b.empty()) throw DataError("chamfer: empty point cloud");
  ChamferResult r;
  r.dist_a.resize(a.size());
  r.dist_b.resize(b.size(), std::numeric_limits<double>::infinity());
  double sum_a = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double min_sq = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < b.size(); ++j) {
      const double d = detail::sq_dist_mm(a[i], b[j]);
      if (d < min_sq) min_sq = d;
      if (d < r.dist_b[j]) r.dist_b[j] = d;
    }
    r.dist_a[i] = std::sqrt(min_sq);
    sum_a += r.dist_a[i];
  }
  double sum_b = 0;
  for (std::size_t j = 0; j < b.size(); ++j) {
    r.dist_b[j] = std::sqrt(r.dist_b[j]);
    sum_b += r.dist_b[j];
  }
  r.chamfer_mm = 0.5 * (sum_a / double(a.size()) + sum_b / double(b.size()));
  return r;
}

struct MetricsRow {
  std::string sample;
  int label = 0;
  double dice = 0;
  double hausdorff_mm = 0;
  double chamfer_mm = 0;
  double mean_pred_label = 0;
};

struct Aggregate {
  double mean = 0, stddev = 0;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;

  Aggregate aggregate(double MetricsRow::* field) const {
    Aggregate a;
    if (rows.empty()) return a;
    double sum = 0;
    for (const MetricsRow& r : rows) sum += r.*field;
    a.mean = sum / double(rows.size());
    double acc = 0;
    for (const MetricsRow& r : rows) {
      const double d = r.*field - a.mean;
      acc += d * d;
    }
    a.stddev = std::sqrt(acc / double(rows.size()));
    return a;
  }

  void write_csv(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot write metrics csv: " + path);
    f << "sample,label,dice,hausdorff_mm,chamfer_mm,mean_pred_label\n";
    char row[512];
    for (const MetricsRow& r : rows) {
      std::snprintf(row, sizeof(row), "%s,%d,%.9g,%.9g,%.9g,%.9g\n",
                    r.sample.c_str(), r.label, r.dice, r.hausdorff_mm,
                    r.chamfer_mm, r.mean_pred_label);
      f << row;
    }
  }

  void write_summary(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot write metrics summary: " + path);
    char line[256];
    auto emit = [&](const char* name, double MetricsRow::* field) {
      const Aggregate a = aggregate(field);
      std::snprintf(line, sizeof(line), "%s mean %.9g std %.9g\n", name, a.mean,
                    a.stddev);
      f << line;
    };
    f << "samples " << rows.size() << "\n";
    emit("dice", &MetricsRow::dice);
    emit("hausdorff_mm", &MetricsRow::hausdorff_mm);
    emit("chamfer_mm", &MetricsRow::chamfer_mm);
    emit("mean_pred_label", &MetricsRow::mean_pred_label);
  }
};

/// Mean raw predicted value (label units) over the reference mask's
/// foreground; measures how close the regressed values sit to the label.
inline double mean_label_on_foreground(const Volume& pred, const Volume& truth) {
  if (pred.shape != truth.shape) throw DataError("mean label: shape mismatch");
  double sum = 0;
  std::int64_t n = 0;
  for (std::size_t i = 0; i < truth.u8.size(); ++i)
    if (truth.u8[i] != 0) {
      sum += double(pred.f32[i]);
      n += 1;
    }
  return n ? sum / double(n) : 0.0;
}

/// All four per-sample metrics for one regressed prediction against its u8
/// reference mask. An empty binarized prediction yields dice 0 and infinite
/// distances instead of an error so a failing model still produces a report.
inline MetricsRow evaluate_sample(const std::string& id, const Volume& pred,
                                  const Volume& truth, int label,
                                  std::uint64_t seed, int cloud_points = 2048) {
  MetricsRow row;
  row.sample = id;
  row.label = label;
  const Volume bin = binarize(pred, label);
  row.dice = dice(bin, truth);
  row.mean_pred_label = mean_label_on_foreground(pred, truth);
  bool bin_empty = true;
  for (std::uint8_t v : bin.u8)
    if (v) {
      bin_empty = false;
      break;
    }
  bool truth_empty = true;
  for (std::uint8_t v : truth.u8)
    if (v) {
      truth_empty = false;
      break;
    }
  if (bin_empty || truth_empty) {
    row.hausdorff_mm = std::numeric_limits<double>::infinity();
    row.chamfer_mm = std::numeric_limits<double>::infinity();
    return row;
  }
  row.hausdorff_mm = hausdorff_mm(bin, truth);
  const std::vector<Vec3> pc_pred =
      surface_points(bin, cloud_points, derive_seed(seed, "cloud_pred"));
  const std::vector<Vec3> pc_true =
      surface_points(truth, cloud_points, derive_seed(seed, "cloud_true"));
  row.chamfer_mm = chamfer_mm(pc_pred, pc_true).chamfer_mm;
  return row;
}

}  // namespace transvert::metrics
