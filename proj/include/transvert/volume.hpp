#pragma once

// Volume / image containers, the fixed axis convention, and bit-exact
// file I/O (.vhdr/.vraw for volumes, .ihdr/.iraw for images, 16-bit PGM
// export for eyeballing).
//
// Axis convention, used everywhere in this library:
//   x = left-right, y = anterior-posterior (+y anterior), z = cranio-caudal.
// Volume memory order is x-fastest: data[ix + nx*(iy + ny*iz)].
// A sagittal projection integrates along x and images the (y,z) plane;
// a coronal projection integrates along y and images the (x,z) plane.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "transvert/common.hpp"

namespace transvert {

enum class Axis : int { LeftRight = 0, AnteriorPosterior = 1, CranioCaudal = 2 };

constexpr int kLabelMin = 8;   // T1
constexpr int kLabelMax = 24;  // L5

using Vec3 = std::array<double, 3>;
using Vec2 = std::array<double, 2>;

enum class VolumeDtype { U8, F32 };

inline std::string dtype_name(VolumeDtype d) {
  return d == VolumeDtype::U8 ? "u8" : "f32";
}

struct Volume {
  std::array<int, 3> shape{0, 0, 0};  // (nx, ny, nz)
  Vec3 spacing_mm{1.0, 1.0, 1.0};
  Vec3 origin_mm{0.0, 0.0, 0.0};  // world position of voxel (0,0,0) center
  VolumeDtype dtype = VolumeDtype::F32;
  std::vector<std::uint8_t> u8;  // used when dtype == U8
  std::vector<float> f32;        // used when dtype == F32

  static Volume zeros(std::array<int, 3> shape, Vec3 spacing, Vec3 origin,
                      VolumeDtype dtype) {
    Volume v;
    v.shape = shape;
    v.spacing_mm = spacing;
    v.origin_mm = origin;
    v.dtype = dtype;
    if (shape[0] <= 0 || shape[1] <= 0 || shape[2] <= 0)
      throw DataError("volume shape must be positive");
    if (spacing[0] <= 0 || spacing[1] <= 0 || spacing[2] <= 0)
      throw DataError("volume spacing must be positive");
    if (dtype == VolumeDtype::U8)
      v.u8.assign(v.voxel_count(), 0);
    else
      v.f32.assign(v.voxel_count(), 0.0f);
    return v;
  }

  std::size_t voxel_count() const {
    return std::size_t(shape[0]) * shape[1] * shape[2];
  }

  std::size_t index(int ix, int iy, int iz) const {
    return std::size_t(ix) + std::size_t(shape[0]) * (std::size_t(iy) + std::size_t(shape[1]) * iz);
  }

  bool contains(int ix, int iy, int iz) const {
    return ix >= 0 && iy >= 0 && iz >= 0 && ix < shape[0] && iy < shape[1] &&
           iz < shape[2];
  }

  std::uint8_t& at_u8(int ix, int iy, int iz) { return u8[index(ix, iy, iz)]; }
  std::uint8_t at_u8(int ix, int iy, int iz) const { return u8[index(ix, iy, iz)]; }
  float& at_f32(int ix, int iy, int iz) { return f32[index(ix, iy, iz)]; }
  float at_f32(int ix, int iy, int iz) const { return f32[index(ix, iy, iz)]; }

  /// True when every voxel is 0 or a vertebral code in [kLabelMin, kLabelMax].
  bool valid_labels() const {
    if (dtype != VolumeDtype::U8) return false;
    return std::all_of(u8.begin(), u8.end(), [](std::uint8_t v) {
      return v == 0 || (v >= kLabelMin && v <= kLabelMax);
    });
  }
};

struct Image2D {
  std::array<int, 2> shape{0, 0};  // (nu, nv)
  Vec2 spacing_mm{1.0, 1.0};
  Vec2 origin_mm{0.0, 0.0};  // world/detector position of pixel (0,0) center
  std::vector<float> data;   // row-major: data[iu + nu*iv]

  static Image2D zeros(std::array<int, 2> shape, Vec2 spacing = {1, 1},
                       Vec2 origin = {0, 0}) {
    Image2D img;
    img.shape = shape;
    img.spacing_mm = spacing;
    img.origin_mm = origin;
    if (shape[0] <= 0 || shape[1] <= 0)
      throw DataError("image shape must be positive");
    if (spacing[0] <= 0 || spacing[1] <= 0)
      throw DataError("image spacing must be positive");
    img.data.assign(std::size_t(shape[0]) * shape[1], 0.0f);
    return img;
  }

  std::size_t pixel_count() const { return std::size_t(shape[0]) * shape[1]; }
  std::size_t index(int iu, int iv) const {
    return std::size_t(iu) + std::size_t(shape[0]) * iv;
  }
  float& at(int iu, int iv) { return data[index(iu, iv)]; }
  float at(int iu, int iv) const { return data[index(iu, iv)]; }
};

/// A labelled point, either in world mm (3D) or on a detector plane (2D).
struct Centroid {
  Vec3 position_mm{0, 0, 0};
  int label = 0;

  bool valid() const {
    return label >= kLabelMin && label <= kLabelMax &&
           std::isfinite(position_mm[0]) && std::isfinite(position_mm[1]) &&
           std::isfinite(position_mm[2]);
  }
};

inline Vec3 world_to_voxel(const Volume& v, const Vec3& p_mm) {
  return {(p_mm[0] - v.origin_mm[0]) / v.spacing_mm[0],
          (p_mm[1] - v.origin_mm[1]) / v.spacing_mm[1],
          (p_mm[2] - v.origin_mm[2]) / v.spacing_mm[2]};
}

inline Vec3 voxel_to_world(const Volume& v, const Vec3& idx) {
  return {v.origin_mm[0] + idx[0] * v.spacing_mm[0],
          v.origin_mm[1] + idx[1] * v.spacing_mm[1],
          v.origin_mm[2] + idx[2] * v.spacing_mm[2]};
}

inline Vec3 voxel_to_world(const Volume& v, double ix, double iy, double iz) {
  return voxel_to_world(v, Vec3{ix, iy, iz});
}

// ---------------------------------------------------------------------------
// File formats.
//
// <name>.vhdr : UTF-8 JSON object with keys shape, spacing_mm, origin_mm,
//               dtype ("u8"|"f32"), order ("x-fastest,little-endian").
// <name>.vraw : raw little-endian payload, x-fastest.
// <name>.ihdr / <name>.iraw : the 2D analogue (dtype always "f32",
//               order "row-major,little-endian").

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "raw payloads are little-endian; big-endian hosts unsupported");

inline std::filesystem::path raw_path(const std::filesystem::path& header,
                                      const char* raw_ext) {
  std::filesystem::path p = header;
  p.replace_extension(raw_ext);
  return p;
}

inline void write_bytes(const std::filesystem::path& path, const void* ptr,
                        std::size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open for write: " + path.string());
  out.write(static_cast<const char*>(ptr), std::streamsize(n));
  if (!out) throw DataError("write failed: " + path.string());
}

inline std::vector<char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw DataError("cannot open for read: " + path.string());
  const auto size = in.tellg();
  in.seekg(0);
  std::vector<char> buf(static_cast<std::size_t>(size));
  in.read(buf.data(), size);
  if (!in) throw DataError("read failed: " + path.string());
  return buf;
}

inline nlohmann::json parse_header(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  nlohmann::json j = nlohmann::json::parse(bytes.begin(), bytes.end(),
                                           /*cb=*/nullptr,
                                           /*allow_exceptions=*/false);
  if (j.is_discarded())
    throw DataError("malformed header (not valid JSON): " + path.string());
  return j;
}

}  // namespace detail

inline void write_volume(const Volume& v, const std::filesystem::path& path) {
  if (path.extension() != ".vhdr")
    throw DataError("volume header path must end in .vhdr: " + path.string());
  nlohmann::json j;
  j["shape"] = v.shape;
  j["spacing_mm"] = v.spacing_mm;
  j["origin_mm"] = v.origin_mm;
  j["dtype"] = dtype_name(v.dtype);
  j["order"] = "x-fastest,little-endian";
  const std::string text = j.dump(2) + "\n";
  detail::write_bytes(path, text.data(), text.size());
  const auto raw = detail::raw_path(path, ".vraw");
  if (v.dtype == VolumeDtype::U8) {
    if (v.u8.size() != v.voxel_count()) throw DataError("volume data/shape mismatch");
    detail::write_bytes(raw, v.u8.data(), v.u8.size());
  } else {
    if (v.f32.size() != v.voxel_count()) throw DataError("volume data/shape mismatch");
    detail::write_bytes(raw, v.f32.data(), v.f32.size() * sizeof(float));
  }
}

inline Volume read_volume(const std::filesystem::path& path) {
  const nlohmann::json j = detail::parse_header(path);
  for (const char* key : {"shape", "spacing_mm", "origin_mm", "dtype", "order"})
    if (!j.contains(key))
      throw DataError(std::string("malformed header, missing '") + key +
                      "': " + path.string());
  Volume v;
  try {
    v.shape = j.at("shape").get<std::array<int, 3>>();
    v.spacing_mm = j.at("spacing_mm").get<Vec3>();
    v.origin_mm = j.at("origin_mm").get<Vec3>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed header field: " + std::string(e.what()));
  }
  const std::string dtype = j.at("dtype").get<std::string>();
  if (dtype == "u8")
    v.dtype = VolumeDtype::U8;
  else if (dtype == "f32")
    v.dtype = VolumeDtype::F32;
  else
    throw DataError("unknown dtype '" + dtype + "' in " + path.string());
  if (j.at("order").get<std::string>() != "x-fastest,little-endian")
    throw DataError("unknown order in " + path.string());
  if (v.shape[0] <= 0 || v.shape[1] <= 0 || v.shape[2] <= 0)
    throw DataError("non-positive shape in " + path.string());
  if (v.spacing_mm[0] <= 0 || v.spacing_mm[1] <= 0 || v.spacing_mm[2] <= 0)
    throw DataError("non-positive spacing in " + path.string());

  const auto raw = detail::read_bytes(detail::raw_path(path, ".vraw"));
  const std::size_t n = v.voxel_count();
  const std::size_t expected = n * (v.dtype == VolumeDtype::U8 ? 1 : sizeof(float));
  if (raw.size() != expected)
    throw DataError("payload size mismatch for " + path.string() + ": got " +
                    std::to_string(raw.size()) + " bytes, expected " +
                    std::to_string(expected));
  if (v.dtype == VolumeDtype::U8) {
    v.u8.resize(n);
    std::memcpy(v.u8.data(), raw.data(), n);
  } else {
    v.f32.resize(n);
    std::memcpy(v.f32.data(), raw.data(), n * sizeof(float));
  }
  return v;
}

inline void write_image(const Image2D& img, const std::filesystem::path& path) {
  if (path.extension() != ".ihdr")
    throw DataError("image header path must end in .ihdr: " + path.string());
  nlohmann::json j;
  j["shape"] = img.shape;
  j["spacing_mm"] = img.spacing_mm;
  j["origin_mm"] = img.origin_mm;
  j["dtype"] = "f32";
  j["order"] = "row-major,little-endian";
  const std::string text = j.dump(2) + "\n";
  detail::write_bytes(path, text.data(), text.size());
  if (img.data.size() != img.pixel_count()) throw DataError("image data/shape mismatch");
  detail::write_bytes(detail::raw_path(path, ".iraw"), img.data.data(),
                      img.data.size() * sizeof(float));
}

inline Image2D read_image(const std::filesystem::path& path) {
  const nlohmann::json j = detail::parse_header(path);
  for (const char* key : {"shape", "spacing_mm", "origin_mm", "dtype", "order"})
    if (!j.contains(key))
      throw DataError(std::string("malformed header, missing '") + key +
                      "': " + path.string());
  Image2D img;
  try {
    img.shape = j.at("shape").get<std::array<int, 2>>();
    img.spacing_mm = j.at("spacing_mm").get<Vec2>();
    img.origin_mm = j.at("origin_mm").get<Vec2>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed header field: " + std::string(e.what()));
  }
  if (j.at("dtype").get<std::string>() != "f32")
    throw DataError("unknown dtype in " + path.string());
  if (img.shape[0] <= 0 || img.shape[1] <= 0)
    throw DataError("non-positive shape in " + path.string());
  const auto raw = detail::read_bytes(detail::raw_path(path, ".iraw"));
  const std::size_t n = img.pixel_count();
  if (raw.size() != n * sizeof(float))
    throw DataError("payload size mismatch for " + path.string());
  img.data.resize(n);
  std::memcpy(img.data.data(), raw.data(), n * sizeof(float));
  return img;
}

/// Min-max scaled 16-bit PGM (P5, maxval 65535), for quick visualization.
inline void write_pgm16(const Image2D& img, const std::filesystem::path& path) {
  float lo = img.data.empty() ? 0.0f : img.data[0];
  float hi = lo;
  for (float v : img.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const float scale = hi > lo ? 65535.0f / (hi - lo) : 0.0f;
  std::string head = "P5\n" + std::to_string(img.shape[0]) + " " +
                     std::to_string(img.shape[1]) + "\n65535\n";
  std::vector<std::uint8_t> bytes;
  bytes.reserve(head.size() + img.pixel_count() * 2);
  bytes.insert(bytes.end(), head.begin(), head.end());
  for (int iv = 0; iv < img.shape[1]; ++iv)
    for (int iu = 0; iu < img.shape[0]; ++iu) {
      const auto q = std::uint16_t(std::lround((img.at(iu, iv) - lo) * scale));
      bytes.push_back(std::uint8_t(q >> 8));  // PGM samples are big-endian
      bytes.push_back(std::uint8_t(q & 0xff));
    }
  detail::write_bytes(path, bytes.data(), bytes.size());
}

}  // namespace transvert
