#pragma once

// Spherical projection of a LiDAR revolution into the 5-channel panoramic
// frame (depth, intensity, normal xyz) consumed by the odometry network.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "lorcon/dataset_io.hpp"
#include "lorcon/errors.hpp"

namespace lorcon {

inline constexpr double deg_to_rad(double d) { return d * std::numbers::pi / 180.0; }

struct ProjectionConfig {
  int width = 900;  // 0.4 degrees per pixel
  int height = 64;  // one row per laser
  double fov_up = deg_to_rad(3.0);     // above the horizon
  double fov_down = deg_to_rad(25.0);  // magnitude below the horizon
  double max_range = 80.0;             // depth normalization ceiling, meters

  double fov() const { return fov_up + fov_down; }

  void validate() const {
    if (width < 2 || height < 2)
      throw ConfigError("projection: width and height must be >= 2");
    if (!(fov() > 0.0)) throw ConfigError("projection: fov_up + fov_down must be positive");
    if (!(max_range > 0.0)) throw ConfigError("projection: max_range must be positive");
  }
};

struct PixelHit {
  int u = 0;  // column
  int v = 0;  // row
  double d = 0;
};

// Pixel of a point, or nullopt when its row falls outside the image (or the
// point is at the origin). Rows cover elevations (-fov_up, fov_down].
inline std::optional<PixelHit> project_point(const Point& p, const ProjectionConfig& cfg) {
  const double d = std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z);
  if (!(d > 0.0)) return std::nullopt;
  const double w = cfg.width, h = cfg.height;
  const double yaw = std::atan2(p.y, p.x);
  const double pitch = std::asin(std::clamp(p.z / d, -1.0, 1.0));

  const double uf = 0.5 * (1.0 - yaw / std::numbers::pi) * w;
  const double vf = (1.0 - (pitch + cfg.fov_up) / cfg.fov()) * h;
  long u = static_cast<long>(std::floor(uf));
  const long v = static_cast<long>(std::floor(vf));
  if (v < 0 || v >= cfg.height) return std::nullopt;
  u %= cfg.width;
  if (u < 0) u += cfg.width;
  return PixelHit{static_cast<int>(u), static_cast<int>(v), d};
}

// Angles of the center of pixel (u, v); inverse of project_point on the grid.
inline double pixel_center_azimuth(int u, const ProjectionConfig& cfg) {
  return std::numbers::pi * (1.0 - 2.0 * (u + 0.5) / cfg.width);
}

inline double pixel_center_elevation(int v, const ProjectionConfig& cfg) {
  return (1.0 - (v + 0.5) / cfg.height) * cfg.fov() - cfg.fov_up;
}

struct ProjectedFrame {
  int height = 0;
  int width = 0;
  std::vector<double> depth;      // h*w, d / max_range clamped to [0, 1]
  std::vector<double> intensity;  // h*w
  std::vector<double> normal;     // h*w*3, interleaved xyz
  std::vector<double> xyz;        // h*w*3, selected point per pixel
  std::vector<std::uint8_t> valid;
  std::vector<std::int64_t> source_index;  // index of the selected point, -1 if none

  ProjectedFrame() = default;
  ProjectedFrame(int h, int w)
      : height(h),
        width(w),
        depth(static_cast<std::size_t>(h) * w, 0.0),
        intensity(static_cast<std::size_t>(h) * w, 0.0),
        normal(static_cast<std::size_t>(h) * w * 3, 0.0),
        xyz(static_cast<std::size_t>(h) * w * 3, 0.0),
        valid(static_cast<std::size_t>(h) * w, 0),
        source_index(static_cast<std::size_t>(h) * w, -1) {}

  std::size_t index(int v, int u) const { return static_cast<std::size_t>(v) * width + u; }
  std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }

  bool is_valid(int v, int u) const { return valid[index(v, u)] != 0; }

  Eigen::Vector3d point_at(int v, int u) const {
    const std::size_t i = index(v, u) * 3;
    return {xyz[i], xyz[i + 1], xyz[i + 2]};
  }

  Eigen::Vector3d normal_at(int v, int u) const {
    const std::size_t i = index(v, u) * 3;
    return {normal[i], normal[i + 1], normal[i + 2]};
  }
};

// Per-pixel nearest return. Ties at equal distance keep the earliest point.
inline ProjectedFrame build_range_image(const PointCloud& cloud, const ProjectionConfig& cfg) {
  cfg.validate();
  ProjectedFrame frame(cfg.height, cfg.width);
  std::vector<double> best(frame.pixel_count(), std::numeric_limits<double>::infinity());
  for (std::size_t k = 0; k < cloud.points.size(); ++k) {
    const Point& p = cloud.points[k];
    const auto hit = project_point(p, cfg);
    if (!hit) continue;
    const std::size_t i = frame.index(hit->v, hit->u);
    if (!(hit->d < best[i])) continue;
    best[i] = hit->d;
    frame.valid[i] = 1;
    frame.source_index[i] = static_cast<std::int64_t>(k);
    frame.depth[i] = std::min(hit->d, cfg.max_range) / cfg.max_range;
    frame.intensity[i] = p.intensity;
    frame.xyz[i * 3] = p.x;
    frame.xyz[i * 3 + 1] = p.y;
    frame.xyz[i * 3 + 2] = p.z;
  }
  return frame;
}

// Cross product of the vectors to the right (wrapping) and lower neighbors,
// normalized and oriented toward the sensor. Pixels without both neighbors or
// with a degenerate cross product keep a zero normal.
inline ProjectedFrame compute_normals(ProjectedFrame frame) {
  const int h = frame.height, w = frame.width;
  std::fill(frame.normal.begin(), frame.normal.end(), 0.0);
  for (int v = 0; v + 1 < h; ++v) {
    for (int u = 0; u < w; ++u) {
      const int right = (u + 1) % w;
      if (!frame.is_valid(v, u) || !frame.is_valid(v, right) || !frame.is_valid(v + 1, u))
        continue;
      const Eigen::Vector3d c = frame.point_at(v, u);
      const Eigen::Vector3d a = frame.point_at(v, right) - c;
      const Eigen::Vector3d b = frame.point_at(v + 1, u) - c;
      Eigen::Vector3d n = a.cross(b);
      const double len = n.norm();
      if (len < 1e-12) continue;
      n /= len;
      if (n.dot(-c) < 0.0) n = -n;
      const std::size_t i = frame.index(v, u) * 3;
      frame.normal[i] = n.x();
      frame.normal[i + 1] = n.y();
      frame.normal[i + 2] = n.z();
    }
  }
  return frame;
}

inline ProjectedFrame project_scan(const PointCloud& cloud, const ProjectionConfig& cfg) {
  return compute_normals(build_range_image(cloud, cfg));
}

// Affine map of normal components from [-1, 1] into [0, 1] for image export.
inline std::vector<double> normals_to_rgb(const ProjectedFrame& frame) {
  std::vector<double> rgb(frame.normal.size());
  std::transform(frame.normal.begin(), frame.normal.end(), rgb.begin(),
                 [](double c) { return (c + 1.0) / 2.0; });
  return rgb;
}

inline constexpr int kFrameChannels = 5;

// The five model channels of a frame, channel-major float32:
// depth, intensity, nx, ny, nz.
struct FrameChannels {
  int height = 0;
  int width = 0;
  std::vector<float> data;

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  const float* channel(int c) const { return data.data() + c * plane(); }
};

inline FrameChannels to_channels(const ProjectedFrame& f) {
  FrameChannels out{f.height, f.width, std::vector<float>(kFrameChannels * f.pixel_count())};
  const std::size_t n = f.pixel_count();
  for (std::size_t i = 0; i < n; ++i) {
    out.data[i] = static_cast<float>(f.depth[i]);
    out.data[n + i] = static_cast<float>(f.intensity[i]);
    out.data[2 * n + i] = static_cast<float>(f.normal[i * 3]);
    out.data[3 * n + i] = static_cast<float>(f.normal[i * 3 + 1]);
    out.data[4 * n + i] = static_cast<float>(f.normal[i * 3 + 2]);
  }
  return out;
}

inline constexpr int kPairChannels = 2 * kFrameChannels;

// Frame t's five channels followed by frame t+1's.
struct FramePair {
  int height = 0;
  int width = 0;
  std::vector<float> channels;  // 10*h*w

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  const float* channel(int c) const { return channels.data() + c * plane(); }
};

inline FramePair stack_pair(const FrameChannels& a, const FrameChannels& b) {
  if (a.height != b.height || a.width != b.width) {
    throw ShapeError("stack_pair: frame dimensions differ (" + std::to_string(a.height) + "x" +
                     std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                     std::to_string(b.width) + ")");
  }
  FramePair p{a.height, a.width, {}};
  p.channels.reserve(a.data.size() + b.data.size());
  p.channels.insert(p.channels.end(), a.data.begin(), a.data.end());
  p.channels.insert(p.channels.end(), b.data.begin(), b.data.end());
  return p;
}

inline FramePair stack_pair(const ProjectedFrame& a, const ProjectedFrame& b) {
  return stack_pair(to_channels(a), to_channels(b));
}

// ---------------------------------------------------------------------------
// Export: binary PGM/PPM previews and the float32 frame cache blob.

namespace detail {

inline unsigned char to_byte(double x) {
  return static_cast<unsigned char>(std::lround(std::clamp(x, 0.0, 1.0) * 255.0));
}

}  // namespace detail

// Writes one [0,1] channel (h*w values) as an 8-bit binary graymap.
inline void write_pgm(const std::filesystem::path& path, int height, int width,
                      const std::vector<double>& values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P5\n" << width << ' ' << height << "\n255\n";
  for (double x : values) out.put(static_cast<char>(detail::to_byte(x)));
  if (!out) throw DataError("write failure on " + path.string());
}

// Writes interleaved rgb (h*w*3 values in [0,1]) as an 8-bit binary pixmap.
inline void write_ppm(const std::filesystem::path& path, int height, int width,
                      const std::vector<double>& rgb) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P6\n" << width << ' ' << height << "\n255\n";
  for (double x : rgb) out.put(static_cast<char>(detail::to_byte(x)));
  if (!out) throw DataError("write failure on " + path.string());
}

// Blob layout: "LRCF" magic, u32 height, u32 width, u32 channels, then
// little-endian float32 data in channel-major order.
inline constexpr char kFrameBlobMagic[4] = {'L', 'R', 'C', 'F'};

inline std::vector<unsigned char> encode_frame_blob(const FrameChannels& f) {
  std::vector<unsigned char> bytes(16 + f.data.size() * 4);
  std::memcpy(bytes.data(), kFrameBlobMagic, 4);
  const std::uint32_t header[3] = {detail::to_little(static_cast<std::uint32_t>(f.height)),
                                   detail::to_little(static_cast<std::uint32_t>(f.width)),
                                   detail::to_little(kFrameChannels)};
  std::memcpy(bytes.data() + 4, header, 12);
  for (std::size_t i = 0; i < f.data.size(); ++i) {
    const std::uint32_t bits = detail::to_little(std::bit_cast<std::uint32_t>(f.data[i]));
    std::memcpy(bytes.data() + 16 + i * 4, &bits, 4);
  }
  return bytes;
}

inline FrameChannels decode_frame_blob(const std::vector<unsigned char>& bytes,
                                       const std::string& source = "<memory>") {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kFrameBlobMagic, 4) != 0)
    throw DataError(source + ": not a frame blob");
  std::uint32_t header[3];
  std::memcpy(header, bytes.data() + 4, 12);
  const std::uint32_t h = detail::to_little(header[0]);
  const std::uint32_t w = detail::to_little(header[1]);
  const std::uint32_t c = detail::to_little(header[2]);
  if (c != kFrameChannels) throw DataError(source + ": unexpected channel count " + std::to_string(c));
  const std::size_t count = static_cast<std::size_t>(h) * w * c;
  if (bytes.size() != 16 + count * 4) throw DataError(source + ": truncated frame blob");
  FrameChannels f{static_cast<int>(h), static_cast<int>(w), std::vector<float>(count)};
  for (std::size_t i = 0; i < count; ++i) f.data[i] = detail::read_le_float(bytes.data() + 16 + i * 4);
  return f;
}

inline void write_frame_blob(const std::filesystem::path& path, const FrameChannels& f) {
  const auto bytes = encode_frame_blob(f);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failure on " + path.string());
}

inline FrameChannels read_frame_blob(const std::filesystem::path& path) {
  return decode_frame_blob(detail::read_file_bytes(path), path.string());
}

}  // namespace lorcon
