#pragma once

// KITTI odometry artifacts: Velodyne scans, pose files and the Tr extrinsic.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "lorcon/errors.hpp"
#include "lorcon/geometry.hpp"

namespace lorcon {

struct Point {
  double x = 0, y = 0, z = 0;
  double intensity = 0;  // [0, 1]
};

struct PointCloud {
  std::vector<Point> points;
  std::size_t frame_index = 0;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

// Parse result with sanitation counters.
struct LoadedScan {
  PointCloud cloud;
  std::size_t dropped_nonfinite = 0;
  std::size_t clamped_intensity = 0;
};

namespace detail {

inline std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  }
}

inline float read_le_float(const unsigned char* p) {
  std::uint32_t bits;
  std::memcpy(&bits, p, 4);
  bits = to_little(bits);
  return std::bit_cast<float>(bits);
}

inline void write_le_float(std::ostream& os, float f) {
  const std::uint32_t bits = to_little(std::bit_cast<std::uint32_t>(f));
  os.write(reinterpret_cast<const char*>(&bits), 4);
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (in.bad()) throw DataError("read failure on " + path.string());
  return bytes;
}

// Parses every whitespace-separated real of a line. Returns false on junk.
inline bool parse_reals(const std::string& line, std::vector<double>& out) {
  out.clear();
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) {
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (end != tok.c_str() + tok.size()) return false;
    out.push_back(v);
  }
  return true;
}

inline bool is_blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

inline Pose pose_from_values(const std::vector<double>& v) {
  std::array<double, 12> a{};
  std::copy_n(v.begin(), 12, a.begin());
  Pose p = Pose::from_row_major(a);
  if (orthonormality_error(p.rotation) > 1e-6) p.rotation = nearest_rotation(p.rotation);
  return p;
}

}  // namespace detail

inline LoadedScan decode_velodyne(const std::vector<unsigned char>& bytes,
                                  const std::string& source = "<memory>") {
  constexpr std::size_t kStride = 16;
  if (bytes.size() % kStride != 0) {
    throw DataError(source + ": velodyne scan length " + std::to_string(bytes.size()) +
                    " is not a multiple of 16; partial record at byte offset " +
                    std::to_string(bytes.size() / kStride * kStride));
  }
  LoadedScan out;
  const std::size_t n = bytes.size() / kStride;
  out.cloud.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * kStride;
    const float x = detail::read_le_float(rec);
    const float y = detail::read_le_float(rec + 4);
    const float z = detail::read_le_float(rec + 8);
    float r = detail::read_le_float(rec + 12);
    if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(z) || !std::isfinite(r)) {
      ++out.dropped_nonfinite;
      continue;
    }
    if (r < 0.0f || r > 1.0f) {
      ++out.clamped_intensity;
      r = std::clamp(r, 0.0f, 1.0f);
    }
    out.cloud.points.push_back({x, y, z, r});
  }
  return out;
}

inline LoadedScan read_velodyne_bin(const std::filesystem::path& path) {
  LoadedScan scan = decode_velodyne(detail::read_file_bytes(path), path.string());
  if (scan.dropped_nonfinite > 0)
    log::warn(path.string() + ": dropped " + std::to_string(scan.dropped_nonfinite) +
              " non-finite points");
  if (scan.clamped_intensity > 0)
    log::warn(path.string() + ": clamped " + std::to_string(scan.clamped_intensity) +
              " intensities into [0,1]");
  return scan;
}

// Coordinates are narrowed to float32 as required by the on-disk format.
inline void write_velodyne_bin(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  for (const Point& p : cloud.points) {
    detail::write_le_float(out, static_cast<float>(p.x));
    detail::write_le_float(out, static_cast<float>(p.y));
    detail::write_le_float(out, static_cast<float>(p.z));
    detail::write_le_float(out, static_cast<float>(p.intensity));
  }
  if (!out) throw DataError("write failure on " + path.string());
}

inline std::vector<Pose> parse_kitti_poses(std::istream& in, const std::string& source) {
  std::vector<Pose> poses;
  std::string line;
  std::vector<double> vals;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::is_blank(line)) continue;
    if (!detail::parse_reals(line, vals) || vals.size() != 12) {
      throw DataError(source + ": line " + std::to_string(line_no) +
                      ": expected 12 reals in a KITTI pose row");
    }
    poses.push_back(detail::pose_from_values(vals));
  }
  return poses;
}

// Pose i maps frame-i coordinates into frame-0 coordinates.
inline std::vector<Pose> read_kitti_poses(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return parse_kitti_poses(in, path.string());
}

// Camera <- LiDAR extrinsic from the "Tr:" entry of a KITTI calib file.
inline Pose read_calibration(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  std::vector<double> vals;
  while (std::getline(in, line)) {
    if (line.rfind("Tr:", 0) != 0) continue;
    if (!detail::parse_reals(line.substr(3), vals))
      throw DataError(path.string() + ": unparseable Tr entry");
    if (vals.size() != 12) {
      throw DataError(path.string() + ": Tr entry has " + std::to_string(vals.size()) +
                      " values, expected 12");
    }
    return detail::pose_from_values(vals);
  }
  throw DataError(path.string() + ": missing Tr entry");
}

// Conjugates camera-frame poses into the LiDAR frame: tr^-1 * P * tr.
inline std::vector<Pose> poses_to_lidar_frame(const std::vector<Pose>& poses, const Pose& tr) {
  const Pose tr_inv = tr.inverse();
  std::vector<Pose> out;
  out.reserve(poses.size());
  for (const Pose& p : poses) out.push_back(tr_inv * p * tr);
  return out;
}

struct SplitConfig {
  std::vector<int> train = {0, 1, 2, 3, 4, 5, 6, 7, 8};
  std::vector<int> test = {9, 10};
};

struct SequenceSplit {
  std::vector<int> train;
  std::vector<int> test;
};

inline std::string sequence_name(int id) {
  std::ostringstream ss;
  ss << std::setw(2) << std::setfill('0') << id;
  return ss.str();
}

inline SequenceSplit sequence_split(const SplitConfig& cfg = {}) {
  std::set<int> seen;
  for (int id : cfg.train) {
    if (id < 0 || id > 10) throw ConfigError("sequence id " + std::to_string(id) + " outside 00-10");
    seen.insert(id);
  }
  for (int id : cfg.test) {
    if (id < 0 || id > 10) throw ConfigError("sequence id " + std::to_string(id) + " outside 00-10");
    if (seen.count(id))
      throw ConfigError("sequence " + sequence_name(id) + " is in both train and test splits");
  }
  return {cfg.train, cfg.test};
}

// Standard KITTI odometry layout under a dataset root.
struct KittiLayout {
  std::filesystem::path root;

  std::filesystem::path sequence_dir(int seq) const {
    return root / "sequences" / sequence_name(seq);
  }
  std::filesystem::path velodyne_dir(int seq) const { return sequence_dir(seq) / "velodyne"; }
  std::filesystem::path calib_file(int seq) const { return sequence_dir(seq) / "calib.txt"; }
  std::filesystem::path pose_file(int seq) const {
    return root / "poses" / (sequence_name(seq) + ".txt");
  }
  std::filesystem::path scan_file(int seq, std::size_t frame) const {
    std::ostringstream ss;
    ss << std::setw(6) << std::setfill('0') << frame << ".bin";
    return velodyne_dir(seq) / ss.str();
  }

  // Number of consecutive scans 000000.bin, 000001.bin, ...
  std::size_t scan_count(int seq) const {
    std::size_t n = 0;
    while (std::filesystem::exists(scan_file(seq, n))) ++n;
    return n;
  }
};

}  // namespace lorcon
