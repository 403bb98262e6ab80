#pragma once

// Independent oracles and fixtures shared by the unit and acceptance tests.
// The oracles deliberately avoid the library's own helpers.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <unistd.h>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "lorcon/evaluation.hpp"
#include "lorcon/geometry.hpp"
#include "lorcon/synthetic.hpp"

namespace testing_support {

namespace fs = std::filesystem;
using lorcon::Pose;

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("lorcon_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

// Closed-form ZYX rotation, written out entry by entry.
inline Eigen::Matrix3d zyx_closed_form(double roll, double pitch, double yaw) {
  const double cr = std::cos(roll), sr = std::sin(roll);
  const double cp = std::cos(pitch), sp = std::sin(pitch);
  const double cy = std::cos(yaw), sy = std::sin(yaw);
  Eigen::Matrix3d r;
  r << cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr,
       sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr,
       -sp, cp * sr, cp * cr;
  return r;
}

inline Eigen::Matrix3d random_rotation(std::mt19937_64& gen) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(gen), n(gen), n(gen), n(gen));
  q.normalize();
  return q.toRotationMatrix();
}

inline Pose random_pose(std::mt19937_64& gen, double extent = 10.0) {
  std::uniform_real_distribution<double> u(-extent, extent);
  Pose p;
  p.rotation = random_rotation(gen);
  p.translation = {u(gen), u(gen), u(gen)};
  return p;
}

inline Eigen::Matrix4d homogeneous(const Pose& p) {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = p.rotation;
  m.topRightCorner<3, 1>() = p.translation;
  return m;
}

// Brute-force segment enumerator: for every start frame and length, walk
// forward frame by frame until the ground-truth path from the start reaches
// the length. Error poses are formed with 4x4 homogeneous matrices.
struct OracleSegment {
  std::size_t first = 0, last = 0;
  double length = 0;
  double t_err = 0, r_err = 0;
};

inline std::vector<OracleSegment> brute_force_segments(const std::vector<Pose>& gt, const std::vector<Pose>& pred,
                                                       const std::vector<double>& lengths, std::size_t stride = 1) {
  std::vector<double> cum(gt.size(), 0.0);
  for (std::size_t k = 1; k < gt.size(); ++k)
    cum[k] = cum[k - 1] + (gt[k].translation - gt[k - 1].translation).norm();
  std::vector<OracleSegment> out;
  for (std::size_t i = 0; i < gt.size(); i += stride) {
    for (double len : lengths) {
      for (std::size_t j = i; j < gt.size(); ++j) {
        if (cum[j] - cum[i] < len) continue;
        const Eigen::Matrix4d dg = homogeneous(gt[i]).inverse() * homogeneous(gt[j]);
        const Eigen::Matrix4d dp = homogeneous(pred[i]).inverse() * homogeneous(pred[j]);
        const Eigen::Matrix4d e = dg.inverse() * dp;
        const double c = std::clamp((e.topLeftCorner<3, 3>().trace() - 1.0) / 2.0, -1.0, 1.0);
        out.push_back({i, j, len, e.topRightCorner<3, 1>().norm() / len, std::acos(c) / len});
        break;
      }
    }
  }
  return out;
}

// Straight line along x with `step` meters per frame.
inline std::vector<Pose> straight_line(std::size_t n, double step) {
  std::vector<Pose> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(Pose::from_translation(step * static_cast<double>(i), 0, 0));
  return out;
}

// Irregular smooth-ish trajectory with rotations, for oracle comparisons.
inline std::vector<Pose> wandering_trajectory(std::size_t n, std::uint64_t seed, double step = 5.0) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> jitter(-0.05, 0.05);
  std::uniform_real_distribution<double> stride(0.5 * step, 1.5 * step);
  std::vector<lorcon::RelPose6D> rels;
  for (std::size_t i = 0; i + 1 < n; ++i) rels.push_back({stride(gen), jitter(gen), jitter(gen), jitter(gen), jitter(gen), jitter(gen)});
  return lorcon::accumulate(Pose::identity(), rels);
}

// A tiny synthetic dataset on the desk grid.
inline lorcon::synthetic::SyntheticDataset desk_dataset(std::size_t frames, lorcon::synthetic::Motion motion,
                                                        std::uint64_t seed, int height = 16, int width = 64) {
  lorcon::ProjectionConfig cfg;
  cfg.height = height;
  cfg.width = width;
  lorcon::synthetic::TrajectorySpec spec;
  spec.frames = frames;
  spec.motion = motion;
  spec.seed = seed;
  return lorcon::synthetic::make_synthetic_dataset(lorcon::synthetic::default_world(seed),
                                                   lorcon::synthetic::generate_trajectory(spec),
                                                   lorcon::synthetic::LidarModel::matching(cfg), cfg);
}

}  // namespace testing_support
