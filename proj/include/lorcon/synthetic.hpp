#pragma once

// Synthetic worlds, trajectories and ray-cast scans. Beams fire through the
// exact pixel centers of the projection grid, so projecting a simulated scan
// puts every return back into the pixel it came from.

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "lorcon/dataset_io.hpp"
#include "lorcon/geometry.hpp"
#include "lorcon/nn/random.hpp"
#include "lorcon/projection.hpp"

namespace lorcon::synthetic {

// Infinite plane {p : normal . p = offset}.
struct Plane {
  Eigen::Vector3d normal = Eigen::Vector3d::UnitZ();
  double offset = 0;
};

// Oriented box; identity orientation is axis-aligned.
struct Box {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d half_extents = Eigen::Vector3d::Ones();
  Eigen::Matrix3d orientation = Eigen::Matrix3d::Identity();
};

struct World {
  std::optional<Plane> ground;
  std::vector<Box> boxes;
  std::vector<Plane> walls;
  std::uint64_t seed = 0;

  static Plane ground_at(double height) { return {Eigen::Vector3d::UnitZ(), height}; }

  // Vertical wall through `point` facing `normal` (z component ignored).
  static Plane wall(const Eigen::Vector3d& point, Eigen::Vector3d normal) {
    normal.z() = 0;
    normal.normalize();
    return {normal, normal.dot(point)};
  }

  bool empty() const { return !ground && boxes.empty() && walls.empty(); }

  // The same world seen from coordinates related by `t` (p' = t * p).
  World transformed(const Pose& t) const {
    World w = *this;
    auto move_plane = [&](Plane& p) {
      const Eigen::Vector3d n = t.rotation * p.normal;
      p.offset = p.offset + n.dot(t.translation);
      p.normal = n;
    };
    if (w.ground) move_plane(*w.ground);
    for (auto& p : w.walls) move_plane(p);
    for (auto& b : w.boxes) {
      b.center = t * b.center;
      b.orientation = t.rotation * b.orientation;
    }
    return w;
  }
};

// Surface ids: ground 0, boxes 1..n, walls after the boxes.
inline double surface_intensity(std::size_t surface_id) {
  const double golden = 0.6180339887498949;
  const double frac = std::fmod(0.35 + golden * static_cast<double>(surface_id), 1.0);
  return 0.1 + 0.8 * frac;
}

struct RayHit {
  double distance = 0;
  std::size_t surface = 0;
};

namespace detail {

inline std::optional<double> intersect_plane(const Plane& p, const Eigen::Vector3d& o,
                                             const Eigen::Vector3d& d) {
  const double denom = p.normal.dot(d);
  if (std::abs(denom) < 1e-15) return std::nullopt;
  const double t = (p.offset - p.normal.dot(o)) / denom;
  if (!(t > 0.0)) return std::nullopt;
  return t;
}

// Slab test in the box frame.
inline std::optional<double> intersect_box(const Box& b, const Eigen::Vector3d& o,
                                           const Eigen::Vector3d& d) {
  const Eigen::Vector3d lo = b.orientation.transpose() * (o - b.center);
  const Eigen::Vector3d ld = b.orientation.transpose() * d;
  double t_near = -std::numeric_limits<double>::infinity();
  double t_far = std::numeric_limits<double>::infinity();
  for (int k = 0; k < 3; ++k) {
    if (std::abs(ld[k]) < 1e-15) {
      if (std::abs(lo[k]) > b.half_extents[k]) return std::nullopt;
      continue;
    }
    double t1 = (-b.half_extents[k] - lo[k]) / ld[k];
    double t2 = (b.half_extents[k] - lo[k]) / ld[k];
    if (t1 > t2) std::swap(t1, t2);
    t_near = std::max(t_near, t1);
    t_far = std::min(t_far, t2);
    if (t_near > t_far) return std::nullopt;
  }
  if (t_far <= 0.0) return std::nullopt;
  // Origin inside the box: the exit face is the visible surface.
  return t_near > 0.0 ? t_near : t_far;
}

}  // namespace detail

// Nearest surface along origin + t*dir (dir unit length), t in (0, max_range].
inline std::optional<RayHit> cast_ray(const World& world, const Eigen::Vector3d& origin,
                                      const Eigen::Vector3d& dir, double max_range) {
  std::optional<RayHit> best;
  auto consider = [&](std::optional<double> t, std::size_t id) {
    if (t && *t <= max_range && (!best || *t < best->distance)) best = RayHit{*t, id};
  };
  if (world.ground) consider(detail::intersect_plane(*world.ground, origin, dir), 0);
  for (std::size_t i = 0; i < world.boxes.size(); ++i)
    consider(detail::intersect_box(world.boxes[i], origin, dir), 1 + i);
  for (std::size_t i = 0; i < world.walls.size(); ++i)
    consider(detail::intersect_plane(world.walls[i], origin, dir), 1 + world.boxes.size() + i);
  return best;
}

// Beam grid; identical to the projection grid it will be projected with.
struct LidarModel {
  int height = 64;
  int width = 900;
  double fov_up = deg_to_rad(3.0);
  double fov_down = deg_to_rad(25.0);
  double max_range = 80.0;

  static LidarModel matching(const ProjectionConfig& cfg) {
    return {cfg.height, cfg.width, cfg.fov_up, cfg.fov_down, cfg.max_range};
  }

  ProjectionConfig projection() const { return {width, height, fov_up, fov_down, max_range}; }

  Eigen::Vector3d beam_direction(int row, int col) const {
    const ProjectionConfig cfg = projection();
    const double az = pixel_center_azimuth(col, cfg);
    const double el = pixel_center_elevation(row, cfg);
    return {std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el)};
  }
};

// One ray per pixel center; returns are expressed in the sensor frame and
// ordered row-major by (row, col).
inline PointCloud simulate_scan(const World& world, const Pose& sensor_pose, const LidarModel& lidar) {
  PointCloud cloud;
  for (int v = 0; v < lidar.height; ++v) {
    for (int u = 0; u < lidar.width; ++u) {
      const Eigen::Vector3d dir = lidar.beam_direction(v, u);
      const auto hit = cast_ray(world, sensor_pose.translation, sensor_pose.rotation * dir, lidar.max_range);
      if (!hit) continue;
      const Eigen::Vector3d p = hit->distance * dir;
      cloud.points.push_back({p.x(), p.y(), p.z(), surface_intensity(hit->surface)});
    }
  }
  return cloud;
}

enum class Motion { kStraight, kArc, kSquare };

struct TrajectorySpec {
  std::size_t frames = 10;
  Motion motion = Motion::kStraight;
  double step = 1.0;         // meters per frame
  double square_side = 4.0;  // meters, square motion only
  std::uint64_t seed = 0;
};

inline constexpr double kMaxTurnPerStep = deg_to_rad(5.0);

// straight: along +x. arc: constant yaw rate drawn from the seed in
// [1, 4] degrees per step. square: heading fixed while translating around a
// square, so no step rotates and every corner is exact.
inline std::vector<Pose> generate_trajectory(const TrajectorySpec& spec) {
  if (spec.frames < 2) throw ConfigError("generate_trajectory: need at least 2 frames");
  std::vector<Pose> poses;
  poses.reserve(spec.frames);
  switch (spec.motion) {
    case Motion::kStraight:
      for (std::size_t i = 0; i < spec.frames; ++i)
        poses.push_back(Pose::from_translation(spec.step * static_cast<double>(i), 0, 0));
      break;
    case Motion::kArc: {
      nn::Rng rng(spec.seed);
      const double yaw_rate = deg_to_rad(rng.uniform(1.0, 4.0));
      const RelPose6D step{spec.step, 0, 0, 0, 0, yaw_rate};
      poses = accumulate(Pose::identity(), std::vector<RelPose6D>(spec.frames - 1, step));
      break;
    }
    case Motion::kSquare: {
      const auto per_side = static_cast<std::size_t>(std::llround(spec.square_side / spec.step));
      if (per_side == 0) throw ConfigError("generate_trajectory: square side shorter than a step");
      const Eigen::Vector3d dirs[4] = {{1, 0, 0}, {0, 1, 0}, {-1, 0, 0}, {0, -1, 0}};
      Eigen::Vector3d corner = Eigen::Vector3d::Zero();
      for (std::size_t i = 0; i < spec.frames; ++i) {
        const std::size_t lap_pos = i % (4 * per_side);
        const std::size_t side = lap_pos / per_side, along = lap_pos % per_side;
        // Corners are recomputed from integer counts to avoid drift.
        corner.setZero();
        for (std::size_t s = 0; s < side; ++s) corner += dirs[s] * (spec.step * static_cast<double>(per_side));
        const Eigen::Vector3d p = corner + dirs[side] * (spec.step * static_cast<double>(along));
        poses.push_back(Pose::from_translation(p.x(), p.y(), p.z()));
      }
      break;
    }
  }
  return poses;
}

// Default scene: ground plane below the sensor, a ring of boxes and two walls.
inline World default_world(std::uint64_t seed, double sensor_height = 1.73) {
  World w;
  w.seed = seed;
  w.ground = World::ground_at(-sensor_height);
  nn::Rng rng(seed);
  for (int i = 0; i < 12; ++i) {
    Box b;
    const double ang = 2.0 * std::numbers::pi * i / 12.0 + rng.uniform(-0.2, 0.2);
    const double r = rng.uniform(8.0, 20.0);
    b.center = {r * std::cos(ang), r * std::sin(ang), -sensor_height + 1.0};
    b.half_extents = {rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0.8, 2.5)};
    b.orientation = rot_z(rng.uniform(0.0, std::numbers::pi));
    w.boxes.push_back(b);
  }
  w.walls.push_back(World::wall({0, 30, 0}, {0, -1, 0}));
  w.walls.push_back(World::wall({60, 0, 0}, {-1, 0, 0}));
  return w;
}

struct SyntheticDataset {
  std::vector<PointCloud> clouds;
  std::vector<ProjectedFrame> frames;
  std::vector<Pose> poses;
};

inline SyntheticDataset make_synthetic_dataset(const World& world, const std::vector<Pose>& trajectory,
                                               const LidarModel& lidar, const ProjectionConfig& cfg) {
  if (lidar.height != cfg.height || lidar.width != cfg.width || lidar.fov_up != cfg.fov_up ||
      lidar.fov_down != cfg.fov_down)
    throw ConfigError("make_synthetic_dataset: lidar beam grid differs from the projection grid");
  SyntheticDataset ds;
  for (std::size_t i = 0; i < trajectory.size(); ++i) {
    PointCloud cloud = simulate_scan(world, trajectory[i], lidar);
    cloud.frame_index = i;
    ds.frames.push_back(project_scan(cloud, cfg));
    ds.clouds.push_back(std::move(cloud));
  }
  ds.poses = trajectory;
  return ds;
}

}  // namespace lorcon::synthetic
