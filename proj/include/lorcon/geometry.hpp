#pragma once

// SE(3) pose algebra: ZYX Euler conversions, relative poses, 6-DOF encoding
// and trajectory accumulation.

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/LU>
#include <Eigen/SVD>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "lorcon/errors.hpp"

namespace lorcon {

// Rigid transform mapping points of a child frame into a parent frame.
struct Pose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static Pose identity() { return {}; }

  static Pose from_translation(double x, double y, double z) {
    Pose p;
    p.translation = {x, y, z};
    return p;
  }

  static Pose from_rotation(const Eigen::Matrix3d& r) {
    Pose p;
    p.rotation = r;
    return p;
  }

  Pose inverse() const {
    Pose inv;
    inv.rotation = rotation.transpose();
    inv.translation = -(inv.rotation * translation);
    return inv;
  }

  Pose operator*(const Pose& rhs) const {
    Pose out;
    out.rotation = rotation * rhs.rotation;
    out.translation = rotation * rhs.translation + translation;
    return out;
  }

  Eigen::Vector3d operator*(const Eigen::Vector3d& p) const {
    return rotation * p + translation;
  }

  // Row-major 3x4 [R | t].
  std::array<double, 12> to_row_major() const {
    std::array<double, 12> v{};
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) v[r * 4 + c] = rotation(r, c);
      v[r * 4 + 3] = translation(r);
    }
    return v;
  }

  static Pose from_row_major(const std::array<double, 12>& v) {
    Pose p;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) p.rotation(r, c) = v[r * 4 + c];
      p.translation(r) = v[r * 4 + 3];
    }
    return p;
  }
};

// Max absolute entry difference of the 3x4 matrices.
inline double pose_distance(const Pose& a, const Pose& b) {
  return std::max((a.rotation - b.rotation).cwiseAbs().maxCoeff(),
                  (a.translation - b.translation).cwiseAbs().maxCoeff());
}

inline double orthonormality_error(const Eigen::Matrix3d& r) {
  return (r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
}

// Nearest rotation in Frobenius norm (polar decomposition via SVD).
inline Eigen::Matrix3d nearest_rotation(const Eigen::Matrix3d& m) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d u = svd.matrixU();
  const Eigen::Matrix3d v = svd.matrixV();
  if ((u * v.transpose()).determinant() < 0.0) u.col(2) = -u.col(2);
  return u * v.transpose();
}

// Relative motion (tx, ty, tz, roll, pitch, yaw).
struct RelPose6D {
  double tx = 0, ty = 0, tz = 0;
  double roll = 0, pitch = 0, yaw = 0;

  std::array<double, 6> as_array() const { return {tx, ty, tz, roll, pitch, yaw}; }

  static RelPose6D from_array(const std::array<double, 6>& a) {
    return {a[0], a[1], a[2], a[3], a[4], a[5]};
  }
};

// Wrap to (-pi, pi].
inline double wrap_angle(double a) {
  constexpr double kPi = std::numbers::pi;
  a = std::remainder(a, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  return a;
}

inline Eigen::Matrix3d rot_x(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Eigen::Matrix3d r;
  r << 1, 0, 0, 0, c, -s, 0, s, c;
  return r;
}

inline Eigen::Matrix3d rot_y(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Eigen::Matrix3d r;
  r << c, 0, s, 0, 1, 0, -s, 0, c;
  return r;
}

inline Eigen::Matrix3d rot_z(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Eigen::Matrix3d r;
  r << c, -s, 0, s, c, 0, 0, 0, 1;
  return r;
}

// R = Rz(yaw) * Ry(pitch) * Rx(roll).
inline Eigen::Matrix3d euler_to_rotation(double roll, double pitch, double yaw) {
  return rot_z(yaw) * rot_y(pitch) * rot_x(roll);
}

struct EulerAngles {
  double roll = 0, pitch = 0, yaw = 0;
};

// Inverse of euler_to_rotation on the principal branch. At gimbal lock the
// roll is pinned to zero and yaw carries the remaining in-plane rotation.
inline EulerAngles rotation_to_euler(const Eigen::Matrix3d& r) {
  constexpr double kHalfPi = std::numbers::pi / 2.0;
  if (orthonormality_error(r) > 1e-6 || r.determinant() < 0.0) {
    throw ShapeError("rotation_to_euler: matrix is not a rotation (orthonormality error " +
                     std::to_string(orthonormality_error(r)) + ")");
  }
  EulerAngles e;
  e.pitch = std::atan2(-r(2, 0), std::hypot(r(0, 0), r(1, 0)));
  if (kHalfPi - std::abs(e.pitch) < 1e-9) {
    e.pitch = std::copysign(kHalfPi, e.pitch);
    e.roll = 0.0;
    e.yaw = wrap_angle(std::atan2(-r(0, 1), r(1, 1)));
  } else {
    e.roll = wrap_angle(std::atan2(r(2, 1), r(2, 2)));
    e.yaw = wrap_angle(std::atan2(r(1, 0), r(0, 0)));
  }
  return e;
}

// a^-1 * b: motion from frame a to frame b expressed in a.
inline Pose relative_pose(const Pose& a, const Pose& b) { return a.inverse() * b; }

inline RelPose6D pose_to_6dof(const Pose& p) {
  const EulerAngles e = rotation_to_euler(p.rotation);
  return {p.translation.x(), p.translation.y(), p.translation.z(), e.roll, e.pitch, e.yaw};
}

inline Pose sixdof_to_pose(const RelPose6D& r) {
  Pose p;
  p.rotation = euler_to_rotation(r.roll, r.pitch, r.yaw);
  p.translation = {r.tx, r.ty, r.tz};
  return p;
}

inline std::vector<Pose> accumulate(const Pose& start, const std::vector<RelPose6D>& rels) {
  std::vector<Pose> out;
  out.reserve(rels.size() + 1);
  out.push_back(start);
  for (const auto& r : rels) out.push_back(out.back() * sixdof_to_pose(r));
  return out;
}

// 6-DOF motion between every pair of consecutive poses.
inline std::vector<RelPose6D> consecutive_motions(const std::vector<Pose>& poses) {
  std::vector<RelPose6D> out;
  for (std::size_t i = 1; i < poses.size(); ++i)
    out.push_back(pose_to_6dof(relative_pose(poses[i - 1], poses[i])));
  return out;
}

// Rotation angle in radians from the trace, clamped for safety near identity.
inline double rotation_angle(const Eigen::Matrix3d& r) {
  const double c = std::clamp((r.trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c);
}

}  // namespace lorcon
