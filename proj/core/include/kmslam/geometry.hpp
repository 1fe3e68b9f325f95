#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <array>
#include <cmath>
#include <optional>

#include "kmslam/errors.hpp"

namespace kmslam {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Vec7 = Eigen::Matrix<double, 7, 1>;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Mat26 = Eigen::Matrix<double, 2, 6>;
using Mat23 = Eigen::Matrix<double, 2, 3>;
using Quat = Eigen::Quaterniond;

Mat3 skew(const Vec3& v);

/// Rotation exponential/logarithm on the unit-quaternion representation.
Quat so3_exp(const Vec3& omega);
Vec3 so3_log(const Quat& q);

/// Renormalizes only when the norm has actually drifted, so copying an
/// already-unit quaternion through a constructor keeps its exact bits.
inline Quat ensure_unit(const Quat& q) {
  const double n2 = q.squaredNorm();
  if (std::abs(n2 - 1.0) < 1e-14) return q;
  return q.normalized();
}

/// Rigid transform. Acts on points as R*x + t. Camera poses move points from
/// the global reference system into the camera reference system.
class Pose {
 public:
  Pose() : rotation_(Quat::Identity()), translation_(Vec3::Zero()) {}
  Pose(const Quat& rotation, const Vec3& translation)
      : rotation_(ensure_unit(rotation)), translation_(translation) {}

  static Pose identity() { return Pose(); }
  static Pose from_matrix(const Mat4& m);

  const Quat& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }

  Vec3 apply(const Vec3& x) const { return rotation_ * x + translation_; }
  Vec3 operator*(const Vec3& x) const { return apply(x); }

  Pose compose(const Pose& other) const {
    return Pose(rotation_ * other.rotation_,
                rotation_ * other.translation_ + translation_);
  }
  Pose operator*(const Pose& other) const { return compose(other); }

  Pose inverse() const {
    Quat rinv = rotation_.conjugate();
    return Pose(rinv, rinv * (-translation_));
  }

  /// Optical center of a camera with this (world-to-camera) pose.
  Vec3 center() const { return rotation_.conjugate() * (-translation_); }

  /// Camera viewing axis (z) expressed in world coordinates: the third
  /// column of the inverse transform.
  Vec3 view_axis() const { return rotation_.conjugate() * Vec3::UnitZ(); }

  Mat3 rotation_matrix() const { return rotation_.toRotationMatrix(); }
  Mat4 matrix() const;

  /// Left-multiplicative update by the 6-vector [omega; v]:
  /// R <- exp(omega) R,  t <- exp(omega) t + v.
  Pose retract(const Vec6& delta) const;

  double rotation_angle_to(const Pose& other) const;

 private:
  Quat rotation_;
  Vec3 translation_;
};

/// Similarity transform. Acts on points as s*R*x + t.
class SimTransform {
 public:
  SimTransform() : scale_(1.0), rotation_(Quat::Identity()), translation_(Vec3::Zero()) {}
  SimTransform(double scale, const Quat& rotation, const Vec3& translation);

  static SimTransform identity() { return SimTransform(); }
  static SimTransform from_pose(const Pose& pose, double scale = 1.0) {
    return SimTransform(scale, pose.rotation(), pose.translation());
  }

  double scale() const { return scale_; }
  const Quat& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }

  Vec3 apply(const Vec3& x) const { return scale_ * (rotation_ * x) + translation_; }
  Vec3 operator*(const Vec3& x) const { return apply(x); }

  SimTransform compose(const SimTransform& other) const {
    return SimTransform(scale_ * other.scale_, rotation_ * other.rotation_,
                        scale_ * (rotation_ * other.translation_) + translation_);
  }
  SimTransform operator*(const SimTransform& other) const { return compose(other); }

  SimTransform inverse() const {
    Quat rinv = rotation_.conjugate();
    return SimTransform(1.0 / scale_, rinv, rinv * translation_ * (-1.0 / scale_));
  }

  /// Tangent coordinates [omega; upsilon; sigma] with sigma = log(scale).
  Vec7 log() const;
  static SimTransform exp(const Vec7& tangent);

  /// Fractional power via exp(t * log(S)). Used to spread a loop correction
  /// over a keyframe chain.
  SimTransform pow(double t) const { return exp(t * log()); }

 private:
  double scale_;
  Quat rotation_;
  Vec3 translation_;
};

/// Pinhole camera with 5-coefficient radial-tangential distortion
/// (k1, k2, p1, p2, k3).
struct CameraIntrinsics {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  std::array<double, 5> dist{0.0, 0.0, 0.0, 0.0, 0.0};
  int width = 0;
  int height = 0;

  bool in_image(const Vec2& px, double margin = 0.0) const {
    return px.x() >= margin && px.y() >= margin && px.x() <= width - 1 - margin &&
           px.y() <= height - 1 - margin;
  }

  /// Applies distortion + intrinsics to normalized coordinates.
  Vec2 distort(const Vec2& normalized) const;

  /// Inverts distort() by fixed-point iteration; returns normalized coords.
  Vec2 undistort(const Vec2& pixel) const;
};

struct PyramidConfig {
  double eta = 1.2;
  int levels = 8;
};

/// Projects a world point into the camera. Throws point_behind_camera when
/// the transformed depth is not positive.
Vec2 project(const Pose& pose, const Vec3& x, const CameraIntrinsics& intr);

/// Non-throwing variant for hot loops; empty when the point is behind the
/// camera.
std::optional<Vec2> try_project(const Pose& pose, const Vec3& x,
                                const CameraIntrinsics& intr);

/// Signed residual: projection minus observation.
Vec2 reprojection_residual(const Pose& pose, const Vec3& x,
                           const CameraIntrinsics& intr, const Vec2& observed);

/// Projection plus Jacobians with respect to the camera-frame point and,
/// via the chain rule, the pose tangent and the world point.
struct ProjectionExpansion {
  Vec2 pixel;
  Vec3 camera_point;
  Mat23 d_pixel_d_camera_point;
};
std::optional<ProjectionExpansion> project_with_jacobian(const Pose& pose, const Vec3& x,
                                                         const CameraIntrinsics& intr);

/// Information weight for a keypoint detected at the given pyramid level:
/// (1/eta^level) * I.
Mat2 info_weight(int level, const PyramidConfig& cfg);
double info_weight_scalar(int level, const PyramidConfig& cfg);

/// Huber loss: a^2/2 inside the threshold, alpha*(|a| - alpha/2) outside.
double huber(double alpha, double a);

Vec3 sim3_apply(const SimTransform& s, const Vec3& x);

}  // namespace kmslam
