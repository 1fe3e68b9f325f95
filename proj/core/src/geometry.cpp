#include "kmslam/geometry.hpp"

#include <cmath>

namespace kmslam {

const char* errc_name(Errc code) {
  switch (code) {
    case Errc::point_behind_camera: return "PointBehindCamera";
    case Errc::level_out_of_range: return "LevelOutOfRange";
    case Errc::dead_id: return "DeadId";
    case Errc::empty_input: return "EmptyInput";
    case Errc::degenerate_directions: return "DegenerateDirections";
    case Errc::non_positive_side: return "NonPositiveSide";
    case Errc::bad_magic: return "BadMagic";
    case Errc::unsupported_version: return "UnsupportedVersion";
    case Errc::truncated_stream: return "TruncatedStream";
    case Errc::degenerate_corners: return "DegenerateCorners";
    case Errc::no_convergence: return "NoConvergence";
    case Errc::insufficient_baseline: return "InsufficientBaseline";
    case Errc::all_candidates_inconsistent: return "AllCandidatesInconsistent";
    case Errc::no_common_markers: return "NoCommonMarkers";
    case Errc::insufficient_parallax: return "InsufficientParallax";
    case Errc::insufficient_constraints: return "InsufficientConstraints";
    case Errc::diverged_solve: return "DivergedSolve";
    case Errc::singular_system: return "SingularSystem";
    case Errc::empty_chain: return "EmptyChain";
    case Errc::invalid_config: return "InvalidConfig";
    case Errc::unknown_scenario: return "UnknownScenario";
    case Errc::degenerate_configuration: return "DegenerateConfiguration";
    case Errc::empty_subset: return "EmptySubset";
    case Errc::init_failed: return "InitFailed";
    case Errc::io_error: return "IoError";
  }
  return "UnknownError";
}

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
      -v.y(), v.x(), 0.0;
  return m;
}

Quat so3_exp(const Vec3& omega) {
  const double theta = omega.norm();
  if (theta < 1e-12) {
    Quat q(1.0, 0.5 * omega.x(), 0.5 * omega.y(), 0.5 * omega.z());
    q.normalize();
    return q;
  }
  const double half = 0.5 * theta;
  const Vec3 axis = omega / theta;
  const double s = std::sin(half);
  return Quat(std::cos(half), s * axis.x(), s * axis.y(), s * axis.z());
}

Vec3 so3_log(const Quat& q_in) {
  Quat q = q_in.normalized();
  if (q.w() < 0.0) q.coeffs() = -q.coeffs();
  const Vec3 v(q.x(), q.y(), q.z());
  const double vn = v.norm();
  if (vn < 1e-12) return 2.0 * v;
  const double theta = 2.0 * std::atan2(vn, q.w());
  return (theta / vn) * v;
}

Pose Pose::from_matrix(const Mat4& m) {
  Mat3 r = m.block<3, 3>(0, 0);
  return Pose(Quat(r), m.block<3, 1>(0, 3));
}

Mat4 Pose::matrix() const {
  Mat4 m = Mat4::Identity();
  m.block<3, 3>(0, 0) = rotation_matrix();
  m.block<3, 1>(0, 3) = translation_;
  return m;
}

Pose Pose::retract(const Vec6& delta) const {
  const Quat dq = so3_exp(delta.head<3>());
  return Pose(dq * rotation_, dq * translation_ + delta.tail<3>());
}

double Pose::rotation_angle_to(const Pose& other) const {
  return so3_log(rotation_.conjugate() * other.rotation()).norm();
}

SimTransform::SimTransform(double scale, const Quat& rotation, const Vec3& translation)
    : scale_(scale), rotation_(ensure_unit(rotation)), translation_(translation) {
  if (!(scale_ > 0.0)) raise(Errc::invalid_config, "similarity scale must be positive");
}

// Tangent/exponential pair follows the standard Sim(3) closed form: the
// translation couples to rotation and scale through the W matrix
// W = sum_k A_k, with A depending on (theta, sigma).
namespace {

Mat3 sim3_w_matrix(const Vec3& omega, double sigma) {
  const double theta = omega.norm();
  const Mat3 omega_hat = skew(omega);
  const double s2 = sigma * sigma;
  const double t2 = theta * theta;
  const double es = std::exp(sigma);

  double a, b, c;
  if (std::abs(sigma) < 1e-6) {
    c = 1.0;
    if (theta < 1e-6) {
      a = 0.5;
      b = 1.0 / 6.0;
    } else {
      a = (1.0 - std::cos(theta)) / t2;
      b = (theta - std::sin(theta)) / (t2 * theta);
    }
  } else {
    c = (es - 1.0) / sigma;
    if (theta < 1e-6) {
      a = ((sigma - 1.0) * es + 1.0) / s2;
      b = ((0.5 * s2 - sigma + 1.0) * es - 1.0) / (s2 * sigma);
    } else {
      const double st = std::sin(theta);
      const double ct = std::cos(theta);
      const double denom = s2 + t2;
      a = (es * st * sigma + (1.0 - es * ct) * theta) / (theta * denom);
      b = (c - ((es * ct - 1.0) * sigma + es * st * theta) / denom) / t2;
    }
  }
  return c * Mat3::Identity() + a * omega_hat + b * (omega_hat * omega_hat);
}

}  // namespace

Vec7 SimTransform::log() const {
  Vec7 tangent;
  const Vec3 omega = so3_log(rotation_);
  const double sigma = std::log(scale_);
  const Mat3 w = sim3_w_matrix(omega, sigma);
  const Vec3 upsilon = w.inverse() * translation_;
  tangent << omega, upsilon, sigma;
  return tangent;
}

SimTransform SimTransform::exp(const Vec7& tangent) {
  const Vec3 omega = tangent.head<3>();
  const Vec3 upsilon = tangent.segment<3>(3);
  const double sigma = tangent(6);
  const Mat3 w = sim3_w_matrix(omega, sigma);
  return SimTransform(std::exp(sigma), so3_exp(omega), w * upsilon);
}

Vec2 CameraIntrinsics::distort(const Vec2& normalized) const {
  const double x = normalized.x();
  const double y = normalized.y();
  const double r2 = x * x + y * y;
  const double radial = 1.0 + dist[0] * r2 + dist[1] * r2 * r2 + dist[4] * r2 * r2 * r2;
  const double xd = x * radial + 2.0 * dist[2] * x * y + dist[3] * (r2 + 2.0 * x * x);
  const double yd = y * radial + dist[2] * (r2 + 2.0 * y * y) + 2.0 * dist[3] * x * y;
  return Vec2(fx * xd + cx, fy * yd + cy);
}

Vec2 CameraIntrinsics::undistort(const Vec2& pixel) const {
  const Vec2 distorted((pixel.x() - cx) / fx, (pixel.y() - cy) / fy);
  Vec2 u = distorted;
  for (int i = 0; i < 20; ++i) {
    const double x = u.x();
    const double y = u.y();
    const double r2 = x * x + y * y;
    const double radial = 1.0 + dist[0] * r2 + dist[1] * r2 * r2 + dist[4] * r2 * r2 * r2;
    const double dx = 2.0 * dist[2] * x * y + dist[3] * (r2 + 2.0 * x * x);
    const double dy = dist[2] * (r2 + 2.0 * y * y) + 2.0 * dist[3] * x * y;
    u.x() = (distorted.x() - dx) / radial;
    u.y() = (distorted.y() - dy) / radial;
  }
  return u;
}

Vec2 project(const Pose& pose, const Vec3& x, const CameraIntrinsics& intr) {
  const Vec3 pc = pose.apply(x);
  if (pc.z() <= 0.0) raise(Errc::point_behind_camera, "transformed depth <= 0");
  return intr.distort(Vec2(pc.x() / pc.z(), pc.y() / pc.z()));
}

std::optional<Vec2> try_project(const Pose& pose, const Vec3& x,
                                const CameraIntrinsics& intr) {
  const Vec3 pc = pose.apply(x);
  if (pc.z() <= 0.0) return std::nullopt;
  return intr.distort(Vec2(pc.x() / pc.z(), pc.y() / pc.z()));
}

Vec2 reprojection_residual(const Pose& pose, const Vec3& x,
                           const CameraIntrinsics& intr, const Vec2& observed) {
  return project(pose, x, intr) - observed;
}

std::optional<ProjectionExpansion> project_with_jacobian(const Pose& pose, const Vec3& x,
                                                         const CameraIntrinsics& intr) {
  const Vec3 pc = pose.apply(x);
  if (pc.z() <= 0.0) return std::nullopt;
  const double iz = 1.0 / pc.z();
  const double xn = pc.x() * iz;
  const double yn = pc.y() * iz;

  const double k1 = intr.dist[0], k2 = intr.dist[1], p1 = intr.dist[2], p2 = intr.dist[3],
               k3 = intr.dist[4];
  const double r2 = xn * xn + yn * yn;
  const double radial = 1.0 + k1 * r2 + k2 * r2 * r2 + k3 * r2 * r2 * r2;
  const double dradial = k1 + 2.0 * k2 * r2 + 3.0 * k3 * r2 * r2;

  const double xd = xn * radial + 2.0 * p1 * xn * yn + p2 * (r2 + 2.0 * xn * xn);
  const double yd = yn * radial + p1 * (r2 + 2.0 * yn * yn) + 2.0 * p2 * xn * yn;

  Mat2 ddist;
  ddist(0, 0) = radial + 2.0 * xn * xn * dradial + 2.0 * p1 * yn + 6.0 * p2 * xn;
  ddist(0, 1) = 2.0 * xn * yn * dradial + 2.0 * p1 * xn + 2.0 * p2 * yn;
  ddist(1, 0) = 2.0 * xn * yn * dradial + 2.0 * p1 * xn + 2.0 * p2 * yn;
  ddist(1, 1) = radial + 2.0 * yn * yn * dradial + 6.0 * p1 * yn + 2.0 * p2 * xn;

  Mat23 dnorm;
  dnorm << iz, 0.0, -xn * iz,
           0.0, iz, -yn * iz;

  ProjectionExpansion out;
  out.camera_point = pc;
  out.pixel = Vec2(intr.fx * xd + intr.cx, intr.fy * yd + intr.cy);
  Mat2 focal = Mat2::Zero();
  focal(0, 0) = intr.fx;
  focal(1, 1) = intr.fy;
  out.d_pixel_d_camera_point = focal * ddist * dnorm;
  return out;
}

Mat2 info_weight(int level, const PyramidConfig& cfg) {
  return info_weight_scalar(level, cfg) * Mat2::Identity();
}

double info_weight_scalar(int level, const PyramidConfig& cfg) {
  if (level < 0 || level >= cfg.levels)
    raise(Errc::level_out_of_range, "pyramid level " + std::to_string(level));
  return 1.0 / std::pow(cfg.eta, level);
}

double huber(double alpha, double a) {
  const double abs_a = std::abs(a);
  if (abs_a <= alpha) return 0.5 * a * a;
  return alpha * (abs_a - 0.5 * alpha);
}

Vec3 sim3_apply(const SimTransform& s, const Vec3& x) { return s.apply(x); }

}  // namespace kmslam
