#include "kmslam/marker_solver.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <set>

namespace kmslam {

namespace {

bool corners_finite(const MarkerObs& obs) {
  for (const auto& c : obs.corners_px)
    if (!c.allFinite()) return false;
  return true;
}

bool corners_degenerate(const MarkerObs& obs) {
  // any three collinear (or coincident) corners kill the homography
  for (int i = 0; i < 4; ++i) {
    const Vec2 a = obs.corners_px[i];
    const Vec2 b = obs.corners_px[(i + 1) % 4];
    const Vec2 c = obs.corners_px[(i + 2) % 4];
    const double area = std::abs((b - a).x() * (c - a).y() - (b - a).y() * (c - a).x());
    if (area < 1e-6) return true;
  }
  return false;
}

/// Exact homography mapping plane coordinates (x, y) to normalized image
/// coordinates, from four correspondences.
Mat3 homography_from_corners(const std::array<Vec2, 4>& plane,
                             const std::array<Vec2, 4>& image) {
  Eigen::Matrix<double, 8, 9> a;
  for (int i = 0; i < 4; ++i) {
    const double X = plane[i].x(), Y = plane[i].y();
    const double u = image[i].x(), v = image[i].y();
    a.row(2 * i) << X, Y, 1, 0, 0, 0, -u * X, -u * Y, -u;
    a.row(2 * i + 1) << 0, 0, 0, X, Y, 1, -v * X, -v * Y, -v;
  }
  const Eigen::JacobiSVD<Eigen::Matrix<double, 8, 9>> svd(a, Eigen::ComputeFullV);
  const Eigen::Matrix<double, 9, 1> h = svd.matrixV().col(8);
  Mat3 H;
  H << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  return H;
}

Mat3 rot_z(double a) {
  Mat3 m;
  m << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
  return m;
}

Mat3 rot_x(double a) {
  Mat3 m;
  m << 1, 0, 0, 0, std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a);
  return m;
}

/// The two analytic plane poses consistent with the homography's value and
/// Jacobian at the plane origin. A rotation completing a given top-left 2x2
/// block U diag(1, cos t) V^T exists for exactly the tilts +t and -t, which
/// is the planar two-minimum structure.
std::pair<Pose, Pose> plane_pose_candidates(const Mat3& h_in) {
  Mat3 h = h_in;
  if (std::abs(h(2, 2)) < 1e-12)
    raise(Errc::degenerate_corners, "plane origin projects to infinity");
  h /= h(2, 2);

  const Vec2 p0(h(0, 2), h(1, 2));
  Mat2 jac;
  jac(0, 0) = h(0, 0) - p0.x() * h(2, 0);
  jac(0, 1) = h(0, 1) - p0.x() * h(2, 1);
  jac(1, 0) = h(1, 0) - p0.y() * h(2, 0);
  jac(1, 1) = h(1, 1) - p0.y() * h(2, 1);

  // rotation taking the viewing ray through the plane origin onto +z
  const Vec3 ray = Vec3(p0.x(), p0.y(), 1.0).normalized();
  Mat3 rv;
  const Vec3 axis = ray.cross(Vec3::UnitZ());
  const double sin_a = axis.norm();
  const double cos_a = ray.z();
  if (sin_a < 1e-12) {
    rv = cos_a > 0 ? Mat3::Identity() : Mat3(-Mat3::Identity());
  } else {
    rv = so3_exp(axis / sin_a * std::atan2(sin_a, cos_a)).toRotationMatrix();
  }

  // rows b_i of [I | -p0] are orthogonal to the ray, so rv*b_i has no z part
  const Vec3 b1 = rv * Vec3(1.0, 0.0, -p0.x());
  const Vec3 b2 = rv * Vec3(0.0, 1.0, -p0.y());
  Mat2 beta;
  beta << b1.x(), b1.y(), b2.x(), b2.y();
  const Mat2 a = beta.inverse() * jac;

  Eigen::JacobiSVD<Mat2> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat2 u = svd.matrixU();
  Mat2 v = svd.matrixV();
  double s1 = svd.singularValues()(0);
  double s2 = svd.singularValues()(1);
  if (u.determinant() < 0.0) {
    u.col(1) *= -1.0;
    s2 *= -1.0;
  }
  if (v.determinant() < 0.0) {
    v.col(1) *= -1.0;
    s2 *= -1.0;
  }
  if (s1 < 1e-12) raise(Errc::degenerate_corners, "rank-deficient homography jacobian");

  const double gamma = 1.0 / s1;  // depth of the plane origin
  const double c = std::clamp(s2 / s1, -1.0, 1.0);
  const double tilt = std::acos(c);
  const double alpha = std::atan2(u(1, 0), u(0, 0));
  const double beta_angle = std::atan2(v(0, 1), v(0, 0));  // angle of V^T

  const Vec3 t = gamma * Vec3(p0.x(), p0.y(), 1.0);
  const Mat3 rv_t = rv.transpose();
  const Mat3 r_plus = rv_t * rot_z(alpha) * rot_x(tilt) * rot_z(beta_angle);
  const Mat3 r_minus = rv_t * rot_z(alpha) * rot_x(-tilt) * rot_z(beta_angle);
  return {Pose(Quat(r_plus), t), Pose(Quat(r_minus), t)};
}

double corner_cost(const Pose& pose, const std::vector<CornerConstraint>& corners,
                   const CameraIntrinsics& intr) {
  double cost = 0.0;
  for (const auto& c : corners) {
    const auto px = try_project(c.view, pose.apply(c.local), intr);
    if (!px) return std::numeric_limits<double>::infinity();
    cost += (*px - c.pixel).squaredNorm();
  }
  return cost;
}

}  // namespace

std::pair<Pose, double> refine_pose_on_corners(const Pose& initial,
                                               const std::vector<CornerConstraint>& corners,
                                               const CameraIntrinsics& intr,
                                               int iterations) {
  Pose pose = initial;
  double cost = corner_cost(pose, corners, intr);
  double lambda = 1e-6;
  for (int iter = 0; iter < iterations; ++iter) {
    Eigen::Matrix<double, 6, 6> h = Eigen::Matrix<double, 6, 6>::Zero();
    Vec6 b = Vec6::Zero();
    bool valid = true;
    for (const auto& c : corners) {
      const Vec3 g = pose.apply(c.local);
      const Vec3 pc = c.view.apply(g);
      if (pc.z() <= 0.0) {
        valid = false;
        break;
      }
      const auto expansion = project_with_jacobian(c.view, g, intr);
      if (!expansion) {
        valid = false;
        break;
      }
      Mat26 j;
      j.leftCols<3>() =
          expansion->d_pixel_d_camera_point * c.view.rotation_matrix() * (-skew(g));
      j.rightCols<3>() = expansion->d_pixel_d_camera_point * c.view.rotation_matrix();
      const Vec2 r = expansion->pixel - c.pixel;
      h += j.transpose() * j;
      b -= j.transpose() * r;
    }
    if (!valid) break;
    Eigen::Matrix<double, 6, 6> damped = h;
    damped.diagonal() += lambda * h.diagonal().cwiseMax(1e-12);
    const Vec6 delta = damped.ldlt().solve(b);
    if (!delta.allFinite()) break;
    const Pose candidate = pose.retract(delta);
    const double new_cost = corner_cost(candidate, corners, intr);
    if (new_cost < cost) {
      pose = candidate;
      cost = new_cost;
      lambda = std::max(lambda * 0.1, 1e-12);
      if (delta.norm() < 1e-14) break;
    } else {
      lambda *= 10.0;
      if (lambda > 1e8) break;
    }
  }
  return {pose, cost};
}

AmbiguousPose solve_planar_pose(const MarkerObs& obs, double side,
                                const CameraIntrinsics& intr,
                                const MarkerSolverParams& params) {
  if (!corners_finite(obs)) raise(Errc::degenerate_corners, "non-finite corner");
  if (corners_degenerate(obs)) raise(Errc::degenerate_corners, "collinear corners");

  const auto corners_local = canonical_corners(side);
  std::array<Vec2, 4> plane;
  std::array<Vec2, 4> image;
  std::vector<CornerConstraint> constraints;
  constraints.reserve(4);
  for (int i = 0; i < 4; ++i) {
    plane[i] = Vec2(corners_local[i].x(), corners_local[i].y());
    image[i] = intr.undistort(obs.corners_px[i]);
    constraints.push_back({Pose::identity(), corners_local[i], obs.corners_px[i]});
  }

  const Mat3 h = homography_from_corners(plane, image);
  const auto [seed1, seed2] = plane_pose_candidates(h);

  auto [pose_a, cost_a] = refine_pose_on_corners(seed1, constraints, intr,
                                                 params.refine_iterations);
  auto [pose_b, cost_b] = refine_pose_on_corners(seed2, constraints, intr,
                                                 params.refine_iterations);
  if (!std::isfinite(cost_a) && !std::isfinite(cost_b))
    raise(Errc::no_convergence, "both candidates diverged");
  if (!std::isfinite(cost_a)) {
    std::swap(pose_a, pose_b);
    std::swap(cost_a, cost_b);
    cost_b = std::numeric_limits<double>::infinity();
  }

  AmbiguousPose out;
  if (cost_b < cost_a) {
    out.sol1 = pose_b;
    out.e1 = cost_b;
    out.sol2 = pose_a;
    out.e2 = cost_a;
  } else {
    out.sol1 = pose_a;
    out.e1 = cost_a;
    out.sol2 = pose_b;
    out.e2 = cost_b;
  }

  // Two coincident minima mean the ambiguity has collapsed, not that the
  // pose is undecidable.
  const double rot_gap = out.sol1.rotation_angle_to(out.sol2);
  const double trans_gap = (out.sol1.translation() - out.sol2.translation()).norm();
  const bool distinct = rot_gap > 0.05 || trans_gap > 0.02 * out.sol1.translation().norm();
  const bool close_errors =
      out.e1 <= 0.0 ? false : (out.e2 / out.e1) < params.ambiguity_ratio;
  out.ambiguous = distinct && close_errors;
  return out;
}

Pose resolve_pose_multiview(const std::vector<std::pair<Pose, MarkerObs>>& observations,
                            double side, const CameraIntrinsics& intr,
                            const MarkerSolverParams& params) {
  if (observations.size() < 2)
    raise(Errc::insufficient_baseline, "need at least two views");

  const auto corners_local = canonical_corners(side);
  std::vector<CornerConstraint> all_constraints;
  for (const auto& [view, obs] : observations)
    for (int i = 0; i < 4; ++i)
      all_constraints.push_back({view, corners_local[i], obs.corners_px[i]});

  // candidate world poses from every view's two solutions
  std::vector<Pose> candidates;
  for (const auto& [view, obs] : observations) {
    const AmbiguousPose two = solve_planar_pose(obs, side, intr, params);
    candidates.push_back(view.inverse().compose(two.sol1));
    if (std::isfinite(two.e2)) candidates.push_back(view.inverse().compose(two.sol2));
  }

  // baseline check: rays from the camera centers to the marker center
  const Vec3 center = candidates.front().translation();
  double max_angle = 0.0;
  for (std::size_t i = 0; i < observations.size(); ++i) {
    for (std::size_t j = i + 1; j < observations.size(); ++j) {
      const Vec3 ri = (center - observations[i].first.center()).normalized();
      const Vec3 rj = (center - observations[j].first.center()).normalized();
      max_angle = std::max(max_angle, std::acos(std::clamp(ri.dot(rj), -1.0, 1.0)));
    }
  }
  if (max_angle < params.min_baseline_angle_deg * M_PI / 180.0)
    raise(Errc::insufficient_baseline,
          "max ray angle " + std::to_string(max_angle * 180.0 / M_PI) + " deg");

  double best_cost = std::numeric_limits<double>::infinity();
  const Pose* best = nullptr;
  for (const auto& candidate : candidates) {
    const double cost = corner_cost(candidate, all_constraints, intr);
    if (cost < best_cost) {
      best_cost = cost;
      best = &candidate;
    }
  }
  if (!best || !std::isfinite(best_cost))
    raise(Errc::all_candidates_inconsistent, "no candidate projects into all views");

  auto [refined, cost] = refine_pose_on_corners(*best, all_constraints, intr,
                                                params.refine_iterations);
  const double mean_error = std::sqrt(cost / static_cast<double>(all_constraints.size()));
  if (mean_error > params.max_mean_corner_error_px)
    raise(Errc::all_candidates_inconsistent,
          "mean corner error " + std::to_string(mean_error) + " px");
  return refined;
}

MarkerInitResult initialize_from_markers(const Frame& f0, const Frame& f1, double side,
                                         const CameraIntrinsics& intr,
                                         const MarkerSolverParams& params) {
  std::map<int, const MarkerObs*> in_f0;
  for (const auto& det : f0.marker_detections) in_f0[det.marker_id] = &det;
  std::vector<std::pair<const MarkerObs*, const MarkerObs*>> common;
  std::vector<int> common_ids;
  for (const auto& det : f1.marker_detections) {
    auto it = in_f0.find(det.marker_id);
    if (it != in_f0.end()) {
      common.push_back({it->second, &det});
      common_ids.push_back(det.marker_id);
    }
  }
  if (common.empty()) raise(Errc::no_common_markers, "no shared marker ids");

  const auto corners_local = canonical_corners(side);

  // per-marker single-view solutions
  std::vector<std::array<std::vector<Pose>, 2>> solutions(common.size());
  for (std::size_t m = 0; m < common.size(); ++m) {
    const AmbiguousPose a = solve_planar_pose(*common[m].first, side, intr, params);
    const AmbiguousPose b = solve_planar_pose(*common[m].second, side, intr, params);
    solutions[m][0] = {a.sol1};
    if (std::isfinite(a.e2)) solutions[m][0].push_back(a.sol2);
    solutions[m][1] = {b.sol1};
    if (std::isfinite(b.e2)) solutions[m][1].push_back(b.sol2);
  }

  // relative-pose candidates from every (solution in f0, solution in f1) pair
  struct Scored {
    Pose relative;
    double cost;
  };
  std::vector<Scored> scored;
  for (std::size_t m = 0; m < common.size(); ++m) {
    for (const Pose& p0 : solutions[m][0]) {
      for (const Pose& p1 : solutions[m][1]) {
        const Pose relative = p1.compose(p0.inverse());
        // score: best achievable corner cost over all common markers
        double total = 0.0;
        for (std::size_t k = 0; k < common.size(); ++k) {
          std::vector<CornerConstraint> constraints;
          for (int i = 0; i < 4; ++i) {
            constraints.push_back(
                {Pose::identity(), corners_local[i], common[k].first->corners_px[i]});
            constraints.push_back({relative, corners_local[i], common[k].second->corners_px[i]});
          }
          double best = std::numeric_limits<double>::infinity();
          for (const Pose& cand : solutions[k][0]) {  // candidates in f0 = world frame
            best = std::min(best, corner_cost(cand, constraints, intr));
          }
          total += best;
        }
        scored.push_back({relative, total});
      }
    }
  }
  const auto best_it =
      std::min_element(scored.begin(), scored.end(),
                       [](const Scored& a, const Scored& b) { return a.cost < b.cost; });
  if (best_it == scored.end() || !std::isfinite(best_it->cost))
    raise(Errc::insufficient_parallax, "no consistent relative pose");
  const Pose relative = best_it->relative;

  // resolve each marker with the two-frame rig; this also enforces parallax
  MarkerInitResult out;
  out.f1_pose = relative;
  for (std::size_t m = 0; m < common.size(); ++m) {
    std::vector<std::pair<Pose, MarkerObs>> views{{Pose::identity(), *common[m].first},
                                                  {relative, *common[m].second}};
    try {
      out.marker_poses.push_back(
          {common_ids[m], resolve_pose_multiview(views, side, intr, params)});
    } catch (const Error& e) {
      if (e.code() == Errc::insufficient_baseline) throw Error(Errc::insufficient_parallax,
                                                               "marker baseline too small");
      throw;
    }
  }
  return out;
}

}  // namespace kmslam
