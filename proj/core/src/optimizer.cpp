#include "kmslam/optimizer.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>

namespace kmslam {

std::pair<double, double> marker_point_weights(int marker_count, int tau_m) {
  const double ratio = std::min(1.0, static_cast<double>(marker_count) / tau_m);
  const double w_m = 0.5 * ratio;
  return {w_m, 1.0 - w_m};
}

// ---------------------------------------------------------------------------
// Tracking

namespace {

struct TrackingCost {
  double total = 0.0;
  bool valid = true;
};

struct TrackingMask {
  std::vector<char> points;
  std::vector<char> markers;
};

TrackingCost tracking_cost(const TrackingProblem& p, const TrackingMask& mask,
                           const Pose& pose, double w_p, double w_m) {
  TrackingCost out;
  for (std::size_t i = 0; i < p.point_matches.size(); ++i) {
    if (!mask.points[i]) continue;
    const auto& m = p.point_matches[i];
    const auto px = try_project(pose, m.position, p.intrinsics);
    if (!px) {
      out.valid = false;
      return out;
    }
    const double omega = info_weight_scalar(m.level, p.pyramid);
    const double r = std::sqrt(omega) * (*px - m.pixel).norm();
    out.total += w_p * huber(p.huber_alpha, r);
  }
  if (w_m > 0.0) {
    for (std::size_t k = 0; k < p.marker_matches.size(); ++k) {
      if (!mask.markers[k]) continue;
      const auto& m = p.marker_matches[k];
      const Pose composed = pose.compose(m.marker_pose);
      for (int i = 0; i < 4; ++i) {
        const auto px = try_project(composed, m.corners_local[i], p.intrinsics);
        if (!px) {
          out.valid = false;
          return out;
        }
        out.total += w_m * (*px - m.obs.corners_px[i]).squaredNorm();
      }
    }
  }
  return out;
}

}  // namespace

namespace {

Pose tracking_lm(const TrackingProblem& problem, const TrackingMask& mask, Pose pose,
                 double w_p, double w_m, double* final_cost, int* iterations) {
  TrackingCost current = tracking_cost(problem, mask, pose, w_p, w_m);
  if (!current.valid) raise(Errc::diverged_solve, "initial pose projects behind camera");

  double lambda = 1e-4;
  for (int iter = 0; iter < problem.max_iterations; ++iter) {
    ++*iterations;
    Eigen::Matrix<double, 6, 6> h = Eigen::Matrix<double, 6, 6>::Zero();
    Vec6 b = Vec6::Zero();

    for (std::size_t i = 0; i < problem.point_matches.size(); ++i) {
      if (!mask.points[i]) continue;
      const auto& m = problem.point_matches[i];
      const auto exp = project_with_jacobian(pose, m.position, problem.intrinsics);
      if (!exp) continue;
      const double omega = info_weight_scalar(m.level, problem.pyramid);
      const Vec2 e = exp->pixel - m.pixel;
      const double r = std::sqrt(omega) * e.norm();
      const double kappa = r <= problem.huber_alpha ? 1.0 : problem.huber_alpha / r;
      const double w = w_p * omega * kappa;
      Mat26 j;
      j.leftCols<3>() = exp->d_pixel_d_camera_point * (-skew(exp->camera_point));
      j.rightCols<3>() = exp->d_pixel_d_camera_point;
      h += w * j.transpose() * j;
      b -= w * j.transpose() * e;
    }
    if (w_m > 0.0) {
      for (std::size_t i = 0; i < problem.marker_matches.size(); ++i) {
        if (!mask.markers[i]) continue;
        const auto& m = problem.marker_matches[i];
        const Pose composed = pose.compose(m.marker_pose);
        for (int c = 0; c < 4; ++c) {
          const auto exp =
              project_with_jacobian(composed, m.corners_local[c], problem.intrinsics);
          if (!exp) continue;
          const Vec2 e = exp->pixel - m.obs.corners_px[c];
          Mat26 j;
          j.leftCols<3>() = exp->d_pixel_d_camera_point * (-skew(exp->camera_point));
          j.rightCols<3>() = exp->d_pixel_d_camera_point;
          const double w = 2.0 * w_m;
          h += w * j.transpose() * j;
          b -= w * j.transpose() * e;
        }
      }
    }

    Eigen::Matrix<double, 6, 6> damped = h;
    damped.diagonal() += lambda * h.diagonal().cwiseMax(1e-12);
    const Vec6 delta = damped.ldlt().solve(b);
    if (!delta.allFinite()) raise(Errc::diverged_solve, "non-finite step");

    const Pose candidate = pose.retract(delta);
    const TrackingCost next = tracking_cost(problem, mask, candidate, w_p, w_m);
    if (next.valid && next.total < current.total) {
      pose = candidate;
      current = next;
      lambda = std::max(lambda * 0.1, 1e-12);
      if (delta.norm() < 1e-12) break;
    } else {
      lambda *= 10.0;
      if (lambda > 1e10) break;
    }
  }
  *final_cost = current.total;
  return pose;
}

/// Inlier classification against the chi-square cutoff on the weighted
/// squared residual; markers use the mean over their four corners.
void classify(const TrackingProblem& problem, const Pose& pose, TrackingResult* result) {
  result->point_inliers.assign(problem.point_matches.size(), false);
  result->marker_inliers.assign(problem.marker_matches.size(), false);
  result->point_inlier_count = 0;
  result->marker_inlier_count = 0;
  for (std::size_t i = 0; i < problem.point_matches.size(); ++i) {
    const auto& m = problem.point_matches[i];
    const auto px = try_project(pose, m.position, problem.intrinsics);
    if (!px) continue;
    const double omega = info_weight_scalar(m.level, problem.pyramid);
    const double chi2 = omega * (*px - m.pixel).squaredNorm();
    if (chi2 <= problem.outlier_chi2) {
      result->point_inliers[i] = true;
      ++result->point_inlier_count;
    }
  }
  for (std::size_t i = 0; i < problem.marker_matches.size(); ++i) {
    const auto& m = problem.marker_matches[i];
    const Pose composed = pose.compose(m.marker_pose);
    double chi2 = 0.0;
    bool ok = true;
    for (int c = 0; c < 4; ++c) {
      const auto px = try_project(composed, m.corners_local[c], problem.intrinsics);
      if (!px) {
        ok = false;
        break;
      }
      chi2 += (*px - m.obs.corners_px[c]).squaredNorm();
    }
    if (ok && chi2 / 4.0 <= problem.outlier_chi2) {
      result->marker_inliers[i] = true;
      ++result->marker_inlier_count;
    }
  }
}

}  // namespace

TrackingResult solve_tracking(const TrackingProblem& problem) {
  const int corner_count = static_cast<int>(problem.marker_matches.size()) * 4;
  const int total = static_cast<int>(problem.point_matches.size()) + corner_count;
  if (total < 4)
    raise(Errc::insufficient_constraints,
          std::to_string(total) + " correspondences, need at least 4");

  const int n_markers = static_cast<int>(problem.marker_matches.size());
  auto [w_m, w_p] = marker_point_weights(n_markers, problem.tau_m);
  if (problem.marker_weight_override) {
    w_m = *problem.marker_weight_override;
    w_p = 1.0 - w_m;
  }

  TrackingResult result;
  TrackingMask mask;
  mask.points.assign(problem.point_matches.size(), 1);
  mask.markers.assign(problem.marker_matches.size(), 1);

  Pose pose = problem.initial_pose;
  int iterations = 0;
  double cost = 0.0;
  // two rounds: robust solve, drop the outliers, solve again on the inliers
  for (int round = 0; round < 2; ++round) {
    pose = tracking_lm(problem, mask, pose, w_p, w_m, &cost, &iterations);
    classify(problem, pose, &result);
    const int kept = result.point_inlier_count + 4 * result.marker_inlier_count;
    const bool any_outlier =
        result.point_inlier_count < static_cast<int>(problem.point_matches.size()) ||
        result.marker_inlier_count < static_cast<int>(problem.marker_matches.size());
    if (!any_outlier || kept < 4) break;
    for (std::size_t i = 0; i < mask.points.size(); ++i)
      mask.points[i] = result.point_inliers[i] ? 1 : 0;
    for (std::size_t i = 0; i < mask.markers.size(); ++i)
      mask.markers[i] = result.marker_inliers[i] ? 1 : 0;
  }

  result.pose = pose;
  result.final_cost = cost;
  result.iterations = iterations;
  classify(problem, pose, &result);
  return result;
}

// ---------------------------------------------------------------------------
// Bundle adjustment

namespace {

/// Variable layout: free keyframes (6 each), then free markers (6 each),
/// then all points (3 each).
struct Layout {
  std::vector<int> kf_offset;      // -1 when fixed
  std::vector<int> marker_offset;  // -1 when fixed
  int camera_dim = 0;              // keyframes + markers
  int point_dim = 0;
  std::vector<std::array<Vec3, 4>> corners;  // per marker
};

Layout make_layout(const BundleProblem& p) {
  Layout layout;
  layout.kf_offset.assign(p.keyframe_poses.size(), -1);
  int offset = 0;
  for (std::size_t i = 0; i < p.keyframe_poses.size(); ++i) {
    if (i < p.keyframe_fixed.size() && p.keyframe_fixed[i]) continue;
    layout.kf_offset[i] = offset;
    offset += 6;
  }
  layout.marker_offset.assign(p.marker_poses.size(), -1);
  for (std::size_t i = 0; i < p.marker_poses.size(); ++i) {
    if (i < p.marker_fixed.size() && p.marker_fixed[i]) continue;
    layout.marker_offset[i] = offset;
    offset += 6;
  }
  layout.camera_dim = offset;
  layout.point_dim = static_cast<int>(p.points.size()) * 3;
  layout.corners.reserve(p.marker_sides.size());
  for (const double side : p.marker_sides) layout.corners.push_back(canonical_corners(side));
  return layout;
}

struct NormalEquations {
  Eigen::MatrixXd h_cc;
  Eigen::VectorXd b_c;
  std::vector<Mat3> h_pp;                                   // per point
  std::vector<Vec3> b_p;                                    // per point
  std::vector<std::vector<std::pair<int, Eigen::Matrix<double, 6, 3>>>> h_cp;  // per point
  bool valid = true;
};

NormalEquations build_normal_equations(const BundleProblem& p, const Layout& layout) {
  NormalEquations ne;
  const int nc = layout.camera_dim;
  ne.h_cc = Eigen::MatrixXd::Zero(nc, nc);
  ne.b_c = Eigen::VectorXd::Zero(nc);
  ne.h_pp.assign(p.points.size(), Mat3::Zero());
  ne.b_p.assign(p.points.size(), Vec3::Zero());
  ne.h_cp.resize(p.points.size());

  for (const auto& obs : p.point_obs) {
    const Pose& pose = p.keyframe_poses[obs.keyframe];
    const Vec3& x = p.points[obs.point];
    const auto exp = project_with_jacobian(pose, x, p.intrinsics);
    if (!exp) {
      ne.valid = false;
      return ne;
    }
    const double w = p.point_weight * info_weight_scalar(obs.level, p.pyramid);
    const Vec2 e = exp->pixel - obs.pixel;
    const Mat23 jp = exp->d_pixel_d_camera_point * pose.rotation_matrix();
    ne.h_pp[obs.point] += w * jp.transpose() * jp;
    ne.b_p[obs.point] -= w * jp.transpose() * e;

    const int kf_off = layout.kf_offset[obs.keyframe];
    if (kf_off >= 0) {
      Mat26 jc;
      jc.leftCols<3>() = exp->d_pixel_d_camera_point * (-skew(exp->camera_point));
      jc.rightCols<3>() = exp->d_pixel_d_camera_point;
      ne.h_cc.block<6, 6>(kf_off, kf_off) += w * jc.transpose() * jc;
      ne.b_c.segment<6>(kf_off) -= w * jc.transpose() * e;
      ne.h_cp[obs.point].push_back({kf_off, w * jc.transpose() * jp});
    }
  }

  for (const auto& obs : p.marker_obs) {
    const Pose& kf_pose = p.keyframe_poses[obs.keyframe];
    const Pose& m_pose = p.marker_poses[obs.marker];
    const int kf_off = layout.kf_offset[obs.keyframe];
    const int mk_off = layout.marker_offset[obs.marker];
    const Mat3 r_kf = kf_pose.rotation_matrix();
    for (int i = 0; i < 4; ++i) {
      const Vec3 g = m_pose.apply(layout.corners[obs.marker][i]);  // world corner
      const auto exp = project_with_jacobian(kf_pose, g, p.intrinsics);
      if (!exp) {
        ne.valid = false;
        return ne;
      }
      const double w = p.marker_weight;
      const Vec2 e = exp->pixel - obs.corners_px[i];
      Mat26 j_kf, j_mk;
      if (kf_off >= 0) {
        j_kf.leftCols<3>() = exp->d_pixel_d_camera_point * (-skew(exp->camera_point));
        j_kf.rightCols<3>() = exp->d_pixel_d_camera_point;
        ne.h_cc.block<6, 6>(kf_off, kf_off) += w * j_kf.transpose() * j_kf;
        ne.b_c.segment<6>(kf_off) -= w * j_kf.transpose() * e;
      }
      if (mk_off >= 0) {
        j_mk.leftCols<3>() = exp->d_pixel_d_camera_point * r_kf * (-skew(g));
        j_mk.rightCols<3>() = exp->d_pixel_d_camera_point * r_kf;
        ne.h_cc.block<6, 6>(mk_off, mk_off) += w * j_mk.transpose() * j_mk;
        ne.b_c.segment<6>(mk_off) -= w * j_mk.transpose() * e;
      }
      if (kf_off >= 0 && mk_off >= 0) {
        const Eigen::Matrix<double, 6, 6> cross = w * j_kf.transpose() * j_mk;
        ne.h_cc.block<6, 6>(kf_off, mk_off) += cross;
        ne.h_cc.block<6, 6>(mk_off, kf_off) += cross.transpose();
      }
    }
  }
  return ne;
}

void damp(NormalEquations& ne, double lambda) {
  for (int i = 0; i < ne.h_cc.rows(); ++i)
    ne.h_cc(i, i) += lambda * std::max(ne.h_cc(i, i), 1e-9);
  for (auto& h : ne.h_pp)
    for (int i = 0; i < 3; ++i) h(i, i) += lambda * std::max(h(i, i), 1e-9);
}

/// Schur solve: eliminate the block-diagonal point system, solve the reduced
/// camera system, back-substitute the points.
Eigen::VectorXd schur_solve(const BundleProblem& p, const Layout& layout,
                            NormalEquations& ne) {
  const int nc = layout.camera_dim;
  Eigen::MatrixXd s = ne.h_cc;
  Eigen::VectorXd rhs = ne.b_c;
  std::vector<Mat3> h_pp_inv(p.points.size());
  for (std::size_t pi = 0; pi < p.points.size(); ++pi) {
    h_pp_inv[pi] = ne.h_pp[pi].inverse();
    const auto& blocks = ne.h_cp[pi];
    for (const auto& [off_a, w_a] : blocks) {
      const Eigen::Matrix<double, 6, 3> wa_hinv = w_a * h_pp_inv[pi];
      rhs.segment<6>(off_a) -= wa_hinv * ne.b_p[pi];
      for (const auto& [off_b, w_b] : blocks)
        s.block<6, 6>(off_a, off_b) -= wa_hinv * w_b.transpose();
    }
  }

  Eigen::VectorXd step(nc + layout.point_dim);
  if (nc > 0) {
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(s);
    if (ldlt.info() != Eigen::Success) raise(Errc::singular_system, "schur LDLT failed");
    step.head(nc) = ldlt.solve(rhs);
  }
  for (std::size_t pi = 0; pi < p.points.size(); ++pi) {
    Vec3 acc = ne.b_p[pi];
    for (const auto& [off_a, w_a] : ne.h_cp[pi])
      acc -= w_a.transpose() * step.segment<6>(off_a);
    step.segment<3>(nc + 3 * pi) = h_pp_inv[pi] * acc;
  }
  return step;
}

Eigen::VectorXd dense_solve(const BundleProblem& p, const Layout& layout,
                            const NormalEquations& ne) {
  const int nc = layout.camera_dim;
  const int n = nc + layout.point_dim;
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(n);
  h.topLeftCorner(nc, nc) = ne.h_cc;
  b.head(nc) = ne.b_c;
  for (std::size_t pi = 0; pi < p.points.size(); ++pi) {
    const int off_p = nc + 3 * static_cast<int>(pi);
    h.block<3, 3>(off_p, off_p) = ne.h_pp[pi];
    b.segment<3>(off_p) = ne.b_p[pi];
    for (const auto& [off_c, w] : ne.h_cp[pi]) {
      h.block<6, 3>(off_c, off_p) = w;
      h.block<3, 6>(off_p, off_c) = w.transpose();
    }
  }
  return h.ldlt().solve(b);
}

void apply_step(BundleProblem& p, const Layout& layout, const Eigen::VectorXd& step) {
  for (std::size_t i = 0; i < p.keyframe_poses.size(); ++i) {
    const int off = layout.kf_offset[i];
    if (off >= 0) p.keyframe_poses[i] = p.keyframe_poses[i].retract(step.segment<6>(off));
  }
  for (std::size_t i = 0; i < p.marker_poses.size(); ++i) {
    const int off = layout.marker_offset[i];
    if (off >= 0) p.marker_poses[i] = p.marker_poses[i].retract(step.segment<6>(off));
  }
  for (std::size_t i = 0; i < p.points.size(); ++i)
    p.points[i] += step.segment<3>(layout.camera_dim + 3 * i);
}

}  // namespace

double bundle_cost(const BundleProblem& problem) {
  double cost = 0.0;
  for (const auto& obs : problem.point_obs) {
    const auto px = try_project(problem.keyframe_poses[obs.keyframe],
                                problem.points[obs.point], problem.intrinsics);
    if (!px) return std::numeric_limits<double>::infinity();
    const double omega = info_weight_scalar(obs.level, problem.pyramid);
    cost += problem.point_weight * omega * (*px - obs.pixel).squaredNorm();
  }
  for (const auto& obs : problem.marker_obs) {
    const Pose composed =
        problem.keyframe_poses[obs.keyframe].compose(problem.marker_poses[obs.marker]);
    const auto corners = canonical_corners(problem.marker_sides[obs.marker]);
    for (int i = 0; i < 4; ++i) {
      const auto px = try_project(composed, corners[i], problem.intrinsics);
      if (!px) return std::numeric_limits<double>::infinity();
      cost += problem.marker_weight * (*px - obs.corners_px[i]).squaredNorm();
    }
  }
  return cost;
}

int bundle_free_dimension(const BundleProblem& problem) {
  const Layout layout = make_layout(problem);
  return layout.camera_dim + layout.point_dim;
}

Eigen::VectorXd bundle_gradient(const BundleProblem& problem) {
  const Layout layout = make_layout(problem);
  const NormalEquations ne = build_normal_equations(problem, layout);
  // gradient of the (unhalved) quadratic cost is -2 b
  Eigen::VectorXd g(layout.camera_dim + layout.point_dim);
  g.head(layout.camera_dim) = -2.0 * ne.b_c;
  for (std::size_t pi = 0; pi < problem.points.size(); ++pi)
    g.segment<3>(layout.camera_dim + 3 * pi) = -2.0 * ne.b_p[pi];
  return g;
}

Eigen::VectorXd solve_normal_equations_schur(const BundleProblem& problem, double lambda) {
  const Layout layout = make_layout(problem);
  NormalEquations ne = build_normal_equations(problem, layout);
  if (!ne.valid) raise(Errc::diverged_solve, "observation behind camera");
  damp(ne, lambda);
  return schur_solve(problem, layout, ne);
}

Eigen::VectorXd solve_normal_equations_dense(const BundleProblem& problem, double lambda) {
  const Layout layout = make_layout(problem);
  NormalEquations ne = build_normal_equations(problem, layout);
  if (!ne.valid) raise(Errc::diverged_solve, "observation behind camera");
  damp(ne, lambda);
  return dense_solve(problem, layout, ne);
}

BundleSummary bundle_adjust(BundleProblem& problem, const BundleOptions& options) {
  const Layout layout = make_layout(problem);
  BundleSummary summary;
  summary.initial_cost = bundle_cost(problem);
  if (!std::isfinite(summary.initial_cost))
    raise(Errc::diverged_solve, "initial state has observations behind the camera");
  double cost = summary.initial_cost;
  double lambda = options.lambda_init;

  for (int iter = 0; iter < options.max_iterations; ++iter) {
    NormalEquations ne = build_normal_equations(problem, layout);
    if (!ne.valid) break;
    damp(ne, lambda);
    Eigen::VectorXd step;
    try {
      step = schur_solve(problem, layout, ne);
    } catch (const Error&) {
      lambda *= options.lambda_up;
      ++summary.rejected_steps;
      continue;
    }
    if (!step.allFinite()) {
      lambda *= options.lambda_up;
      ++summary.rejected_steps;
      continue;
    }

    BundleProblem candidate = problem;
    apply_step(candidate, layout, step);
    const double new_cost = bundle_cost(candidate);
    if (std::isfinite(new_cost) && new_cost < cost - options.min_cost_decrease) {
      problem = std::move(candidate);
      cost = new_cost;
      summary.accepted_costs.push_back(cost);
      ++summary.accepted_steps;
      lambda = std::max(lambda * options.lambda_down, 1e-12);
      if (step.norm() < options.min_step_norm) break;
    } else {
      lambda *= options.lambda_up;
      ++summary.rejected_steps;
      if (lambda > 1e12) break;
    }
  }
  summary.final_cost = cost;
  return summary;
}

// ---------------------------------------------------------------------------
// Sim(3) loop correction

void sim3_loop_correct(WorldMap& map, const std::vector<KeyframeId>& chain,
                       const SimTransform& drift) {
  if (chain.empty()) raise(Errc::empty_chain, "no keyframes to correct");

  const std::size_t n = chain.size();
  std::map<KeyframeId, SimTransform> corrections;
  const Vec7 log_drift = drift.log();
  for (std::size_t i = 0; i < n; ++i) {
    const double fraction = (n == 1) ? 1.0 : static_cast<double>(i) / static_cast<double>(n - 1);
    corrections.emplace(chain[i], SimTransform::exp(fraction * log_drift));
  }

  // landmarks move with the correction of their earliest observer on the chain
  for (const auto pid : map.points().ids()) {
    const auto& observers = map.registry().point_observers(pid);
    const SimTransform* correction = nullptr;
    for (const auto& [k, idx] : observers) {  // ascending id order
      auto it = corrections.find(k);
      if (it != corrections.end()) {
        correction = &it->second;
        break;
      }
    }
    if (!correction) continue;
    MapPoint& pt = map.point(pid);
    pt.position = correction->apply(pt.position);
    pt.view_dir = (correction->rotation() * pt.view_dir).normalized();
  }

  for (const auto mid : map.markers().ids()) {
    Marker& marker = map.marker(mid);
    if (!marker.pose_valid) continue;
    const auto& observers = map.registry().marker_observers(mid);
    const SimTransform* correction = nullptr;
    for (const auto& [k, obs] : observers) {
      auto it = corrections.find(k);
      if (it != corrections.end()) {
        correction = &it->second;
        break;
      }
    }
    if (!correction) continue;
    // markers keep their physical size: rotation and position move, the
    // scale component only displaces the center
    marker.pose = Pose(correction->rotation() * marker.pose.rotation(),
                       correction->apply(marker.pose.translation()));
  }

  // T compose S^-1 is a similarity (s_inv, R*R_inv, R*t_inv + t); scaling
  // camera coordinates by 1/s_inv keeps every projection identical, so the
  // rigid corrected pose is (R*R_inv, (R*t_inv + t)/s_inv).
  for (const auto& [k, correction] : corrections) {
    KeyFrame& kf = map.keyframe(k);
    const SimTransform inv = correction.inverse();
    const Quat rot = kf.pose.rotation() * inv.rotation();
    const Vec3 trans = kf.pose.rotation() * inv.translation() + kf.pose.translation();
    kf.pose = Pose(rot, trans / inv.scale());
  }
}

}  // namespace kmslam
