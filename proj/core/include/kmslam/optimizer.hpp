#pragma once

#include <Eigen/Core>
#include <optional>
#include <vector>

#include "kmslam/geometry.hpp"
#include "kmslam/map.hpp"

namespace kmslam {

/// Tracking-time weights: w_m = min(1, n/tau_m)/2, w_p = 1 - w_m. With no
/// usable markers all weight goes to the points; at n = tau_m the two terms
/// are balanced.
std::pair<double, double> marker_point_weights(int marker_count, int tau_m);

// ---------------------------------------------------------------------------
// Frame tracking

struct PointMatch {
  Vec3 position;
  int level = 0;
  Vec2 pixel = Vec2::Zero();
  PointId point_id{0};
  std::uint32_t keypoint_index = 0;
};

struct MarkerMatch {
  Pose marker_pose;  // mrs -> grs, must be valid
  std::array<Vec3, 4> corners_local{};
  MarkerObs obs;
  MarkerId marker_id{0};
};

struct TrackingProblem {
  std::vector<PointMatch> point_matches;
  std::vector<MarkerMatch> marker_matches;
  CameraIntrinsics intrinsics;
  PyramidConfig pyramid;
  Pose initial_pose;
  double huber_alpha = 2.45;   // px, on the omega-weighted residual norm
  int tau_m = 5;
  double outlier_chi2 = 5.99;  // squared weighted residual cutoff
  int max_iterations = 10;
  std::optional<double> marker_weight_override;  // forces w_m (ablations/tests)
};

struct TrackingResult {
  Pose pose;
  std::vector<bool> point_inliers;
  std::vector<bool> marker_inliers;  // per marker match (all four corners)
  int point_inlier_count = 0;
  int marker_inlier_count = 0;
  double final_cost = 0.0;
  int iterations = 0;
};

/// Levenberg-Marquardt pose solve over the weighted point + marker corner
/// reprojection cost. Point terms are Huber-robustified and Omega-weighted;
/// marker corner terms are plain squared errors.
TrackingResult solve_tracking(const TrackingProblem& problem);

// ---------------------------------------------------------------------------
// Bundle adjustment

struct BundlePointObs {
  std::uint32_t keyframe = 0;
  std::uint32_t point = 0;
  Vec2 pixel = Vec2::Zero();
  int level = 0;
};

struct BundleMarkerObs {
  std::uint32_t keyframe = 0;
  std::uint32_t marker = 0;
  std::array<Vec2, 4> corners_px{};
};

/// A self-contained joint problem over keyframe poses, point positions, and
/// marker poses. Fixed flags freeze gauge anchors and boundary keyframes.
struct BundleProblem {
  std::vector<Pose> keyframe_poses;
  std::vector<std::uint8_t> keyframe_fixed;
  std::vector<Vec3> points;
  std::vector<Pose> marker_poses;
  std::vector<std::uint8_t> marker_fixed;
  std::vector<double> marker_sides;

  std::vector<BundlePointObs> point_obs;
  std::vector<BundleMarkerObs> marker_obs;

  CameraIntrinsics intrinsics;
  PyramidConfig pyramid;
  double point_weight = 1.0;
  double marker_weight = 1.0;
};

struct BundleOptions {
  int max_iterations = 50;
  double lambda_init = 1e-4;
  double lambda_up = 10.0;
  double lambda_down = 0.1;
  double min_step_norm = 1e-12;
  double min_cost_decrease = 0.0;  // accept any strict decrease
};

struct BundleSummary {
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int accepted_steps = 0;
  int rejected_steps = 0;
  std::vector<double> accepted_costs;  // cost after each accepted step
};

/// Total reprojection cost of the problem at its current variables:
/// sum of w_p * e^T Omega e over point observations plus
/// w_m * |e|^2 over marker corners.
double bundle_cost(const BundleProblem& problem);

/// Analytic gradient of bundle_cost stacked over free variables in the
/// order produced by the problem's variable layout (for verification).
Eigen::VectorXd bundle_gradient(const BundleProblem& problem);

/// Sparse Levenberg-Marquardt with the point block eliminated by a Schur
/// complement. Mutates the problem variables in place.
BundleSummary bundle_adjust(BundleProblem& problem, const BundleOptions& options = {});

/// One damped normal-equation solve at the current state, either through
/// the Schur path used by bundle_adjust or through a dense reference
/// factorization of the full system; both return the stacked step
/// [cameras+markers; points]. The two must agree.
Eigen::VectorXd solve_normal_equations_schur(const BundleProblem& problem, double lambda);
Eigen::VectorXd solve_normal_equations_dense(const BundleProblem& problem, double lambda);

/// Number of free scalar variables (6 per free pose, 6 per free marker,
/// 3 per point).
int bundle_free_dimension(const BundleProblem& problem);

// ---------------------------------------------------------------------------
// Sim(3) loop correction

/// Spreads `drift` (the similarity mapping drifted coordinates to
/// loop-consistent coordinates) along the keyframe chain: the first chain
/// entry keeps its pose, the last receives the full correction, and map
/// points and markers move with the correction of their earliest observing
/// keyframe on the chain. A chain of one keyframe takes the whole
/// correction.
void sim3_loop_correct(WorldMap& map, const std::vector<KeyframeId>& chain,
                       const SimTransform& drift);

}  // namespace kmslam
