#pragma once

#include <vector>

#include "kmslam/geometry.hpp"
#include "kmslam/map.hpp"

namespace kmslam {

/// The two local minima of the four-corner pose problem, sorted by error.
/// `ambiguous` is set when the second minimum is both distinct and close in
/// error (e2/e1 below the ratio threshold), i.e. the view alone cannot tell
/// the solutions apart.
struct AmbiguousPose {
  Pose sol1;  // marker frame -> camera frame
  double e1 = 0.0;
  Pose sol2;
  double e2 = 0.0;
  bool ambiguous = false;
};

struct MarkerSolverParams {
  double ambiguity_ratio = 3.0;       // ambiguous iff e2/e1 below this
  double min_baseline_angle_deg = 2.0;
  double max_mean_corner_error_px = 10.0;
  int refine_iterations = 30;
};

/// Estimates the marker-to-camera pose from one four-corner observation.
/// Undistorts the corners, decomposes the plane homography into the two
/// analytic pose candidates, and refines each with damped Gauss-Newton on
/// the full (distorted) reprojection cost.
AmbiguousPose solve_planar_pose(const MarkerObs& obs, double side,
                                const CameraIntrinsics& intr,
                                const MarkerSolverParams& params = {});

/// Picks the marker world pose that minimizes the summed four-corner
/// reprojection error over all views, among the candidates induced by each
/// view's two solutions, then refines it jointly.
Pose resolve_pose_multiview(const std::vector<std::pair<Pose, MarkerObs>>& observations,
                            double side, const CameraIntrinsics& intr,
                            const MarkerSolverParams& params = {});

struct MarkerInitResult {
  Pose f1_pose;  // pose of the second frame; the first frame is the identity
  std::vector<std::pair<int, Pose>> marker_poses;  // fiducial id -> mrs->grs
};

/// Metric two-frame initialization from shared markers, handling per-view
/// ambiguity by scoring every relative-pose candidate against all common
/// markers in both frames.
MarkerInitResult initialize_from_markers(const Frame& f0, const Frame& f1, double side,
                                         const CameraIntrinsics& intr,
                                         const MarkerSolverParams& params = {});

/// Damped Gauss-Newton refinement of a marker (or camera) pose against
/// corner observations seen from the given view poses. Returns the refined
/// pose and the final summed squared pixel error.
struct CornerConstraint {
  Pose view;    // grs -> crs of the observing camera
  Vec3 local;   // corner in the optimized frame
  Vec2 pixel;   // observed
};
std::pair<Pose, double> refine_pose_on_corners(const Pose& initial,
                                               const std::vector<CornerConstraint>& corners,
                                               const CameraIntrinsics& intr,
                                               int iterations = 30);

}  // namespace kmslam
