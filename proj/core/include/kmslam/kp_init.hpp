#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "kmslam/geometry.hpp"
#include "kmslam/map.hpp"

namespace kmslam {

/// Linear two-view triangulation in world coordinates.
std::optional<Vec3> triangulate_two_view(const Pose& pose0, const Pose& pose1,
                                         const Vec2& normalized0, const Vec2& normalized1);

/// DLT camera pose from >= 6 world points and normalized image coordinates.
std::optional<Pose> dlt_pnp(const std::vector<Vec3>& points,
                            const std::vector<Vec2>& normalized);

struct PnPRansacResult {
  Pose pose;
  std::vector<std::uint8_t> inliers;
  int inlier_count = 0;
};

/// RANSAC + refinement over 2D-3D correspondences. Pixels are raw (the
/// camera model handles distortion); returns nullopt when no model reaches
/// min_inliers.
std::optional<PnPRansacResult> pnp_ransac(const std::vector<Vec3>& points,
                                          const std::vector<Vec2>& pixels,
                                          const CameraIntrinsics& intr, int iterations,
                                          double inlier_px, int min_inliers,
                                          std::uint64_t seed);

struct TwoViewParams {
  double ratio = 0.8;
  int tau_d = 50;
  int min_matches = 40;
  int ransac_iters = 200;
  double sigma_px = 1.0;
  double min_parallax_deg = 1.0;
  int min_triangulated = 30;
  double homography_selection = 0.45;  // pick H when S_H/(S_H+S_E) exceeds this
};

struct TwoViewInit {
  Pose f1_pose;  // f0 is the identity; translation has unit norm (scale-free)
  bool used_homography = false;
  struct Landmark {
    std::uint32_t index0;
    std::uint32_t index1;
    Vec3 position;
  };
  std::vector<Landmark> landmarks;
};

/// Keypoint-based relative pose and structure from two frames: descriptor
/// matching, parallel homography/essential RANSAC, model selection, motion
/// hypothesis disambiguation by cheirality, and triangulation. Scale-free.
std::optional<TwoViewInit> initialize_two_view(const Frame& f0, const Frame& f1,
                                               const TwoViewParams& params,
                                               std::uint64_t seed);

}  // namespace kmslam
