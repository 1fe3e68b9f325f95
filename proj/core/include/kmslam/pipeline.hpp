#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <vector>

#include "kmslam/map.hpp"
#include "kmslam/marker_solver.hpp"
#include "kmslam/optimizer.hpp"
#include "kmslam/sim_world.hpp"
#include "kmslam/trajectory.hpp"

namespace kmslam {

/// All tunables in one place. tau_* names match the config keys.
struct PipelineParams {
  int tau_d = 50;       // descriptor distance gate (hamming bits)
  int tau_m = 5;        // marker count giving balanced tracking weight
  double tau_b = 0.1;   // keyframe baseline distance (m), insertion rule 3
  double tau_k = 80.0;  // matched-point percentage, insertion rule 4
  double tau_c = 80.0;  // culling redundancy percentage

  double ratio_test = 0.8;
  double view_angle_max_deg = 60.0;
  double search_radius_px = 15.0;

  double huber_alpha = 2.45;
  double outlier_chi2 = 5.99;

  double marker_side = 0.25;
  double ambiguity_ratio = 3.0;
  double min_baseline_angle_deg = 2.0;

  double epipolar_px = 2.0;
  double triangulation_reproj_px = 3.0;
  double min_parallax_deg = 1.0;

  int pnp_min_inliers = 30;
  int pnp_ransac_iters = 200;
  double pnp_inlier_px = 4.0;
  int loop_min_matches = 15;
  int max_loop_candidates = 5;
  double reloc_min_score = 0.05;

  int init_attempts = 10;
  int init_min_matches = 40;
  int init_min_triangulated = 30;

  int min_point_inliers = 10;
  int survival_min_predictions = 4;

  int tracking_iters = 10;
  int local_ba_iters = 5;
  int global_ba_iters = 50;
  double ba_marker_weight_min = 1.0;
  double ba_marker_weight_max = 100.0;

  std::uint32_t slot_block_capacity = 4096;
};

/// Run-mode switches, mirroring the CLI flags.
struct PipelineOptions {
  bool use_markers = true;
  bool use_keypoints = true;
  bool keypoint_loop_closure = true;
  bool frozen = false;  // tracking + relocalization only, no map mutation
  std::uint64_t seed = 1;
};

enum class PipelineMode { uninitialized, tracking, lost };

struct FrameSummary {
  TrackStatus status = TrackStatus::uninitialized;
  Pose pose;
  int matched_points = 0;
  int matched_markers = 0;
  bool inserted_keyframe = false;
  int insertion_rule = 0;  // 1..4, 0 when not inserted by rule
  bool marker_loop = false;
  bool keypoint_loop = false;
  bool relocalized = false;
};

/// One frame-to-map correspondence search result: the tracking problem plus
/// the bookkeeping the survival policy and loop detection need.
struct CorrespondenceSet {
  TrackingProblem problem;
  std::vector<PointId> predicted_visible;           // passed the geometric gates
  std::vector<std::pair<PointId, std::uint32_t>> matches;  // point -> keypoint index
  std::vector<MarkerId> loop_markers;  // valid pose but outside the reference area
  std::vector<MarkerId> invalid_pose_markers_seen;
  std::vector<int> unknown_marker_fiducials;
};

struct InsertionDecision {
  bool insert = false;
  int rule = 0;
};

struct MarkerLoopDetection {
  std::vector<KeyframeId> chain;  // trusted end first; the new keyframe is appended
  SimTransform drift;             // maps drifted coordinates to loop-consistent ones
  Pose loop_pose;                 // pose implied by the loop-closing markers
};

/// The per-frame SLAM state machine: initialization, tracking, keyframe
/// management, loop closure, relocalization. Sequential and deterministic:
/// one frame is fully processed before the next.
class SlamPipeline {
 public:
  SlamPipeline(const PipelineParams& params, const PipelineOptions& options,
               const PyramidConfig& pyramid);
  /// Track-only mode over an existing map (no insertion, no optimization).
  SlamPipeline(const PipelineParams& params, const PipelineOptions& options, WorldMap map);

  FrameSummary process_frame(const Frame& frame);

  const WorldMap& map() const { return map_; }
  WorldMap& map() { return map_; }
  const TrajectoryRecord& trajectory() const { return trajectory_; }
  PipelineMode mode() const { return mode_; }
  std::optional<KeyframeId> reference_keyframe() const { return reference_kf_; }
  const PipelineParams& params() const { return params_; }

  // --- individual pipeline steps, exposed for direct testing -------------
  CorrespondenceSet find_correspondences(const Frame& frame, const Pose& pose_guess) const;
  InsertionDecision should_insert_keyframe(const Frame& frame, const TrackingResult& result,
                                           const CorrespondenceSet& corr) const;
  void bootstrap_marker_pose(MarkerId marker);
  std::vector<PointId> create_map_points(KeyframeId new_keyframe);
  void apply_survival_policy(const CorrespondenceSet& corr, const TrackingResult& result);
  void cull_keyframes();
  std::optional<MarkerLoopDetection> detect_marker_loop(const Frame& frame,
                                                        const CorrespondenceSet& corr,
                                                        const Pose& tracked_pose) const;
  bool detect_and_close_keypoint_loop(KeyframeId new_keyframe);
  std::optional<Pose> relocalize(const Frame& frame);

  void run_local_bundle_adjustment(KeyframeId center);
  void run_global_bundle_adjustment();

  /// Protected keyframes: for every marker, the three observers with the
  /// largest summed pairwise distance.
  std::set<KeyframeId> protected_keyframes() const;

 private:
  struct InitState {
    std::optional<Frame> first_frame;
    int attempts = 0;
  };

  Frame filtered(const Frame& frame) const;
  void handle_initialization(const Frame& frame, FrameSummary& summary);
  void handle_tracking(const Frame& frame, FrameSummary& summary);
  void handle_lost(const Frame& frame, FrameSummary& summary);

  KeyframeId insert_keyframe(const Frame& frame, const CorrespondenceSet& corr,
                             const TrackingResult& result);
  void register_markers(KeyframeId kf, const Frame& frame);
  void promote_stable_points();
  void update_reference_keyframe(const CorrespondenceSet& corr, const TrackingResult& result);
  void rescale_map(double factor);
  bool tracking_succeeded(const TrackingResult& result) const;
  std::set<KeyframeId> reference_neighborhood() const;
  double ba_marker_weight(std::size_t point_obs, std::size_t marker_obs) const;
  std::optional<Pose> pnp_against_keyframe(const Frame& frame, KeyframeId candidate,
                                           std::vector<std::pair<std::uint32_t, PointId>>*
                                               accepted_matches);

  PipelineParams params_;
  PipelineOptions options_;
  WorldMap map_;
  PipelineMode mode_ = PipelineMode::uninitialized;
  std::optional<KeyframeId> reference_kf_;
  Pose last_pose_;
  std::vector<PointId> last_matches_;
  InitState init_;
  TrajectoryRecord trajectory_;
  bool scale_free_ = false;  // keypoint-initialized map without metric anchor
  std::uint64_t ransac_counter_ = 0;
};

}  // namespace kmslam
