#include "kmslam/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "kmslam/evaluation.hpp"
#include "kmslam/kp_init.hpp"
#include "kmslam/matching.hpp"

namespace kmslam {

namespace {

/// Coarse spatial hash over frame keypoints for radius queries.
class KeypointGrid {
 public:
  explicit KeypointGrid(const Frame& frame, double cell = 24.0) : frame_(frame), cell_(cell) {
    for (std::uint32_t i = 0; i < frame.keypoints.size(); ++i)
      cells_[key(frame.keypoints[i].pixel)].push_back(i);
  }

  /// Indices of keypoints within `radius` of `center`.
  std::vector<std::uint32_t> query(const Vec2& center, double radius) const {
    std::vector<std::uint32_t> out;
    const int r = static_cast<int>(radius / cell_) + 1;
    const int cx = static_cast<int>(std::floor(center.x() / cell_));
    const int cy = static_cast<int>(std::floor(center.y() / cell_));
    for (int gx = cx - r; gx <= cx + r; ++gx) {
      for (int gy = cy - r; gy <= cy + r; ++gy) {
        auto it = cells_.find({gx, gy});
        if (it == cells_.end()) continue;
        for (const auto idx : it->second)
          if ((frame_.keypoints[idx].pixel - center).norm() <= radius) out.push_back(idx);
      }
    }
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  std::pair<int, int> key(const Vec2& px) const {
    return {static_cast<int>(std::floor(px.x() / cell_)),
            static_cast<int>(std::floor(px.y() / cell_))};
  }
  const Frame& frame_;
  double cell_;
  std::map<std::pair<int, int>, std::vector<std::uint32_t>> cells_;
};

struct ProblemIndex {
  std::vector<KeyframeId> keyframes;
  std::vector<PointId> points;
  std::vector<MarkerId> markers;
};

}  // namespace

SlamPipeline::SlamPipeline(const PipelineParams& params, const PipelineOptions& options,
                           const PyramidConfig& pyramid)
    : params_(params), options_(options), map_(params.slot_block_capacity) {
  map_.pyramid = pyramid;
  map_.database().set_distance_gate(params.tau_d);
}

SlamPipeline::SlamPipeline(const PipelineParams& params, const PipelineOptions& options,
                           WorldMap map)
    : params_(params), options_(options), map_(std::move(map)) {
  mode_ = PipelineMode::lost;  // relocalize into the loaded map
}

Frame SlamPipeline::filtered(const Frame& frame) const {
  Frame out = frame;
  if (!options_.use_keypoints) out.keypoints.clear();
  if (!options_.use_markers) out.marker_detections.clear();
  return out;
}

FrameSummary SlamPipeline::process_frame(const Frame& raw_frame) {
  const Frame frame = filtered(raw_frame);
  FrameSummary summary;
  summary.status = TrackStatus::uninitialized;

  switch (mode_) {
    case PipelineMode::uninitialized:
      if (options_.frozen) {
        mode_ = PipelineMode::lost;
        handle_lost(frame, summary);
      } else {
        handle_initialization(frame, summary);
      }
      break;
    case PipelineMode::tracking:
      handle_tracking(frame, summary);
      break;
    case PipelineMode::lost:
      handle_lost(frame, summary);
      break;
  }

  TrajectoryEntry entry;
  entry.timestamp = frame.timestamp;
  entry.status = summary.status;
  entry.pose = summary.pose;
  trajectory_.entries.push_back(entry);
  return summary;
}

// ---------------------------------------------------------------------------
// correspondences

std::set<KeyframeId> SlamPipeline::reference_neighborhood() const {
  std::set<KeyframeId> out;
  if (!reference_kf_) return out;
  out.insert(*reference_kf_);
  for (const auto n : map_.graph().neighbors(*reference_kf_)) out.insert(n);
  return out;
}

CorrespondenceSet SlamPipeline::find_correspondences(const Frame& frame,
                                                     const Pose& pose_guess) const {
  CorrespondenceSet corr;
  corr.problem.intrinsics = frame.intrinsics;
  corr.problem.pyramid = map_.pyramid;
  corr.problem.initial_pose = pose_guess;
  corr.problem.huber_alpha = params_.huber_alpha;
  corr.problem.tau_m = params_.tau_m;
  corr.problem.outlier_chi2 = params_.outlier_chi2;
  corr.problem.max_iterations = params_.tracking_iters;

  const auto neighborhood = reference_neighborhood();

  // candidate points: reference keyframe, its neighbors, last frame's matches
  std::set<PointId> candidates;
  for (const auto kf : neighborhood)
    for (const auto& [idx, p] : map_.registry().points_in_keyframe(kf)) candidates.insert(p);
  for (const auto p : last_matches_)
    if (map_.points().contains(p)) candidates.insert(p);

  const KeypointGrid grid(frame);
  const Vec3 camera_center = pose_guess.center();
  const double cos_max = std::cos(params_.view_angle_max_deg * M_PI / 180.0);
  const double eta = map_.pyramid.eta;

  std::map<std::uint32_t, std::pair<int, PointId>> claimed;  // keypoint -> (dist, point)
  std::vector<PointId> predicted;

  for (const auto pid : candidates) {
    const MapPoint& point = map_.point(pid);

    // viewing-angle gate
    const Vec3 to_point = point.position - camera_center;
    const double distance = to_point.norm();
    if (distance < 1e-6) continue;
    if (point.view_dir.dot(to_point / distance) < cos_max) continue;

    // scale-region gate from the observing keyframes
    double d_min = std::numeric_limits<double>::infinity();
    double d_max = 0.0;
    for (const auto& [kf, idx] : map_.registry().point_observers(pid)) {
      const auto& keyframe = map_.keyframe(kf);
      const double d_obs = (point.position - keyframe.pose.center()).norm();
      const int level = keyframe.keypoints[idx].level;
      d_min = std::min(d_min, d_obs * std::pow(eta, -level));
      d_max = std::max(d_max,
                       d_obs * std::pow(eta, map_.pyramid.levels - 1 - level));
    }
    if (d_max > 0.0 && (distance < d_min / eta || distance > d_max * eta)) continue;

    // projection gate
    const auto projected = try_project(pose_guess, point.position, frame.intrinsics);
    if (!projected || !frame.intrinsics.in_image(*projected)) continue;

    predicted.push_back(pid);

    // descriptor search in a level-scaled radius
    int predicted_level = 0;
    if (std::isfinite(d_min) && d_min > 0.0)
      predicted_level = std::clamp(
          static_cast<int>(std::lround(std::log(distance / d_min) / std::log(eta))), 0,
          map_.pyramid.levels - 1);
    const double radius = params_.search_radius_px * std::pow(eta, predicted_level);
    const auto nearby = grid.query(*projected, radius);
    if (nearby.empty()) continue;

    int best = std::numeric_limits<int>::max();
    int second = std::numeric_limits<int>::max();
    std::uint32_t best_idx = 0;
    for (const auto idx : nearby) {
      const int d = descriptor_distance(point.rep_descriptor,
                                        frame.keypoints[idx].descriptor);
      if (d < best) {
        second = best;
        best = d;
        best_idx = idx;
      } else if (d < second) {
        second = d;
      }
    }
    if (best > params_.tau_d) continue;
    if (second != std::numeric_limits<int>::max() &&
        !(best < params_.ratio_test * second))
      continue;

    auto it = claimed.find(best_idx);
    if (it == claimed.end() || best < it->second.first) claimed[best_idx] = {best, pid};
  }

  corr.predicted_visible = std::move(predicted);
  for (const auto& [kp_idx, entry] : claimed) {
    const auto& [dist, pid] = entry;
    const MapPoint& point = map_.point(pid);
    PointMatch match;
    match.position = point.position;
    match.level = frame.keypoints[kp_idx].level;
    match.pixel = frame.keypoints[kp_idx].pixel;
    match.point_id = pid;
    match.keypoint_index = kp_idx;
    corr.problem.point_matches.push_back(match);
    corr.matches.push_back({pid, kp_idx});
  }

  // markers: only valid poses observed in the reference neighborhood track;
  // valid poses outside it signal a loop; invalid poses wait
  for (const auto& det : frame.marker_detections) {
    const auto mid = map_.marker_by_fiducial(det.marker_id);
    if (!mid) {
      corr.unknown_marker_fiducials.push_back(det.marker_id);
      continue;
    }
    const Marker& marker = map_.marker(*mid);
    if (!marker.pose_valid) {
      corr.invalid_pose_markers_seen.push_back(*mid);
      continue;
    }
    bool in_neighborhood = false;
    for (const auto& [kf, obs] : map_.registry().marker_observers(*mid)) {
      if (neighborhood.count(kf)) {
        in_neighborhood = true;
        break;
      }
    }
    if (!in_neighborhood && !neighborhood.empty()) {
      corr.loop_markers.push_back(*mid);
      continue;
    }
    MarkerMatch match;
    match.marker_pose = marker.pose;
    match.corners_local = marker.corners_local;
    match.obs = det;
    match.marker_id = *mid;
    corr.problem.marker_matches.push_back(match);
  }
  return corr;
}

bool SlamPipeline::tracking_succeeded(const TrackingResult& result) const {
  return result.point_inlier_count >= params_.min_point_inliers ||
         result.marker_inlier_count >= 1;
}

void SlamPipeline::update_reference_keyframe(const CorrespondenceSet& corr,
                                             const TrackingResult& result) {
  std::map<KeyframeId, int> votes;
  for (std::size_t i = 0; i < corr.matches.size(); ++i) {
    if (!result.point_inliers[i]) continue;
    for (const auto& [kf, idx] : map_.registry().point_observers(corr.matches[i].first))
      ++votes[kf];
  }
  for (std::size_t i = 0; i < corr.problem.marker_matches.size(); ++i) {
    if (!result.marker_inliers[i]) continue;
    for (const auto& [kf, obs] :
         map_.registry().marker_observers(corr.problem.marker_matches[i].marker_id))
      votes[kf] += 4;
  }
  int best = 0;
  for (const auto& [kf, count] : votes) {
    if (count > best) {
      best = count;
      reference_kf_ = kf;
    }
  }
}

// ---------------------------------------------------------------------------
// keyframe insertion

InsertionDecision SlamPipeline::should_insert_keyframe(const Frame& frame,
                                                       const TrackingResult& result,
                                                       const CorrespondenceSet& corr) const {
  // rule 1: a marker not yet in the map
  if (!corr.unknown_marker_fiducials.empty()) return {true, 1};

  // rule 2: a known marker with invalid pose becomes unambiguously solvable
  for (const auto mid : corr.invalid_pose_markers_seen) {
    const Marker& marker = map_.marker(mid);
    for (const auto& det : frame.marker_detections) {
      if (det.marker_id != marker.id) continue;
      try {
        const auto two = solve_planar_pose(det, marker.side, frame.intrinsics,
                                           {params_.ambiguity_ratio,
                                            params_.min_baseline_angle_deg});
        if (!two.ambiguous) return {true, 2};
      } catch (const Error&) {
      }
    }
  }

  // rule 3: a marker is visible and the camera moved away from every keyframe
  if (!frame.marker_detections.empty()) {
    const Vec3 center = result.pose.center();
    double nearest = std::numeric_limits<double>::infinity();
    map_.keyframes().for_each([&](KeyframeId, const KeyFrame& kf) {
      nearest = std::min(nearest, (kf.pose.center() - center).norm());
    });
    if (nearest > params_.tau_b) return {true, 3};
  }

  // rule 4: matched points dropped below tau_k percent of the reference count
  if (reference_kf_) {
    const auto ref_count = map_.registry().points_in_keyframe(*reference_kf_).size();
    if (ref_count > 0) {
      const double percent =
          100.0 * static_cast<double>(result.point_inlier_count) / ref_count;
      if (percent < params_.tau_k) return {true, 4};
    }
  }
  return {false, 0};
}

void SlamPipeline::register_markers(KeyframeId kf, const Frame& frame) {
  for (const auto& det : frame.marker_detections) {
    auto mid = map_.marker_by_fiducial(det.marker_id);
    if (!mid) {
      Marker marker = make_marker(det.marker_id, params_.marker_side);
      // a first sighting may already pin the pose when unambiguous, but a
      // scale-free map cannot absorb a metric pose yet
      if (!scale_free_) {
        try {
          const auto two = solve_planar_pose(det, marker.side, frame.intrinsics,
                                             {params_.ambiguity_ratio,
                                              params_.min_baseline_angle_deg});
          if (!two.ambiguous) {
            marker.pose = map_.keyframe(kf).pose.inverse().compose(two.sol1);
            marker.pose_valid = true;
          }
        } catch (const Error&) {
        }
      }
      mid = map_.add_marker(marker);
    }
    map_.add_marker_observation(*mid, kf, det);
  }
}

KeyframeId SlamPipeline::insert_keyframe(const Frame& frame, const CorrespondenceSet& corr,
                                         const TrackingResult& result) {
  Frame keyframe = frame;
  keyframe.pose = result.pose;
  const KeyframeId kf = map_.add_keyframe(std::move(keyframe));

  for (std::size_t i = 0; i < corr.matches.size(); ++i) {
    if (!result.point_inliers[i]) continue;
    const auto& [pid, kp_idx] = corr.matches[i];
    if (map_.points().contains(pid)) map_.add_point_observation(pid, kf, kp_idx);
  }
  register_markers(kf, frame);

  // invalid-pose markers get another chance with the new view
  std::vector<MarkerId> pending;
  for (const auto& [mid, obs] : map_.registry().markers_in_keyframe(kf))
    if (!map_.marker(mid).pose_valid) pending.push_back(mid);
  for (const auto mid : pending) bootstrap_marker_pose(mid);

  for (const auto& [pid, kp_idx] : corr.matches)
    if (map_.points().contains(pid)) map_.refresh_point_derived(pid);
  promote_stable_points();
  return kf;
}

void SlamPipeline::promote_stable_points() {
  const std::uint32_t now = map_.keyframe_insertions();
  for (const auto pid : map_.points().ids()) {
    MapPoint& p = map_.point(pid);
    if (p.stability == PointStability::provisional && now >= p.created_at_insertion + 2)
      p.stability = PointStability::stable;
  }
}

// ---------------------------------------------------------------------------
// marker pose bootstrapping

void SlamPipeline::rescale_map(double factor) {
  for (const auto pid : map_.points().ids())
    map_.point(pid).position *= factor;
  for (const auto kid : map_.keyframes().ids()) {
    KeyFrame& kf = map_.keyframe(kid);
    kf.pose = Pose(kf.pose.rotation(), kf.pose.translation() * factor);
  }
  for (const auto mid : map_.markers().ids()) {
    Marker& m = map_.marker(mid);
    if (m.pose_valid)
      m.pose = Pose(m.pose.rotation(), m.pose.translation() * factor);
  }
  last_pose_ = Pose(last_pose_.rotation(), last_pose_.translation() * factor);
}

void SlamPipeline::bootstrap_marker_pose(MarkerId marker_id) {
  Marker& marker = map_.marker(marker_id);
  if (marker.pose_valid) return;
  const auto& observers = map_.registry().marker_observers(marker_id);
  if (observers.empty()) return;

  if (scale_free_) {
    // Triangulate the corners from two views to measure the marker's size in
    // map units, rescale the whole map to metric, then resolve normally.
    if (observers.size() < 2) return;
    std::vector<double> sides;
    const auto first = observers.begin();
    for (auto second = std::next(first); second != observers.end(); ++second) {
      const Pose& pose0 = map_.keyframe(first->first).pose;
      const Pose& pose1 = map_.keyframe(second->first).pose;
      std::array<Vec3, 4> corners;
      bool ok = true;
      for (int c = 0; c < 4 && ok; ++c) {
        const auto intr = map_.keyframe(first->first).intrinsics;
        const Vec2 n0 = intr.undistort(first->second.corners_px[c]);
        const Vec2 n1 = intr.undistort(second->second.corners_px[c]);
        const auto x = triangulate_two_view(pose0, pose1, n0, n1);
        if (!x || pose0.apply(*x).z() <= 0 || pose1.apply(*x).z() <= 0)
          ok = false;
        else
          corners[c] = *x;
      }
      if (!ok) continue;
      double measured = 0.0;
      for (int c = 0; c < 4; ++c) measured += (corners[c] - corners[(c + 1) % 4]).norm();
      sides.push_back(measured / 4.0);
    }
    if (sides.empty()) return;
    std::nth_element(sides.begin(), sides.begin() + sides.size() / 2, sides.end());
    const double side_in_map = sides[sides.size() / 2];
    if (!(side_in_map > 1e-9)) return;
    rescale_map(marker.side / side_in_map);
    scale_free_ = false;
  }

  // single unambiguous view first
  for (const auto& [kf, obs] : observers) {
    try {
      const auto two = solve_planar_pose(obs, marker.side, map_.keyframe(kf).intrinsics,
                                         {params_.ambiguity_ratio,
                                          params_.min_baseline_angle_deg});
      if (!two.ambiguous) {
        marker.pose = map_.keyframe(kf).pose.inverse().compose(two.sol1);
        marker.pose_valid = true;
        return;
      }
    } catch (const Error&) {
    }
  }
  // otherwise resolve across views
  if (observers.size() < 2) return;
  std::vector<std::pair<Pose, MarkerObs>> views;
  for (const auto& [kf, obs] : observers) views.push_back({map_.keyframe(kf).pose, obs});
  try {
    marker.pose = resolve_pose_multiview(views, marker.side,
                                         map_.keyframe(observers.begin()->first).intrinsics,
                                         {params_.ambiguity_ratio,
                                          params_.min_baseline_angle_deg});
    marker.pose_valid = true;
  } catch (const Error&) {
    // stays invalid until better views arrive
  }
}

// ---------------------------------------------------------------------------
// map point creation

std::vector<PointId> SlamPipeline::create_map_points(KeyframeId new_keyframe) {
  std::vector<PointId> created;
  const KeyFrame& kf_new = map_.keyframe(new_keyframe);
  const auto neighbors = map_.graph().neighbors(new_keyframe);

  const auto unmatched_of = [&](KeyframeId kf) {
    std::vector<std::uint32_t> out;
    const auto& bound = map_.registry().points_in_keyframe(kf);
    const auto& keyframe = map_.keyframe(kf);
    for (std::uint32_t i = 0; i < keyframe.keypoints.size(); ++i)
      if (!bound.count(i)) out.push_back(i);
    return out;
  };

  auto unmatched_new = unmatched_of(new_keyframe);
  for (const auto neighbor : neighbors) {
    if (unmatched_new.empty()) break;
    const KeyFrame& kf_n = map_.keyframe(neighbor);
    const auto unmatched_n = unmatched_of(neighbor);
    if (unmatched_n.empty()) continue;

    // relative geometry and epipolar line scale
    const Pose relative = kf_n.pose.compose(kf_new.pose.inverse());  // new cam -> n cam
    const Mat3 essential = skew(relative.translation()) * relative.rotation_matrix();
    const double focal = 0.5 * (kf_n.intrinsics.fx + kf_n.intrinsics.fy);

    std::vector<Descriptor> descs_new, descs_n;
    for (const auto idx : unmatched_new) descs_new.push_back(kf_new.keypoints[idx].descriptor);
    for (const auto idx : unmatched_n) descs_n.push_back(kf_n.keypoints[idx].descriptor);
    const auto matches = match_descriptor_sets(
        descs_new, descs_n, MatchParams{params_.ratio_test, params_.tau_d});

    std::vector<std::uint32_t> still_unmatched;
    std::set<std::uint32_t> consumed;
    for (const auto& [a, b] : matches) {
      const std::uint32_t idx_new = unmatched_new[a];
      const std::uint32_t idx_n = unmatched_n[b];
      const Vec2 n_new = kf_new.intrinsics.undistort(kf_new.keypoints[idx_new].pixel);
      const Vec2 n_n = kf_n.intrinsics.undistort(kf_n.keypoints[idx_n].pixel);

      // epipolar gate at level-0 pixel scale
      const Vec3 line = essential * Vec3(n_new.x(), n_new.y(), 1.0);
      const double norm = line.head<2>().norm();
      if (norm < 1e-12) continue;
      const double dist_px =
          std::abs(Vec3(n_n.x(), n_n.y(), 1.0).dot(line)) / norm * focal;
      if (dist_px > params_.epipolar_px) continue;

      const auto x = triangulate_two_view(kf_new.pose, kf_n.pose, n_new, n_n);
      if (!x || !x->allFinite()) continue;
      const Vec3 in_new = kf_new.pose.apply(*x);
      const Vec3 in_n = kf_n.pose.apply(*x);
      if (in_new.z() <= 0.0 || in_n.z() <= 0.0) continue;

      // parallax
      const Vec3 ray_new = (*x - kf_new.pose.center()).normalized();
      const Vec3 ray_n = (*x - kf_n.pose.center()).normalized();
      const double parallax =
          std::acos(std::clamp(ray_new.dot(ray_n), -1.0, 1.0)) * 180.0 / M_PI;
      if (parallax < params_.min_parallax_deg) continue;

      // reprojection
      const auto px_new = try_project(kf_new.pose, *x, kf_new.intrinsics);
      const auto px_n = try_project(kf_n.pose, *x, kf_n.intrinsics);
      if (!px_new || !px_n) continue;
      if ((*px_new - kf_new.keypoints[idx_new].pixel).norm() >
              params_.triangulation_reproj_px ||
          (*px_n - kf_n.keypoints[idx_n].pixel).norm() > params_.triangulation_reproj_px)
        continue;

      MapPoint point;
      point.position = *x;
      point.stability = PointStability::provisional;
      point.created_at_insertion = map_.keyframe_insertions();
      point.times_predicted = 1;
      point.times_matched = 1;
      const PointId pid = map_.add_point(point);
      map_.add_point_observation(pid, new_keyframe, idx_new);
      map_.add_point_observation(pid, neighbor, idx_n);
      map_.refresh_point_derived(pid);
      created.push_back(pid);
      consumed.insert(idx_new);
    }
    for (const auto idx : unmatched_new)
      if (!consumed.count(idx)) still_unmatched.push_back(idx);
    unmatched_new = std::move(still_unmatched);
  }
  return created;
}

// ---------------------------------------------------------------------------
// survival

void SlamPipeline::apply_survival_policy(const CorrespondenceSet& corr,
                                         const TrackingResult& result) {
  std::set<PointId> matched;
  for (std::size_t i = 0; i < corr.matches.size(); ++i)
    if (result.point_inliers[i]) matched.insert(corr.matches[i].first);

  std::vector<PointId> doomed;
  for (const auto pid : corr.predicted_visible) {
    if (!map_.points().contains(pid)) continue;
    MapPoint& p = map_.point(pid);
    ++p.times_predicted;
    if (matched.count(pid)) ++p.times_matched;
    if (p.times_predicted < static_cast<std::uint32_t>(params_.survival_min_predictions))
      continue;
    const double ratio =
        static_cast<double>(p.times_matched) / static_cast<double>(p.times_predicted);
    const double threshold =
        p.stability == PointStability::provisional ? 2.0 / 3.0 : 1.0 / 3.0;
    if (ratio < threshold) doomed.push_back(pid);
  }
  for (const auto pid : doomed) map_.remove_point(pid);
}

// ---------------------------------------------------------------------------
// culling

std::set<KeyframeId> SlamPipeline::protected_keyframes() const {
  std::set<KeyframeId> out;
  for (const auto mid : map_.markers().ids()) {
    const auto& observers = map_.registry().marker_observers(mid);
    if (observers.size() <= 3) {
      for (const auto& [kf, obs] : observers) out.insert(kf);
      continue;
    }
    std::vector<KeyframeId> ids;
    for (const auto& [kf, obs] : observers) ids.push_back(kf);
    // the three observers with the largest summed pairwise distance
    double best = -1.0;
    std::array<KeyframeId, 3> pick{ids[0], ids[1], ids[2]};
    for (std::size_t a = 0; a < ids.size(); ++a) {
      const Vec3 ca = map_.keyframe(ids[a]).pose.center();
      for (std::size_t b = a + 1; b < ids.size(); ++b) {
        const Vec3 cb = map_.keyframe(ids[b]).pose.center();
        for (std::size_t c = b + 1; c < ids.size(); ++c) {
          const Vec3 cc = map_.keyframe(ids[c]).pose.center();
          const double spread =
              (ca - cb).norm() + (ca - cc).norm() + (cb - cc).norm();
          if (spread > best) {
            best = spread;
            pick = {ids[a], ids[b], ids[c]};
          }
        }
      }
    }
    for (const auto kf : pick) out.insert(kf);
  }
  return out;
}

void SlamPipeline::cull_keyframes() {
  auto protected_set = protected_keyframes();
  if (!map_.keyframes().empty()) protected_set.insert(map_.keyframes().ids().front());
  if (reference_kf_) protected_set.insert(*reference_kf_);
  const auto all_ids = map_.keyframes().ids();
  if (!all_ids.empty()) protected_set.insert(all_ids.back());

  std::vector<KeyframeId> removable;
  for (const auto kf : all_ids) {
    if (protected_set.count(kf)) continue;
    const auto& bound = map_.registry().points_in_keyframe(kf);
    if (bound.empty()) continue;
    const auto& keyframe = map_.keyframe(kf);
    std::size_t redundant = 0;
    for (const auto& [idx, pid] : bound) {
      const int level = keyframe.keypoints[idx].level;
      int better_observers = 0;
      for (const auto& [other, other_idx] : map_.registry().point_observers(pid)) {
        if (other == kf) continue;
        if (map_.keyframe(other).keypoints[other_idx].level <= level) ++better_observers;
      }
      if (better_observers >= 3) ++redundant;
    }
    const double percent = 100.0 * static_cast<double>(redundant) / bound.size();
    if (percent >= params_.tau_c) removable.push_back(kf);
  }

  for (const auto kf : removable) {
    map_.remove_keyframe(kf);
    // drop points that lost all support
    std::vector<PointId> orphans;
    for (const auto pid : map_.points().ids())
      if (map_.registry().point_observers(pid).empty()) orphans.push_back(pid);
    for (const auto pid : orphans) map_.remove_point(pid);
  }
}

// ---------------------------------------------------------------------------
// loops

std::optional<MarkerLoopDetection> SlamPipeline::detect_marker_loop(
    const Frame& frame, const CorrespondenceSet& corr, const Pose& tracked_pose) const {
  if (corr.loop_markers.empty() || !reference_kf_) return std::nullopt;

  // gather the loop markers' observations in this frame
  std::vector<CornerConstraint> constraints;
  std::optional<Pose> initial;
  int unambiguous = 0;
  for (const auto mid : corr.loop_markers) {
    const Marker& marker = map_.marker(mid);
    for (const auto& det : frame.marker_detections) {
      if (det.marker_id != marker.id) continue;
      for (int c = 0; c < 4; ++c)
        constraints.push_back({Pose::identity(), marker.pose.apply(marker.corners_local[c]),
                               det.corners_px[c]});
      try {
        const auto two = solve_planar_pose(det, marker.side, frame.intrinsics,
                                           {params_.ambiguity_ratio,
                                            params_.min_baseline_angle_deg});
        if (!two.ambiguous) ++unambiguous;
        if (!initial) initial = two.sol1.compose(marker.pose.inverse());
      } catch (const Error&) {
      }
    }
  }
  if (!initial) return std::nullopt;
  // a single ambiguous resighting cannot pin the loop pose; wait
  if (unambiguous == 0 && corr.loop_markers.size() < 2) return std::nullopt;

  auto [loop_pose, cost] =
      refine_pose_on_corners(*initial, constraints, frame.intrinsics, 30);
  const double rmse = std::sqrt(cost / static_cast<double>(constraints.size()));
  if (rmse > params_.pnp_inlier_px) return std::nullopt;

  // earliest keyframe observing any loop marker anchors the trusted end
  KeyframeId anchor = *reference_kf_;
  bool have_anchor = false;
  for (const auto mid : corr.loop_markers) {
    for (const auto& [kf, obs] : map_.registry().marker_observers(mid)) {
      if (!have_anchor || kf < anchor) {
        anchor = kf;
        have_anchor = true;
      }
      break;  // observers are id-sorted; first is the earliest
    }
  }
  if (!have_anchor) return std::nullopt;

  MarkerLoopDetection detection;
  detection.loop_pose = loop_pose;
  detection.drift = SimTransform::from_pose(loop_pose.inverse().compose(tracked_pose));
  detection.chain = map_.graph().shortest_path(anchor, *reference_kf_);
  if (detection.chain.empty()) detection.chain = {*reference_kf_};
  return detection;
}

std::optional<Pose> SlamPipeline::pnp_against_keyframe(
    const Frame& frame, KeyframeId candidate,
    std::vector<std::pair<std::uint32_t, PointId>>* accepted_matches) {
  std::vector<PointId> point_ids;
  std::vector<Descriptor> point_descs;
  for (const auto& [idx, pid] : map_.registry().points_in_keyframe(candidate)) {
    point_ids.push_back(pid);
    point_descs.push_back(map_.point(pid).rep_descriptor);
  }
  if (static_cast<int>(point_ids.size()) < params_.loop_min_matches) return std::nullopt;

  std::vector<Descriptor> frame_descs;
  for (const auto& kp : frame.keypoints) frame_descs.push_back(kp.descriptor);
  const auto matches = match_descriptor_sets(
      frame_descs, point_descs, MatchParams{params_.ratio_test, params_.tau_d});
  if (static_cast<int>(matches.size()) < params_.loop_min_matches) return std::nullopt;

  std::vector<Vec3> points3d;
  std::vector<Vec2> pixels;
  std::vector<std::pair<std::uint32_t, PointId>> pairs;
  for (const auto& [kp_idx, point_idx] : matches) {
    points3d.push_back(map_.point(point_ids[point_idx]).position);
    pixels.push_back(frame.keypoints[kp_idx].pixel);
    pairs.push_back({kp_idx, point_ids[point_idx]});
  }

  const auto result = pnp_ransac(points3d, pixels, frame.intrinsics,
                                 params_.pnp_ransac_iters, params_.pnp_inlier_px,
                                 params_.pnp_min_inliers,
                                 options_.seed + 7919 * (++ransac_counter_));
  if (!result) return std::nullopt;
  if (accepted_matches) {
    accepted_matches->clear();
    for (std::size_t i = 0; i < pairs.size(); ++i)
      if (result->inliers[i]) accepted_matches->push_back(pairs[i]);
  }
  return result->pose;
}

bool SlamPipeline::detect_and_close_keypoint_loop(KeyframeId new_keyframe) {
  const auto neighbors = map_.graph().neighbors(new_keyframe);
  if (neighbors.empty() || map_.database().size() < 4) return false;

  const KeyFrame& kf = map_.keyframe(new_keyframe);
  std::vector<Descriptor> query;
  for (const auto& kp : kf.keypoints) query.push_back(kp.descriptor);
  if (query.empty()) return false;

  double s_min = std::numeric_limits<double>::infinity();
  for (const auto n : neighbors)
    s_min = std::min(s_min, map_.database().similarity(query, n));

  std::set<KeyframeId> exclude(neighbors.begin(), neighbors.end());
  exclude.insert(new_keyframe);
  const auto candidates = map_.database().query(query, exclude, s_min);

  int examined = 0;
  for (const auto& candidate : candidates) {
    if (++examined > params_.max_loop_candidates) break;

    std::vector<std::pair<std::uint32_t, PointId>> accepted;
    const auto pose = pnp_against_keyframe(kf, candidate.keyframe, &accepted);
    if (!pose) continue;

    // merge duplicate points: the new side's point fuses into the loop side's
    std::vector<Vec3> from_positions, to_positions;
    const auto& bound = map_.registry().points_in_keyframe(new_keyframe);
    std::vector<std::pair<PointId, PointId>> merges;
    for (const auto& [kp_idx, old_point] : accepted) {
      auto it = bound.find(kp_idx);
      if (it != bound.end() && it->second != old_point &&
          map_.points().contains(it->second) && map_.points().contains(old_point)) {
        from_positions.push_back(map_.point(it->second).position);
        to_positions.push_back(map_.point(old_point).position);
        merges.push_back({old_point, it->second});
      } else if (it == bound.end() && map_.points().contains(old_point)) {
        map_.add_point_observation(old_point, new_keyframe, kp_idx);
      }
    }
    for (const auto& [keep, absorb] : merges) {
      if (map_.points().contains(keep) && map_.points().contains(absorb))
        map_.merge_points(keep, absorb);
    }

    SimTransform drift =
        SimTransform::from_pose(pose->inverse().compose(map_.keyframe(new_keyframe).pose));
    if (from_positions.size() >= 3) {
      try {
        drift = align_sim3(from_positions, to_positions);
      } catch (const Error&) {
        // keep the rigid estimate
      }
    }

    auto chain = map_.graph().shortest_path(candidate.keyframe, new_keyframe);
    if (chain.empty()) chain = {new_keyframe};
    sim3_loop_correct(map_, chain, drift);
    run_global_bundle_adjustment();
    return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// relocalization

std::optional<Pose> SlamPipeline::relocalize(const Frame& frame) {
  // markers first
  double best_error = std::numeric_limits<double>::infinity();
  std::optional<Pose> marker_pose;
  std::optional<MarkerId> marker_used;
  for (const auto& det : frame.marker_detections) {
    const auto mid = map_.marker_by_fiducial(det.marker_id);
    if (!mid || !map_.marker(*mid).pose_valid) continue;
    const Marker& marker = map_.marker(*mid);
    try {
      const auto two = solve_planar_pose(det, marker.side, frame.intrinsics,
                                         {params_.ambiguity_ratio,
                                          params_.min_baseline_angle_deg});
      if (two.ambiguous) continue;
      if (two.e1 < best_error) {
        best_error = two.e1;
        marker_pose = two.sol1.compose(marker.pose.inverse());
        marker_used = *mid;
      }
    } catch (const Error&) {
    }
  }

  const auto refine = [&](const Pose& guess, KeyframeId anchor) -> std::optional<Pose> {
    reference_kf_ = anchor;
    auto corr = find_correspondences(frame, guess);
    corr.problem.initial_pose = guess;
    const int constraints = static_cast<int>(corr.problem.point_matches.size()) +
                            4 * static_cast<int>(corr.problem.marker_matches.size());
    if (constraints < 4) return std::nullopt;
    try {
      const auto result = solve_tracking(corr.problem);
      if (!tracking_succeeded(result)) return std::nullopt;
      update_reference_keyframe(corr, result);
      last_matches_.clear();
      for (std::size_t i = 0; i < corr.matches.size(); ++i)
        if (result.point_inliers[i]) last_matches_.push_back(corr.matches[i].first);
      return result.pose;
    } catch (const Error&) {
      return std::nullopt;
    }
  };

  if (marker_pose && marker_used) {
    const auto& observers = map_.registry().marker_observers(*marker_used);
    if (!observers.empty()) {
      const auto pose = refine(*marker_pose, observers.begin()->first);
      if (pose) return pose;
    }
  }

  // keypoint path: recognition database + PnP
  if (!frame.keypoints.empty() && map_.database().size() > 0) {
    std::vector<Descriptor> query;
    for (const auto& kp : frame.keypoints) query.push_back(kp.descriptor);
    const auto candidates = map_.database().query(query, {}, params_.reloc_min_score);
    int examined = 0;
    for (const auto& candidate : candidates) {
      if (++examined > params_.max_loop_candidates) break;
      const auto pnp = pnp_against_keyframe(frame, candidate.keyframe, nullptr);
      if (!pnp) continue;
      const auto pose = refine(*pnp, candidate.keyframe);
      if (pose) return pose;
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// bundle adjustment plumbing

double SlamPipeline::ba_marker_weight(std::size_t point_obs, std::size_t marker_obs) const {
  if (marker_obs == 0) return 1.0;
  const double balance =
      static_cast<double>(point_obs) / (4.0 * static_cast<double>(marker_obs));
  return std::clamp(balance, params_.ba_marker_weight_min, params_.ba_marker_weight_max);
}

namespace {

BundleProblem build_problem(const WorldMap& map, const std::set<KeyframeId>& variable,
                            std::set<KeyframeId> fixed, const PipelineParams& params,
                            double marker_weight_min, double marker_weight_max,
                            ProblemIndex* index) {
  BundleProblem problem;
  problem.pyramid = map.pyramid;

  // points observed by the variable keyframes, with at least two observers
  std::set<PointId> points;
  std::set<MarkerId> markers;
  for (const auto kf : variable) {
    for (const auto& [idx, pid] : map.registry().points_in_keyframe(kf))
      if (map.registry().point_observers(pid).size() >= 2) points.insert(pid);
    for (const auto& [mid, obs] : map.registry().markers_in_keyframe(kf))
      if (map.marker(mid).pose_valid) markers.insert(mid);
  }
  // boundary: outside observers become fixed anchors
  for (const auto pid : points)
    for (const auto& [kf, idx] : map.registry().point_observers(pid))
      if (!variable.count(kf)) fixed.insert(kf);
  for (const auto mid : markers)
    for (const auto& [kf, obs] : map.registry().marker_observers(mid))
      if (!variable.count(kf)) fixed.insert(kf);

  std::map<KeyframeId, std::uint32_t> kf_index;
  for (const auto kf : variable) {
    kf_index[kf] = static_cast<std::uint32_t>(index->keyframes.size());
    index->keyframes.push_back(kf);
    problem.keyframe_poses.push_back(map.keyframe(kf).pose);
    problem.keyframe_fixed.push_back(0);
  }
  for (const auto kf : fixed) {
    if (kf_index.count(kf)) continue;
    kf_index[kf] = static_cast<std::uint32_t>(index->keyframes.size());
    index->keyframes.push_back(kf);
    problem.keyframe_poses.push_back(map.keyframe(kf).pose);
    problem.keyframe_fixed.push_back(1);
  }
  if (std::count(problem.keyframe_fixed.begin(), problem.keyframe_fixed.end(), 1) == 0 &&
      !problem.keyframe_fixed.empty())
    problem.keyframe_fixed[0] = 1;  // gauge anchor

  std::map<PointId, std::uint32_t> point_index;
  for (const auto pid : points) {
    point_index[pid] = static_cast<std::uint32_t>(index->points.size());
    index->points.push_back(pid);
    problem.points.push_back(map.point(pid).position);
  }
  std::map<MarkerId, std::uint32_t> marker_index;
  for (const auto mid : markers) {
    marker_index[mid] = static_cast<std::uint32_t>(index->markers.size());
    index->markers.push_back(mid);
    problem.marker_poses.push_back(map.marker(mid).pose);
    problem.marker_fixed.push_back(0);
    problem.marker_sides.push_back(map.marker(mid).side);
  }

  bool have_intrinsics = false;
  for (const auto& [kf, kf_idx] : kf_index) {
    if (!have_intrinsics) {
      problem.intrinsics = map.keyframe(kf).intrinsics;
      have_intrinsics = true;
    }
    const auto& keyframe = map.keyframe(kf);
    for (const auto& [kp_idx, pid] : map.registry().points_in_keyframe(kf)) {
      auto it = point_index.find(pid);
      if (it == point_index.end()) continue;
      // skip observations that are currently invalid
      const auto px = try_project(keyframe.pose, map.point(pid).position, keyframe.intrinsics);
      if (!px) continue;
      BundlePointObs obs;
      obs.keyframe = kf_idx;
      obs.point = it->second;
      obs.pixel = keyframe.keypoints[kp_idx].pixel;
      obs.level = keyframe.keypoints[kp_idx].level;
      problem.point_obs.push_back(obs);
    }
    for (const auto& [mid, det] : map.registry().markers_in_keyframe(kf)) {
      auto it = marker_index.find(mid);
      if (it == marker_index.end()) continue;
      bool valid = true;
      const Marker& marker = map.marker(mid);
      for (int c = 0; c < 4 && valid; ++c) {
        const auto px = try_project(keyframe.pose, marker.pose.apply(marker.corners_local[c]),
                                    keyframe.intrinsics);
        if (!px) valid = false;
      }
      if (!valid) continue;
      BundleMarkerObs obs;
      obs.keyframe = kf_idx;
      obs.marker = it->second;
      obs.corners_px = det.corners_px;
      problem.marker_obs.push_back(obs);
    }
  }

  if (!problem.marker_obs.empty()) {
    const double balance = static_cast<double>(problem.point_obs.size()) /
                           (4.0 * static_cast<double>(problem.marker_obs.size()));
    problem.marker_weight = std::clamp(balance, marker_weight_min, marker_weight_max);
  }
  (void)params;
  return problem;
}

void write_back(WorldMap& map, const BundleProblem& problem, const ProblemIndex& index) {
  for (std::size_t i = 0; i < index.keyframes.size(); ++i) {
    if (problem.keyframe_fixed[i]) continue;
    map.keyframe(index.keyframes[i]).pose = problem.keyframe_poses[i];
  }
  for (std::size_t i = 0; i < index.points.size(); ++i)
    map.point(index.points[i]).position = problem.points[i];
  for (std::size_t i = 0; i < index.markers.size(); ++i)
    map.marker(index.markers[i]).pose = problem.marker_poses[i];
}

}  // namespace

void SlamPipeline::run_local_bundle_adjustment(KeyframeId center) {
  std::set<KeyframeId> variable{center};
  for (const auto n : map_.graph().neighbors(center)) variable.insert(n);

  ProblemIndex index;
  BundleProblem problem =
      build_problem(map_, variable, {}, params_, params_.ba_marker_weight_min,
                    params_.ba_marker_weight_max, &index);
  if (problem.point_obs.empty() && problem.marker_obs.empty()) return;
  BundleOptions options;
  options.max_iterations = params_.local_ba_iters;
  try {
    bundle_adjust(problem, options);
    write_back(map_, problem, index);
  } catch (const Error&) {
    // an inconsistent local problem is left to the next global pass
  }
}

void SlamPipeline::run_global_bundle_adjustment() {
  std::set<KeyframeId> variable;
  for (const auto kf : map_.keyframes().ids()) variable.insert(kf);
  if (variable.empty()) return;

  ProblemIndex index;
  BundleProblem problem =
      build_problem(map_, variable, {}, params_, params_.ba_marker_weight_min,
                    params_.ba_marker_weight_max, &index);
  if (problem.point_obs.empty() && problem.marker_obs.empty()) return;
  BundleOptions options;
  options.max_iterations = params_.global_ba_iters;
  try {
    bundle_adjust(problem, options);
    write_back(map_, problem, index);
  } catch (const Error&) {
  }
}

// ---------------------------------------------------------------------------
// state handlers

void SlamPipeline::handle_initialization(const Frame& frame, FrameSummary& summary) {
  summary.status = TrackStatus::uninitialized;
  if (!init_.first_frame) {
    init_.first_frame = frame;
    return;
  }
  const Frame& f0 = *init_.first_frame;

  std::optional<MarkerInitResult> marker_init;
  if (options_.use_markers) {
    try {
      marker_init = initialize_from_markers(f0, frame, params_.marker_side,
                                            frame.intrinsics,
                                            {params_.ambiguity_ratio,
                                             params_.min_baseline_angle_deg});
    } catch (const Error&) {
    }
  }
  std::optional<TwoViewInit> kp_init;
  if (options_.use_keypoints) {
    TwoViewParams tv;
    tv.ratio = params_.ratio_test;
    tv.tau_d = params_.tau_d;
    tv.min_matches = params_.init_min_matches;
    tv.min_triangulated = params_.init_min_triangulated;
    tv.min_parallax_deg = params_.min_parallax_deg;
    kp_init = initialize_two_view(f0, frame, tv, options_.seed + 31 * (++ransac_counter_));
  }

  if (!marker_init && !kp_init) {
    if (++init_.attempts >= params_.init_attempts) {
      init_.first_frame = frame;  // the first frame's role moves forward
      init_.attempts = 0;
    }
    return;
  }

  // seed the map; the marker path wins when both succeed
  Frame kf0_frame = f0;
  kf0_frame.pose = Pose::identity();
  Frame kf1_frame = frame;
  scale_free_ = !marker_init;
  kf1_frame.pose = marker_init ? marker_init->f1_pose : kp_init->f1_pose;

  const KeyframeId kf0 = map_.add_keyframe(kf0_frame);
  const KeyframeId kf1 = map_.add_keyframe(kf1_frame);

  if (marker_init) {
    for (const auto& [fid, pose] : marker_init->marker_poses) {
      Marker marker = make_marker(fid, params_.marker_side);
      marker.pose = pose;
      marker.pose_valid = true;
      map_.add_marker(marker);
    }
  }
  register_markers(kf0, kf0_frame);
  register_markers(kf1, kf1_frame);

  if (kp_init && options_.use_keypoints) {
    // triangulated structure; in the marker path recompute with the metric
    // relative pose instead of the scale-free one
    if (marker_init) {
      std::vector<Descriptor> d0, d1;
      for (const auto& kp : f0.keypoints) d0.push_back(kp.descriptor);
      for (const auto& kp : frame.keypoints) d1.push_back(kp.descriptor);
      const auto matches = match_descriptor_sets(
          d0, d1, MatchParams{params_.ratio_test, params_.tau_d});
      for (const auto& [i0, i1] : matches) {
        const Vec2 n0 = f0.intrinsics.undistort(f0.keypoints[i0].pixel);
        const Vec2 n1 = frame.intrinsics.undistort(frame.keypoints[i1].pixel);
        const auto x =
            triangulate_two_view(Pose::identity(), marker_init->f1_pose, n0, n1);
        if (!x) continue;
        const Vec3 in0 = *x;
        const Vec3 in1 = marker_init->f1_pose.apply(*x);
        if (in0.z() <= 0 || in1.z() <= 0) continue;
        const auto px0 = try_project(Pose::identity(), *x, f0.intrinsics);
        const auto px1 = try_project(marker_init->f1_pose, *x, frame.intrinsics);
        if (!px0 || !px1) continue;
        if ((*px0 - f0.keypoints[i0].pixel).norm() > params_.triangulation_reproj_px ||
            (*px1 - frame.keypoints[i1].pixel).norm() > params_.triangulation_reproj_px)
          continue;
        MapPoint point;
        point.position = *x;
        point.created_at_insertion = map_.keyframe_insertions();
        const PointId pid = map_.add_point(point);
        map_.add_point_observation(pid, kf0, i0);
        map_.add_point_observation(pid, kf1, i1);
        map_.refresh_point_derived(pid);
      }
    } else {
      for (const auto& lm : kp_init->landmarks) {
        MapPoint point;
        point.position = lm.position;
        point.created_at_insertion = map_.keyframe_insertions();
        const PointId pid = map_.add_point(point);
        map_.add_point_observation(pid, kf0, lm.index0);
        map_.add_point_observation(pid, kf1, lm.index1);
        map_.refresh_point_derived(pid);
      }
    }
  }

  if (scale_free_ && map_.points().size() > 0) {
    // normalize the arbitrary scale so thresholds behave predictably
    std::vector<double> depths;
    for (const auto pid : map_.points().ids())
      depths.push_back(map_.point(pid).position.norm());
    std::nth_element(depths.begin(), depths.begin() + depths.size() / 2, depths.end());
    const double median = depths[depths.size() / 2];
    if (median > 1e-9) rescale_map(2.0 / median);
  }

  // invalid markers may already be resolvable from the two seed views
  std::vector<MarkerId> pending;
  for (const auto mid : map_.markers().ids())
    if (!map_.marker(mid).pose_valid) pending.push_back(mid);
  for (const auto mid : pending) bootstrap_marker_pose(mid);

  run_global_bundle_adjustment();

  mode_ = PipelineMode::tracking;
  reference_kf_ = kf1;
  last_pose_ = map_.keyframe(kf1).pose;
  last_matches_.clear();
  for (const auto& [idx, pid] : map_.registry().points_in_keyframe(kf1))
    last_matches_.push_back(pid);

  summary.status = TrackStatus::tracked;
  summary.pose = last_pose_;
  summary.inserted_keyframe = true;
  init_.first_frame.reset();
  init_.attempts = 0;
}

void SlamPipeline::handle_tracking(const Frame& frame, FrameSummary& summary) {
  auto corr = find_correspondences(frame, last_pose_);
  const int constraints = static_cast<int>(corr.problem.point_matches.size()) +
                          4 * static_cast<int>(corr.problem.marker_matches.size());
  if (constraints < 4) {
    mode_ = PipelineMode::lost;
    summary.status = TrackStatus::lost;
    return;
  }

  TrackingResult result;
  try {
    result = solve_tracking(corr.problem);
  } catch (const Error&) {
    mode_ = PipelineMode::lost;
    summary.status = TrackStatus::lost;
    return;
  }
  if (!tracking_succeeded(result)) {
    mode_ = PipelineMode::lost;
    summary.status = TrackStatus::lost;
    return;
  }

  summary.status = TrackStatus::tracked;
  summary.pose = result.pose;
  summary.matched_points = result.point_inlier_count;
  summary.matched_markers = result.marker_inlier_count;

  if (!options_.frozen) apply_survival_policy(corr, result);

  if (!options_.frozen) {
    const auto loop = detect_marker_loop(frame, corr, result.pose);
    if (loop) {
      const KeyframeId kf = insert_keyframe(frame, corr, result);
      auto chain = loop->chain;
      chain.push_back(kf);
      sim3_loop_correct(map_, chain, loop->drift);
      run_global_bundle_adjustment();
      summary.marker_loop = true;
      summary.inserted_keyframe = true;
      summary.pose = map_.keyframe(kf).pose;
      reference_kf_ = kf;
      last_pose_ = summary.pose;
      last_matches_.clear();
      for (const auto& [idx, pid] : map_.registry().points_in_keyframe(kf))
        last_matches_.push_back(pid);
      return;
    }

    const auto decision = should_insert_keyframe(frame, result, corr);
    if (decision.insert) {
      const KeyframeId kf = insert_keyframe(frame, corr, result);
      summary.inserted_keyframe = true;
      summary.insertion_rule = decision.rule;
      create_map_points(kf);
      cull_keyframes();
      bool closed = false;
      if (options_.keypoint_loop_closure && options_.use_keypoints)
        closed = detect_and_close_keypoint_loop(kf);
      summary.keypoint_loop = closed;
      if (!closed)
        run_local_bundle_adjustment(kf);
      if (map_.keyframes().contains(kf)) {
        summary.pose = map_.keyframe(kf).pose;
        reference_kf_ = kf;
      }
    }
  }

  update_reference_keyframe(corr, result);
  last_pose_ = summary.pose;
  last_matches_.clear();
  for (std::size_t i = 0; i < corr.matches.size(); ++i)
    if (result.point_inliers[i] && map_.points().contains(corr.matches[i].first))
      last_matches_.push_back(corr.matches[i].first);
}

void SlamPipeline::handle_lost(const Frame& frame, FrameSummary& summary) {
  const auto pose = relocalize(frame);
  if (!pose) {
    summary.status = TrackStatus::lost;
    return;
  }
  mode_ = PipelineMode::tracking;
  summary.status = TrackStatus::tracked;
  summary.relocalized = true;
  summary.pose = *pose;
  last_pose_ = *pose;
}

}  // namespace kmslam
