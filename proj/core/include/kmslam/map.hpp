#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "kmslam/descriptor.hpp"
#include "kmslam/geometry.hpp"
#include "kmslam/slot_store.hpp"

namespace kmslam {

/// One detected keypoint: pyramid level, pixel position at level-0 scale,
/// binary descriptor.
struct KeyPointObs {
  int level = 0;
  Vec2 pixel = Vec2::Zero();
  Descriptor descriptor;
};

/// One detected marker: fiducial id plus the four observed corner pixels in
/// canonical winding order.
struct MarkerObs {
  int marker_id = 0;
  std::array<Vec2, 4> corners_px{};
};

struct Frame {
  double timestamp = 0.0;
  Pose pose;  // grs -> crs; meaningful once tracked or promoted
  CameraIntrinsics intrinsics;
  std::vector<KeyPointObs> keypoints;
  std::vector<MarkerObs> marker_detections;
};

using KeyFrame = Frame;

enum class PointStability : std::uint8_t { provisional = 0, stable = 1 };

struct MapPoint {
  Vec3 position = Vec3::Zero();
  Vec3 view_dir = Vec3::UnitZ();
  Descriptor rep_descriptor;
  PointStability stability = PointStability::provisional;
  std::uint32_t times_predicted = 0;  // frames in which the point was expected visible
  std::uint32_t times_matched = 0;    // frames in which it was actually matched
  std::uint32_t created_at_insertion = 0;  // keyframe-insertion counter at creation
};

struct Marker {
  int id = 0;  // fiducial id, distinct from the slot id
  double side = 0.0;
  bool pose_valid = false;
  Pose pose;  // mrs -> grs; meaningful iff pose_valid
  std::array<Vec3, 4> corners_local{};
};

using KeyframeId = SlotId<Frame>;
using PointId = SlotId<MapPoint>;
using MarkerId = SlotId<Marker>;

/// The descriptor among the input minimizing the summed distance to all
/// others; ties broken by lowest index.
Descriptor representative_descriptor(const std::vector<Descriptor>& descriptors);

/// Normalized sum of the observing cameras' viewing axes (third column of
/// each inverse pose).
Vec3 viewing_direction(const std::vector<Pose>& observing_keyframe_poses);

/// The four marker corners in the marker's own frame, side s:
/// (s/2,-s/2,0), (s/2,s/2,0), (-s/2,s/2,0), (-s/2,-s/2,0).
std::array<Vec3, 4> canonical_corners(double side);

Marker make_marker(int fiducial_id, double side);

/// Registries of which keyframe saw which landmark. Point observations
/// record the keypoint index inside the keyframe; marker observations carry
/// the corner pixels.
class ObservationRegistry {
 public:
  bool add_point_obs(PointId p, KeyframeId k, std::uint32_t keypoint_index);
  bool remove_point_obs(PointId p, KeyframeId k);
  bool add_marker_obs(MarkerId m, KeyframeId k, const MarkerObs& obs);
  bool remove_marker_obs(MarkerId m, KeyframeId k);

  bool has_point_obs(PointId p, KeyframeId k) const;
  bool has_marker_obs(MarkerId m, KeyframeId k) const;

  const std::map<KeyframeId, std::uint32_t>& point_observers(PointId p) const;
  const std::map<std::uint32_t, PointId>& points_in_keyframe(KeyframeId k) const;
  const std::map<MarkerId, MarkerObs>& markers_in_keyframe(KeyframeId k) const;
  const std::map<KeyframeId, MarkerObs>& marker_observers(MarkerId m) const;

  std::size_t point_obs_count() const;
  std::size_t marker_obs_count() const;

 private:
  std::map<PointId, std::map<KeyframeId, std::uint32_t>> point_by_point_;
  std::map<KeyframeId, std::map<std::uint32_t, PointId>> point_by_keyframe_;
  std::map<MarkerId, std::map<KeyframeId, MarkerObs>> marker_by_marker_;
  std::map<KeyframeId, std::map<MarkerId, MarkerObs>> marker_by_keyframe_;

  static const std::map<KeyframeId, std::uint32_t> empty_point_observers_;
  static const std::map<std::uint32_t, PointId> empty_points_in_kf_;
  static const std::map<MarkerId, MarkerObs> empty_markers_in_kf_;
  static const std::map<KeyframeId, MarkerObs> empty_marker_observers_;

  friend class WorldMap;
  std::map<std::uint32_t, PointId>& mutable_points_in(KeyframeId k) {
    return point_by_keyframe_[k];
  }
};

/// Weighted covisibility graph: each shared map point adds one to an edge,
/// each shared marker adds four.
class ConnectionGraph {
 public:
  void add_weight(KeyframeId a, KeyframeId b, int delta);
  int weight(KeyframeId a, KeyframeId b) const;
  std::vector<KeyframeId> neighbors(KeyframeId k) const;
  void remove_vertex(KeyframeId k);

  std::size_t edge_count() const;
  /// Edges as ((low_id, high_id), weight), sorted.
  std::vector<std::pair<std::pair<std::uint32_t, std::uint32_t>, int>> edges() const;

  /// Breadth-first shortest hop path, deterministic over id order. Empty if
  /// disconnected.
  std::vector<KeyframeId> shortest_path(KeyframeId from, KeyframeId to) const;

  bool operator==(const ConnectionGraph& other) const { return adjacency_ == other.adjacency_; }

 private:
  std::map<std::uint32_t, std::map<std::uint32_t, int>> adjacency_;
};

/// Exact per-keyframe descriptor index. Similarity of two descriptor sets is
/// the count of mutual nearest neighbors within the distance gate, divided
/// by the smaller set size.
class RecognitionDatabase {
 public:
  explicit RecognitionDatabase(int distance_gate = 50) : distance_gate_(distance_gate) {}

  void add(KeyframeId k, std::vector<Descriptor> descriptors);
  void remove(KeyframeId k);
  bool contains(KeyframeId k) const { return entries_.count(k) > 0; }
  std::size_t size() const { return entries_.size(); }
  int distance_gate() const { return distance_gate_; }
  void set_distance_gate(int gate) { distance_gate_ = gate; }

  double similarity(const std::vector<Descriptor>& query, KeyframeId k) const;
  static double set_similarity(const std::vector<Descriptor>& a,
                               const std::vector<Descriptor>& b, int distance_gate);

  struct Candidate {
    KeyframeId keyframe;
    double score;
  };
  /// Candidates outside the exclusion set with similarity >= min_score,
  /// sorted by descending score, ties by ascending id.
  std::vector<Candidate> query(const std::vector<Descriptor>& query_descriptors,
                               const std::set<KeyframeId>& exclude, double min_score) const;

  std::vector<KeyframeId> keyframes() const;

 private:
  std::map<KeyframeId, std::vector<Descriptor>> entries_;
  int distance_gate_;
};

/// The full world state: keyframes, map points, markers, the observation
/// registries, the connection graph, and the recognition database.
///
/// Mutations are single-writer; concurrent readers are safe between
/// mutations.
class WorldMap {
 public:
  explicit WorldMap(std::uint32_t block_capacity = 4096);

  PyramidConfig pyramid;

  // --- stores ---------------------------------------------------------
  const SlotStore<KeyFrame>& keyframes() const { return keyframes_; }
  const SlotStore<MapPoint>& points() const { return points_; }
  const SlotStore<Marker>& markers() const { return markers_; }
  KeyFrame& keyframe(KeyframeId id) { return keyframes_.get(id); }
  const KeyFrame& keyframe(KeyframeId id) const { return keyframes_.get(id); }
  MapPoint& point(PointId id) { return points_.get(id); }
  const MapPoint& point(PointId id) const { return points_.get(id); }
  Marker& marker(MarkerId id) { return markers_.get(id); }
  const Marker& marker(MarkerId id) const { return markers_.get(id); }

  KeyframeId add_keyframe(Frame frame);
  void remove_keyframe(KeyframeId id);
  PointId add_point(MapPoint point);
  void remove_point(PointId id);
  MarkerId add_marker(Marker marker);
  std::optional<MarkerId> marker_by_fiducial(int fiducial_id) const;

  // --- observations ----------------------------------------------------
  bool add_point_observation(PointId p, KeyframeId k, std::uint32_t keypoint_index);
  void remove_point_observation(PointId p, KeyframeId k);
  bool add_marker_observation(MarkerId m, KeyframeId k, const MarkerObs& obs);
  const ObservationRegistry& registry() const { return registry_; }
  const ConnectionGraph& graph() const { return graph_; }
  RecognitionDatabase& database() { return database_; }
  const RecognitionDatabase& database() const { return database_; }

  /// Moves every observation of `from` onto `into` (skipping keyframes that
  /// already observe `into`), then erases `from`.
  void merge_points(PointId into, PointId from);

  /// Recomputes view direction and representative descriptor from the
  /// current observations.
  void refresh_point_derived(PointId p);

  /// Full recomputation of the connection graph; the incrementally
  /// maintained graph must always equal this.
  ConnectionGraph rebuild_graph() const;

  std::uint32_t keyframe_insertions() const { return keyframe_insertions_; }

  // --- serialization ----------------------------------------------------
  std::vector<std::uint8_t> serialize() const;
  static WorldMap deserialize(const std::vector<std::uint8_t>& bytes);
  void save(const std::string& path) const;
  static WorldMap load(const std::string& path);

 private:
  SlotStore<KeyFrame> keyframes_;
  SlotStore<MapPoint> points_;
  SlotStore<Marker> markers_;
  ObservationRegistry registry_;
  ConnectionGraph graph_;
  RecognitionDatabase database_;
  std::map<int, MarkerId> marker_index_;
  std::uint32_t keyframe_insertions_ = 0;
};

}  // namespace kmslam
