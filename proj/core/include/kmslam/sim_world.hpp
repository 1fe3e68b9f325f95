#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kmslam/descriptor.hpp"
#include "kmslam/geometry.hpp"
#include "kmslam/map.hpp"

namespace kmslam {

/// Odometry-error injection: the world is split into segments along the
/// trajectory and each segment's landmarks and markers are displaced by the
/// warp accumulated up to that segment. Locally the data stays consistent;
/// crossing the seam back into segment zero exposes the full accumulated
/// drift, which is what loop closure has to repair.
struct DriftSpec {
  int segments = 0;  // 0 disables injection
  double translation_per_segment = 0.0;  // meters, along +x
  double rotation_deg_per_segment = 0.0;  // about +z
  double scale_per_segment = 1.0;
};

enum class PathKind { circle, waypoints };

struct WorldConfig {
  std::uint64_t seed = 1;

  CameraIntrinsics intrinsics;
  PyramidConfig pyramid{1.2, 8};
  double fps = 30.0;
  int frame_count = 300;

  int landmark_count = 400;
  int marker_count = 8;
  double marker_side = 0.25;
  int clone_segments = 0;  // >0: replicate descriptors and layout per segment

  PathKind path = PathKind::circle;
  double path_radius = 3.0;   // circle path
  double wall_radius = 6.0;   // circle world: cylindrical wall with content
  double wall_height = 3.0;
  double camera_height = 1.2;
  double revolutions = 1.0;
  std::vector<Vec3> waypoints;  // waypoint path (corridor worlds)
  double corridor_width = 3.0;
  double corridor_height = 2.5;

  double pixel_sigma = 0.0;
  double corner_sigma = 0.0;
  double bitflip_prob = 0.0;
  double dropout_prob = 0.0;

  int blackout_start = -1;  // frames [start, start+length) carry no detections
  int blackout_length = 0;

  DriftSpec drift;

  double level_depth_ref = 1.0;  // depth mapped to pyramid level 0
  double max_view_angle_deg = 70.0;  // surface-normal visibility gate
};

struct LandmarkTruth {
  Vec3 position = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();
  Descriptor descriptor;
  int segment = 0;
};

struct MarkerTruth {
  int id = 0;
  double side = 0.0;
  Pose pose;  // mrs -> grs
  int segment = 0;
};

struct FrameObservations {
  double timestamp = 0.0;
  std::vector<KeyPointObs> keypoints;
  std::vector<std::uint32_t> keypoint_landmark;  // provenance, for oracles only
  std::vector<MarkerObs> markers;
};

struct ObservationSequence {
  WorldConfig config;
  std::vector<FrameObservations> frames;
  std::vector<Pose> gt_poses;  // grs -> crs per frame
  std::vector<LandmarkTruth> landmarks;
  std::vector<MarkerTruth> markers;
  std::vector<SimTransform> segment_warps;  // accumulated warp per segment

  Frame make_frame(std::size_t index) const;
};

ObservationSequence generate(const WorldConfig& config);

/// Named presets. Unknown names raise unknown_scenario.
WorldConfig scenario_config(const std::string& name, std::uint64_t seed = 1);
std::vector<std::string> scenario_names();

void save_sequence(const ObservationSequence& sequence, const std::string& path);
ObservationSequence load_sequence(const std::string& path);

/// Deterministic RNG used by the generator: uniform bits, doubles, and a
/// pinned Box-Muller gaussian, so output bytes depend only on the seed.
class SimRng {
 public:
  explicit SimRng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

  std::uint64_t bits() {
    // splitmix64
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }
  double uniform() { return static_cast<double>(bits() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double gaussian(double sigma);
  bool bernoulli(double p) { return uniform() < p; }
  Descriptor descriptor();

 private:
  std::uint64_t state_;
};

}  // namespace kmslam
