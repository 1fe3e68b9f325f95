#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "kmslam/binary_io.hpp"
#include "kmslam/sim_world.hpp"

using namespace kmslam;

namespace {

WorldConfig small_config() {
  auto c = scenario_config("markerless", 7);
  c.frame_count = 40;
  c.landmark_count = 300;
  return c;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("noise-free observations are exact projections of their landmarks") {
  auto config = small_config();
  config.pixel_sigma = 0.0;
  config.bitflip_prob = 0.0;
  config.dropout_prob = 0.0;
  config.marker_count = 4;
  config.corner_sigma = 0.0;
  const auto seq = generate(config);
  REQUIRE(!seq.frames.empty());
  std::size_t checked = 0;
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    const auto& frame = seq.frames[i];
    for (std::size_t k = 0; k < frame.keypoints.size(); ++k) {
      const auto& lm = seq.landmarks[frame.keypoint_landmark[k]];
      const auto px = project(seq.gt_poses[i], lm.position, config.intrinsics);
      CHECK((px - frame.keypoints[k].pixel).norm() < 1e-12);
      CHECK(frame.keypoints[k].descriptor == lm.descriptor);
      ++checked;
    }
    for (const auto& det : frame.markers) {
      const auto& truth = seq.markers[det.marker_id];
      const auto corners = canonical_corners(truth.side);
      for (int c = 0; c < 4; ++c) {
        const auto px =
            project(seq.gt_poses[i], truth.pose.apply(corners[c]), config.intrinsics);
        CHECK((px - det.corners_px[c]).norm() < 1e-12);
      }
    }
  }
  CHECK(checked > 800);
}

TEST_CASE("same seed gives identical sequences, different seeds differ") {
  const auto config = small_config();
  const auto a = generate(config);
  const auto b = generate(config);
  REQUIRE(a.frames.size() == b.frames.size());
  for (std::size_t i = 0; i < a.frames.size(); ++i) {
    REQUIRE(a.frames[i].keypoints.size() == b.frames[i].keypoints.size());
    for (std::size_t k = 0; k < a.frames[i].keypoints.size(); ++k) {
      CHECK(a.frames[i].keypoints[k].pixel == b.frames[i].keypoints[k].pixel);
      CHECK(a.frames[i].keypoints[k].descriptor == b.frames[i].keypoints[k].descriptor);
    }
  }
  auto other = config;
  other.seed = 8;
  const auto c = generate(other);
  bool any_difference = false;
  for (std::size_t i = 0; i < std::min(a.frames.size(), c.frames.size()); ++i)
    if (a.frames[i].keypoints.size() != c.frames[i].keypoints.size()) any_difference = true;
  CHECK(any_difference);
}

TEST_CASE("pixel noise has the configured sigma") {
  auto config = small_config();
  config.frame_count = 120;
  config.landmark_count = 250;
  config.pixel_sigma = 0.5;
  const auto seq = generate(config);
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    const auto& frame = seq.frames[i];
    for (std::size_t k = 0; k < frame.keypoints.size(); ++k) {
      const auto& lm = seq.landmarks[frame.keypoint_landmark[k]];
      const auto px = project(seq.gt_poses[i], lm.position, config.intrinsics);
      const Vec2 r = frame.keypoints[k].pixel - px;
      acc += r.squaredNorm();
      n += 2;
    }
  }
  REQUIRE(n > 5000);
  const double sigma = std::sqrt(acc / n);
  CHECK(sigma == doctest::Approx(0.5).epsilon(0.05));
}

TEST_CASE("sequence file round trip is byte-identical") {
  auto config = small_config();
  config.marker_count = 3;
  config.drift.segments = 4;
  config.drift.translation_per_segment = 0.05;
  const auto seq = generate(config);
  const auto path = temp_path("kmslam_seq_test.bin");
  save_sequence(seq, path);
  const auto first = read_file(path);
  const auto loaded = load_sequence(path);
  CHECK(loaded.frames.size() == seq.frames.size());
  CHECK(loaded.landmarks.size() == seq.landmarks.size());
  CHECK(loaded.markers.size() == seq.markers.size());
  CHECK(loaded.segment_warps.size() == seq.segment_warps.size());
  save_sequence(loaded, path);
  const auto second = read_file(path);
  CHECK(first == second);
  std::filesystem::remove(path);
}

TEST_CASE("scenario presets exist and unknown names fail") {
  for (const auto& name : scenario_names()) {
    const auto config = scenario_config(name, 3);
    CHECK(config.frame_count > 0);
  }
  CHECK_THROWS_AS(scenario_config("no_such_world"), Error);
}

TEST_CASE("invalid configs are rejected") {
  auto c = small_config();
  c.pixel_sigma = -1.0;
  CHECK_THROWS_AS(generate(c), Error);
  c = small_config();
  c.dropout_prob = 1.5;
  CHECK_THROWS_AS(generate(c), Error);
  c = small_config();
  c.frame_count = 1;
  CHECK_THROWS_AS(generate(c), Error);
}

TEST_CASE("marker_only worlds carry no keypoints, markerless no markers") {
  const auto mo = generate(scenario_config("marker_only", 5));
  for (const auto& f : mo.frames) CHECK(f.keypoints.empty());
  std::size_t marker_obs = 0;
  for (const auto& f : mo.frames) marker_obs += f.markers.size();
  CHECK(marker_obs > 200);

  const auto ml = generate(scenario_config("markerless", 5));
  for (const auto& f : ml.frames) CHECK(f.markers.empty());
}

TEST_CASE("blackout interval carries no detections") {
  auto config = scenario_config("kidnapped_camera", 5);
  config.frame_count = 150;
  config.blackout_start = 60;
  config.blackout_length = 20;
  const auto seq = generate(config);
  for (int i = 0; i < config.frame_count; ++i) {
    const bool inside = i >= 60 && i < 80;
    if (inside) {
      CHECK(seq.frames[i].keypoints.empty());
      CHECK(seq.frames[i].markers.empty());
    }
  }
  // observations resume after the blackout
  std::size_t after = 0;
  for (int i = 80; i < config.frame_count; ++i) after += seq.frames[i].keypoints.size();
  CHECK(after > 100);
}

TEST_CASE("drift warps accumulate to the configured end-of-loop offset") {
  auto config = scenario_config("loop_with_drift", 5);
  config.frame_count = 80;
  const auto seq = generate(config);
  REQUIRE(seq.segment_warps.size() == static_cast<std::size_t>(config.drift.segments));
  // warp 0 is the identity
  CHECK(seq.segment_warps[0].translation().norm() == 0.0);
  // the final accumulated warp equals the step composed segments-1 times
  const SimTransform step(config.drift.scale_per_segment,
                          so3_exp(Vec3(0, 0, config.drift.rotation_deg_per_segment * M_PI /
                                              180.0)),
                          Vec3(config.drift.translation_per_segment, 0, 0));
  SimTransform expected;
  for (int s = 1; s < config.drift.segments; ++s) expected = expected.compose(step);
  const auto& last = seq.segment_warps.back();
  CHECK((last.translation() - expected.translation()).norm() < 1e-12);
  CHECK(last.rotation().angularDistance(expected.rotation()) < 1e-12);
  // magnitude is in the configured ballpark
  CHECK(last.translation().norm() ==
        doctest::Approx((config.drift.segments - 1) * config.drift.translation_per_segment)
            .epsilon(0.05));
}

TEST_CASE("repetitive corridor clones descriptor multisets with unique marker ids") {
  const auto config = scenario_config("repetitive_corridor", 11);
  const auto seq = generate(config);
  REQUIRE(config.clone_segments == 4);
  const std::size_t per_clone = seq.landmarks.size() / 4;
  REQUIRE(per_clone * 4 == seq.landmarks.size());
  // descriptors repeat exactly per clone
  for (std::size_t i = 0; i < per_clone; ++i)
    for (int clone = 1; clone < 4; ++clone)
      CHECK(seq.landmarks[i].descriptor ==
            seq.landmarks[clone * per_clone + i].descriptor);
  // marker ids unique
  std::set<int> ids;
  for (const auto& m : seq.markers) CHECK(ids.insert(m.id).second);
  CHECK(seq.markers.size() >= 4);
}
