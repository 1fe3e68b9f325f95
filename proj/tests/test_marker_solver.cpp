#include <doctest.h>

#include <cmath>
#include <random>

#include "kmslam/marker_solver.hpp"

using namespace kmslam;

namespace {

std::mt19937_64 rng(99);

double uniform(double lo, double hi) {
  return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
}

double gauss(double sigma) {
  // Box-Muller, fully pinned
  const double u1 = std::max(1e-16, (static_cast<double>(rng() >> 11) * 0x1.0p-53));
  const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return sigma * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

CameraIntrinsics test_intrinsics() {
  CameraIntrinsics c;
  c.fx = c.fy = 500.0;
  c.cx = 320.0;
  c.cy = 240.0;
  c.width = 640;
  c.height = 480;
  return c;
}

/// Generates the exact corner observation of a marker with the given
/// marker->camera pose.
MarkerObs observe(const Pose& marker_to_cam, double side, const CameraIntrinsics& intr,
                  double noise_sigma = 0.0) {
  MarkerObs obs;
  obs.marker_id = 0;
  const auto local = canonical_corners(side);
  for (int i = 0; i < 4; ++i) {
    obs.corners_px[i] = project(marker_to_cam, local[i], intr);
    if (noise_sigma > 0.0)
      obs.corners_px[i] += Vec2(gauss(noise_sigma), gauss(noise_sigma));
  }
  return obs;
}

/// A random marker pose in front of the camera whose projection stays
/// within the image.
Pose random_visible_marker(double side, const CameraIntrinsics& intr, double min_z = 0.6,
                           double max_z = 4.0, double max_tilt = 1.0) {
  while (true) {
    const Vec3 axis = Vec3(uniform(-1, 1), uniform(-1, 1), uniform(-1, 1)).normalized();
    const double tilt = uniform(0.0, max_tilt);
    const double z = uniform(min_z, max_z);
    const Vec3 t(uniform(-0.3, 0.3) * z, uniform(-0.25, 0.25) * z, z);
    const Pose pose(so3_exp(axis * tilt), t);
    bool ok = true;
    for (const auto& corner : canonical_corners(side)) {
      const Vec3 pc = pose.apply(corner);
      if (pc.z() < 0.1) {
        ok = false;
        break;
      }
      const auto px = try_project(pose, corner, intr);
      if (!px || !intr.in_image(*px, 2.0)) {
        ok = false;
        break;
      }
    }
    if (ok) return pose;
  }
}

double pose_gap_rotation(const Pose& a, const Pose& b) { return a.rotation_angle_to(b); }

}  // namespace

TEST_CASE("solve_planar_pose recovers a fronto-parallel marker exactly") {
  const auto intr = test_intrinsics();
  const double side = 0.2;
  // fronto-parallel, slightly off-axis so the mirrored minimum is distinct
  const Pose truth(Quat::Identity(), Vec3(0.25, 0.15, 1.0));
  const auto obs = observe(truth, side, intr);
  const auto result = solve_planar_pose(obs, side, intr);
  CHECK(result.e1 < 1e-6);
  CHECK(pose_gap_rotation(result.sol1, truth) < 1e-4);
  CHECK((result.sol1.translation() - truth.translation()).norm() < 1e-4);
  CHECK(result.e2 / std::max(result.e1, 1e-300) > 4.0);
  CHECK_FALSE(result.ambiguous);
}

TEST_CASE("solve_planar_pose on noiseless random poses has near-zero residual") {
  const auto intr = test_intrinsics();
  const double side = 0.25;
  for (int trial = 0; trial < 1000; ++trial) {
    const Pose truth = random_visible_marker(side, intr);
    const auto obs = observe(truth, side, intr);
    const auto result = solve_planar_pose(obs, side, intr);
    CHECK(result.e1 < 1e-6);
    CHECK(pose_gap_rotation(result.sol1, truth) < 1e-4);
    CHECK((result.sol1.translation() - truth.translation()).norm() /
              truth.translation().norm() <
          1e-4);
  }
}

TEST_CASE("oblique distant marker with corner noise is usually ambiguous") {
  const auto intr = test_intrinsics();
  const double side = 0.2;
  int ambiguous_count = 0;
  for (int trial = 0; trial < 100; ++trial) {
    // far away and tilted: the classic two-minimum regime
    const double tilt = uniform(0.45, 0.75);
    const Pose truth(so3_exp(Vec3(tilt, 0, 0)), Vec3(uniform(-0.5, 0.5), 0.0, 7.0));
    const auto obs = observe(truth, side, intr, 0.5);
    try {
      const auto result = solve_planar_pose(obs, side, intr);
      if (result.ambiguous) ++ambiguous_count;
    } catch (const Error&) {
      // noise can make a distant marker degenerate; treat as ambiguous
      ++ambiguous_count;
    }
  }
  CHECK(ambiguous_count > 50);
}

TEST_CASE("solve_planar_pose rejects degenerate corners") {
  const auto intr = test_intrinsics();
  MarkerObs obs;
  obs.corners_px = {Vec2(100, 100), Vec2(200, 200), Vec2(300, 300), Vec2(400, 400)};
  CHECK_THROWS_AS(solve_planar_pose(obs, 0.2, intr), Error);
  obs.corners_px[0].x() = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(solve_planar_pose(obs, 0.2, intr), Error);
}

TEST_CASE("resolve_pose_multiview disambiguates two ambiguous views") {
  const auto intr = test_intrinsics();
  const double side = 0.2;
  int success = 0;
  for (int trial = 0; trial < 100; ++trial) {
    // marker fixed in the world, two cameras with a real baseline
    const Pose marker_world(so3_exp(Vec3(uniform(-0.3, 0.3), uniform(-0.3, 0.3), 0.0)),
                            Vec3(uniform(-0.5, 0.5), uniform(-0.5, 0.5), 3.0));
    const Pose cam0(Quat::Identity(), Vec3(0.4, 0, 0));   // camera at x=-0.4
    const Pose view1(Quat::Identity(), Vec3(-0.4, 0, 0));  // camera at x=+0.4

    const Pose m_in_0 = cam0.compose(marker_world);
    const Pose m_in_1 = view1.compose(marker_world);
    bool visible = true;
    for (const auto& corner : canonical_corners(side)) {
      const auto p0 = try_project(m_in_0, corner, intr);
      const auto p1 = try_project(m_in_1, corner, intr);
      if (!p0 || !p1 || !intr.in_image(*p0, 2) || !intr.in_image(*p1, 2)) visible = false;
    }
    REQUIRE(visible);

    std::vector<std::pair<Pose, MarkerObs>> views{
        {cam0, observe(m_in_0, side, intr)},
        {view1, observe(m_in_1, side, intr)},
    };
    const Pose resolved = resolve_pose_multiview(views, side, intr);

    // corner RMSE against the generating observations
    double cost = 0.0;
    int n = 0;
    for (const auto& [view, obs] : views) {
      const auto local = canonical_corners(side);
      for (int i = 0; i < 4; ++i) {
        cost += (project(view.compose(resolved), local[i], intr) - obs.corners_px[i])
                    .squaredNorm();
        ++n;
      }
    }
    CHECK(std::sqrt(cost / n) < 1e-6);
    CHECK(pose_gap_rotation(resolved, marker_world) < 1e-4);
    ++success;
  }
  CHECK(success == 100);
}

TEST_CASE("resolve_pose_multiview beats every per-view candidate") {
  const auto intr = test_intrinsics();
  const double side = 0.2;
  const Pose marker_world(so3_exp(Vec3(0.2, -0.1, 0.05)), Vec3(0.2, -0.1, 2.5));
  const Pose cam0 = Pose::identity();
  const Pose cam1(so3_exp(Vec3(0, -0.2, 0)), -(so3_exp(Vec3(0, -0.2, 0)) * Vec3(0.7, 0, 0)));
  std::vector<std::pair<Pose, MarkerObs>> views{
      {cam0, observe(cam0.compose(marker_world), side, intr, 0.3)},
      {cam1, observe(cam1.compose(marker_world), side, intr, 0.3)},
  };
  const Pose resolved = resolve_pose_multiview(views, side, intr);

  const auto local = canonical_corners(side);
  const auto total_cost = [&](const Pose& m) {
    double cost = 0.0;
    for (const auto& [view, obs] : views)
      for (int i = 0; i < 4; ++i) {
        const auto px = try_project(view.compose(m), local[i], intr);
        if (!px) return std::numeric_limits<double>::infinity();
        cost += (*px - obs.corners_px[i]).squaredNorm();
      }
    return cost;
  };
  const double resolved_cost = total_cost(resolved);
  for (const auto& [view, obs] : views) {
    const auto two = solve_planar_pose(obs, side, intr);
    CHECK(resolved_cost <= total_cost(view.inverse().compose(two.sol1)) + 1e-9);
    CHECK(resolved_cost <= total_cost(view.inverse().compose(two.sol2)) + 1e-9);
  }
}

TEST_CASE("resolve_pose_multiview with three noisy views is accurate") {
  const auto intr = test_intrinsics();
  const double side = 0.3;
  const Pose marker_world(so3_exp(Vec3(0.1, 0.2, -0.1)), Vec3(0.0, 0.0, 2.0));
  std::vector<std::pair<Pose, MarkerObs>> views;
  for (int k = -1; k <= 1; ++k) {
    const Quat q = so3_exp(Vec3(0, -0.3 * k, 0));
    const Pose cam(q, -(q * Vec3(0.9 * k, 0, 0)));
    views.push_back({cam, observe(cam.compose(marker_world), side, intr, 0.3)});
  }
  const Pose resolved = resolve_pose_multiview(views, side, intr);
  CHECK(pose_gap_rotation(resolved, marker_world) < 1.0 * M_PI / 180.0);
  CHECK((resolved.translation() - marker_world.translation()).norm() < 0.01 * side * 10);
}

TEST_CASE("resolve_pose_multiview rejects zero baseline") {
  const auto intr = test_intrinsics();
  const double side = 0.2;
  const Pose m(Quat::Identity(), Vec3(0, 0, 2));
  const auto obs = observe(m, side, intr);
  std::vector<std::pair<Pose, MarkerObs>> views{{Pose::identity(), obs},
                                                {Pose::identity(), obs}};
  try {
    resolve_pose_multiview(views, side, intr);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::insufficient_baseline);
  }
}

TEST_CASE("scale consistency: doubling side and depth doubles the translation") {
  const auto intr = test_intrinsics();
  const Pose small_truth(so3_exp(Vec3(0.3, 0.1, 0.0)), Vec3(0.1, 0.05, 1.2));
  const Pose big_truth(small_truth.rotation(), 2.0 * small_truth.translation());
  const auto obs_small = observe(small_truth, 0.2, intr);
  const auto obs_big = observe(big_truth, 0.4, intr);
  for (int i = 0; i < 4; ++i)
    CHECK((obs_small.corners_px[i] - obs_big.corners_px[i]).norm() < 1e-9);
  const auto sol_small = solve_planar_pose(obs_small, 0.2, intr);
  const auto sol_big = solve_planar_pose(obs_big, 0.4, intr);
  CHECK((sol_big.sol1.translation() - 2.0 * sol_small.sol1.translation()).norm() < 1e-6);
}

TEST_CASE("initialize_from_markers recovers relative pose at metric scale") {
  const auto intr = test_intrinsics();
  const double side = 0.2;
  const Pose marker_world(so3_exp(Vec3(0.15, -0.1, 0.02)), Vec3(0.1, -0.05, 2.0));
  const Pose f0 = Pose::identity();
  // ~20 degree viewpoint change with real translation
  const Quat q1 = so3_exp(Vec3(0.05, -0.35, 0.02));
  const Pose f1(q1, -(q1 * Vec3(0.7, 0.1, 0.05)));

  Frame a, b;
  a.intrinsics = b.intrinsics = intr;
  a.marker_detections.push_back(observe(f0.compose(marker_world), side, intr));
  b.marker_detections.push_back(observe(f1.compose(marker_world), side, intr));

  const auto init = initialize_from_markers(a, b, side, intr);
  CHECK(pose_gap_rotation(init.f1_pose, f1) < 1e-4);
  CHECK((init.f1_pose.translation() - f1.translation()).norm() < 1e-4);
  REQUIRE(init.marker_poses.size() == 1);
  CHECK(pose_gap_rotation(init.marker_poses[0].second, marker_world) < 1e-4);
}

TEST_CASE("initialize_from_markers error cases") {
  const auto intr = test_intrinsics();
  const double side = 0.2;
  Frame a, b;
  a.intrinsics = b.intrinsics = intr;
  a.marker_detections.push_back(observe(Pose(Quat::Identity(), Vec3(0, 0, 2)), side, intr));
  MarkerObs other = a.marker_detections[0];
  other.marker_id = 5;
  b.marker_detections.push_back(other);
  try {
    initialize_from_markers(a, b, side, intr);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::no_common_markers);
  }

  // identical frames: no parallax
  Frame c = a;
  try {
    initialize_from_markers(a, c, side, intr);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::insufficient_parallax);
  }
}
