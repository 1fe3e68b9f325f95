#include <doctest.h>

#include <cmath>
#include <random>

#include "kmslam/optimizer.hpp"

using namespace kmslam;

namespace {

std::mt19937_64 rng(1234);

double uniform(double lo, double hi) {
  return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
}

double gauss(double sigma) {
  const double u1 = std::max(1e-16, static_cast<double>(rng() >> 11) * 0x1.0p-53);
  const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return sigma * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

CameraIntrinsics test_intrinsics() {
  CameraIntrinsics c;
  c.fx = c.fy = 450.0;
  c.cx = 320.0;
  c.cy = 240.0;
  c.width = 640;
  c.height = 480;
  return c;
}

Pose perturbed(const Pose& pose, double angle, double translation) {
  const Vec3 axis = Vec3(uniform(-1, 1), uniform(-1, 1), uniform(-1, 1)).normalized();
  Vec6 delta;
  delta.head<3>() = axis * angle;
  delta.tail<3>() = Vec3(gauss(translation), gauss(translation), gauss(translation));
  return pose.retract(delta);
}

/// A synthetic scene: keyframes on an arc at z<0 looking toward +z where the
/// points and markers live.
struct Scene {
  std::vector<Pose> kf_poses;
  std::vector<Vec3> points;
  std::vector<Pose> marker_poses;  // mrs -> grs
  double marker_side = 0.3;
  CameraIntrinsics intrinsics = test_intrinsics();
  PyramidConfig pyramid{1.2, 8};
};

Scene make_scene(int n_kf, int n_points, int n_markers) {
  Scene scene;
  for (int i = 0; i < n_kf; ++i) {
    const double x = -1.5 + 3.0 * i / std::max(1, n_kf - 1);
    const Quat q = so3_exp(Vec3(0, 0.15 * x, 0));
    scene.kf_poses.emplace_back(q, -(q * Vec3(x, 0.1 * std::sin(i), -4.0)));
  }
  for (int i = 0; i < n_points; ++i)
    scene.points.emplace_back(uniform(-2.5, 2.5), uniform(-1.8, 1.8), uniform(-0.5, 1.5));
  for (int i = 0; i < n_markers; ++i) {
    const Quat q = so3_exp(Vec3(uniform(-0.3, 0.3), uniform(-0.3, 0.3), uniform(-3, 3)));
    // face roughly toward the cameras (marker +z toward -z world)
    const Quat facing = so3_exp(Vec3(M_PI, 0, 0));
    scene.marker_poses.emplace_back(Quat(q * facing),
                                    Vec3(uniform(-2, 2), uniform(-1.5, 1.5), uniform(0.5, 1.5)));
  }
  return scene;
}

BundleProblem make_problem(const Scene& scene, double pixel_noise = 0.0) {
  BundleProblem p;
  p.intrinsics = scene.intrinsics;
  p.pyramid = scene.pyramid;
  p.keyframe_poses = scene.kf_poses;
  p.keyframe_fixed.assign(scene.kf_poses.size(), 0);
  p.keyframe_fixed[0] = 1;  // gauge
  p.points = scene.points;
  p.marker_poses = scene.marker_poses;
  p.marker_fixed.assign(scene.marker_poses.size(), 0);
  p.marker_sides.assign(scene.marker_poses.size(), scene.marker_side);

  for (std::uint32_t k = 0; k < scene.kf_poses.size(); ++k) {
    for (std::uint32_t i = 0; i < scene.points.size(); ++i) {
      const auto px = try_project(scene.kf_poses[k], scene.points[i], scene.intrinsics);
      if (!px || !scene.intrinsics.in_image(*px, 2.0)) continue;
      BundlePointObs obs;
      obs.keyframe = k;
      obs.point = i;
      obs.level = static_cast<int>(i % 4);
      obs.pixel = *px + Vec2(gauss(pixel_noise), gauss(pixel_noise));
      p.point_obs.push_back(obs);
    }
    for (std::uint32_t m = 0; m < scene.marker_poses.size(); ++m) {
      const Pose composed = scene.kf_poses[k].compose(scene.marker_poses[m]);
      const auto corners = canonical_corners(scene.marker_side);
      BundleMarkerObs obs;
      obs.keyframe = k;
      obs.marker = m;
      bool ok = true;
      for (int c = 0; c < 4; ++c) {
        const auto px = try_project(composed, corners[c], scene.intrinsics);
        if (!px || !scene.intrinsics.in_image(*px, 2.0)) {
          ok = false;
          break;
        }
        obs.corners_px[c] = *px + Vec2(gauss(pixel_noise), gauss(pixel_noise));
      }
      if (ok) p.marker_obs.push_back(obs);
    }
  }
  return p;
}

TrackingProblem make_tracking_problem(const Scene& scene, int kf_index,
                                      bool with_points = true, bool with_markers = true) {
  TrackingProblem p;
  p.intrinsics = scene.intrinsics;
  p.pyramid = scene.pyramid;
  const Pose& pose = scene.kf_poses[kf_index];
  if (with_points) {
    for (std::uint32_t i = 0; i < scene.points.size(); ++i) {
      const auto px = try_project(pose, scene.points[i], scene.intrinsics);
      if (!px || !scene.intrinsics.in_image(*px, 2.0)) continue;
      PointMatch m;
      m.position = scene.points[i];
      m.level = static_cast<int>(i % 4);
      m.pixel = *px;
      p.point_matches.push_back(m);
    }
  }
  if (with_markers) {
    for (std::uint32_t m = 0; m < scene.marker_poses.size(); ++m) {
      const Pose composed = pose.compose(scene.marker_poses[m]);
      const auto corners = canonical_corners(scene.marker_side);
      MarkerMatch match;
      match.marker_pose = scene.marker_poses[m];
      match.corners_local = corners;
      bool ok = true;
      for (int c = 0; c < 4; ++c) {
        const auto px = try_project(composed, corners[c], scene.intrinsics);
        if (!px || !scene.intrinsics.in_image(*px, 2.0)) {
          ok = false;
          break;
        }
        match.obs.corners_px[c] = *px;
      }
      if (ok) p.marker_matches.push_back(match);
    }
  }
  p.initial_pose = pose;
  return p;
}

}  // namespace

TEST_CASE("marker weights follow the balancing rule") {
  CHECK(marker_point_weights(0, 5) == std::pair<double, double>{0.0, 1.0});
  CHECK(marker_point_weights(5, 5) == std::pair<double, double>{0.5, 0.5});
  CHECK(marker_point_weights(2, 5) == std::pair<double, double>{0.2, 0.8});
  CHECK(marker_point_weights(50, 5) == std::pair<double, double>{0.5, 0.5});
}

TEST_CASE("solve_tracking recovers the pose from a perturbed start") {
  const Scene scene = make_scene(4, 120, 2);
  auto problem = make_tracking_problem(scene, 1);
  REQUIRE(problem.point_matches.size() > 50);
  problem.initial_pose = perturbed(scene.kf_poses[1], 5.0 * M_PI / 180.0, 0.1);
  const auto result = solve_tracking(problem);
  CHECK(result.pose.rotation_angle_to(scene.kf_poses[1]) < 1e-6);
  CHECK((result.pose.translation() - scene.kf_poses[1].translation()).norm() < 1e-6);
  CHECK(result.point_inlier_count == static_cast<int>(problem.point_matches.size()));
}

TEST_CASE("solve_tracking works from markers alone") {
  const Scene scene = make_scene(4, 0, 2);
  auto problem = make_tracking_problem(scene, 2, false, true);
  REQUIRE(problem.marker_matches.size() >= 1);
  problem.initial_pose = perturbed(scene.kf_poses[2], 4.0 * M_PI / 180.0, 0.08);
  const auto result = solve_tracking(problem);
  CHECK(result.pose.rotation_angle_to(scene.kf_poses[2]) < 1e-6);
  CHECK((result.pose.translation() - scene.kf_poses[2].translation()).norm() < 1e-6);
}

TEST_CASE("solve_tracking needs at least four correspondences") {
  TrackingProblem p;
  p.intrinsics = test_intrinsics();
  PointMatch m;
  m.position = Vec3(0, 0, 3);
  m.pixel = Vec2(320, 240);
  p.point_matches = {m, m, m};
  CHECK_THROWS_AS(solve_tracking(p), Error);
}

TEST_CASE("solve_tracking is robust to gross outliers") {
  const Scene scene = make_scene(4, 150, 0);

  auto clean = make_tracking_problem(scene, 1);
  clean.initial_pose = perturbed(scene.kf_poses[1], 2.0 * M_PI / 180.0, 0.05);
  // small noise so the clean error is nonzero
  for (auto& m : clean.point_matches) m.pixel += Vec2(gauss(0.3), gauss(0.3));
  const auto clean_result = solve_tracking(clean);
  const double clean_err =
      (clean_result.pose.translation() - scene.kf_poses[1].translation()).norm();

  auto dirty = clean;
  const std::size_t n_out = dirty.point_matches.size() / 5;
  for (std::size_t i = 0; i < n_out; ++i)
    dirty.point_matches[i * 5].pixel += Vec2(50.0, -50.0);
  const auto dirty_result = solve_tracking(dirty);
  const double dirty_err =
      (dirty_result.pose.translation() - scene.kf_poses[1].translation()).norm();

  CHECK(dirty_err <= 3.0 * std::max(clean_err, 1e-4));
  // the planted outliers are flagged
  for (std::size_t i = 0; i < n_out; ++i) CHECK_FALSE(dirty_result.point_inliers[i * 5]);
}

TEST_CASE("zero marker weight reproduces the points-only solve bit for bit") {
  const Scene scene = make_scene(3, 80, 2);
  auto with_markers = make_tracking_problem(scene, 1);
  REQUIRE(!with_markers.marker_matches.empty());
  with_markers.initial_pose = perturbed(scene.kf_poses[1], 3.0 * M_PI / 180.0, 0.05);
  with_markers.marker_weight_override = 0.0;

  auto points_only = with_markers;
  points_only.marker_matches.clear();
  points_only.marker_weight_override.reset();

  const auto a = solve_tracking(with_markers);
  const auto b = solve_tracking(points_only);
  CHECK(a.pose.translation().x() == b.pose.translation().x());
  CHECK(a.pose.translation().y() == b.pose.translation().y());
  CHECK(a.pose.translation().z() == b.pose.translation().z());
  CHECK(a.pose.rotation().coeffs() == b.pose.rotation().coeffs());
  CHECK(a.iterations == b.iterations);
}

TEST_CASE("bundle cost gradient matches central finite differences") {
  for (int trial = 0; trial < 5; ++trial) {
    const Scene scene = make_scene(3, 12, 1);
    auto problem = make_problem(scene, 0.5);
    // move away from the optimum so the gradient is nonzero
    for (std::size_t i = 1; i < problem.keyframe_poses.size(); ++i)
      problem.keyframe_poses[i] = perturbed(problem.keyframe_poses[i], 0.01, 0.01);
    for (auto& pt : problem.points) pt += Vec3(gauss(0.01), gauss(0.01), gauss(0.01));

    const Eigen::VectorXd analytic = bundle_gradient(problem);
    const double h = 1e-6;
    int idx = 0;
    const auto fd_check = [&](double an, double fd) {
      const double scale = std::max({1.0, std::abs(an), std::abs(fd)});
      CHECK(std::abs(an - fd) / scale <= 1e-4);
    };
    for (std::size_t k = 0; k < problem.keyframe_poses.size(); ++k) {
      if (problem.keyframe_fixed[k]) continue;
      for (int d = 0; d < 6; ++d) {
        Vec6 delta = Vec6::Zero();
        auto plus = problem;
        auto minus = problem;
        delta(d) = h;
        plus.keyframe_poses[k] = problem.keyframe_poses[k].retract(delta);
        delta(d) = -h;
        minus.keyframe_poses[k] = problem.keyframe_poses[k].retract(delta);
        fd_check(analytic(idx), (bundle_cost(plus) - bundle_cost(minus)) / (2 * h));
        ++idx;
      }
    }
    for (std::size_t m = 0; m < problem.marker_poses.size(); ++m) {
      if (problem.marker_fixed[m]) continue;
      for (int d = 0; d < 6; ++d) {
        Vec6 delta = Vec6::Zero();
        auto plus = problem;
        auto minus = problem;
        delta(d) = h;
        plus.marker_poses[m] = problem.marker_poses[m].retract(delta);
        delta(d) = -h;
        minus.marker_poses[m] = problem.marker_poses[m].retract(delta);
        fd_check(analytic(idx), (bundle_cost(plus) - bundle_cost(minus)) / (2 * h));
        ++idx;
      }
    }
    for (std::size_t i = 0; i < problem.points.size(); ++i) {
      for (int d = 0; d < 3; ++d) {
        auto plus = problem;
        auto minus = problem;
        plus.points[i](d) += h;
        minus.points[i](d) -= h;
        fd_check(analytic(idx), (bundle_cost(plus) - bundle_cost(minus)) / (2 * h));
        ++idx;
      }
    }
    CHECK(idx == analytic.size());
  }
}

TEST_CASE("schur solve equals the dense reference solve") {
  for (int trial = 0; trial < 5; ++trial) {
    const Scene scene = make_scene(3, 10, 1);  // 2 free kf + 1 marker + 10 pts = 48 vars
    auto problem = make_problem(scene, 0.4);
    for (std::size_t i = 1; i < problem.keyframe_poses.size(); ++i)
      problem.keyframe_poses[i] = perturbed(problem.keyframe_poses[i], 0.01, 0.01);
    REQUIRE(bundle_free_dimension(problem) <= 50);
    for (double lambda : {1e-6, 1e-3, 1e-1}) {
      const Eigen::VectorXd schur = solve_normal_equations_schur(problem, lambda);
      const Eigen::VectorXd dense = solve_normal_equations_dense(problem, lambda);
      CHECK((schur - dense).norm() <= 1e-8 * std::max(1.0, dense.norm()));
    }
  }
}

TEST_CASE("bundle_adjust recovers a perturbed scene and never increases cost") {
  const Scene scene = make_scene(10, 200, 4);
  auto problem = make_problem(scene, 0.0);
  REQUIRE(problem.point_obs.size() > 500);

  // perturb: points sigma = 2 cm, poses sigma = 1 deg / 2 cm
  for (std::size_t i = 0; i < problem.keyframe_poses.size(); ++i)
    if (!problem.keyframe_fixed[i])
      problem.keyframe_poses[i] =
          perturbed(problem.keyframe_poses[i], 1.0 * M_PI / 180.0, 0.02);
  for (auto& pt : problem.points) pt += Vec3(gauss(0.02), gauss(0.02), gauss(0.02));
  for (std::size_t i = 0; i < problem.marker_poses.size(); ++i)
    problem.marker_poses[i] = perturbed(problem.marker_poses[i], 1.0 * M_PI / 180.0, 0.02);

  const double initial_rmse = [&] {
    double acc = 0.0;
    for (std::size_t i = 0; i < problem.points.size(); ++i)
      acc += (problem.points[i] - scene.points[i]).squaredNorm();
    return std::sqrt(acc / problem.points.size());
  }();

  const Pose anchor_before = problem.keyframe_poses[0];
  BundleOptions options;
  options.max_iterations = 50;
  const auto summary = bundle_adjust(problem, options);

  // accepted costs are strictly decreasing
  double prev = summary.initial_cost;
  for (const double c : summary.accepted_costs) {
    CHECK(c < prev);
    prev = c;
  }
  CHECK(summary.final_cost < summary.initial_cost / 100.0);

  // gauge anchor untouched, bit for bit
  CHECK(problem.keyframe_poses[0].translation() == anchor_before.translation());
  CHECK(problem.keyframe_poses[0].rotation().coeffs() == anchor_before.rotation().coeffs());

  // noiseless observations: the scene is recovered almost exactly
  double acc = 0.0;
  for (std::size_t i = 0; i < problem.points.size(); ++i)
    acc += (problem.points[i] - scene.points[i]).squaredNorm();
  const double final_rmse = std::sqrt(acc / problem.points.size());
  CHECK(final_rmse <= initial_rmse / 10.0);
  CHECK(final_rmse < 1e-4);
}

TEST_CASE("bundle_adjust on a converged problem changes nothing") {
  const Scene scene = make_scene(4, 40, 1);
  auto problem = make_problem(scene, 0.0);
  const auto first = bundle_adjust(problem);
  const double converged_cost = bundle_cost(problem);
  auto again = problem;
  const auto second = bundle_adjust(again);
  CHECK(std::abs(second.final_cost - converged_cost) < 1e-12);
  // no accepted step moved anything measurably
  for (std::size_t i = 0; i < problem.points.size(); ++i)
    CHECK((again.points[i] - problem.points[i]).norm() < 1e-9);
}

TEST_CASE("fixed keyframes and markers stay bitwise unchanged") {
  const Scene scene = make_scene(6, 60, 2);
  auto problem = make_problem(scene, 0.3);
  problem.keyframe_fixed[0] = 1;
  problem.keyframe_fixed[1] = 1;
  problem.keyframe_fixed[5] = 1;
  problem.marker_fixed[1] = 1;
  const auto frozen_kf1 = problem.keyframe_poses[1];
  const auto frozen_kf5 = problem.keyframe_poses[5];
  const auto frozen_mk1 = problem.marker_poses[1];
  bundle_adjust(problem);
  CHECK(problem.keyframe_poses[1].translation() == frozen_kf1.translation());
  CHECK(problem.keyframe_poses[1].rotation().coeffs() == frozen_kf1.rotation().coeffs());
  CHECK(problem.keyframe_poses[5].translation() == frozen_kf5.translation());
  CHECK(problem.marker_poses[1].translation() == frozen_mk1.translation());
  CHECK(problem.marker_poses[1].rotation().coeffs() == frozen_mk1.rotation().coeffs());
}

// ---------------------------------------------------------------------------
// Sim(3) loop correction

namespace {

/// A square-loop map: n keyframes around a square, each observing a few
/// points anchored near it.
WorldMap square_loop_map(int n_kf, std::vector<Pose>* true_poses,
                         std::vector<Vec3>* true_points) {
  WorldMap map;
  const double half = 4.0;
  for (int i = 0; i < n_kf; ++i) {
    const double s = 4.0 * i / n_kf;  // side-parameter in [0,4)
    Vec3 center;
    const int edge = static_cast<int>(s);
    const double f = s - edge;
    switch (edge) {
      case 0: center = Vec3(-half + 2 * half * f, -half, 0); break;
      case 1: center = Vec3(half, -half + 2 * half * f, 0); break;
      case 2: center = Vec3(half - 2 * half * f, half, 0); break;
      default: center = Vec3(-half, half - 2 * half * f, 0); break;
    }
    const Quat q = so3_exp(Vec3(0, 0, 2 * M_PI * i / n_kf));
    const Pose pose(q, -(q * center));
    true_poses->push_back(pose);
    Frame f_kf;
    f_kf.timestamp = i;
    f_kf.pose = pose;
    map.add_keyframe(f_kf);
  }
  for (int i = 0; i < n_kf; ++i) {
    for (int j = 0; j < 3; ++j) {
      MapPoint p;
      p.position = true_poses->at(i).center() + Vec3(0.3 * j, 0.2, 0.5);
      true_points->push_back(p.position);
      const auto pid = map.add_point(p);
      map.add_point_observation(pid, KeyframeId{static_cast<std::uint32_t>(i)},
                                static_cast<std::uint32_t>(j));
      if (i + 1 < n_kf)
        map.add_point_observation(pid, KeyframeId{static_cast<std::uint32_t>(i + 1)},
                                  static_cast<std::uint32_t>(j));
    }
  }
  return map;
}

double trajectory_rmse(const WorldMap& map, const std::vector<Pose>& truth) {
  double acc = 0.0;
  int n = 0;
  for (const auto id : map.keyframes().ids()) {
    acc += (map.keyframe(id).pose.center() - truth[id.value].center()).squaredNorm();
    ++n;
  }
  return std::sqrt(acc / n);
}

}  // namespace

TEST_CASE("sim3_loop_correct with identity drift is a no-op") {
  std::vector<Pose> truth;
  std::vector<Vec3> points;
  WorldMap map = square_loop_map(12, &truth, &points);
  std::vector<KeyframeId> chain;
  for (const auto id : map.keyframes().ids()) chain.push_back(id);
  sim3_loop_correct(map, chain, SimTransform::identity());
  CHECK(trajectory_rmse(map, truth) < 1e-12);
  for (const auto id : map.points().ids())
    CHECK((map.point(id).position - points[id.value]).norm() < 1e-12);
}

TEST_CASE("sim3_loop_correct rejects an empty chain") {
  WorldMap map;
  CHECK_THROWS_AS(sim3_loop_correct(map, {}, SimTransform::identity()), Error);
}

TEST_CASE("sim3_loop_correct on a single keyframe applies the full correction") {
  std::vector<Pose> truth;
  std::vector<Vec3> points;
  WorldMap map = square_loop_map(3, &truth, &points);
  const SimTransform drift(1.05, so3_exp(Vec3(0, 0, 0.1)), Vec3(0.4, -0.2, 0.1));
  const Pose before = map.keyframe(KeyframeId{2}).pose;
  sim3_loop_correct(map, {KeyframeId{2}}, drift);
  const Pose after = map.keyframe(KeyframeId{2}).pose;
  const SimTransform inv = drift.inverse();
  const Pose expected(before.rotation() * inv.rotation(),
                      (before.rotation() * inv.translation() + before.translation()) /
                          inv.scale());
  CHECK(after.rotation_angle_to(expected) < 1e-12);
  CHECK((after.translation() - expected.translation()).norm() < 1e-12);
  // untouched keyframes stay put
  CHECK(map.keyframe(KeyframeId{0}).pose.translation() == truth[0].translation());
}

TEST_CASE("sim3_loop_correct removes injected drift on a square loop") {
  const int n_kf = 24;
  std::vector<Pose> truth;
  std::vector<Vec3> points;
  WorldMap map = square_loop_map(n_kf, &truth, &points);

  // inject drift that grows uniformly along the chain: 1% of the 32 m
  // perimeter in translation, ~2% scale, a yaw twist
  const SimTransform total_drift(1.02, so3_exp(Vec3(0, 0, 0.03)), Vec3(0.35, 0.2, 0.05));
  const Vec7 log_drift = total_drift.log();
  for (int i = 0; i < n_kf; ++i) {
    const double f = static_cast<double>(i) / (n_kf - 1);
    const SimTransform w = SimTransform::exp(f * log_drift);
    KeyFrame& kf = map.keyframe(KeyframeId{static_cast<std::uint32_t>(i)});
    // the drifted pose is the truth observed in warped coordinates
    kf.pose = Pose(truth[i].rotation() * w.rotation(),
                   (truth[i].rotation() * w.translation() + truth[i].translation()) /
                       w.scale());
  }
  for (const auto pid : map.points().ids()) {
    const auto anchor = map.registry().point_observers(pid).begin()->first;
    const double f = static_cast<double>(anchor.value) / (n_kf - 1);
    const SimTransform w_inv = SimTransform::exp(f * log_drift).inverse();
    map.point(pid).position = w_inv.apply(map.point(pid).position);
  }

  const double pre = trajectory_rmse(map, truth);
  REQUIRE(pre > 0.05);

  std::vector<KeyframeId> chain;
  for (const auto id : map.keyframes().ids()) chain.push_back(id);
  sim3_loop_correct(map, chain, total_drift);

  const double post = trajectory_rmse(map, truth);
  CHECK(post <= pre / 5.0);
  CHECK(post < 1e-9);
  for (const auto pid : map.points().ids())
    CHECK((map.point(pid).position - points[pid.value]).norm() < 1e-9);
}
