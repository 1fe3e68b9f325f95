#include <doctest.h>

#include <cmath>
#include <random>

#include "kmslam/geometry.hpp"

using namespace kmslam;

namespace {

std::mt19937_64 rng(42);

double uniform(double lo, double hi) {
  return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
}

Pose random_pose(double max_angle = 3.0, double max_translation = 2.0) {
  const Vec3 axis =
      Vec3(uniform(-1, 1), uniform(-1, 1), uniform(-1, 1)).normalized();
  const double angle = uniform(-max_angle, max_angle);
  const Vec3 t(uniform(-max_translation, max_translation),
               uniform(-max_translation, max_translation),
               uniform(-max_translation, max_translation));
  return Pose(so3_exp(axis * angle), t);
}

CameraIntrinsics test_intrinsics() {
  CameraIntrinsics c;
  c.fx = 100.0;
  c.fy = 100.0;
  c.cx = 320.0;
  c.cy = 240.0;
  c.width = 640;
  c.height = 480;
  return c;
}

// Scalar re-evaluation of the radial-tangential model, written independently
// of CameraIntrinsics::distort.
Vec2 distortion_oracle(double xn, double yn, const std::array<double, 5>& d, double fx,
                       double fy, double cx, double cy) {
  const double k1 = d[0], k2 = d[1], p1 = d[2], p2 = d[3], k3 = d[4];
  const double r2 = xn * xn + yn * yn;
  const double radial = 1.0 + k1 * r2 + k2 * std::pow(r2, 2) + k3 * std::pow(r2, 3);
  const double xd = xn * radial + 2 * p1 * xn * yn + p2 * (r2 + 2 * xn * xn);
  const double yd = yn * radial + p1 * (r2 + 2 * yn * yn) + 2 * p2 * xn * yn;
  return Vec2(fx * xd + cx, fy * yd + cy);
}

}  // namespace

TEST_CASE("project maps optical axis to principal point") {
  const auto px = project(Pose::identity(), Vec3(0, 0, 2), test_intrinsics());
  CHECK(px.x() == doctest::Approx(320.0).epsilon(1e-12));
  CHECK(px.y() == doctest::Approx(240.0).epsilon(1e-12));
}

TEST_CASE("project pinhole u = fx*x/z + cx") {
  const auto px = project(Pose::identity(), Vec3(1, 0, 2), test_intrinsics());
  CHECK(px.x() == doctest::Approx(370.0).epsilon(1e-12));
  CHECK(px.y() == doctest::Approx(240.0).epsilon(1e-12));
}

TEST_CASE("project with k1 distortion matches scalar oracle") {
  auto intr = test_intrinsics();
  intr.dist[0] = 0.1;
  const Vec3 x(1, 0, 2);
  const auto px = project(Pose::identity(), x, intr);
  const auto expected = distortion_oracle(0.5, 0.0, intr.dist, 100, 100, 320, 240);
  CHECK(px.x() == doctest::Approx(expected.x()).epsilon(1e-12));
  CHECK(px.y() == doctest::Approx(expected.y()).epsilon(1e-12));
}

TEST_CASE("project rejects points behind the camera") {
  CHECK_THROWS_AS(project(Pose::identity(), Vec3(0, 0, -1), test_intrinsics()), Error);
  try {
    project(Pose::identity(), Vec3(0, 0, 0), test_intrinsics());
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::point_behind_camera);
  }
}

TEST_CASE("reprojection residual sign convention and zero case") {
  const auto intr = test_intrinsics();
  const Vec3 x(0.3, -0.2, 1.5);
  const Vec2 proj = project(Pose::identity(), x, intr);
  const Vec2 zero = reprojection_residual(Pose::identity(), x, intr, proj);
  CHECK(zero.norm() < 1e-12);
  const Vec2 r = reprojection_residual(Pose::identity(), x, intr, proj - Vec2(1, 2));
  CHECK(r.x() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.y() == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("reprojection residual equals brute recomputation on random input") {
  auto intr = test_intrinsics();
  intr.dist = {0.05, -0.01, 0.001, -0.002, 0.003};
  for (int i = 0; i < 200; ++i) {
    const Pose pose = random_pose(0.5, 0.5);
    const Vec3 x(uniform(-1, 1), uniform(-1, 1), uniform(2, 6));
    const Vec3 pc = pose.apply(x);
    if (pc.z() <= 0.1) continue;
    const Vec2 u(uniform(0, 640), uniform(0, 480));
    const Vec2 expected =
        distortion_oracle(pc.x() / pc.z(), pc.y() / pc.z(), intr.dist, intr.fx, intr.fy,
                          intr.cx, intr.cy) -
        u;
    const Vec2 got = reprojection_residual(pose, x, intr, u);
    CHECK((got - expected).norm() <= 1e-12 * std::max(1.0, expected.norm()));
  }
}

TEST_CASE("residual of a point's own projection is zero for random poses") {
  auto intr = test_intrinsics();
  intr.dist = {0.02, -0.005, 0.0007, -0.0003, 0.001};
  int checked = 0;
  while (checked < 1000) {
    const Pose pose = random_pose();
    const Vec3 x(uniform(-2, 2), uniform(-2, 2), uniform(-2, 8));
    if (pose.apply(x).z() <= 0.05) continue;
    const Vec2 u = project(pose, x, intr);
    CHECK(reprojection_residual(pose, x, intr, u).norm() < 1e-12);
    ++checked;
  }
}

TEST_CASE("info weight") {
  PyramidConfig cfg{1.2, 8};
  CHECK(info_weight(0, cfg)(0, 0) == doctest::Approx(1.0));
  CHECK(info_weight(0, cfg)(0, 1) == 0.0);
  CHECK(info_weight(2, cfg)(1, 1) == doctest::Approx(1.0 / 1.44).epsilon(1e-12));
  CHECK(info_weight(1, PyramidConfig{2.0, 4})(0, 0) == doctest::Approx(0.5));
  CHECK_THROWS_AS(info_weight(8, cfg), Error);
  CHECK_THROWS_AS(info_weight(-1, cfg), Error);
  for (int l = 0; l + 1 < cfg.levels; ++l)
    CHECK(info_weight_scalar(l + 1, cfg) < info_weight_scalar(l, cfg));
}

TEST_CASE("huber values and properties") {
  CHECK(huber(1.0, 0.5) == doctest::Approx(0.125).epsilon(1e-15));
  CHECK(huber(1.0, 1.0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(huber(1.0, 3.0) == doctest::Approx(2.5).epsilon(1e-15));
  // monotone in |a| and dominated by the quadratic
  double prev = -1.0;
  for (double a = 0.0; a < 5.0; a += 0.01) {
    const double h = huber(1.3, a);
    CHECK(h >= prev);
    CHECK(h <= 0.5 * a * a + 1e-15);
    CHECK(huber(1.3, -a) == h);
    prev = h;
  }
}

TEST_CASE("pose group operations") {
  const Pose p = random_pose();
  const Pose q = random_pose();

  const Pose pi = p.compose(Pose::identity());
  CHECK((pi.translation() - p.translation()).norm() < 1e-15);
  CHECK(pi.rotation().angularDistance(p.rotation()) < 1e-15);

  for (int i = 0; i < 100; ++i) {
    const Pose r = random_pose();
    const Pose round = r.inverse().compose(r);
    CHECK(round.translation().norm() < 1e-9);
    CHECK(so3_log(round.rotation()).norm() < 1e-9);
  }

  const Vec3 x(0.4, -0.7, 1.3);
  CHECK((p.compose(q).apply(x) - p.apply(q.apply(x))).norm() < 1e-12);
}

TEST_CASE("sim3 scaling and group behaviour") {
  const SimTransform s(2.0, Quat::Identity(), Vec3::Zero());
  const Vec3 scaled = s.apply(Vec3(1, 1, 1));
  CHECK((scaled - Vec3(2, 2, 2)).norm() < 1e-15);

  for (int i = 0; i < 100; ++i) {
    const SimTransform t(std::exp(uniform(-0.5, 0.5)), random_pose().rotation(),
                         Vec3(uniform(-1, 1), uniform(-1, 1), uniform(-1, 1)));
    const Vec3 x(uniform(-2, 2), uniform(-2, 2), uniform(-2, 2));
    CHECK((t.inverse().apply(t.apply(x)) - x).norm() < 1e-9);
  }
}

TEST_CASE("sim3 with unit scale matches pose application bit for bit") {
  for (int i = 0; i < 50; ++i) {
    const Pose p = random_pose();
    const SimTransform s = SimTransform::from_pose(p);
    const Vec3 x(uniform(-3, 3), uniform(-3, 3), uniform(-3, 3));
    const Vec3 via_pose = p.apply(x);
    const Vec3 via_sim = s.apply(x);
    CHECK(via_pose.x() == via_sim.x());
    CHECK(via_pose.y() == via_sim.y());
    CHECK(via_pose.z() == via_sim.z());
  }
}

TEST_CASE("sim3 log/exp round trip") {
  for (int i = 0; i < 200; ++i) {
    const SimTransform s(std::exp(uniform(-0.4, 0.4)),
                         so3_exp(Vec3(uniform(-1, 1), uniform(-1, 1), uniform(-1, 1))),
                         Vec3(uniform(-2, 2), uniform(-2, 2), uniform(-2, 2)));
    const SimTransform back = SimTransform::exp(s.log());
    CHECK(std::abs(back.scale() - s.scale()) < 1e-9);
    CHECK(back.rotation().angularDistance(s.rotation()) < 1e-9);
    CHECK((back.translation() - s.translation()).norm() < 1e-9);
  }
  // identity and fractional power consistency
  const SimTransform s(1.3, so3_exp(Vec3(0.2, -0.1, 0.3)), Vec3(0.5, 1.0, -0.2));
  const SimTransform half = s.pow(0.5);
  const SimTransform full = half.compose(half);
  CHECK(std::abs(full.scale() - s.scale()) < 1e-9);
  CHECK((full.translation() - s.translation()).norm() < 1e-9);
  CHECK(full.rotation().angularDistance(s.rotation()) < 1e-9);
  const SimTransform zero = s.pow(0.0);
  CHECK(std::abs(zero.scale() - 1.0) < 1e-12);
  CHECK(zero.translation().norm() < 1e-12);
}

TEST_CASE("undistort inverts distort") {
  auto intr = test_intrinsics();
  intr.dist = {0.08, -0.02, 0.002, -0.001, 0.004};
  for (int i = 0; i < 200; ++i) {
    const Vec2 n(uniform(-0.8, 0.8), uniform(-0.6, 0.6));
    const Vec2 px = intr.distort(n);
    const Vec2 back = intr.undistort(px);
    CHECK((back - n).norm() < 1e-10);
  }
}

TEST_CASE("projection jacobian matches central finite differences") {
  auto intr = test_intrinsics();
  intr.dist = {0.05, -0.01, 0.001, -0.002, 0.003};
  const double step = 1e-6;
  int checked = 0;
  while (checked < 1000) {
    const Pose pose = random_pose(1.0, 1.0);
    const Vec3 x(uniform(-2, 2), uniform(-2, 2), uniform(1, 8));
    const auto exp = project_with_jacobian(pose, x, intr);
    if (!exp || exp->camera_point.z() < 0.3) continue;
    // keep the projection well inside the model's valid region
    if (std::abs(exp->camera_point.x() / exp->camera_point.z()) > 1.0) continue;
    if (std::abs(exp->camera_point.y() / exp->camera_point.z()) > 1.0) continue;

    // jacobian wrt the pose tangent [omega; v], left-applied
    Mat26 d_pose;
    d_pose.leftCols<3>() = exp->d_pixel_d_camera_point * (-skew(exp->camera_point));
    d_pose.rightCols<3>() = exp->d_pixel_d_camera_point;
    // jacobian wrt the world point
    const Mat23 d_point = exp->d_pixel_d_camera_point * pose.rotation_matrix();

    for (int k = 0; k < 6; ++k) {
      Vec6 delta = Vec6::Zero();
      delta(k) = step;
      const Vec2 plus = project(pose.retract(delta), x, intr);
      delta(k) = -step;
      const Vec2 minus = project(pose.retract(delta), x, intr);
      const Vec2 fd = (plus - minus) / (2 * step);
      const Vec2 an = d_pose.col(k);
      CHECK((fd - an).norm() <= 1e-4 * std::max(1.0, an.norm()));
    }
    for (int k = 0; k < 3; ++k) {
      Vec3 delta = Vec3::Zero();
      delta(k) = step;
      const Vec2 plus = project(pose, x + delta, intr);
      const Vec2 minus = project(pose, x - delta, intr);
      const Vec2 fd = (plus - minus) / (2 * step);
      const Vec2 an = d_point.col(k);
      CHECK((fd - an).norm() <= 1e-4 * std::max(1.0, an.norm()));
    }
    ++checked;
  }
}
