#include "kmslam/kp_init.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "kmslam/matching.hpp"
#include "kmslam/sim_world.hpp"

namespace kmslam {

std::optional<Vec3> triangulate_two_view(const Pose& pose0, const Pose& pose1,
                                         const Vec2& n0, const Vec2& n1) {
  Eigen::Matrix<double, 3, 4> p0, p1;
  p0.leftCols<3>() = pose0.rotation_matrix();
  p0.col(3) = pose0.translation();
  p1.leftCols<3>() = pose1.rotation_matrix();
  p1.col(3) = pose1.translation();

  Eigen::Matrix4d a;
  a.row(0) = n0.x() * p0.row(2) - p0.row(0);
  a.row(1) = n0.y() * p0.row(2) - p0.row(1);
  a.row(2) = n1.x() * p1.row(2) - p1.row(0);
  a.row(3) = n1.y() * p1.row(2) - p1.row(1);

  const Eigen::JacobiSVD<Eigen::Matrix4d> svd(a, Eigen::ComputeFullV);
  const Eigen::Vector4d x = svd.matrixV().col(3);
  if (std::abs(x(3)) < 1e-12) return std::nullopt;
  return Vec3(x(0) / x(3), x(1) / x(3), x(2) / x(3));
}

std::optional<Pose> dlt_pnp(const std::vector<Vec3>& points,
                            const std::vector<Vec2>& normalized) {
  const std::size_t n = points.size();
  if (n < 6 || normalized.size() != n) return std::nullopt;
  Eigen::MatrixXd a(2 * n, 12);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3& x = points[i];
    const double u = normalized[i].x();
    const double v = normalized[i].y();
    a.row(2 * i) << x.x(), x.y(), x.z(), 1, 0, 0, 0, 0, -u * x.x(), -u * x.y(), -u * x.z(),
        -u;
    a.row(2 * i + 1) << 0, 0, 0, 0, x.x(), x.y(), x.z(), 1, -v * x.x(), -v * x.y(),
        -v * x.z(), -v;
  }
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::VectorXd p = svd.matrixV().col(11);
  Eigen::Matrix<double, 3, 4> proj;
  proj << p(0), p(1), p(2), p(3), p(4), p(5), p(6), p(7), p(8), p(9), p(10), p(11);

  Mat3 m = proj.leftCols<3>();
  // fix the sign so points land in front of the camera
  double depth_sign = 0.0;
  for (const auto& x : points) depth_sign += (m.row(2).dot(x) + proj(2, 3));
  if (depth_sign < 0.0) {
    proj = -proj;
    m = -m;
  }
  const Eigen::JacobiSVD<Mat3> msvd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const double scale = msvd.singularValues().mean();
  if (!(scale > 1e-12)) return std::nullopt;
  Mat3 r = msvd.matrixU() * msvd.matrixV().transpose();
  if (r.determinant() < 0.0) return std::nullopt;
  const Vec3 t = proj.col(3) / scale;
  return Pose(Quat(r), t);
}

std::optional<PnPRansacResult> pnp_ransac(const std::vector<Vec3>& points,
                                          const std::vector<Vec2>& pixels,
                                          const CameraIntrinsics& intr, int iterations,
                                          double inlier_px, int min_inliers,
                                          std::uint64_t seed) {
  const std::size_t n = points.size();
  if (n < 6 || pixels.size() != n) return std::nullopt;
  std::vector<Vec2> normalized(n);
  for (std::size_t i = 0; i < n; ++i) normalized[i] = intr.undistort(pixels[i]);

  SimRng rng(seed);
  const auto count_inliers = [&](const Pose& pose, std::vector<std::uint8_t>* flags) {
    int count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto px = try_project(pose, points[i], intr);
      const bool in = px && (*px - pixels[i]).norm() <= inlier_px;
      if (flags) (*flags)[i] = in ? 1 : 0;
      if (in) ++count;
    }
    return count;
  };

  int best_count = 0;
  Pose best_pose;
  std::vector<Vec3> sample_pts(6);
  std::vector<Vec2> sample_norm(6);
  for (int iter = 0; iter < iterations; ++iter) {
    // six distinct indices
    std::vector<std::uint32_t> idx;
    while (idx.size() < 6) {
      const auto candidate = static_cast<std::uint32_t>(rng.bits() % n);
      if (std::find(idx.begin(), idx.end(), candidate) == idx.end())
        idx.push_back(candidate);
    }
    for (int k = 0; k < 6; ++k) {
      sample_pts[k] = points[idx[k]];
      sample_norm[k] = normalized[idx[k]];
    }
    const auto pose = dlt_pnp(sample_pts, sample_norm);
    if (!pose) continue;
    const int count = count_inliers(*pose, nullptr);
    if (count > best_count) {
      best_count = count;
      best_pose = *pose;
    }
  }
  if (best_count < std::max(min_inliers, 6)) return std::nullopt;

  // refine on the consensus set with Gauss-Newton on the full model, then
  // re-classify
  PnPRansacResult result;
  result.inliers.assign(n, 0);
  count_inliers(best_pose, &result.inliers);
  std::vector<Vec3> in_pts;
  std::vector<Vec2> in_norm;
  for (std::size_t i = 0; i < n; ++i) {
    if (!result.inliers[i]) continue;
    in_pts.push_back(points[i]);
    in_norm.push_back(normalized[i]);
  }
  Pose pose = best_pose;
  for (int iter = 0; iter < 15; ++iter) {
    Eigen::Matrix<double, 6, 6> h = Eigen::Matrix<double, 6, 6>::Zero();
    Vec6 b = Vec6::Zero();
    for (std::size_t i = 0; i < in_pts.size(); ++i) {
      const auto exp = project_with_jacobian(pose, in_pts[i], intr);
      if (!exp) continue;
      const Vec2 e(exp->camera_point.x() / exp->camera_point.z() - in_norm[i].x(),
                   exp->camera_point.y() / exp->camera_point.z() - in_norm[i].y());
      const double iz = 1.0 / exp->camera_point.z();
      Mat23 dnorm;
      dnorm << iz, 0, -exp->camera_point.x() * iz * iz, 0, iz,
          -exp->camera_point.y() * iz * iz;
      Mat26 j;
      j.leftCols<3>() = dnorm * (-skew(exp->camera_point));
      j.rightCols<3>() = dnorm;
      h += j.transpose() * j;
      b -= j.transpose() * e;
    }
    h.diagonal() += 1e-9 * Eigen::Matrix<double, 6, 1>::Ones();
    const Vec6 delta = h.ldlt().solve(b);
    if (!delta.allFinite() || delta.norm() < 1e-14) break;
    pose = pose.retract(delta);
  }
  result.pose = pose;
  result.inlier_count = count_inliers(pose, &result.inliers);
  if (result.inlier_count < min_inliers) return std::nullopt;
  return result;
}

// ---------------------------------------------------------------------------
// two-view initialization

namespace {

struct MatchedPair {
  Vec2 n0;  // normalized coordinates
  Vec2 n1;
  std::uint32_t index0;
  std::uint32_t index1;
};

Mat3 homography_dlt(const std::vector<MatchedPair>& pairs,
                    const std::vector<std::uint32_t>& sample) {
  Eigen::MatrixXd a(2 * sample.size(), 9);
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const auto& m = pairs[sample[i]];
    const double x = m.n0.x(), y = m.n0.y();
    const double u = m.n1.x(), v = m.n1.y();
    a.row(2 * i) << x, y, 1, 0, 0, 0, -u * x, -u * y, -u;
    a.row(2 * i + 1) << 0, 0, 0, x, y, 1, -v * x, -v * y, -v;
  }
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::VectorXd h = svd.matrixV().col(8);
  Mat3 m;
  m << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  return m;
}

Mat3 essential_eight_point(const std::vector<MatchedPair>& pairs,
                           const std::vector<std::uint32_t>& sample) {
  Eigen::MatrixXd a(sample.size(), 9);
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const auto& m = pairs[sample[i]];
    const double x0 = m.n0.x(), y0 = m.n0.y();
    const double x1 = m.n1.x(), y1 = m.n1.y();
    a.row(i) << x1 * x0, x1 * y0, x1, y1 * x0, y1 * y0, y1, x0, y0, 1;
  }
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::VectorXd e = svd.matrixV().col(8);
  Mat3 raw;
  raw << e(0), e(1), e(2), e(3), e(4), e(5), e(6), e(7), e(8);
  // enforce the essential structure: two equal singular values, one zero
  const Eigen::JacobiSVD<Mat3> esvd(raw, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Vec3 d = esvd.singularValues();
  const double s = 0.5 * (d(0) + d(1));
  return esvd.matrixU() * Eigen::DiagonalMatrix<double, 3>(s, s, 0.0) *
         esvd.matrixV().transpose();
}

double score_homography(const Mat3& h, const std::vector<MatchedPair>& pairs,
                        double chi2_threshold, std::vector<std::uint8_t>* inliers) {
  const Mat3 h_inv = h.inverse();
  double score = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& m = pairs[i];
    const Vec3 fwd = h * Vec3(m.n0.x(), m.n0.y(), 1.0);
    const Vec3 bwd = h_inv * Vec3(m.n1.x(), m.n1.y(), 1.0);
    bool ok = std::abs(fwd.z()) > 1e-12 && std::abs(bwd.z()) > 1e-12;
    double chi_fwd = chi2_threshold, chi_bwd = chi2_threshold;
    if (ok) {
      chi_fwd = (Vec2(fwd.x() / fwd.z(), fwd.y() / fwd.z()) - m.n1).squaredNorm();
      chi_bwd = (Vec2(bwd.x() / bwd.z(), bwd.y() / bwd.z()) - m.n0).squaredNorm();
    }
    const bool inlier = ok && chi_fwd < chi2_threshold && chi_bwd < chi2_threshold;
    if (inliers) (*inliers)[i] = inlier ? 1 : 0;
    if (inlier) score += (chi2_threshold - chi_fwd) + (chi2_threshold - chi_bwd);
  }
  return score;
}

double score_essential(const Mat3& e, const std::vector<MatchedPair>& pairs,
                       double chi2_threshold, std::vector<std::uint8_t>* inliers) {
  double score = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& m = pairs[i];
    const Vec3 x0(m.n0.x(), m.n0.y(), 1.0);
    const Vec3 x1(m.n1.x(), m.n1.y(), 1.0);
    const Vec3 line1 = e * x0;        // epipolar line in image 1
    const Vec3 line0 = e.transpose() * x1;
    const double d1 = x1.dot(line1);
    const double d0 = x0.dot(line0);
    const double den1 = line1.head<2>().squaredNorm();
    const double den0 = line0.head<2>().squaredNorm();
    bool ok = den1 > 1e-15 && den0 > 1e-15;
    double chi_1 = chi2_threshold, chi_0 = chi2_threshold;
    if (ok) {
      chi_1 = d1 * d1 / den1;
      chi_0 = d0 * d0 / den0;
    }
    const bool inlier = ok && chi_1 < chi2_threshold && chi_0 < chi2_threshold;
    if (inliers) (*inliers)[i] = inlier ? 1 : 0;
    if (inlier) score += (chi2_threshold - chi_1) + (chi2_threshold - chi_0);
  }
  return score;
}

struct HypothesisCheck {
  int good = 0;
  double median_parallax_deg = 0.0;
  std::vector<std::uint8_t> triangulated;
  std::vector<Vec3> points;
};

/// Cheirality and quality check of one (R, t) hypothesis against the inlier
/// matches: triangulate, require positive depth in both views, bounded
/// reprojection error, and real parallax.
HypothesisCheck check_rt(const Pose& pose1, const std::vector<MatchedPair>& pairs,
                         const std::vector<std::uint8_t>& inliers, double reproj_chi2) {
  HypothesisCheck out;
  out.triangulated.assign(pairs.size(), 0);
  out.points.assign(pairs.size(), Vec3::Zero());
  std::vector<double> parallaxes;
  const Pose pose0 = Pose::identity();
  const Vec3 c0 = Vec3::Zero();
  const Vec3 c1 = pose1.center();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (!inliers[i]) continue;
    const auto x = triangulate_two_view(pose0, pose1, pairs[i].n0, pairs[i].n1);
    if (!x || !x->allFinite()) continue;
    const Vec3 in0 = *x;
    const Vec3 in1 = pose1.apply(*x);
    if (in0.z() <= 0.0 || in1.z() <= 0.0) continue;
    const Vec2 r0 = Vec2(in0.x() / in0.z(), in0.y() / in0.z()) - pairs[i].n0;
    const Vec2 r1 = Vec2(in1.x() / in1.z(), in1.y() / in1.z()) - pairs[i].n1;
    if (r0.squaredNorm() > reproj_chi2 || r1.squaredNorm() > reproj_chi2) continue;
    const Vec3 ray0 = (*x - c0).normalized();
    const Vec3 ray1 = (*x - c1).normalized();
    const double parallax =
        std::acos(std::clamp(ray0.dot(ray1), -1.0, 1.0)) * 180.0 / M_PI;
    parallaxes.push_back(parallax);
    out.triangulated[i] = 1;
    out.points[i] = *x;
    ++out.good;
  }
  if (!parallaxes.empty()) {
    std::nth_element(parallaxes.begin(), parallaxes.begin() + parallaxes.size() / 2,
                     parallaxes.end());
    out.median_parallax_deg = parallaxes[parallaxes.size() / 2];
  }
  return out;
}

/// Faugeras-style decomposition of a calibrated homography into the eight
/// (R, t, n) motion hypotheses.
std::vector<Pose> homography_motions(const Mat3& h) {
  std::vector<Pose> motions;
  const Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Mat3 u = svd.matrixU();
  const Mat3 v = svd.matrixV();
  const double s = u.determinant() * v.determinant();
  const double d1 = svd.singularValues()(0);
  const double d2 = svd.singularValues()(1);
  const double d3 = svd.singularValues()(2);
  if (d1 / d2 < 1.00001 || d2 / d3 < 1.00001) return motions;  // degenerate spread

  const double aux1 = std::sqrt((d1 * d1 - d2 * d2) / (d1 * d1 - d3 * d3));
  const double aux3 = std::sqrt((d2 * d2 - d3 * d3) / (d1 * d1 - d3 * d3));
  const double x1[] = {aux1, aux1, -aux1, -aux1};
  const double x3[] = {aux3, -aux3, aux3, -aux3};

  const double aux_stheta =
      std::sqrt((d1 * d1 - d2 * d2) * (d2 * d2 - d3 * d3)) / ((d1 + d3) * d2);
  const double ctheta = (d2 * d2 + d1 * d3) / ((d1 + d3) * d2);
  const double stheta[] = {aux_stheta, -aux_stheta, -aux_stheta, aux_stheta};
  for (int i = 0; i < 4; ++i) {
    Mat3 rp = Mat3::Identity();
    rp(0, 0) = ctheta;
    rp(0, 2) = -stheta[i];
    rp(2, 0) = stheta[i];
    rp(2, 2) = ctheta;
    const Mat3 r = s * u * rp * v.transpose();
    Vec3 tp(x1[i], 0.0, -x3[i]);
    tp *= d1 - d3;
    const Vec3 t = u * tp;
    motions.emplace_back(Quat(r), t.normalized());
  }

  const double aux_sphi =
      std::sqrt((d1 * d1 - d2 * d2) * (d2 * d2 - d3 * d3)) / ((d1 - d3) * d2);
  const double cphi = (d1 * d3 - d2 * d2) / ((d1 - d3) * d2);
  const double sphi[] = {aux_sphi, -aux_sphi, -aux_sphi, aux_sphi};
  for (int i = 0; i < 4; ++i) {
    Mat3 rp = Mat3::Identity();
    rp(0, 0) = cphi;
    rp(0, 2) = sphi[i];
    rp(1, 1) = -1.0;
    rp(2, 0) = sphi[i];
    rp(2, 2) = -cphi;
    const Mat3 r = s * u * rp * v.transpose();
    Vec3 tp(x1[i], 0.0, x3[i]);
    tp *= d1 + d3;
    const Vec3 t = u * tp;
    motions.emplace_back(Quat(r), t.normalized());
  }
  return motions;
}

std::vector<Pose> essential_motions(const Mat3& e) {
  const Eigen::JacobiSVD<Mat3> svd(e, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU();
  Mat3 v = svd.matrixV();
  if (u.determinant() < 0) u *= -1.0;
  if (v.determinant() < 0) v *= -1.0;
  Mat3 w;
  w << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const Mat3 r1 = u * w * v.transpose();
  const Mat3 r2 = u * w.transpose() * v.transpose();
  const Vec3 t = u.col(2).normalized();
  return {Pose(Quat(r1), t), Pose(Quat(r1), -t), Pose(Quat(r2), t), Pose(Quat(r2), -t)};
}

std::optional<TwoViewInit> reconstruct(const std::vector<Pose>& motions,
                                       const std::vector<MatchedPair>& pairs,
                                       const std::vector<std::uint8_t>& inliers,
                                       const TwoViewParams& params, double reproj_chi2,
                                       bool used_homography) {
  if (motions.empty()) return std::nullopt;
  std::vector<HypothesisCheck> checks;
  int best = -1, best_good = 0, second_good = 0;
  for (std::size_t i = 0; i < motions.size(); ++i) {
    checks.push_back(check_rt(motions[i], pairs, inliers, reproj_chi2));
    const int good = checks.back().good;
    if (good > best_good) {
      second_good = best_good;
      best_good = good;
      best = static_cast<int>(i);
    } else if (good > second_good) {
      second_good = good;
    }
  }
  if (best < 0 || best_good < params.min_triangulated) return std::nullopt;
  // demand a clear winner and real parallax
  if (second_good > 0.75 * best_good) return std::nullopt;
  if (checks[best].median_parallax_deg < params.min_parallax_deg) return std::nullopt;

  TwoViewInit init;
  init.f1_pose = motions[best];
  init.used_homography = used_homography;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (!checks[best].triangulated[i]) continue;
    init.landmarks.push_back({pairs[i].index0, pairs[i].index1, checks[best].points[i]});
  }
  return init;
}

}  // namespace

std::optional<TwoViewInit> initialize_two_view(const Frame& f0, const Frame& f1,
                                               const TwoViewParams& params,
                                               std::uint64_t seed) {
  std::vector<Descriptor> d0, d1;
  for (const auto& kp : f0.keypoints) d0.push_back(kp.descriptor);
  for (const auto& kp : f1.keypoints) d1.push_back(kp.descriptor);
  const auto matches = match_descriptor_sets(
      d0, d1, MatchParams{params.ratio, params.tau_d});
  if (static_cast<int>(matches.size()) < params.min_matches) return std::nullopt;

  std::vector<MatchedPair> pairs;
  pairs.reserve(matches.size());
  for (const auto& [i0, i1] : matches) {
    MatchedPair m;
    m.index0 = i0;
    m.index1 = i1;
    m.n0 = f0.intrinsics.undistort(f0.keypoints[i0].pixel);
    m.n1 = f1.intrinsics.undistort(f1.keypoints[i1].pixel);
    pairs.push_back(m);
  }

  const double focal = 0.5 * (f0.intrinsics.fx + f0.intrinsics.fy);
  const double sigma_n = params.sigma_px / focal;
  const double chi2 = 5.991 * sigma_n * sigma_n;

  SimRng rng(seed);
  const auto draw_sample = [&](int k) {
    std::vector<std::uint32_t> idx;
    while (static_cast<int>(idx.size()) < k) {
      const auto c = static_cast<std::uint32_t>(rng.bits() % pairs.size());
      if (std::find(idx.begin(), idx.end(), c) == idx.end()) idx.push_back(c);
    }
    return idx;
  };

  double best_h_score = 0.0, best_e_score = 0.0;
  Mat3 best_h = Mat3::Identity(), best_e = Mat3::Identity();
  std::vector<std::uint8_t> h_inliers(pairs.size(), 0), e_inliers(pairs.size(), 0);
  std::vector<std::uint8_t> scratch(pairs.size(), 0);
  for (int iter = 0; iter < params.ransac_iters; ++iter) {
    const auto sample_h = draw_sample(4);
    const Mat3 h = homography_dlt(pairs, sample_h);
    const double sh = score_homography(h, pairs, chi2, &scratch);
    if (sh > best_h_score) {
      best_h_score = sh;
      best_h = h;
      h_inliers = scratch;
    }
    const auto sample_e = draw_sample(8);
    const Mat3 e = essential_eight_point(pairs, sample_e);
    const double se = score_essential(e, pairs, chi2, &scratch);
    if (se > best_e_score) {
      best_e_score = se;
      best_e = e;
      e_inliers = scratch;
    }
  }
  if (best_h_score <= 0.0 && best_e_score <= 0.0) return std::nullopt;

  const double reproj_chi2 = 4.0 * sigma_n * sigma_n;
  const double rh = best_h_score / std::max(1e-12, best_h_score + best_e_score);
  if (rh > params.homography_selection) {
    auto init = reconstruct(homography_motions(best_h), pairs, h_inliers, params,
                            reproj_chi2, true);
    if (init) return init;
    // planar selection can be marginal; fall through to the essential path
    return reconstruct(essential_motions(best_e), pairs, e_inliers, params, reproj_chi2,
                       false);
  }
  return reconstruct(essential_motions(best_e), pairs, e_inliers, params, reproj_chi2,
                     false);
}

}  // namespace kmslam
