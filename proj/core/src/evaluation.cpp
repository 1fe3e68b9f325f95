#include "kmslam/evaluation.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

namespace kmslam {

SimTransform align_sim3(const std::vector<Vec3>& from, const std::vector<Vec3>& to,
                        bool with_scale) {
  if (from.size() != to.size())
    raise(Errc::degenerate_configuration, "point sets differ in size");
  const std::size_t n = from.size();
  if (n < 3) raise(Errc::degenerate_configuration, "need at least 3 correspondences");

  Vec3 mean_from = Vec3::Zero(), mean_to = Vec3::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    mean_from += from[i];
    mean_to += to[i];
  }
  mean_from /= static_cast<double>(n);
  mean_to /= static_cast<double>(n);

  Mat3 cov = Mat3::Zero();
  double var_from = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 df = from[i] - mean_from;
    const Vec3 dt = to[i] - mean_to;
    cov += dt * df.transpose();
    var_from += df.squaredNorm();
  }
  cov /= static_cast<double>(n);
  var_from /= static_cast<double>(n);

  const Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 d = svd.singularValues();
  if (d(1) <= 1e-12 * std::max(d(0), 1e-300))
    raise(Errc::degenerate_configuration, "collinear points: rotation unobservable");

  Mat3 s = Mat3::Identity();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) s(2, 2) = -1.0;
  const Mat3 rotation = svd.matrixU() * s * svd.matrixV().transpose();

  double scale = 1.0;
  if (with_scale) {
    if (var_from <= 0.0) raise(Errc::degenerate_configuration, "zero variance");
    scale = (d(0) * s(0, 0) + d(1) * s(1, 1) + d(2) * s(2, 2)) / var_from;
    if (!(scale > 0.0)) raise(Errc::degenerate_configuration, "non-positive scale");
  }
  const Vec3 translation = mean_to - scale * (rotation * mean_from);
  return SimTransform(scale, Quat(rotation), translation);
}

namespace {

std::vector<std::pair<double, Vec3>> tracked_positions(const TrajectoryRecord& r) {
  std::vector<std::pair<double, Vec3>> out;
  for (const auto& e : r.entries)
    if (e.status == TrackStatus::tracked) out.push_back({e.timestamp, e.pose.center()});
  return out;
}

/// Index of the entry matching `timestamp` within tolerance, or -1.
int find_by_time(const std::vector<std::pair<double, Vec3>>& entries, double timestamp,
                 double tolerance) {
  const auto it = std::lower_bound(
      entries.begin(), entries.end(), timestamp - tolerance,
      [](const std::pair<double, Vec3>& a, double t) { return a.first < t; });
  if (it == entries.end()) return -1;
  if (std::abs(it->first - timestamp) > tolerance) return -1;
  return static_cast<int>(it - entries.begin());
}

}  // namespace

std::vector<double> common_frames(const TrajectoryRecord& a, const TrajectoryRecord& b,
                                  double tolerance) {
  const auto pa = tracked_positions(a);
  const auto pb = tracked_positions(b);
  std::vector<double> out;
  for (const auto& [ts, pos] : pa)
    if (find_by_time(pb, ts, tolerance) >= 0) out.push_back(ts);
  return out;
}

double ate(const TrajectoryRecord& traj, const TrajectoryRecord& gt,
           const std::vector<double>& frame_subset, bool sim3_alignment, double tolerance) {
  const auto pt = tracked_positions(traj);
  const auto pg = tracked_positions(gt);

  std::vector<Vec3> est, truth;
  const auto add_pair = [&](double ts) {
    const int i = find_by_time(pt, ts, tolerance);
    const int j = find_by_time(pg, ts, tolerance);
    if (i >= 0 && j >= 0) {
      est.push_back(pt[i].second);
      truth.push_back(pg[j].second);
    }
  };
  if (frame_subset.empty()) {
    for (const auto& [ts, pos] : pt) add_pair(ts);
  } else {
    for (const double ts : frame_subset) add_pair(ts);
  }
  if (est.empty()) raise(Errc::empty_subset, "no common tracked frames");
  if (est.size() < 3)
    raise(Errc::empty_subset, "too few common frames for alignment");

  const SimTransform alignment = align_sim3(est, truth, sim3_alignment);
  double acc = 0.0;
  for (std::size_t i = 0; i < est.size(); ++i)
    acc += (alignment.apply(est[i]) - truth[i]).squaredNorm();
  return std::sqrt(acc / static_cast<double>(est.size()));
}

bool error_significantly_smaller(double e_ab, double e_ba, double rho) {
  return e_ab < e_ba && std::abs(e_ba - e_ab) > phi(rho, e_ba, e_ab);
}

double pairwise_score(const ScoreInput& in) {
  const double de = in.e_ba - in.e_ab;
  const double dt = in.t_a - in.t_b;
  if (de > in.rho * in.e_ab && dt > in.rho * in.t_a) return 1.0;
  if (de > in.rho * in.e_ab && std::abs(dt) <= phi_hat(in.rho, in.t_a, in.t_b)) return 0.5;
  if (std::abs(de) <= phi(in.rho, in.e_ba, in.e_ab) && dt > in.rho * in.t_a) return 0.5;
  return 0.0;
}

double aggregate_score(const std::vector<std::pair<double, double>>& per_sequence_scores) {
  if (per_sequence_scores.empty()) raise(Errc::empty_input, "no sequences");
  double acc = 0.0;
  for (const auto& [ab, ba] : per_sequence_scores) acc += ab - ba;
  return acc / static_cast<double>(per_sequence_scores.size());
}

ComparisonReport compare_methods(
    const std::vector<std::tuple<std::string, TrajectoryRecord, TrajectoryRecord,
                                 TrajectoryRecord>>& sequences,
    double rho) {
  ComparisonReport report;
  report.rho = rho;
  std::vector<std::pair<double, double>> scores;
  for (const auto& [name, a, b, gt] : sequences) {
    SequenceComparison cmp;
    cmp.name = name;
    const auto common = common_frames(a, b);
    cmp.common = common.size();
    cmp.t_a = static_cast<double>(a.tracked_count());
    cmp.t_b = static_cast<double>(b.tracked_count());
    if (common.size() >= 3) {
      cmp.e_ab = ate(a, gt, common);
      cmp.e_ba = ate(b, gt, common);
    } else {
      cmp.e_ab = cmp.e_ba = std::numeric_limits<double>::infinity();
    }
    cmp.s_ab = pairwise_score({cmp.e_ab, cmp.e_ba, cmp.t_a, cmp.t_b, rho});
    cmp.s_ba = pairwise_score({cmp.e_ba, cmp.e_ab, cmp.t_b, cmp.t_a, rho});
    scores.push_back({cmp.s_ab, cmp.s_ba});
    report.sequences.push_back(cmp);
  }
  report.aggregate = aggregate_score(scores);
  return report;
}

std::string ComparisonReport::plain_text(const std::string& name_a,
                                         const std::string& name_b) const {
  std::string out;
  char line[512];
  std::snprintf(line, sizeof(line), "%-20s %10s %10s %8s %8s %6s %6s %6s\n", "sequence",
                "E(a|b)", "E(b|a)", "T_a", "T_b", "common", "S(a,b)", "S(b,a)");
  out += line;
  for (const auto& s : sequences) {
    std::snprintf(line, sizeof(line), "%-20s %10.4f %10.4f %8.0f %8.0f %6zu %6.1f %6.1f\n",
                  s.name.c_str(), s.e_ab, s.e_ba, s.t_a, s.t_b, s.common, s.s_ab, s.s_ba);
    out += line;
  }
  std::snprintf(line, sizeof(line), "aggregate S_%.2f(%s, %s) = %+.4f\n", rho,
                name_a.c_str(), name_b.c_str(), aggregate);
  out += line;
  return out;
}

std::string ComparisonReport::machine_rows(const std::string& name_a,
                                           const std::string& name_b) const {
  std::string out = "sequence,method_a,method_b,rho,e_ab,e_ba,t_a,t_b,common,s_ab,s_ba\n";
  char line[512];
  for (const auto& s : sequences) {
    std::snprintf(line, sizeof(line), "%s,%s,%s,%.6g,%.9g,%.9g,%.0f,%.0f,%zu,%.1f,%.1f\n",
                  s.name.c_str(), name_a.c_str(), name_b.c_str(), rho, s.e_ab, s.e_ba, s.t_a,
                  s.t_b, s.common, s.s_ab, s.s_ba);
    out += line;
  }
  std::snprintf(line, sizeof(line), "aggregate,%s,%s,%.6g,,,,,,%.6g,\n", name_a.c_str(),
                name_b.c_str(), rho, aggregate);
  out += line;
  return out;
}

}  // namespace kmslam
