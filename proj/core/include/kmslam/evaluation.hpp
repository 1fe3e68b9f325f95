#pragma once

#include <string>
#include <vector>

#include "kmslam/geometry.hpp"
#include "kmslam/trajectory.hpp"

namespace kmslam {

/// Closed-form least-squares similarity (scale, rotation, translation)
/// minimizing sum |s R p_i + t - q_i|^2. Set with_scale = false for a rigid
/// fit. Throws degenerate_configuration for fewer than three points or
/// collinear geometry.
SimTransform align_sim3(const std::vector<Vec3>& from, const std::vector<Vec3>& to,
                        bool with_scale = true);

/// Frames tracked in both records, associated by timestamp within the given
/// tolerance. Returns the matched timestamps of record a.
std::vector<double> common_frames(const TrajectoryRecord& a, const TrajectoryRecord& b,
                                  double tolerance = 1e-4);

/// Translational RMSE after similarity alignment against the ground truth,
/// restricted to the given timestamps (empty subset = all frames tracked in
/// both). Throws empty_subset when nothing matches.
double ate(const TrajectoryRecord& traj, const TrajectoryRecord& gt,
           const std::vector<double>& frame_subset = {}, bool sim3_alignment = true,
           double tolerance = 1e-4);

/// Significance thresholds of the pairwise comparison.
inline double phi(double rho, double x, double y) { return rho * std::min(x, y); }
inline double phi_hat(double rho, double x, double y) { return rho * std::max(x, y); }

/// True when e_ab beats e_ba by more than the phi threshold.
bool error_significantly_smaller(double e_ab, double e_ba, double rho);

struct ScoreInput {
  double e_ab = 0.0;  // ATE of method a on the common frames
  double e_ba = 0.0;  // ATE of method b on the common frames
  double t_a = 0.0;   // frames tracked by a
  double t_b = 0.0;
  double rho = 0.05;
};

/// Per-sequence comparison score in {0, 0.5, 1}: full credit for winning on
/// both error and coverage, half for winning one with the other tied.
double pairwise_score(const ScoreInput& input);

/// Mean over sequences of S(a,b) - S(b,a); range [-1, 1], antisymmetric.
double aggregate_score(const std::vector<std::pair<double, double>>& per_sequence_scores);

struct SequenceComparison {
  std::string name;
  double e_ab = 0.0;
  double e_ba = 0.0;
  double t_a = 0.0;
  double t_b = 0.0;
  double s_ab = 0.0;
  double s_ba = 0.0;
  std::size_t common = 0;
};

struct ComparisonReport {
  std::vector<SequenceComparison> sequences;
  double rho = 0.05;
  double aggregate = 0.0;  // S_rho(a, b)

  std::string plain_text(const std::string& name_a, const std::string& name_b) const;
  std::string machine_rows(const std::string& name_a, const std::string& name_b) const;
};

/// Full comparison of two methods against ground truth over one or more
/// sequences: common frames, both conditional ATEs, both scores, aggregate.
ComparisonReport compare_methods(
    const std::vector<std::tuple<std::string, TrajectoryRecord, TrajectoryRecord,
                                 TrajectoryRecord>>& sequences,
    double rho);

}  // namespace kmslam
