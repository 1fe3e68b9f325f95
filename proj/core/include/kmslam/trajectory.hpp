#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kmslam/geometry.hpp"

namespace kmslam {

enum class TrackStatus : std::uint8_t { uninitialized = 0, tracked = 1, lost = 2 };

struct TrajectoryEntry {
  double timestamp = 0.0;
  TrackStatus status = TrackStatus::uninitialized;
  Pose pose;  // grs -> crs, meaningful iff status == tracked
};

struct TrajectoryRecord {
  std::vector<TrajectoryEntry> entries;

  std::size_t tracked_count() const;
};

/// One line per tracked frame, "timestamp tx ty tz qx qy qz qw" with the
/// camera-to-world pose; untracked frames are omitted.
std::string to_tum_text(const TrajectoryRecord& record);
void save_trajectory(const TrajectoryRecord& record, const std::string& path);
TrajectoryRecord load_trajectory(const std::string& path);

}  // namespace kmslam
