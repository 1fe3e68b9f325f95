#include "kmslam/trajectory.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "kmslam/binary_io.hpp"

namespace kmslam {

std::size_t TrajectoryRecord::tracked_count() const {
  std::size_t n = 0;
  for (const auto& e : entries)
    if (e.status == TrackStatus::tracked) ++n;
  return n;
}

std::string to_tum_text(const TrajectoryRecord& record) {
  std::string out;
  char line[256];
  for (const auto& e : record.entries) {
    if (e.status != TrackStatus::tracked) continue;
    const Pose cam_to_world = e.pose.inverse();
    const Vec3& t = cam_to_world.translation();
    const Quat& q = cam_to_world.rotation();
    std::snprintf(line, sizeof(line), "%.6f %.9f %.9f %.9f %.9f %.9f %.9f %.9f\n",
                  e.timestamp, t.x(), t.y(), t.z(), q.x(), q.y(), q.z(), q.w());
    out += line;
  }
  return out;
}

void save_trajectory(const TrajectoryRecord& record, const std::string& path) {
  write_text_file_atomic(path, to_tum_text(record));
}

TrajectoryRecord load_trajectory(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(Errc::io_error, "cannot open " + path);
  TrajectoryRecord record;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    double ts, tx, ty, tz, qx, qy, qz, qw;
    if (!(is >> ts >> tx >> ty >> tz >> qx >> qy >> qz >> qw))
      raise(Errc::io_error, "malformed trajectory line: " + line);
    TrajectoryEntry e;
    e.timestamp = ts;
    e.status = TrackStatus::tracked;
    e.pose = Pose(Quat(qw, qx, qy, qz), Vec3(tx, ty, tz)).inverse();
    record.entries.push_back(e);
  }
  return record;
}

}  // namespace kmslam
