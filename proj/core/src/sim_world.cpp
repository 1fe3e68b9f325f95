#include "kmslam/sim_world.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "kmslam/binary_io.hpp"

namespace kmslam {

double SimRng::gaussian(double sigma) {
  const double u1 = std::max(0x1.0p-53, uniform());
  const double u2 = uniform();
  return sigma * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

Descriptor SimRng::descriptor() {
  Descriptor d;
  for (auto& w : d.words) w = bits();
  return d;
}

namespace {

void validate(const WorldConfig& c) {
  const auto fail = [](const std::string& what) { raise(Errc::invalid_config, what); };
  if (c.frame_count < 2) fail("frame_count must be at least 2");
  if (c.landmark_count < 0 || c.marker_count < 0) fail("negative content count");
  if (c.pixel_sigma < 0 || c.corner_sigma < 0) fail("negative noise sigma");
  if (c.bitflip_prob < 0 || c.bitflip_prob > 1) fail("bitflip_prob outside [0,1]");
  if (c.dropout_prob < 0 || c.dropout_prob > 1) fail("dropout_prob outside [0,1]");
  if (!(c.pyramid.eta > 1.0)) fail("pyramid eta must exceed 1");
  if (c.pyramid.levels < 1) fail("pyramid needs at least one level");
  if (c.marker_count > 0 && !(c.marker_side > 0)) fail("marker_side must be positive");
  if (c.intrinsics.fx <= 0 || c.intrinsics.fy <= 0) fail("invalid intrinsics");
  if (c.intrinsics.width <= 0 || c.intrinsics.height <= 0) fail("invalid image size");
  if (c.path == PathKind::waypoints && c.waypoints.size() < 2) fail("need two waypoints");
  if (c.drift.segments < 0) fail("negative drift segments");
  if (c.drift.segments > 0 && !(c.drift.scale_per_segment > 0)) fail("bad drift scale");
}

/// world->camera pose for a camera at `center` looking toward `target`,
/// with image y pointing world-down.
Pose look_at(const Vec3& center, const Vec3& target) {
  const Vec3 forward = (target - center).normalized();
  Vec3 right = forward.cross(Vec3::UnitZ());
  if (right.norm() < 1e-6) right = forward.cross(Vec3::UnitY());
  right.normalize();
  const Vec3 down = forward.cross(right).normalized() * -1.0;
  Mat3 r_cw;  // columns: camera axes in world
  r_cw.col(0) = right;
  r_cw.col(1) = -down;
  r_cw.col(2) = forward;
  const Quat q(r_cw.transpose());
  return Pose(q, -(q * center));
}

struct PathSample {
  Vec3 position;
  Vec3 target;
  double progress;  // 0..1 along the whole path
};

PathSample sample_path(const WorldConfig& c, int frame) {
  PathSample s;
  const double u = static_cast<double>(frame) / c.frame_count;
  s.progress = std::min(1.0, u);
  if (c.path == PathKind::circle) {
    const double angle = 2.0 * M_PI * c.revolutions * u;
    s.position = Vec3(c.path_radius * std::cos(angle), c.path_radius * std::sin(angle),
                      c.camera_height);
    // look outward at the wall
    s.target = Vec3(c.wall_radius * std::cos(angle), c.wall_radius * std::sin(angle),
                    c.camera_height);
  } else {
    // piecewise-linear waypoints, uniform in arc length
    std::vector<double> cum{0.0};
    for (std::size_t i = 0; i + 1 < c.waypoints.size(); ++i)
      cum.push_back(cum.back() + (c.waypoints[i + 1] - c.waypoints[i]).norm());
    const double want = u * cum.back();
    std::size_t seg = 0;
    while (seg + 2 < cum.size() && cum[seg + 1] <= want) ++seg;
    const double seg_len = std::max(1e-9, cum[seg + 1] - cum[seg]);
    const double f = (want - cum[seg]) / seg_len;
    s.position = c.waypoints[seg] + f * (c.waypoints[seg + 1] - c.waypoints[seg]);
    const Vec3 dir = (c.waypoints[seg + 1] - c.waypoints[seg]).normalized();
    // look ahead and slightly up so wall and ceiling content stays in view
    s.target = s.position + dir + Vec3(0, 0, 0.55);
  }
  return s;
}

int nearest_segment(const WorldConfig& c, const std::vector<PathSample>& samples,
                    const Vec3& position, int segments) {
  double best = std::numeric_limits<double>::infinity();
  int best_frame = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double d = (samples[i].position - position).squaredNorm();
    if (d < best) {
      best = d;
      best_frame = static_cast<int>(i);
    }
  }
  const int seg = static_cast<int>(samples[best_frame].progress * segments);
  return std::min(seg, segments - 1);
}

}  // namespace

Frame ObservationSequence::make_frame(std::size_t index) const {
  Frame f;
  const auto& obs = frames.at(index);
  f.timestamp = obs.timestamp;
  f.intrinsics = config.intrinsics;
  f.keypoints = obs.keypoints;
  f.marker_detections = obs.markers;
  return f;
}

ObservationSequence generate(const WorldConfig& config) {
  validate(config);
  ObservationSequence seq;
  seq.config = config;
  SimRng rng(config.seed);

  // trajectory
  std::vector<PathSample> samples;
  for (int i = 0; i < config.frame_count; ++i) samples.push_back(sample_path(config, i));
  for (const auto& s : samples) seq.gt_poses.push_back(look_at(s.position, s.target));

  // world content
  if (config.path == PathKind::circle) {
    for (int i = 0; i < config.landmark_count; ++i) {
      LandmarkTruth lm;
      const double angle = rng.uniform(0.0, 2.0 * M_PI);
      const double z = rng.uniform(0.2, config.wall_height);
      const double r = config.wall_radius * rng.uniform(0.97, 1.03);
      lm.position = Vec3(r * std::cos(angle), r * std::sin(angle), z);
      lm.normal = Vec3(-std::cos(angle), -std::sin(angle), 0.0);
      lm.descriptor = rng.descriptor();
      seq.landmarks.push_back(lm);
    }
    for (int i = 0; i < config.marker_count; ++i) {
      MarkerTruth m;
      m.id = i;
      m.side = config.marker_side;
      const double angle = 2.0 * M_PI * i / std::max(1, config.marker_count);
      const Vec3 pos(config.wall_radius * std::cos(angle),
                     config.wall_radius * std::sin(angle), config.camera_height);
      // marker +z points inward (toward the cameras)
      const Vec3 inward = Vec3(-std::cos(angle), -std::sin(angle), 0.0);
      Mat3 r;
      r.col(2) = inward;
      r.col(0) = Vec3(0, 0, 1).cross(inward).normalized();
      r.col(1) = inward.cross(r.col(0));
      m.pose = Pose(Quat(r), pos);
      seq.markers.push_back(m);
    }
  } else {
    // corridor content on both walls and the ceiling, replicated per clone
    // segment when requested
    std::vector<double> cum{0.0};
    for (std::size_t i = 0; i + 1 < config.waypoints.size(); ++i)
      cum.push_back(cum.back() + (config.waypoints[i + 1] - config.waypoints[i]).norm());
    const double total_len = cum.back();
    const int clones = std::max(1, config.clone_segments);
    const double clone_len = total_len / clones;
    const int per_clone = config.landmark_count / clones;
    const int markers_per_clone =
        std::max(1, config.marker_count / clones) * (config.marker_count > 0 ? 1 : 0);

    const auto at_arc = [&](double arc) {
      std::size_t seg = 0;
      while (seg + 2 < cum.size() && cum[seg + 1] <= arc) ++seg;
      const double f = (arc - cum[seg]) / std::max(1e-9, cum[seg + 1] - cum[seg]);
      const Vec3 pos = config.waypoints[seg] + f * (config.waypoints[seg + 1] - config.waypoints[seg]);
      const Vec3 dir = (config.waypoints[seg + 1] - config.waypoints[seg]).normalized();
      return std::make_pair(pos, dir);
    };

    struct LocalLm {
      double arc;  // within clone
      double side_offset;
      double height;
      int surface;  // 0 left wall 1 right wall 2 ceiling
      Descriptor descriptor;
    };
    std::vector<LocalLm> proto;
    for (int i = 0; i < per_clone; ++i) {
      LocalLm lm;
      lm.arc = rng.uniform(0.0, clone_len);
      lm.surface = static_cast<int>(rng.bits() % 3);
      lm.side_offset = rng.uniform(-0.5, 0.5);
      lm.height = rng.uniform(0.3, config.corridor_height - 0.1);
      lm.descriptor = rng.descriptor();
      proto.push_back(lm);
    }
    struct LocalMarker {
      double arc;
    };
    std::vector<LocalMarker> proto_markers;
    for (int i = 0; i < markers_per_clone && config.marker_count > 0; ++i)
      proto_markers.push_back({clone_len * (i + 0.5) / markers_per_clone});

    int marker_id = 0;
    for (int clone = 0; clone < clones; ++clone) {
      for (const auto& lm : proto) {
        const auto [pos, dir] = at_arc(clone * clone_len + lm.arc);
        const Vec3 lateral = dir.cross(Vec3::UnitZ()).normalized();
        LandmarkTruth truth;
        truth.descriptor = lm.descriptor;  // identical descriptors across clones
        if (lm.surface == 2) {
          truth.position = pos + lateral * lm.side_offset +
                           Vec3(0, 0, config.corridor_height - pos.z());
          truth.normal = Vec3(0, 0, -1);
        } else {
          const double s = lm.surface == 0 ? -1.0 : 1.0;
          truth.position = pos + lateral * (s * config.corridor_width / 2) +
                           Vec3(0, 0, lm.height - pos.z());
          truth.normal = -s * lateral;
        }
        seq.landmarks.push_back(truth);
      }
      for (const auto& pm : proto_markers) {
        const auto [pos, dir] = at_arc(clone * clone_len + pm.arc);
        MarkerTruth m;
        m.id = marker_id++;  // unique across clones
        m.side = config.marker_side;
        const Vec3 down(0, 0, -1);
        Mat3 r;
        r.col(2) = down;
        r.col(0) = dir.cross(down).normalized();
        r.col(1) = down.cross(r.col(0));
        m.pose = Pose(Quat(r), Vec3(pos.x(), pos.y(), config.corridor_height));
        seq.markers.push_back(m);
      }
    }
  }

  // drift warps
  const int segments = config.drift.segments;
  if (segments > 0) {
    SimTransform acc;
    seq.segment_warps.push_back(acc);  // segment 0 unwarped
    const SimTransform step(config.drift.scale_per_segment,
                            so3_exp(Vec3(0, 0, config.drift.rotation_deg_per_segment *
                                                   M_PI / 180.0)),
                            Vec3(config.drift.translation_per_segment, 0, 0));
    for (int s = 1; s < segments; ++s) {
      acc = acc.compose(step);
      seq.segment_warps.push_back(acc);
    }
    for (auto& lm : seq.landmarks)
      lm.segment = nearest_segment(config, samples, lm.position, segments);
    for (auto& m : seq.markers)
      m.segment = nearest_segment(config, samples, m.pose.translation(), segments);
  }

  const auto warped_landmark = [&](const LandmarkTruth& lm) {
    if (segments == 0) return lm.position;
    return seq.segment_warps[lm.segment].apply(lm.position);
  };
  const auto warped_marker = [&](const MarkerTruth& m) {
    if (segments == 0) return m.pose;
    const SimTransform& w = seq.segment_warps[m.segment];
    return Pose(w.rotation() * m.pose.rotation(), w.apply(m.pose.translation()));
  };

  // observations
  const double max_angle = config.max_view_angle_deg * M_PI / 180.0;
  for (int i = 0; i < config.frame_count; ++i) {
    FrameObservations obs;
    obs.timestamp = static_cast<double>(i) / config.fps;
    const Pose& pose = seq.gt_poses[i];
    const Vec3 cam_center = pose.center();
    const bool blackout = config.blackout_start >= 0 && i >= config.blackout_start &&
                          i < config.blackout_start + config.blackout_length;

    for (std::uint32_t j = 0; j < seq.landmarks.size(); ++j) {
      const auto& lm = seq.landmarks[j];
      const Vec3 position = warped_landmark(lm);
      const Vec3 to_cam = cam_center - position;
      const double dist = to_cam.norm();
      if (dist < 0.2) continue;
      if (std::acos(std::clamp(lm.normal.dot(to_cam / dist), -1.0, 1.0)) > max_angle)
        continue;
      const auto px = try_project(pose, position, config.intrinsics);
      if (!px || !config.intrinsics.in_image(*px, 1.0)) continue;
      // noise and dropout draws happen for every visible landmark so the
      // stream stays reproducible regardless of gating outcomes downstream
      const Vec2 noise(rng.gaussian(config.pixel_sigma), rng.gaussian(config.pixel_sigma));
      const bool dropped = rng.bernoulli(config.dropout_prob);
      Descriptor d = lm.descriptor;
      if (config.bitflip_prob > 0.0) {
        for (int bit = 0; bit < kDescriptorBits; ++bit)
          if (rng.bernoulli(config.bitflip_prob)) d.flip_bit(bit);
      }
      if (dropped || blackout) continue;
      KeyPointObs kp;
      kp.pixel = *px + noise;
      if (!config.intrinsics.in_image(kp.pixel)) continue;
      const double ratio = std::max(dist / config.level_depth_ref, 1e-6);
      kp.level = std::clamp(
          static_cast<int>(std::lround(std::log(ratio) / std::log(config.pyramid.eta))), 0,
          config.pyramid.levels - 1);
      kp.descriptor = d;
      obs.keypoints.push_back(kp);
      obs.keypoint_landmark.push_back(j);
    }

    for (const auto& m : seq.markers) {
      const Pose marker_pose = warped_marker(m);
      const Vec3 center = marker_pose.translation();
      const Vec3 normal = marker_pose.rotation_matrix().col(2);
      const Vec3 to_cam = cam_center - center;
      const double dist = to_cam.norm();
      if (dist < 0.2) continue;
      if (std::acos(std::clamp(normal.dot(to_cam / dist), -1.0, 1.0)) > max_angle) continue;
      MarkerObs det;
      det.marker_id = m.id;
      bool visible = true;
      const auto corners = canonical_corners(m.side);
      for (int cix = 0; cix < 4; ++cix) {
        const auto px = try_project(pose, marker_pose.apply(corners[cix]), config.intrinsics);
        if (!px || !config.intrinsics.in_image(*px, 1.0)) {
          visible = false;
          break;
        }
        det.corners_px[cix] = *px + Vec2(rng.gaussian(config.corner_sigma),
                                         rng.gaussian(config.corner_sigma));
      }
      const bool dropped = rng.bernoulli(config.dropout_prob);
      if (!visible || dropped || blackout) continue;
      obs.markers.push_back(det);
    }
    seq.frames.push_back(std::move(obs));
  }
  return seq;
}

// ---------------------------------------------------------------------------
// scenarios

namespace {

WorldConfig base_config(std::uint64_t seed) {
  WorldConfig c;
  c.seed = seed;
  c.intrinsics.fx = c.intrinsics.fy = 450.0;
  c.intrinsics.cx = 320.0;
  c.intrinsics.cy = 240.0;
  c.intrinsics.width = 640;
  c.intrinsics.height = 480;
  return c;
}

std::vector<Vec3> corridor_waypoints(double length) {
  return {Vec3(0, 0, 1.2), Vec3(length, 0, 1.2)};
}

}  // namespace

WorldConfig scenario_config(const std::string& name, std::uint64_t seed) {
  WorldConfig c = base_config(seed);
  if (name == "loop_with_drift") {
    c.frame_count = 360;
    c.landmark_count = 500;
    c.marker_count = 12;
    c.pixel_sigma = 0.5;
    c.corner_sigma = 0.3;
    c.bitflip_prob = 0.01;
    c.dropout_prob = 0.02;
    c.drift.segments = 8;
    c.drift.translation_per_segment = 0.05;
    c.drift.rotation_deg_per_segment = 0.2;
    return c;
  }
  if (name == "markerless") {
    c.frame_count = 300;
    c.landmark_count = 500;
    c.marker_count = 0;
    c.pixel_sigma = 0.3;
    c.bitflip_prob = 0.01;
    c.dropout_prob = 0.02;
    return c;
  }
  if (name == "marker_only") {
    c.frame_count = 300;
    c.landmark_count = 0;
    c.marker_count = 16;
    c.corner_sigma = 0.3;
    c.dropout_prob = 0.02;
    return c;
  }
  if (name == "kidnapped_camera") {
    c.frame_count = 450;
    c.revolutions = 1.5;
    c.landmark_count = 450;
    c.marker_count = 12;
    c.pixel_sigma = 0.3;
    c.corner_sigma = 0.3;
    c.bitflip_prob = 0.01;
    c.blackout_start = 330;
    c.blackout_length = 50;
    return c;
  }
  if (name == "repetitive_corridor") {
    c.frame_count = 360;
    c.path = PathKind::waypoints;
    c.waypoints = corridor_waypoints(24.0);
    c.clone_segments = 4;
    c.landmark_count = 480;
    c.marker_count = 8;
    c.pixel_sigma = 0.3;
    c.corner_sigma = 0.3;
    c.dropout_prob = 0.01;
    return c;
  }
  raise(Errc::unknown_scenario, name);
}

std::vector<std::string> scenario_names() {
  return {"loop_with_drift", "markerless", "marker_only", "kidnapped_camera",
          "repetitive_corridor"};
}

// ---------------------------------------------------------------------------
// sequence file: text header with the config echo, then binary blocks

namespace {

constexpr char kSeqMagic[4] = {'U', 'F', 'S', 'Q'};
constexpr std::uint32_t kSeqVersion = 1;
constexpr const char* kHeaderEnd = "---binary---";

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_pose(BinaryWriter& w, const Pose& pose) {
  const Quat& q = pose.rotation();
  w.f64(q.w());
  w.f64(q.x());
  w.f64(q.y());
  w.f64(q.z());
  for (int i = 0; i < 3; ++i) w.f64(pose.translation()(i));
}

Pose read_pose(BinaryReader& r) {
  const double qw = r.f64(), qx = r.f64(), qy = r.f64(), qz = r.f64();
  Vec3 t;
  for (int i = 0; i < 3; ++i) t(i) = r.f64();
  return Pose(Quat(qw, qx, qy, qz), t);
}

std::string header_text(const WorldConfig& c) {
  std::ostringstream os;
  os << "kmslam-sequence v" << kSeqVersion << "\n";
  os << "seed = " << c.seed << "\n";
  os << "frame_count = " << c.frame_count << "\n";
  os << "fps = " << format_double(c.fps) << "\n";
  os << "landmark_count = " << c.landmark_count << "\n";
  os << "marker_count = " << c.marker_count << "\n";
  os << "marker_side = " << format_double(c.marker_side) << "\n";
  os << "clone_segments = " << c.clone_segments << "\n";
  os << "path = " << (c.path == PathKind::circle ? "circle" : "waypoints") << "\n";
  os << "pixel_sigma = " << format_double(c.pixel_sigma) << "\n";
  os << "corner_sigma = " << format_double(c.corner_sigma) << "\n";
  os << "bitflip_prob = " << format_double(c.bitflip_prob) << "\n";
  os << "dropout_prob = " << format_double(c.dropout_prob) << "\n";
  os << "drift_segments = " << c.drift.segments << "\n";
  os << "eta = " << format_double(c.pyramid.eta) << "\n";
  os << "levels = " << c.pyramid.levels << "\n";
  os << kHeaderEnd << "\n";
  return os.str();
}

}  // namespace

void save_sequence(const ObservationSequence& seq, const std::string& path) {
  const std::string header = header_text(seq.config);
  BinaryWriter w;
  w.raw(header.data(), header.size());
  w.raw(kSeqMagic, 4);
  w.u32(kSeqVersion);

  const WorldConfig& c = seq.config;
  w.u64(c.seed);
  w.f64(c.intrinsics.fx);
  w.f64(c.intrinsics.fy);
  w.f64(c.intrinsics.cx);
  w.f64(c.intrinsics.cy);
  for (const double d : c.intrinsics.dist) w.f64(d);
  w.i32(c.intrinsics.width);
  w.i32(c.intrinsics.height);
  w.f64(c.pyramid.eta);
  w.i32(c.pyramid.levels);
  w.f64(c.fps);
  w.i32(c.frame_count);
  w.i32(c.landmark_count);
  w.i32(c.marker_count);
  w.f64(c.marker_side);
  w.i32(c.clone_segments);
  w.u8(c.path == PathKind::circle ? 0 : 1);
  w.f64(c.path_radius);
  w.f64(c.wall_radius);
  w.f64(c.wall_height);
  w.f64(c.camera_height);
  w.f64(c.revolutions);
  w.u32(static_cast<std::uint32_t>(c.waypoints.size()));
  for (const auto& wp : c.waypoints)
    for (int i = 0; i < 3; ++i) w.f64(wp(i));
  w.f64(c.corridor_width);
  w.f64(c.corridor_height);
  w.f64(c.pixel_sigma);
  w.f64(c.corner_sigma);
  w.f64(c.bitflip_prob);
  w.f64(c.dropout_prob);
  w.i32(c.blackout_start);
  w.i32(c.blackout_length);
  w.i32(c.drift.segments);
  w.f64(c.drift.translation_per_segment);
  w.f64(c.drift.rotation_deg_per_segment);
  w.f64(c.drift.scale_per_segment);
  w.f64(c.level_depth_ref);
  w.f64(c.max_view_angle_deg);

  w.u32(static_cast<std::uint32_t>(seq.landmarks.size()));
  for (const auto& lm : seq.landmarks) {
    for (int i = 0; i < 3; ++i) w.f64(lm.position(i));
    for (int i = 0; i < 3; ++i) w.f64(lm.normal(i));
    for (const auto word : lm.descriptor.words) w.u64(word);
    w.i32(lm.segment);
  }
  w.u32(static_cast<std::uint32_t>(seq.markers.size()));
  for (const auto& m : seq.markers) {
    w.i32(m.id);
    w.f64(m.side);
    write_pose(w, m.pose);
    w.i32(m.segment);
  }
  w.u32(static_cast<std::uint32_t>(seq.segment_warps.size()));
  for (const auto& warp : seq.segment_warps) {
    w.f64(warp.scale());
    w.f64(warp.rotation().w());
    w.f64(warp.rotation().x());
    w.f64(warp.rotation().y());
    w.f64(warp.rotation().z());
    for (int i = 0; i < 3; ++i) w.f64(warp.translation()(i));
  }

  w.u32(static_cast<std::uint32_t>(seq.frames.size()));
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    const auto& frame = seq.frames[i];
    w.f64(frame.timestamp);
    write_pose(w, seq.gt_poses[i]);
    w.u32(static_cast<std::uint32_t>(frame.keypoints.size()));
    for (std::size_t k = 0; k < frame.keypoints.size(); ++k) {
      const auto& kp = frame.keypoints[k];
      w.i32(kp.level);
      w.f64(kp.pixel.x());
      w.f64(kp.pixel.y());
      for (const auto word : kp.descriptor.words) w.u64(word);
      w.u32(frame.keypoint_landmark[k]);
    }
    w.u32(static_cast<std::uint32_t>(frame.markers.size()));
    for (const auto& det : frame.markers) {
      w.i32(det.marker_id);
      for (const auto& corner : det.corners_px) {
        w.f64(corner.x());
        w.f64(corner.y());
      }
    }
  }
  w.u8('E');
  const auto& bytes = w.bytes();
  write_file_atomic(path, bytes.data(), bytes.size());
}

ObservationSequence load_sequence(const std::string& path) {
  const auto bytes = read_file(path);
  // skip the text header
  std::size_t offset = 0;
  const std::string end_tag = std::string(kHeaderEnd) + "\n";
  while (offset < bytes.size()) {
    std::size_t line_end = offset;
    while (line_end < bytes.size() && bytes[line_end] != '\n') ++line_end;
    const std::string line(bytes.begin() + offset, bytes.begin() + line_end);
    offset = line_end + 1;
    if (line == kHeaderEnd) break;
  }
  if (offset >= bytes.size()) raise(Errc::bad_magic, "missing sequence header terminator");

  BinaryReader r(bytes.data() + offset, bytes.size() - offset);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kSeqMagic, 4) != 0) raise(Errc::bad_magic, "not a sequence file");
  const std::uint32_t version = r.u32();
  if (version != kSeqVersion)
    raise(Errc::unsupported_version, "sequence version " + std::to_string(version));

  ObservationSequence seq;
  WorldConfig& c = seq.config;
  c.seed = r.u64();
  c.intrinsics.fx = r.f64();
  c.intrinsics.fy = r.f64();
  c.intrinsics.cx = r.f64();
  c.intrinsics.cy = r.f64();
  for (double& d : c.intrinsics.dist) d = r.f64();
  c.intrinsics.width = r.i32();
  c.intrinsics.height = r.i32();
  c.pyramid.eta = r.f64();
  c.pyramid.levels = r.i32();
  c.fps = r.f64();
  c.frame_count = r.i32();
  c.landmark_count = r.i32();
  c.marker_count = r.i32();
  c.marker_side = r.f64();
  c.clone_segments = r.i32();
  c.path = r.u8() == 0 ? PathKind::circle : PathKind::waypoints;
  c.path_radius = r.f64();
  c.wall_radius = r.f64();
  c.wall_height = r.f64();
  c.camera_height = r.f64();
  c.revolutions = r.f64();
  const std::uint32_t n_wp = r.u32();
  c.waypoints.resize(n_wp);
  for (auto& wp : c.waypoints)
    for (int i = 0; i < 3; ++i) wp(i) = r.f64();
  c.corridor_width = r.f64();
  c.corridor_height = r.f64();
  c.pixel_sigma = r.f64();
  c.corner_sigma = r.f64();
  c.bitflip_prob = r.f64();
  c.dropout_prob = r.f64();
  c.blackout_start = r.i32();
  c.blackout_length = r.i32();
  c.drift.segments = r.i32();
  c.drift.translation_per_segment = r.f64();
  c.drift.rotation_deg_per_segment = r.f64();
  c.drift.scale_per_segment = r.f64();
  c.level_depth_ref = r.f64();
  c.max_view_angle_deg = r.f64();

  const std::uint32_t n_lm = r.u32();
  seq.landmarks.resize(n_lm);
  for (auto& lm : seq.landmarks) {
    for (int i = 0; i < 3; ++i) lm.position(i) = r.f64();
    for (int i = 0; i < 3; ++i) lm.normal(i) = r.f64();
    for (auto& word : lm.descriptor.words) word = r.u64();
    lm.segment = r.i32();
  }
  const std::uint32_t n_mk = r.u32();
  seq.markers.resize(n_mk);
  for (auto& m : seq.markers) {
    m.id = r.i32();
    m.side = r.f64();
    m.pose = read_pose(r);
    m.segment = r.i32();
  }
  const std::uint32_t n_warp = r.u32();
  for (std::uint32_t i = 0; i < n_warp; ++i) {
    const double scale = r.f64();
    const double qw = r.f64(), qx = r.f64(), qy = r.f64(), qz = r.f64();
    Vec3 t;
    for (int j = 0; j < 3; ++j) t(j) = r.f64();
    seq.segment_warps.emplace_back(scale, Quat(qw, qx, qy, qz), t);
  }

  const std::uint32_t n_frames = r.u32();
  seq.frames.resize(n_frames);
  seq.gt_poses.resize(n_frames);
  for (std::uint32_t i = 0; i < n_frames; ++i) {
    auto& frame = seq.frames[i];
    frame.timestamp = r.f64();
    seq.gt_poses[i] = read_pose(r);
    const std::uint32_t n_kp = r.u32();
    frame.keypoints.resize(n_kp);
    frame.keypoint_landmark.resize(n_kp);
    for (std::uint32_t k = 0; k < n_kp; ++k) {
      auto& kp = frame.keypoints[k];
      kp.level = r.i32();
      kp.pixel.x() = r.f64();
      kp.pixel.y() = r.f64();
      for (auto& word : kp.descriptor.words) word = r.u64();
      frame.keypoint_landmark[k] = r.u32();
    }
    const std::uint32_t n_det = r.u32();
    frame.markers.resize(n_det);
    for (auto& det : frame.markers) {
      det.marker_id = r.i32();
      for (auto& corner : det.corners_px) {
        corner.x() = r.f64();
        corner.y() = r.f64();
      }
    }
  }
  if (r.u8() != 'E') raise(Errc::truncated_stream, "missing end tag");
  return seq;
}

}  // namespace kmslam
