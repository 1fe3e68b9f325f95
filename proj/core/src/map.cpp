#include "kmslam/map.hpp"

#include <algorithm>
#include <deque>

#include "kmslam/binary_io.hpp"
#include "kmslam/matching.hpp"

namespace kmslam {

Descriptor representative_descriptor(const std::vector<Descriptor>& descriptors) {
  if (descriptors.empty()) raise(Errc::empty_input, "no descriptors");
  std::size_t best = 0;
  long best_sum = -1;
  for (std::size_t i = 0; i < descriptors.size(); ++i) {
    long sum = 0;
    for (const auto& other : descriptors) sum += descriptor_distance(descriptors[i], other);
    if (best_sum < 0 || sum < best_sum) {
      best_sum = sum;
      best = i;
    }
  }
  return descriptors[best];
}

Vec3 viewing_direction(const std::vector<Pose>& observing_keyframe_poses) {
  if (observing_keyframe_poses.empty()) raise(Errc::empty_input, "no observers");
  Vec3 sum = Vec3::Zero();
  for (const auto& pose : observing_keyframe_poses) sum += pose.view_axis();
  const double norm = sum.norm();
  if (norm < 1e-9) raise(Errc::degenerate_directions, "viewing axes cancel out");
  return sum / norm;
}

std::array<Vec3, 4> canonical_corners(double side) {
  if (!(side > 0.0)) raise(Errc::non_positive_side, "side = " + std::to_string(side));
  const double h = side / 2.0;
  return {Vec3(h, -h, 0.0), Vec3(h, h, 0.0), Vec3(-h, h, 0.0), Vec3(-h, -h, 0.0)};
}

Marker make_marker(int fiducial_id, double side) {
  Marker m;
  m.id = fiducial_id;
  m.side = side;
  m.corners_local = canonical_corners(side);
  return m;
}

// ---------------------------------------------------------------------------
// ObservationRegistry

const std::map<KeyframeId, std::uint32_t> ObservationRegistry::empty_point_observers_{};
const std::map<std::uint32_t, PointId> ObservationRegistry::empty_points_in_kf_{};
const std::map<MarkerId, MarkerObs> ObservationRegistry::empty_markers_in_kf_{};
const std::map<KeyframeId, MarkerObs> ObservationRegistry::empty_marker_observers_{};

bool ObservationRegistry::add_point_obs(PointId p, KeyframeId k, std::uint32_t idx) {
  auto& per_point = point_by_point_[p];
  if (per_point.count(k)) return false;
  auto& per_kf = point_by_keyframe_[k];
  if (per_kf.count(idx)) return false;  // keypoint already bound to another point
  per_point.emplace(k, idx);
  per_kf.emplace(idx, p);
  return true;
}

bool ObservationRegistry::remove_point_obs(PointId p, KeyframeId k) {
  auto it = point_by_point_.find(p);
  if (it == point_by_point_.end()) return false;
  auto obs = it->second.find(k);
  if (obs == it->second.end()) return false;
  auto kf_it = point_by_keyframe_.find(k);
  if (kf_it != point_by_keyframe_.end()) {
    kf_it->second.erase(obs->second);
    if (kf_it->second.empty()) point_by_keyframe_.erase(kf_it);
  }
  it->second.erase(obs);
  if (it->second.empty()) point_by_point_.erase(it);
  return true;
}

bool ObservationRegistry::add_marker_obs(MarkerId m, KeyframeId k, const MarkerObs& obs) {
  auto& per_marker = marker_by_marker_[m];
  if (per_marker.count(k)) return false;
  per_marker.emplace(k, obs);
  marker_by_keyframe_[k].emplace(m, obs);
  return true;
}

bool ObservationRegistry::remove_marker_obs(MarkerId m, KeyframeId k) {
  auto it = marker_by_marker_.find(m);
  if (it == marker_by_marker_.end() || !it->second.count(k)) return false;
  it->second.erase(k);
  if (it->second.empty()) marker_by_marker_.erase(it);
  auto kf_it = marker_by_keyframe_.find(k);
  if (kf_it != marker_by_keyframe_.end()) {
    kf_it->second.erase(m);
    if (kf_it->second.empty()) marker_by_keyframe_.erase(kf_it);
  }
  return true;
}

bool ObservationRegistry::has_point_obs(PointId p, KeyframeId k) const {
  auto it = point_by_point_.find(p);
  return it != point_by_point_.end() && it->second.count(k) > 0;
}

bool ObservationRegistry::has_marker_obs(MarkerId m, KeyframeId k) const {
  auto it = marker_by_marker_.find(m);
  return it != marker_by_marker_.end() && it->second.count(k) > 0;
}

const std::map<KeyframeId, std::uint32_t>& ObservationRegistry::point_observers(
    PointId p) const {
  auto it = point_by_point_.find(p);
  return it == point_by_point_.end() ? empty_point_observers_ : it->second;
}

const std::map<std::uint32_t, PointId>& ObservationRegistry::points_in_keyframe(
    KeyframeId k) const {
  auto it = point_by_keyframe_.find(k);
  return it == point_by_keyframe_.end() ? empty_points_in_kf_ : it->second;
}

const std::map<MarkerId, MarkerObs>& ObservationRegistry::markers_in_keyframe(
    KeyframeId k) const {
  auto it = marker_by_keyframe_.find(k);
  return it == marker_by_keyframe_.end() ? empty_markers_in_kf_ : it->second;
}

const std::map<KeyframeId, MarkerObs>& ObservationRegistry::marker_observers(
    MarkerId m) const {
  auto it = marker_by_marker_.find(m);
  return it == marker_by_marker_.end() ? empty_marker_observers_ : it->second;
}

std::size_t ObservationRegistry::point_obs_count() const {
  std::size_t n = 0;
  for (const auto& [p, obs] : point_by_point_) n += obs.size();
  return n;
}

std::size_t ObservationRegistry::marker_obs_count() const {
  std::size_t n = 0;
  for (const auto& [m, obs] : marker_by_marker_) n += obs.size();
  return n;
}

// ---------------------------------------------------------------------------
// ConnectionGraph

void ConnectionGraph::add_weight(KeyframeId a, KeyframeId b, int delta) {
  if (a == b || delta == 0) return;
  const auto set = [&](std::uint32_t u, std::uint32_t v) {
    auto& row = adjacency_[u];
    const int w = (row.count(v) ? row[v] : 0) + delta;
    if (w <= 0) {
      row.erase(v);
      if (row.empty()) adjacency_.erase(u);
    } else {
      row[v] = w;
    }
  };
  set(a.value, b.value);
  set(b.value, a.value);
}

int ConnectionGraph::weight(KeyframeId a, KeyframeId b) const {
  auto it = adjacency_.find(a.value);
  if (it == adjacency_.end()) return 0;
  auto jt = it->second.find(b.value);
  return jt == it->second.end() ? 0 : jt->second;
}

std::vector<KeyframeId> ConnectionGraph::neighbors(KeyframeId k) const {
  std::vector<KeyframeId> out;
  auto it = adjacency_.find(k.value);
  if (it == adjacency_.end()) return out;
  out.reserve(it->second.size());
  for (const auto& [v, w] : it->second) out.push_back(KeyframeId{v});
  return out;
}

void ConnectionGraph::remove_vertex(KeyframeId k) {
  auto it = adjacency_.find(k.value);
  if (it == adjacency_.end()) return;
  for (const auto& [v, w] : it->second) {
    auto jt = adjacency_.find(v);
    if (jt != adjacency_.end()) {
      jt->second.erase(k.value);
      if (jt->second.empty()) adjacency_.erase(jt);
    }
  }
  adjacency_.erase(k.value);
}

std::size_t ConnectionGraph::edge_count() const {
  std::size_t n = 0;
  for (const auto& [u, row] : adjacency_) n += row.size();
  return n / 2;
}

std::vector<std::pair<std::pair<std::uint32_t, std::uint32_t>, int>> ConnectionGraph::edges()
    const {
  std::vector<std::pair<std::pair<std::uint32_t, std::uint32_t>, int>> out;
  for (const auto& [u, row] : adjacency_)
    for (const auto& [v, w] : row)
      if (u < v) out.push_back({{u, v}, w});
  return out;
}

std::vector<KeyframeId> ConnectionGraph::shortest_path(KeyframeId from, KeyframeId to) const {
  if (from == to) return {from};
  std::map<std::uint32_t, std::uint32_t> parent;
  std::deque<std::uint32_t> queue{from.value};
  parent[from.value] = from.value;
  while (!queue.empty()) {
    const std::uint32_t u = queue.front();
    queue.pop_front();
    auto it = adjacency_.find(u);
    if (it == adjacency_.end()) continue;
    for (const auto& [v, w] : it->second) {
      if (parent.count(v)) continue;
      parent[v] = u;
      if (v == to.value) {
        std::vector<KeyframeId> path{to};
        std::uint32_t cur = v;
        while (cur != from.value) {
          cur = parent[cur];
          path.push_back(KeyframeId{cur});
        }
        std::reverse(path.begin(), path.end());
        return path;
      }
      queue.push_back(v);
    }
  }
  return {};
}

// ---------------------------------------------------------------------------
// RecognitionDatabase

void RecognitionDatabase::add(KeyframeId k, std::vector<Descriptor> descriptors) {
  entries_[k] = std::move(descriptors);
}

void RecognitionDatabase::remove(KeyframeId k) { entries_.erase(k); }

double RecognitionDatabase::set_similarity(const std::vector<Descriptor>& a,
                                           const std::vector<Descriptor>& b,
                                           int distance_gate) {
  if (a.empty() || b.empty()) return 0.0;
  const auto pairs = mutual_matches(a, b, distance_gate);
  return static_cast<double>(pairs.size()) /
         static_cast<double>(std::min(a.size(), b.size()));
}

double RecognitionDatabase::similarity(const std::vector<Descriptor>& query,
                                       KeyframeId k) const {
  auto it = entries_.find(k);
  if (it == entries_.end()) return 0.0;
  return set_similarity(query, it->second, distance_gate_);
}

std::vector<RecognitionDatabase::Candidate> RecognitionDatabase::query(
    const std::vector<Descriptor>& query_descriptors, const std::set<KeyframeId>& exclude,
    double min_score) const {
  std::vector<Candidate> out;
  for (const auto& [k, descs] : entries_) {
    if (exclude.count(k)) continue;
    const double score = set_similarity(query_descriptors, descs, distance_gate_);
    if (score >= min_score) out.push_back({k, score});
  }
  std::stable_sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.keyframe < b.keyframe;
  });
  return out;
}

std::vector<KeyframeId> RecognitionDatabase::keyframes() const {
  std::vector<KeyframeId> out;
  out.reserve(entries_.size());
  for (const auto& [k, d] : entries_) out.push_back(k);
  return out;
}

// ---------------------------------------------------------------------------
// WorldMap

WorldMap::WorldMap(std::uint32_t block_capacity)
    : keyframes_(block_capacity), points_(block_capacity), markers_(block_capacity) {}

KeyframeId WorldMap::add_keyframe(Frame frame) {
  std::vector<Descriptor> descs;
  descs.reserve(frame.keypoints.size());
  for (const auto& kp : frame.keypoints) descs.push_back(kp.descriptor);
  const KeyframeId id = keyframes_.insert(std::move(frame));
  database_.add(id, std::move(descs));
  ++keyframe_insertions_;
  return id;
}

void WorldMap::remove_keyframe(KeyframeId id) {
  // Copy observation lists before mutating the registry under iteration.
  std::vector<PointId> observed_points;
  for (const auto& [idx, p] : registry_.points_in_keyframe(id)) observed_points.push_back(p);
  for (PointId p : observed_points) remove_point_observation(p, id);

  std::vector<MarkerId> observed_markers;
  for (const auto& [m, obs] : registry_.markers_in_keyframe(id)) observed_markers.push_back(m);
  for (MarkerId m : observed_markers) {
    for (const auto& [other, other_obs] : registry_.marker_observers(m))
      if (other != id) graph_.add_weight(id, other, -4);
    registry_.remove_marker_obs(m, id);
  }

  database_.remove(id);
  graph_.remove_vertex(id);
  keyframes_.erase(id);
}

PointId WorldMap::add_point(MapPoint point) { return points_.insert(std::move(point)); }

void WorldMap::remove_point(PointId id) {
  std::vector<KeyframeId> observers;
  for (const auto& [k, idx] : registry_.point_observers(id)) observers.push_back(k);
  for (KeyframeId k : observers) remove_point_observation(id, k);
  points_.erase(id);
}

MarkerId WorldMap::add_marker(Marker marker) {
  const int fid = marker.id;
  const MarkerId id = markers_.insert(std::move(marker));
  marker_index_[fid] = id;
  return id;
}

std::optional<MarkerId> WorldMap::marker_by_fiducial(int fiducial_id) const {
  auto it = marker_index_.find(fiducial_id);
  if (it == marker_index_.end()) return std::nullopt;
  return it->second;
}

bool WorldMap::add_point_observation(PointId p, KeyframeId k, std::uint32_t keypoint_index) {
  if (!registry_.add_point_obs(p, k, keypoint_index)) return false;
  for (const auto& [other, idx] : registry_.point_observers(p))
    if (other != k) graph_.add_weight(k, other, 1);
  return true;
}

void WorldMap::remove_point_observation(PointId p, KeyframeId k) {
  if (!registry_.has_point_obs(p, k)) return;
  for (const auto& [other, idx] : registry_.point_observers(p))
    if (other != k) graph_.add_weight(k, other, -1);
  registry_.remove_point_obs(p, k);
}

bool WorldMap::add_marker_observation(MarkerId m, KeyframeId k, const MarkerObs& obs) {
  if (!registry_.add_marker_obs(m, k, obs)) return false;
  for (const auto& [other, other_obs] : registry_.marker_observers(m))
    if (other != k) graph_.add_weight(k, other, 4);
  return true;
}

void WorldMap::merge_points(PointId into, PointId from) {
  if (into == from) return;
  std::vector<std::pair<KeyframeId, std::uint32_t>> obs;
  for (const auto& [k, idx] : registry_.point_observers(from)) obs.push_back({k, idx});
  for (const auto& [k, idx] : obs) {
    remove_point_observation(from, k);
    if (!registry_.has_point_obs(into, k)) add_point_observation(into, k, idx);
  }
  point(into).times_predicted += point(from).times_predicted;
  point(into).times_matched += point(from).times_matched;
  points_.erase(from);
  refresh_point_derived(into);
}

void WorldMap::refresh_point_derived(PointId p) {
  const auto& observers = registry_.point_observers(p);
  if (observers.empty()) return;
  std::vector<Pose> poses;
  std::vector<Descriptor> descs;
  for (const auto& [k, idx] : observers) {
    const auto& kf = keyframe(k);
    poses.push_back(kf.pose);
    descs.push_back(kf.keypoints[idx].descriptor);
  }
  MapPoint& pt = point(p);
  pt.rep_descriptor = representative_descriptor(descs);
  Vec3 sum = Vec3::Zero();
  for (const auto& pose : poses) sum += pose.view_axis();
  if (sum.norm() >= 1e-9) pt.view_dir = sum.normalized();
}

ConnectionGraph WorldMap::rebuild_graph() const {
  ConnectionGraph g;
  for (const auto id : points_.ids()) {
    const auto& observers = registry_.point_observers(id);
    for (auto a = observers.begin(); a != observers.end(); ++a) {
      auto b = a;
      for (++b; b != observers.end(); ++b) g.add_weight(a->first, b->first, 1);
    }
  }
  for (const auto id : markers_.ids()) {
    const auto& observers = registry_.marker_observers(id);
    for (auto a = observers.begin(); a != observers.end(); ++a) {
      auto b = a;
      for (++b; b != observers.end(); ++b) g.add_weight(a->first, b->first, 4);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

constexpr char kMagic[4] = {'U', 'F', 'S', 'M'};
constexpr std::uint32_t kFormatVersion = 1;

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

void write_descriptor(BinaryWriter& w, const Descriptor& d) {
  for (const auto word : d.words) w.u64(word);
}

Descriptor read_descriptor(BinaryReader& r) {
  Descriptor d;
  for (auto& word : d.words) word = r.u64();
  return d;
}

void write_intrinsics(BinaryWriter& w, const CameraIntrinsics& c) {
  w.f64(c.fx);
  w.f64(c.fy);
  w.f64(c.cx);
  w.f64(c.cy);
  for (const double d : c.dist) w.f64(d);
  w.i32(c.width);
  w.i32(c.height);
}

CameraIntrinsics read_intrinsics(BinaryReader& r) {
  CameraIntrinsics c;
  c.fx = r.f64();
  c.fy = r.f64();
  c.cx = r.f64();
  c.cy = r.f64();
  for (double& d : c.dist) d = r.f64();
  c.width = r.i32();
  c.height = r.i32();
  return c;
}

}  // namespace

std::vector<std::uint8_t> WorldMap::serialize() const {
  BinaryWriter w;
  w.raw(kMagic, 4);
  w.u32(kFormatVersion);

  w.u8('X');
  w.f64(pyramid.eta);
  w.i32(pyramid.levels);
  w.u32(keyframe_insertions_);

  w.u8('K');
  w.u32(keyframes_.block_capacity());
  w.u32(keyframes_.high_water());
  w.u32(keyframes_.size());
  keyframes_.for_each([&](KeyframeId id, const KeyFrame& kf) {
    w.u32(id.value);
    w.f64(kf.timestamp);
    write_pose(w, kf.pose);
    write_intrinsics(w, kf.intrinsics);
    w.u32(static_cast<std::uint32_t>(kf.keypoints.size()));
    for (const auto& kp : kf.keypoints) {
      w.i32(kp.level);
      w.f64(kp.pixel.x());
      w.f64(kp.pixel.y());
      write_descriptor(w, kp.descriptor);
    }
    w.u32(static_cast<std::uint32_t>(kf.marker_detections.size()));
    for (const auto& det : kf.marker_detections) {
      w.i32(det.marker_id);
      for (const auto& c : det.corners_px) {
        w.f64(c.x());
        w.f64(c.y());
      }
    }
  });

  w.u8('P');
  w.u32(points_.high_water());
  w.u32(points_.size());
  points_.for_each([&](PointId id, const MapPoint& p) {
    w.u32(id.value);
    for (int i = 0; i < 3; ++i) w.f64(p.position(i));
    for (int i = 0; i < 3; ++i) w.f64(p.view_dir(i));
    write_descriptor(w, p.rep_descriptor);
    w.u8(static_cast<std::uint8_t>(p.stability));
    w.u32(p.times_predicted);
    w.u32(p.times_matched);
    w.u32(p.created_at_insertion);
  });

  w.u8('M');
  w.u32(markers_.high_water());
  w.u32(markers_.size());
  markers_.for_each([&](MarkerId id, const Marker& m) {
    w.u32(id.value);
    w.i32(m.id);
    w.f64(m.side);
    w.u8(m.pose_valid ? 1 : 0);
    write_pose(w, m.pose);
  });

  w.u8('O');
  w.u32(static_cast<std::uint32_t>(registry_.point_obs_count()));
  points_.for_each([&](PointId id, const MapPoint&) {
    for (const auto& [k, idx] : registry_.point_observers(id)) {
      w.u32(id.value);
      w.u32(k.value);
      w.u32(idx);
    }
  });
  w.u32(static_cast<std::uint32_t>(registry_.marker_obs_count()));
  markers_.for_each([&](MarkerId id, const Marker&) {
    for (const auto& [k, obs] : registry_.marker_observers(id)) {
      w.u32(id.value);
      w.u32(k.value);
      for (const auto& c : obs.corners_px) {
        w.f64(c.x());
        w.f64(c.y());
      }
    }
  });

  w.u8('G');
  const auto edges = graph_.edges();
  w.u32(static_cast<std::uint32_t>(edges.size()));
  for (const auto& [key, weight] : edges) {
    w.u32(key.first);
    w.u32(key.second);
    w.i32(weight);
  }

  w.u8('D');
  w.i32(database_.distance_gate());
  const auto db_keyframes = database_.keyframes();
  w.u32(static_cast<std::uint32_t>(db_keyframes.size()));
  for (const auto k : db_keyframes) w.u32(k.value);

  w.u8('E');
  return w.take();
}

WorldMap WorldMap::deserialize(const std::vector<std::uint8_t>& bytes) {
  BinaryReader r(bytes);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) raise(Errc::bad_magic, "not a map file");
  const std::uint32_t version = r.u32();
  if (version != kFormatVersion)
    raise(Errc::unsupported_version, "map format version " + std::to_string(version));

  auto expect_section = [&](char tag) {
    const char got = static_cast<char>(r.u8());
    if (got != tag)
      raise(Errc::truncated_stream,
            std::string("expected section '") + tag + "' got '" + got + "'");
  };

  expect_section('X');
  PyramidConfig pyramid;
  pyramid.eta = r.f64();
  pyramid.levels = r.i32();
  const std::uint32_t insertions = r.u32();

  expect_section('K');
  const std::uint32_t block_capacity = r.u32();
  WorldMap map(block_capacity);
  map.pyramid = pyramid;
  map.keyframe_insertions_ = insertions;

  const std::uint32_t kf_high_water = r.u32();
  const std::uint32_t kf_count = r.u32();
  for (std::uint32_t i = 0; i < kf_count; ++i) {
    const KeyframeId id{r.u32()};
    Frame kf;
    kf.timestamp = r.f64();
    kf.pose = read_pose(r);
    kf.intrinsics = read_intrinsics(r);
    const std::uint32_t n_kp = r.u32();
    kf.keypoints.resize(n_kp);
    for (auto& kp : kf.keypoints) {
      kp.level = r.i32();
      kp.pixel.x() = r.f64();
      kp.pixel.y() = r.f64();
      kp.descriptor = read_descriptor(r);
    }
    const std::uint32_t n_det = r.u32();
    kf.marker_detections.resize(n_det);
    for (auto& det : kf.marker_detections) {
      det.marker_id = r.i32();
      for (auto& c : det.corners_px) {
        c.x() = r.f64();
        c.y() = r.f64();
      }
    }
    map.keyframes_.insert_at(id, std::move(kf));
  }
  map.keyframes_.restore_layout(kf_high_water);

  expect_section('P');
  const std::uint32_t pt_high_water = r.u32();
  const std::uint32_t pt_count = r.u32();
  for (std::uint32_t i = 0; i < pt_count; ++i) {
    const PointId id{r.u32()};
    MapPoint p;
    for (int j = 0; j < 3; ++j) p.position(j) = r.f64();
    for (int j = 0; j < 3; ++j) p.view_dir(j) = r.f64();
    p.rep_descriptor = read_descriptor(r);
    p.stability = static_cast<PointStability>(r.u8());
    p.times_predicted = r.u32();
    p.times_matched = r.u32();
    p.created_at_insertion = r.u32();
    map.points_.insert_at(id, std::move(p));
  }
  map.points_.restore_layout(pt_high_water);

  expect_section('M');
  const std::uint32_t mk_high_water = r.u32();
  const std::uint32_t mk_count = r.u32();
  for (std::uint32_t i = 0; i < mk_count; ++i) {
    const MarkerId id{r.u32()};
    const int fid = r.i32();
    const double side = r.f64();
    Marker m = make_marker(fid, side);
    m.pose_valid = r.u8() != 0;
    m.pose = read_pose(r);
    map.markers_.insert_at(id, std::move(m));
    map.marker_index_[fid] = id;
  }
  map.markers_.restore_layout(mk_high_water);

  expect_section('O');
  const std::uint32_t n_point_obs = r.u32();
  for (std::uint32_t i = 0; i < n_point_obs; ++i) {
    const PointId p{r.u32()};
    const KeyframeId k{r.u32()};
    const std::uint32_t idx = r.u32();
    map.registry_.add_point_obs(p, k, idx);
  }
  const std::uint32_t n_marker_obs = r.u32();
  for (std::uint32_t i = 0; i < n_marker_obs; ++i) {
    const MarkerId m{r.u32()};
    const KeyframeId k{r.u32()};
    MarkerObs obs;
    obs.marker_id = map.markers_.get(m).id;
    for (auto& c : obs.corners_px) {
      c.x() = r.f64();
      c.y() = r.f64();
    }
    map.registry_.add_marker_obs(m, k, obs);
  }

  expect_section('G');
  const std::uint32_t n_edges = r.u32();
  for (std::uint32_t i = 0; i < n_edges; ++i) {
    const KeyframeId a{r.u32()};
    const KeyframeId b{r.u32()};
    map.graph_.add_weight(a, b, r.i32());
  }

  expect_section('D');
  const int gate = r.i32();
  map.database_.set_distance_gate(gate);
  const std::uint32_t n_db = r.u32();
  for (std::uint32_t i = 0; i < n_db; ++i) {
    const KeyframeId k{r.u32()};
    const auto& kf = map.keyframes_.get(k);
    std::vector<Descriptor> descs;
    descs.reserve(kf.keypoints.size());
    for (const auto& kp : kf.keypoints) descs.push_back(kp.descriptor);
    map.database_.add(k, std::move(descs));
  }

  expect_section('E');
  return map;
}

void WorldMap::save(const std::string& path) const {
  const auto bytes = serialize();
  write_file_atomic(path, bytes.data(), bytes.size());
}

WorldMap WorldMap::load(const std::string& path) { return deserialize(read_file(path)); }

}  // namespace kmslam
