#include "msfm/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <unordered_set>

namespace msfm {

Camera Camera::from_intrinsics(ImageId id, const Intrinsics& k, const Mat3& R,
                               const Vec3& t) {
  Camera c;
  c.image_id = id;
  c.K << k.focal, 0.0, k.cx, 0.0, k.focal, k.cy, 0.0, 0.0, 1.0;
  c.R = R;
  c.t = t;
  return c;
}

Vec2 Camera::project(const Vec3& X) const {
  const Vec3 x = K * (R * X + t);
  return x.hnormalized();
}

Mat34 Camera::projection() const {
  Mat34 Rt;
  Rt.leftCols<3>() = R;
  Rt.col(3) = t;
  return K * Rt;
}

bool Point3D::observed_in(ImageId id) const {
  auto it = std::lower_bound(
      track.begin(), track.end(), id,
      [](const FeatureRef& r, ImageId v) { return r.image_id < v; });
  return it != track.end() && it->image_id == id;
}

const Camera& Model::require(ImageId id) const {
  auto it = cameras_.find(id);
  if (it == cameras_.end()) {
    throw Error(ErrorCode::kNotRegistered,
                "image " + std::to_string(id) + " is not registered");
  }
  return it->second;
}

const Camera& Model::camera(ImageId id) const { return require(id); }

const std::map<FeatureId, PointId>& Model::observations(ImageId id) const {
  require(id);
  static const std::map<FeatureId, PointId> kEmpty;
  auto it = obs_.find(id);
  return it == obs_.end() ? kEmpty : it->second;
}

std::vector<PointId> Model::points_visible_in(ImageId id) const {
  std::vector<PointId> out;
  for (const auto& [fid, pid] : observations(id)) out.push_back(pid);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<PointId> Model::covisible_points(ImageId a, ImageId b) const {
  const auto& oa = observations(a);
  const auto& ob = observations(b);
  const bool a_smaller = oa.size() <= ob.size();
  const auto& small = a_smaller ? oa : ob;
  const ImageId other = a_smaller ? b : a;
  std::vector<PointId> out;
  for (const auto& [fid, pid] : small) {
    if (points_[pid].observed_in(other)) out.push_back(pid);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::size_t Model::covisible_count(ImageId a, ImageId b) const {
  return covisible_points(a, b).size();
}

std::optional<PointId> Model::point_of(const FeatureRef& ref) const {
  auto it = obs_.find(ref.image_id);
  if (it == obs_.end()) return std::nullopt;
  auto jt = it->second.find(ref.feature_id);
  if (jt == it->second.end()) return std::nullopt;
  return jt->second;
}

AttachResult Model::attach_camera(const Camera& camera,
                                  std::span<const PointObservation> inliers) {
  if (is_registered(camera.image_id)) {
    throw Error(ErrorCode::kAlreadyRegistered,
                "image " + std::to_string(camera.image_id) +
                    " already registered");
  }
  for (const auto& [pid, ref] : inliers) {
    if (pid >= points_.size()) {
      throw Error(ErrorCode::kArgument,
                  "attach_camera: point index out of range");
    }
    if (ref.image_id != camera.image_id) {
      throw Error(ErrorCode::kArgument,
                  "attach_camera: feature belongs to another image");
    }
  }
  cameras_.emplace(camera.image_id, camera);
  auto& obs = obs_[camera.image_id];
  AttachResult result;
  for (const auto& [pid, ref] : inliers) {
    Point3D& p = points_[pid];
    if (obs.count(ref.feature_id) != 0 || p.observed_in(ref.image_id)) {
      ++result.conflicts;
      continue;
    }
    auto pos = std::upper_bound(p.track.begin(), p.track.end(), ref);
    p.track.insert(pos, ref);
    p.mean_descriptor.reset();
    obs.emplace(ref.feature_id, pid);
    ++result.applied;
  }
  return result;
}

void Model::set_camera(const Camera& camera) {
  require(camera.image_id);
  cameras_[camera.image_id] = camera;
}

PointId Model::add_point(const Vec3& position, std::vector<FeatureRef> track) {
  std::sort(track.begin(), track.end());
  if (track.size() < 2) {
    throw Error(ErrorCode::kArgument, "track needs at least two observations");
  }
  for (std::size_t i = 0; i < track.size(); ++i) {
    require(track[i].image_id);
    if (i > 0 && track[i].image_id == track[i - 1].image_id) {
      throw Error(ErrorCode::kArgument, "track observes an image twice");
    }
    if (point_of(track[i])) {
      throw Error(ErrorCode::kConflict, "feature already belongs to a track");
    }
  }
  const auto id = static_cast<PointId>(points_.size());
  for (const auto& r : track) obs_[r.image_id].emplace(r.feature_id, id);
  points_.push_back(Point3D{position, std::move(track), std::nullopt});
  return id;
}

void Model::set_position(PointId id, const Vec3& position) {
  points_.at(id).position = position;
}

bool Model::extend_track(PointId id, const FeatureRef& ref) {
  require(ref.image_id);
  Point3D& p = points_.at(id);
  if (point_of(ref) || p.observed_in(ref.image_id)) return false;
  p.track.insert(std::upper_bound(p.track.begin(), p.track.end(), ref), ref);
  p.mean_descriptor.reset();
  obs_[ref.image_id].emplace(ref.feature_id, id);
  return true;
}

void Model::remove_observation(PointId id, const FeatureRef& ref) {
  Point3D& p = points_.at(id);
  auto it = std::find(p.track.begin(), p.track.end(), ref);
  if (it == p.track.end()) return;
  p.track.erase(it);
  p.mean_descriptor.reset();
  obs_[ref.image_id].erase(ref.feature_id);
}

std::vector<std::optional<PointId>> Model::remove_points(
    std::span<const PointId> ids) {
  std::vector<char> drop(points_.size(), 0);
  for (PointId id : ids) drop.at(id) = 1;
  std::vector<std::optional<PointId>> remap(points_.size());
  std::vector<Point3D> kept;
  kept.reserve(points_.size());
  for (std::size_t i = 0; i < points_.size(); ++i) {
    if (drop[i]) continue;
    remap[i] = static_cast<PointId>(kept.size());
    kept.push_back(std::move(points_[i]));
  }
  points_ = std::move(kept);
  for (auto& [img, m] : obs_) {
    for (auto it = m.begin(); it != m.end();) {
      if (auto nid = remap[it->second]) {
        it->second = *nid;
        ++it;
      } else {
        it = m.erase(it);
      }
    }
  }
  return remap;
}

std::size_t Model::prune_short_tracks() {
  std::vector<PointId> dead;
  for (std::size_t i = 0; i < points_.size(); ++i) {
    if (points_[i].track.size() < 2) dead.push_back(static_cast<PointId>(i));
  }
  remove_points(dead);
  return dead.size();
}

void Model::clear_descriptor_cache(PointId id) {
  points_.at(id).mean_descriptor.reset();
}

void Model::set_mean_descriptor(PointId id, std::vector<float> descriptor) {
  points_.at(id).mean_descriptor = std::move(descriptor);
}

bool Model::is_consistent() const {
  std::size_t tracked = 0;
  for (std::size_t i = 0; i < points_.size(); ++i) {
    const auto& track = points_[i].track;
    if (track.size() < 2) return false;
    for (std::size_t k = 0; k < track.size(); ++k) {
      if (!is_registered(track[k].image_id)) return false;
      if (k > 0 && track[k].image_id <= track[k - 1].image_id) return false;
      auto p = point_of(track[k]);
      if (!p || *p != i) return false;
    }
    tracked += track.size();
  }
  std::size_t indexed = 0;
  for (const auto& [img, m] : obs_) {
    if (!is_registered(img)) return false;
    for (const auto& [fid, pid] : m) {
      if (pid >= points_.size()) return false;
      if (!points_[pid].observed_in(img)) return false;
    }
    indexed += m.size();
  }
  return indexed == tracked;
}

Vec2 feature_point(const Feature& f) { return {f.x, f.y}; }

double reprojection_error(const Camera& camera, const Vec3& X,
                          const Feature& f) {
  return (camera.project(X) - feature_point(f)).norm();
}

StatsReport model_stats(const Model& model, const FeatureStore& store) {
  StatsReport s;
  s.cameras = model.num_cameras();
  s.points = model.num_points();
  std::vector<double> errors;
  std::set<std::pair<ImageId, ImageId>> pairs;
  for (const auto& p : model.points()) {
    if (p.track.size() >= 3) ++s.points3plus;
    for (std::size_t a = 0; a < p.track.size(); ++a) {
      const auto& ref = p.track[a];
      const Feature& f = store.get(ref.image_id).features.at(ref.feature_id);
      errors.push_back(reprojection_error(model.camera(ref.image_id),
                                          p.position, f));
      for (std::size_t b = a + 1; b < p.track.size(); ++b) {
        pairs.emplace(ref.image_id, p.track[b].image_id);
      }
    }
  }
  s.observations = errors.size();
  s.covisible_pairs = pairs.size();
  if (!errors.empty()) {
    double sum = 0.0;
    for (double e : errors) sum += e;
    s.mean_reprojection = sum / static_cast<double>(errors.size());
    const std::size_t mid = errors.size() / 2;
    std::nth_element(errors.begin(), errors.begin() + mid, errors.end());
    double med = errors[mid];
    if (errors.size() % 2 == 0) {
      med = 0.5 * (med + *std::max_element(errors.begin(), errors.begin() + mid));
    }
    s.median_reprojection = med;
  }
  return s;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void write_model(std::ostream& out, const Model& model) {
  out << "MSFM-MODEL 1\n";
  for (const auto& [id, c] : model.cameras()) {
    out << "CAM " << id << ' ' << fmt(c.focal()) << ' ' << fmt(c.K(0, 2))
        << ' ' << fmt(c.K(1, 2));
    for (int r = 0; r < 3; ++r) {
      for (int k = 0; k < 3; ++k) out << ' ' << fmt(c.R(r, k));
    }
    for (int k = 0; k < 3; ++k) out << ' ' << fmt(c.t(k));
    out << '\n';
  }
  for (const auto& p : model.points()) {
    out << "PT " << fmt(p.position.x()) << ' ' << fmt(p.position.y()) << ' '
        << fmt(p.position.z()) << ' ' << p.track.size();
    for (const auto& r : p.track) out << ' ' << r.image_id << ' ' << r.feature_id;
    out << '\n';
  }
}

Model read_model(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "MSFM-MODEL 1") {
    throw Error(ErrorCode::kFormat, "model: missing MSFM-MODEL 1 header");
  }
  Model model;
  std::vector<std::pair<Vec3, std::vector<FeatureRef>>> pending;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "CAM") {
      Camera c;
      Intrinsics k;
      ls >> c.image_id >> k.focal >> k.cx >> k.cy;
      Mat3 R;
      Vec3 t;
      for (int r = 0; r < 3; ++r) {
        for (int q = 0; q < 3; ++q) ls >> R(r, q);
      }
      ls >> t(0) >> t(1) >> t(2);
      if (!ls) {
        throw Error(ErrorCode::kFormat,
                    "model: bad CAM line " + std::to_string(lineno));
      }
      model.attach_camera(Camera::from_intrinsics(c.image_id, k, R, t), {});
    } else if (tag == "PT") {
      Vec3 X;
      std::size_t n = 0;
      ls >> X(0) >> X(1) >> X(2) >> n;
      std::vector<FeatureRef> track(n);
      for (auto& r : track) ls >> r.image_id >> r.feature_id;
      if (!ls) {
        throw Error(ErrorCode::kFormat,
                    "model: bad PT line " + std::to_string(lineno));
      }
      pending.emplace_back(X, std::move(track));
    } else {
      throw Error(ErrorCode::kFormat,
                  "model: unknown record on line " + std::to_string(lineno));
    }
  }
  for (auto& [X, track] : pending) model.add_point(X, std::move(track));
  return model;
}

void save_model(const std::filesystem::path& path, const Model& model) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  write_model(out, model);
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  return read_model(in);
}

void write_ply(std::ostream& out, const Model& model) {
  out << "ply\nformat ascii 1.0\nelement vertex " << model.num_points()
      << "\nproperty float x\nproperty float y\nproperty float z\n"
         "property uchar red\nproperty uchar green\nproperty uchar blue\n"
         "end_header\n";
  for (const auto& p : model.points()) {
    out << fmt(p.position.x()) << ' ' << fmt(p.position.y()) << ' '
        << fmt(p.position.z()) << " 128 128 128\n";
  }
}

}  // namespace msfm
