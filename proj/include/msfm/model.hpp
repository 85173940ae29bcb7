#pragma once

#include <compare>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "msfm/common.hpp"
#include "msfm/features.hpp"

namespace msfm {

struct FeatureRef {
  ImageId image_id = 0;
  FeatureId feature_id = 0;
  auto operator<=>(const FeatureRef&) const = default;
};

struct FeatureRefHash {
  std::size_t operator()(const FeatureRef& r) const noexcept {
    return (static_cast<std::size_t>(r.image_id) << 32) ^ r.feature_id;
  }
};

/// Pinhole camera, x ~ K (R X + t); pixel origin top-left, y down.
struct Camera {
  ImageId image_id = 0;
  Mat3 K = Mat3::Identity();
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  static Camera from_intrinsics(ImageId id, const Intrinsics& k,
                                const Mat3& R = Mat3::Identity(),
                                const Vec3& t = Vec3::Zero());

  double focal() const { return K(0, 0); }
  Vec3 center() const { return -R.transpose() * t; }
  Vec3 to_camera(const Vec3& X) const { return R * X + t; }
  Vec2 project(const Vec3& X) const;
  Mat34 projection() const;
  void set_focal(double f) {
    K(0, 0) = f;
    K(1, 1) = f;
  }
};

struct Point3D {
  Vec3 position = Vec3::Zero();
  std::vector<FeatureRef> track;  // sorted by image id, one entry per image
  std::optional<std::vector<float>> mean_descriptor;

  bool observed_in(ImageId id) const;
};

enum class Stage { kCoarse, kAfterLocalize, kAfterDensify };

struct StageTag {
  Stage stage = Stage::kCoarse;
  int iteration = 0;
};

struct AttachResult {
  std::size_t applied = 0;
  std::size_t conflicts = 0;
};

using PointObservation = std::pair<PointId, FeatureRef>;

/// Reconstruction state: registered cameras, 3D points with tracks, and the
/// inverted feature -> point index that backs Points(C).
class Model {
 public:
  StageTag stage_tag;

  const std::map<ImageId, Camera>& cameras() const { return cameras_; }
  const std::vector<Point3D>& points() const { return points_; }
  std::size_t num_cameras() const { return cameras_.size(); }
  std::size_t num_points() const { return points_.size(); }

  bool is_registered(ImageId id) const { return cameras_.count(id) != 0; }
  const Camera& camera(ImageId id) const;
  const Point3D& point(PointId id) const { return points_.at(id); }

  std::vector<PointId> points_visible_in(ImageId id) const;
  std::vector<PointId> covisible_points(ImageId a, ImageId b) const;
  std::size_t covisible_count(ImageId a, ImageId b) const;
  std::optional<PointId> point_of(const FeatureRef& ref) const;
  /// feature id -> point id for one registered image.
  const std::map<FeatureId, PointId>& observations(ImageId id) const;

  /// Registers a camera and extends the listed tracks. Precondition
  /// violations throw before anything is modified; a FeatureRef that is
  /// already tracked (or a point already seen by this image) is dropped and
  /// counted as a conflict.
  AttachResult attach_camera(const Camera& camera,
                             std::span<const PointObservation> inliers);

  /// Updates intrinsics/pose of a registered camera.
  void set_camera(const Camera& camera);

  /// New point over registered images; throws kConflict if any ref is
  /// already tracked, kArgument if the track is malformed.
  PointId add_point(const Vec3& position, std::vector<FeatureRef> track);
  void set_position(PointId id, const Vec3& position);
  /// Returns false (and changes nothing) if the ref is tracked or the
  /// point already has an observation in that image.
  bool extend_track(PointId id, const FeatureRef& ref);
  void remove_observation(PointId id, const FeatureRef& ref);
  /// Drops the points and compacts indices; returns old -> new id map
  /// (removed points map to nullopt).
  std::vector<std::optional<PointId>> remove_points(
      std::span<const PointId> ids);
  /// Removes points whose track has fewer than two observations.
  std::size_t prune_short_tracks();
  void clear_descriptor_cache(PointId id);
  void set_mean_descriptor(PointId id, std::vector<float> descriptor);

  /// Exhaustive check of visibility and track invariants.
  bool is_consistent() const;

 private:
  const Camera& require(ImageId id) const;

  std::map<ImageId, Camera> cameras_;
  std::vector<Point3D> points_;
  std::map<ImageId, std::map<FeatureId, PointId>> obs_;
};

struct StatsReport {
  std::size_t cameras = 0;
  std::size_t points = 0;
  std::size_t points3plus = 0;
  std::size_t observations = 0;
  double mean_reprojection = 0.0;
  double median_reprojection = 0.0;
  std::size_t covisible_pairs = 0;
};

StatsReport model_stats(const Model& model, const FeatureStore& store);
double reprojection_error(const Camera& camera, const Vec3& X,
                          const Feature& f);
Vec2 feature_point(const Feature& f);

// Text format: "MSFM-MODEL 1", then "CAM id f cx cy r00..r22 t0 t1 t2" and
// "PT x y z n img feat ..." lines.
void write_model(std::ostream& out, const Model& model);
Model read_model(std::istream& in);
void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);

/// ASCII PLY, x y z + uchar rgb (mid-gray).
void write_ply(std::ostream& out, const Model& model);

}  // namespace msfm
