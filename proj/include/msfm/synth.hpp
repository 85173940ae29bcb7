#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "msfm/features.hpp"
#include "msfm/model.hpp"

namespace msfm {

enum class CameraLayout { kRing, kGrid, kSphereCap };

/// Synthetic scene recipe. The seed determines everything.
struct SceneSpec {
  int cameras = 60;
  CameraLayout layout = CameraLayout::kRing;
  double camera_distance = 12.0;  // ring / cap radius, grid standoff

  // Points on a cylinder (ring layout), a sphere (cap) or a wall (grid),
  // each with an outward normal; a camera sees a point only inside the
  // normal cone.
  int points = 5000;
  double structure_radius = 3.0;
  double structure_height = 5.0;
  double normal_cone_deg = 70.0;

  std::uint32_t width = 1024;
  std::uint32_t height = 768;
  double focal = 800.0;

  double pixel_noise = 0.5;       // px
  double descriptor_noise = 4.0;  // byte units
  double visibility = 0.7;        // per camera-point Bernoulli draw
  double clutter_fraction = 0.2;  // unmatched extra features per image

  int repetition_groups = 0;
  int repetition_size = 0;

  // Intrinsic scale: octave o with probability ~ 2^-o, log-uniform inside.
  int octaves = 5;
  double sigma0 = 1.6;
  double scale_jitter = 0.05;  // log-normal per observation

  std::uint64_t seed = 1;
};

/// Flat key=value reader/writer ("cameras = 60", '#' comments).
SceneSpec parse_scene_spec(std::istream& in);
SceneSpec load_scene_spec(const std::filesystem::path& path);
void write_scene_spec(std::ostream& out, const SceneSpec& spec);

struct SyntheticScene {
  SceneSpec spec;
  std::vector<Camera> cameras;  // image id = index
  std::vector<Vec3> points;
  std::vector<int> point_group;  // repetition group or -1
  FeatureStore store;            // features sorted by scale
  // truth[image][feature] = point index, -1 for clutter
  std::vector<std::vector<std::int32_t>> truth;
  std::vector<std::string> warnings;

  /// Views per point.
  std::vector<std::vector<FeatureRef>> tracks() const;
  /// Points with >= 2 views.
  std::size_t triangulable_points() const;
  /// Cameras and every triangulable point with its full track.
  Model ground_truth_model() const;
};

SyntheticScene generate_scene(const SceneSpec& spec);

/// Writes feature files, calibration.txt, truth.msfm (MSFM-MODEL) and
/// truth.txt ("OBS image feature point group" lines).
void write_scene(const SyntheticScene& scene, const std::filesystem::path& dir);

/// (feature in a, feature in b) pairs observing the same point, sorted.
std::vector<std::pair<FeatureId, FeatureId>> oracle_matches(
    const SyntheticScene& scene, ImageId a, ImageId b);

struct AlignmentReport {
  // reference ~ scale * R * estimated + t
  double scale = 1.0;
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();
  std::size_t common_cameras = 0;
  std::size_t inliers = 0;
  double reference_camera_distance = 0.0;  // mean pairwise center distance

  std::vector<ImageId> image_ids;
  std::vector<double> rotation_error_deg;
  std::vector<double> translation_error;
  std::vector<double> relative_translation_error;

  double mean_rotation_deg = 0.0;
  double median_rotation_deg = 0.0;
  double mean_translation = 0.0;
  double median_translation = 0.0;
  double mean_relative_translation = 0.0;
  double median_relative_translation = 0.0;
};

/// RANSAC over 3-center samples with a closed-form similarity per sample,
/// inliers within 5% of the reference mean camera distance, refit on inliers.
AlignmentReport align_models(const Model& estimated, const Model& reference,
                             std::uint64_t seed = 0);

/// Least-squares similarity dst ~ s R src + t (Umeyama).
void similarity_umeyama(std::span<const Vec3> src, std::span<const Vec3> dst,
                        double& scale, Mat3& R, Vec3& t);

}  // namespace msfm
