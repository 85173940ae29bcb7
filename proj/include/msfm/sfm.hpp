#pragma once

#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "msfm/features.hpp"
#include "msfm/geometry.hpp"
#include "msfm/matcher.hpp"
#include "msfm/model.hpp"

namespace msfm {

// ---- tracks -------------------------------------------------------------

/// Feature tracks: connected components of the inlier match graph. A
/// component holding two features of one image loses that image entirely.
struct TrackSet {
  std::vector<std::vector<FeatureRef>> tracks;  // each sorted by image
  std::unordered_map<FeatureRef, std::uint32_t, FeatureRefHash> index;

  std::optional<std::uint32_t> track_of(const FeatureRef& r) const;
};

TrackSet build_tracks(const MatchGraph& graph);

// ---- pose -----------------------------------------------------------------

struct PnPOptions {
  double threshold_px = 4.0;
  double confidence = 0.999;
  int max_iterations = 1000;
  std::size_t min_inliers = 16;
  std::uint64_t seed = 0;
};

struct PnPResult {
  Camera camera;
  std::vector<char> inlier_mask;
  std::size_t inlier_count = 0;
  bool success = false;  // false is the localization-failed signal
  int iterations = 0;
};

/// Pose from 6 or more points by DLT on the normalized projection matrix
/// with the rotation re-orthonormalized. Throws kDegenerateGeometry for
/// (near) coplanar or collinear 3D points.
std::pair<Mat3, Vec3> pose_dlt(std::span<const Vec3> X, std::span<const Vec2> x,
                               const Mat3& K);

/// LM over (rotation, translation) minimizing squared reprojection error.
void refine_pose(Camera& camera, std::span<const Vec3> X,
                 std::span<const Vec2> x, int max_iterations = 20);

/// Throws kInsufficientData below 6 correspondences.
PnPResult pnp_ransac(std::span<const Vec3> X, std::span<const Vec2> x,
                     const Intrinsics& intrinsics, ImageId image_id,
                     const PnPOptions& options);

// ---- bundle adjustment --------------------------------------------------

inline constexpr int kCameraParams = 7;  // rotation (3), translation (3), f

/// Reprojection residual of one observation and its derivatives w.r.t. the
/// camera update [omega, t, f] (rotation updated as exp(omega) * R) and the
/// point position.
struct ObservationJacobian {
  Vec2 residual = Vec2::Zero();
  Eigen::Matrix<double, 2, kCameraParams> camera;
  Eigen::Matrix<double, 2, 3> point;
  bool valid = false;  // point in front of the camera
};

ObservationJacobian observation_jacobian(const Camera& camera, const Vec3& X,
                                         const Vec2& observed);

/// Applies the camera update used by the Jacobian above.
Camera apply_camera_update(const Camera& camera,
                           const Eigen::Matrix<double, kCameraParams, 1>& delta);

Mat3 rotation_exp(const Vec3& omega);

struct BundleOptions {
  int max_iterations = 100;
  double relative_tolerance = 1e-6;
  bool optimize_focal = true;
  // Cameras with a calibration entry keep their focal length.
  bool fix_calibrated_focal = true;
};

struct BundleReport {
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int iterations = 0;
  std::vector<double> cost_history;  // accepted costs, non-increasing
  std::size_t pruned_points = 0;
};

/// Total squared reprojection error; +inf if any point is behind a camera.
double reprojection_cost(const Model& model, const FeatureStore& store);

/// Levenberg-Marquardt on all cameras and points with point-block Schur
/// elimination. Points with non-finite cost are pruned once before giving
/// up with kStageFailure.
BundleReport bundle_adjust(Model& model, const FeatureStore& store,
                           const BundleOptions& options = {});

// ---- incremental reconstruction ----------------------------------------

struct ReconstructionConfig {
  std::size_t min_seed_inliers = 16;
  double min_seed_angle_deg = 2.0;
  std::size_t min_registration_points = 16;
  PnPOptions pnp;
  TriangulationOptions triangulation;
  double max_reprojection_px = 4.0;  // observation filter after BA
  int ba_batch = 8;
  int ba_iterations = 50;
  int ba_final_iterations = 100;
  double ba_tolerance = 1e-6;
  std::uint64_t seed = 0;
};

/// Median triangulation angle (degrees) of the edge's inliers under the
/// relative pose; nullopt when the pose is degenerate.
std::optional<double> median_triangulation_angle(const MatchEdge& edge,
                                                 const FeatureStore& store);

/// Highest-inlier edge whose median triangulation angle passes the gate;
/// throws kNoSeed when none does.
ImagePair select_seed_pair(const MatchGraph& graph, const FeatureStore& store,
                           const ReconstructionConfig& config = {});

Model incremental_reconstruct(const MatchGraph& graph, const FeatureStore& store,
                              const ReconstructionConfig& config = {});

/// Drops observations above the reprojection limit and points left with
/// fewer than two views; returns the number of observations removed.
std::size_t filter_observations(Model& model, const FeatureStore& store,
                                double max_reprojection_px);

}  // namespace msfm
