#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "msfm/common.hpp"
#include "msfm/model.hpp"

namespace msfm {

enum class GeometrySource { kFromPoses, kEstimated };

/// F maps a query-image point to its epipolar line in the target image:
/// p_c^T F p_q = 0. Stored Frobenius-normalized with rank 2.
struct TwoViewGeometry {
  Mat3 F = Mat3::Zero();
  std::size_t inlier_count = 0;
  GeometrySource source = GeometrySource::kEstimated;
  bool planar_degenerate = false;

  TwoViewGeometry transposed() const;
};

/// Line a x + b y + c = 0 with a^2 + b^2 = 1.
struct EpipolarLine {
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;
};

TwoViewGeometry fundamental_from_poses(const Camera& query,
                                       const Camera& target);

/// Scales F to unit Frobenius norm and projects it to rank 2.
Mat3 normalize_fundamental(const Mat3& F);

/// Hartley-normalized 8-point solution over all given pairs (n >= 8),
/// rank-2 enforced. Sets *planar when the data only constrains F up to a
/// homography family; a homography-compatible F is returned in that case.
Mat3 fundamental_eight_point(std::span<const Vec2> query,
                             std::span<const Vec2> target,
                             bool* planar = nullptr);

double sampson_distance(const Mat3& F, const Vec2& q, const Vec2& c);

struct RansacOptions {
  double threshold_px = 2.0;
  double confidence = 0.999;
  int max_iterations = 2048;
  std::size_t min_inliers = 16;
  std::uint64_t seed = 0;
};

struct FundamentalEstimate {
  TwoViewGeometry geometry;
  std::vector<char> inlier_mask;
  bool verified = false;  // inlier_count >= min_inliers
  int iterations = 0;
};

/// Throws kInsufficientData below 8 correspondences.
FundamentalEstimate estimate_fundamental_ransac(std::span<const Vec2> query,
                                                std::span<const Vec2> target,
                                                const RansacOptions& options);

EpipolarLine epipolar_line(const Mat3& F, const Vec2& p);
inline EpipolarLine epipolar_line(const TwoViewGeometry& g, const Vec2& p) {
  return epipolar_line(g.F, p);
}

/// |a x + b y + c| / sqrt(a^2 + b^2); throws kInvalidLine when a = b = 0.
double point_line_distance(const Vec2& p, const EpipolarLine& l);

struct RelativePose {
  Mat3 R = Mat3::Identity();  // target w.r.t. query: X_c = R X_q + t
  Vec3 t = Vec3::Zero();      // unit length
  std::size_t cheirality_count = 0;
  std::array<std::size_t, 4> candidate_counts{};
};

RelativePose relative_pose_from_fundamental(const Mat3& F, const Mat3& K_query,
                                            const Mat3& K_target,
                                            std::span<const Vec2> query,
                                            std::span<const Vec2> target);

struct TrackObservation {
  Camera camera;
  Vec2 pixel;
};

struct TriangulationOptions {
  double max_mean_reprojection_px = 4.0;
  double min_angle_deg = 1.0;
};

enum class TriangulationStatus {
  kAccepted,
  kHighReprojection,
  kSmallAngle,
  kNegativeDepth,
};

struct TriangulationResult {
  Vec3 position = Vec3::Zero();
  double mean_reprojection_px = 0.0;
  double initial_reprojection_px = 0.0;  // before the Gauss-Newton pass
  double max_angle_deg = 0.0;
  TriangulationStatus status = TriangulationStatus::kAccepted;

  bool accepted() const { return status == TriangulationStatus::kAccepted; }
};

Vec3 triangulate_dlt(std::span<const TrackObservation> observations);
double mean_reprojection_error(std::span<const TrackObservation> observations,
                               const Vec3& X);

/// DLT + one Gauss-Newton pass. Throws kInsufficientData below two views or
/// on repeated cameras, kDegenerateRay when all rays are parallel.
TriangulationResult triangulate_track(
    std::span<const TrackObservation> observations,
    const TriangulationOptions& options = {});

Mat3 skew(const Vec3& v);

}  // namespace msfm
