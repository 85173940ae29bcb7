#include <gtest/gtest.h>

#include <Eigen/SVD>

#include "msfm/geometry.hpp"
#include "support.hpp"

using namespace msfm;

namespace {

Camera cam(ImageId id, const Mat3& R, const Vec3& center, double f = 800.0) {
  return Camera::from_intrinsics(id, {f, 512.0, 384.0}, R, -R * center);
}

struct TwoViews {
  Camera q, c;
  std::vector<Vec3> X;
  std::vector<Vec2> xq, xc;
};

TwoViews two_views(std::size_t n, double noise, std::uint64_t seed, bool planar = false) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::normal_distribution<double> g(0.0, noise);
  TwoViews v;
  v.q = cam(0, test::rotation_about(Vec3(0, 1, 0), 0.05), Vec3(-1.0, 0.1, -8.0));
  v.c = cam(1, test::rotation_about(Vec3(0.2, 1, 0.1), -0.12), Vec3(1.2, -0.2, -7.5), 760.0);
  while (v.X.size() < n) {
    const Vec3 X(2 * u(rng), 1.5 * u(rng), planar ? 0.0 : 1.5 * u(rng));
    v.X.push_back(X);
    v.xq.push_back(v.q.project(X) + Vec2(g(rng), g(rng)));
    v.xc.push_back(v.c.project(X) + Vec2(g(rng), g(rng)));
  }
  return v;
}

double aligned_frobenius(const Mat3& a, const Mat3& b) {
  const Mat3 na = a / a.norm(), nb = b / b.norm();
  return std::min((na - nb).norm(), (na + nb).norm());
}

double smallest_singular(const Mat3& F) {
  Eigen::JacobiSVD<Mat3> svd(F);
  return svd.singularValues()(2) / svd.singularValues()(0);
}

}  // namespace

TEST(FundamentalFromPoses, EpipolarConstraintAndRank) {
  const TwoViews v = two_views(100, 0.0, 1);
  const TwoViewGeometry g = fundamental_from_poses(v.q, v.c);
  EXPECT_EQ(g.source, GeometrySource::kFromPoses);
  EXPECT_NEAR(g.F.norm(), 1.0, 1e-12);
  EXPECT_LT(smallest_singular(g.F), 1e-12);
  for (std::size_t i = 0; i < v.X.size(); ++i) {
    EXPECT_LT(point_line_distance(v.xc[i], epipolar_line(g, v.xq[i])), 1e-8);
    // The transpose maps target points into the query image.
    EXPECT_LT(point_line_distance(v.xq[i], epipolar_line(g.transposed(), v.xc[i])), 1e-8);
  }
}

TEST(FundamentalFromPoses, EqualsEstimateOnNoiseFreeInliers) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const TwoViews v = two_views(200, 0.0, seed);
    const Mat3 est = fundamental_eight_point(v.xq, v.xc);
    EXPECT_LT(aligned_frobenius(est, fundamental_from_poses(v.q, v.c).F), 1e-6);
  }
}

TEST(FundamentalFromPoses, CoincidentCentersDegenerate) {
  const Camera a = cam(0, Mat3::Identity(), Vec3(0, 0, -5));
  const Camera b = cam(1, test::rotation_about(Vec3(0, 1, 0), 0.1), Vec3(0, 0, -5));
  EXPECT_MSFM_ERROR(fundamental_from_poses(a, b), ErrorCode::kDegenerateGeometry);
}

TEST(EightPoint, NeedsEightPairs) {
  const TwoViews v = two_views(7, 0.0, 2);
  EXPECT_MSFM_ERROR(fundamental_eight_point(v.xq, v.xc), ErrorCode::kInsufficientData);
}

TEST(EightPoint, PlanarSceneFlagged) {
  const TwoViews v = two_views(60, 0.0, 3, true);
  bool planar = false;
  const Mat3 F = fundamental_eight_point(v.xq, v.xc, &planar);
  EXPECT_TRUE(planar);
  for (std::size_t i = 0; i < v.X.size(); ++i) EXPECT_LT(sampson_distance(F, v.xq[i], v.xc[i]), 1e-4);
}

TEST(Ransac, RecoversGeometryUnderOutliers) {
  TwoViews v = two_views(300, 0.5, 4);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> ux(0, 1024), uy(0, 768);
  for (std::size_t i = 0; i < 90; ++i) v.xc[i] = Vec2(ux(rng), uy(rng));  // 30% outliers
  RansacOptions o;
  o.seed = 9;
  const FundamentalEstimate est = estimate_fundamental_ransac(v.xq, v.xc, o);
  ASSERT_TRUE(est.verified);
  EXPECT_LT(smallest_singular(est.geometry.F), 1e-9);
  std::size_t true_in = 0, false_in = 0;
  for (std::size_t i = 0; i < v.X.size(); ++i) {
    if (!est.inlier_mask[i]) continue;
    (i < 90 ? false_in : true_in)++;
  }
  EXPECT_GE(true_in, 200u);
  EXPECT_LE(false_in, 3u);
  // Same seed, same answer.
  const FundamentalEstimate again = estimate_fundamental_ransac(v.xq, v.xc, o);
  EXPECT_EQ(again.inlier_mask, est.inlier_mask);
  EXPECT_MSFM_ERROR(estimate_fundamental_ransac(std::span(v.xq).first(5), std::span(v.xc).first(5), o),
                    ErrorCode::kInsufficientData);
}

TEST(Sampson, ZeroOnTheLineAndSymmetricInScale) {
  const TwoViews v = two_views(10, 0.0, 6);
  const Mat3 F = fundamental_from_poses(v.q, v.c).F;
  EXPECT_LT(sampson_distance(F, v.xq[0], v.xc[0]), 1e-12);
  EXPECT_NEAR(sampson_distance(F, v.xq[0], v.xc[0] + Vec2(3, 0)),
              sampson_distance(3.0 * F, v.xq[0], v.xc[0] + Vec2(3, 0)), 1e-9);
}

TEST(EpipolarLine, NormalizedAndDistance) {
  const EpipolarLine l{3.0 / 5.0, 4.0 / 5.0, -5.0};
  EXPECT_NEAR(point_line_distance(Vec2(0, 0), l), 5.0, 1e-12);
  EXPECT_NEAR(point_line_distance(Vec2(3, 4), l), 0.0, 1e-12);
  EXPECT_MSFM_ERROR(point_line_distance(Vec2(0, 0), EpipolarLine{0, 0, 1}), ErrorCode::kInvalidLine);
  const Mat3 F = fundamental_from_poses(two_views(1, 0, 7).q, two_views(1, 0, 7).c).F;
  const EpipolarLine e = epipolar_line(F, Vec2(100, 200));
  EXPECT_NEAR(e.a * e.a + e.b * e.b, 1.0, 1e-12);
}

TEST(RelativePose, MatchesTruth) {
  const TwoViews v = two_views(150, 0.0, 8);
  const Mat3 F = fundamental_from_poses(v.q, v.c).F;
  const RelativePose rp = relative_pose_from_fundamental(F, v.q.K, v.c.K, v.xq, v.xc);
  const Mat3 R_true = v.c.R * v.q.R.transpose();
  const Vec3 t_true = (v.c.t - R_true * v.q.t).normalized();
  EXPECT_LT((rp.R - R_true).norm(), 1e-6);
  EXPECT_LT((rp.t - t_true).norm(), 1e-6);
  EXPECT_EQ(rp.cheirality_count, 150u);
}

TEST(Triangulation, ExactAndRefinementNonIncreasing) {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<TrackObservation> obs;
    const Vec3 X(u(rng), u(rng), u(rng));
    for (int k = 0; k < 3 + trial % 4; ++k) {
      const double a = 0.3 * k - 0.4;
      const Camera c = cam(k, test::rotation_about(Vec3(0, 1, 0), -a),
                           Vec3(8 * std::sin(a), 0.2 * k, -8 * std::cos(a)));
      obs.push_back({c, c.project(X) + Vec2(g(rng), g(rng))});
    }
    const TriangulationResult r = triangulate_track(obs);
    EXPECT_LE(r.mean_reprojection_px, r.initial_reprojection_px + 1e-9);
    EXPECT_LT((r.position - X).norm(), 0.2);
  }
}

TEST(Triangulation, StatusCodes) {
  const Camera a = cam(0, Mat3::Identity(), Vec3(0, 0, -10));
  const Camera b = cam(1, Mat3::Identity(), Vec3(1, 0, -10));
  const Vec3 X(0.2, 0.1, 0.0);
  std::vector<TrackObservation> good = {{a, a.project(X)}, {b, b.project(X)}};
  EXPECT_TRUE(triangulate_track(good).accepted());
  EXPECT_NEAR((triangulate_dlt(good) - X).norm(), 0.0, 1e-9);

  const Camera near = cam(1, Mat3::Identity(), Vec3(0.01, 0, -10));
  std::vector<TrackObservation> narrow = {{a, a.project(X)}, {near, near.project(X)}};
  EXPECT_EQ(triangulate_track(narrow).status, TriangulationStatus::kSmallAngle);

  std::vector<TrackObservation> bad = good;
  bad[1].pixel += Vec2(0, 40);
  EXPECT_EQ(triangulate_track(bad).status, TriangulationStatus::kHighReprojection);

  std::vector<TrackObservation> one = {good[0]};
  EXPECT_MSFM_ERROR(triangulate_track(one), ErrorCode::kInsufficientData);
  std::vector<TrackObservation> same = {good[0], good[0]};
  EXPECT_MSFM_ERROR(triangulate_track(same), ErrorCode::kInsufficientData);
}

TEST(Skew, CrossProduct) {
  const Vec3 a(1, 2, 3), b(-4, 0.5, 2);
  EXPECT_LT((skew(a) * b - a.cross(b)).norm(), 1e-15);
}
