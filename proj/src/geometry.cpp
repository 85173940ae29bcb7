#include "msfm/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <Eigen/Dense>
#include <Eigen/SVD>

namespace msfm {

namespace {

constexpr double kPi = 3.14159265358979323846;

/// Similarity that moves the centroid to the origin with RMS distance sqrt(2).
Mat3 hartley_transform(std::span<const Vec2> pts) {
  Vec2 mean = Vec2::Zero();
  for (const auto& p : pts) mean += p;
  mean /= static_cast<double>(pts.size());
  double rms = 0.0;
  for (const auto& p : pts) rms += (p - mean).squaredNorm();
  rms = std::sqrt(rms / static_cast<double>(pts.size()));
  const double s = rms > 0.0 ? std::sqrt(2.0) / rms : 1.0;
  Mat3 T;
  T << s, 0, -s * mean.x(), 0, s, -s * mean.y(), 0, 0, 1;
  return T;
}

Mat3 enforce_rank2(const Mat3& F) {
  Eigen::JacobiSVD<Mat3> svd(F, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Vec3 s = svd.singularValues();
  s(2) = 0.0;
  return svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
}

/// Homography DLT on already-normalized points: c ~ H q.
Mat3 homography_dlt(const std::vector<Vec3>& q, const std::vector<Vec3>& c) {
  Eigen::MatrixXd A(2 * q.size(), 9);
  for (std::size_t i = 0; i < q.size(); ++i) {
    const Vec3& x = q[i];
    const double u = c[i].x();
    const double v = c[i].y();
    A.row(2 * i) << -x.x(), -x.y(), -1, 0, 0, 0, u * x.x(), u * x.y(), u;
    A.row(2 * i + 1) << 0, 0, 0, -x.x(), -x.y(), -1, v * x.x(), v * x.y(), v;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  const Eigen::VectorXd h = svd.matrixV().col(8);
  Mat3 H;
  H << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  return H;
}

double ray_angle(const Vec3& a, const Vec3& b) {
  return std::atan2(a.cross(b).norm(), a.dot(b));
}

}  // namespace

Mat3 skew(const Vec3& v) {
  Mat3 S;
  S << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return S;
}

TwoViewGeometry TwoViewGeometry::transposed() const {
  TwoViewGeometry g = *this;
  g.F.transposeInPlace();
  return g;
}

TwoViewGeometry fundamental_from_poses(const Camera& query,
                                       const Camera& target) {
  const Vec3 baseline = target.center() - query.center();
  const double scale =
      std::max({1.0, query.center().norm(), target.center().norm()});
  if (baseline.norm() <= 1e-12 * scale) {
    throw Error(ErrorCode::kDegenerateGeometry, "coincident camera centers");
  }
  const Mat3 F = target.K.inverse().transpose() * target.R * skew(baseline) *
                 query.R.transpose() * query.K.inverse();
  TwoViewGeometry g;
  g.F = F / F.norm();
  g.source = GeometrySource::kFromPoses;
  return g;
}

Mat3 normalize_fundamental(const Mat3& F) {
  Mat3 G = enforce_rank2(F / F.norm());
  return G / G.norm();
}

Mat3 fundamental_eight_point(std::span<const Vec2> query,
                             std::span<const Vec2> target, bool* planar) {
  const std::size_t n = query.size();
  if (n < 8 || target.size() != n) {
    throw Error(ErrorCode::kInsufficientData,
                "eight-point needs >= 8 correspondences");
  }
  const Mat3 Tq = hartley_transform(query);
  const Mat3 Tc = hartley_transform(target);
  std::vector<Vec3> nq(n), nc(n);
  Eigen::MatrixXd A(n, 9);
  for (std::size_t i = 0; i < n; ++i) {
    nq[i] = Tq * query[i].homogeneous();
    nc[i] = Tc * target[i].homogeneous();
    const double x = nq[i].x(), y = nq[i].y();
    const double u = nc[i].x(), v = nc[i].y();
    A.row(i) << u * x, u * y, u, v * x, v * y, v, x, y, 1.0;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  // Coplanar scene points leave a three-dimensional null space.
  const bool is_planar = sv.size() > 6 && sv(6) <= 1e-9 * sv(0);
  if (planar) *planar = is_planar;
  Mat3 Fn;
  if (is_planar) {
    Fn = skew(Vec3(1.0, 0.0, 0.0)) * homography_dlt(nq, nc);
  } else {
    const Eigen::VectorXd f = svd.matrixV().col(8);
    Fn << f(0), f(1), f(2), f(3), f(4), f(5), f(6), f(7), f(8);
    Fn = enforce_rank2(Fn);
  }
  const Mat3 F = Tc.transpose() * Fn * Tq;
  return F / F.norm();
}

double sampson_distance(const Mat3& F, const Vec2& q, const Vec2& c) {
  const Vec3 xq = q.homogeneous();
  const Vec3 xc = c.homogeneous();
  const Vec3 Fq = F * xq;
  const Vec3 Ftc = F.transpose() * xc;
  const double e = xc.dot(Fq);
  const double denom = Fq.x() * Fq.x() + Fq.y() * Fq.y() +
                       Ftc.x() * Ftc.x() + Ftc.y() * Ftc.y();
  if (denom <= 0.0) return std::numeric_limits<double>::infinity();
  return std::abs(e) / std::sqrt(denom);
}

FundamentalEstimate estimate_fundamental_ransac(std::span<const Vec2> query,
                                                std::span<const Vec2> target,
                                                const RansacOptions& options) {
  const std::size_t n = query.size();
  if (n < 8 || target.size() != n) {
    throw Error(ErrorCode::kInsufficientData,
                "fundamental RANSAC needs >= 8 correspondences");
  }
  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);

  auto score = [&](const Mat3& F, std::vector<char>& mask) {
    std::size_t count = 0;
    mask.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      if (sampson_distance(F, query[i], target[i]) < options.threshold_px) {
        mask[i] = 1;
        ++count;
      }
    }
    return count;
  };

  Mat3 best_F = Mat3::Zero();
  std::vector<char> best_mask, mask;
  std::size_t best_count = 0;
  int max_iter = options.max_iterations;
  int iter = 0;
  std::array<Vec2, 8> sq, sc;
  for (; iter < max_iter; ++iter) {
    for (std::size_t k = 0; k < 8; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, n - 1);
      std::swap(idx[k], idx[pick(rng)]);
      sq[k] = query[idx[k]];
      sc[k] = target[idx[k]];
    }
    Mat3 F;
    try {
      F = fundamental_eight_point(sq, sc);
    } catch (const Error&) {
      continue;
    }
    if (!F.allFinite()) continue;
    const std::size_t count = score(F, mask);
    if (count > best_count) {
      best_count = count;
      best_F = F;
      best_mask = mask;
      const double w = static_cast<double>(count) / static_cast<double>(n);
      const double p_fail = 1.0 - std::pow(w, 8.0);
      if (p_fail <= 0.0) {
        max_iter = std::min(max_iter, iter + 1);
      } else {
        const double needed =
            std::log(1.0 - options.confidence) / std::log(p_fail);
        if (needed < static_cast<double>(max_iter)) {
          max_iter = std::max(iter + 1, static_cast<int>(std::ceil(needed)));
        }
      }
    }
  }

  FundamentalEstimate out;
  out.iterations = iter;
  bool planar = false;
  if (best_count >= 8) {
    // Refit on the consensus set until it stops changing.
    for (int round = 0; round < 3; ++round) {
      std::vector<Vec2> iq, ic;
      for (std::size_t i = 0; i < n; ++i) {
        if (best_mask[i]) {
          iq.push_back(query[i]);
          ic.push_back(target[i]);
        }
      }
      if (iq.size() < 8) break;
      const Mat3 F = fundamental_eight_point(iq, ic, &planar);
      const std::size_t count = score(F, mask);
      if (count < best_count) break;
      best_F = F;
      const bool same = mask == best_mask;
      best_mask = mask;
      best_count = count;
      if (same) break;
    }
  }
  out.geometry.F = best_count > 0 ? best_F : Mat3::Zero();
  out.geometry.inlier_count = best_count;
  out.geometry.source = GeometrySource::kEstimated;
  out.geometry.planar_degenerate = planar;
  out.inlier_mask = best_mask.empty() ? std::vector<char>(n, 0) : best_mask;
  out.verified = best_count >= options.min_inliers;
  return out;
}

EpipolarLine epipolar_line(const Mat3& F, const Vec2& p) {
  const Vec3 l = F * p.homogeneous();
  const double ab = std::hypot(l.x(), l.y());
  const double scale = F.norm() * p.homogeneous().norm();
  if (!(ab > 1e-14 * scale)) {
    throw Error(ErrorCode::kEpipoleDegenerate,
                "point coincides with the epipole");
  }
  return {l.x() / ab, l.y() / ab, l.z() / ab};
}

double point_line_distance(const Vec2& p, const EpipolarLine& l) {
  const double ab = std::hypot(l.a, l.b);
  if (ab == 0.0) throw Error(ErrorCode::kInvalidLine, "line with a = b = 0");
  return std::abs(l.a * p.x() + l.b * p.y() + l.c) / ab;
}

RelativePose relative_pose_from_fundamental(const Mat3& F, const Mat3& K_query,
                                            const Mat3& K_target,
                                            std::span<const Vec2> query,
                                            std::span<const Vec2> target) {
  const std::size_t n = query.size();
  if (n < 5 || target.size() != n) {
    throw Error(ErrorCode::kInsufficientData,
                "relative pose needs >= 5 correspondences");
  }
  const Mat3 E = K_target.transpose() * F * K_query;
  Eigen::JacobiSVD<Mat3> svd(E, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 U = svd.matrixU();
  Mat3 V = svd.matrixV();
  if (U.determinant() < 0) U.col(2) *= -1.0;
  if (V.determinant() < 0) V.col(2) *= -1.0;
  Mat3 W;
  W << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const Mat3 R1 = U * W * V.transpose();
  const Mat3 R2 = U * W.transpose() * V.transpose();
  const Vec3 t = U.col(2).normalized();
  const std::array<std::pair<Mat3, Vec3>, 4> candidates = {
      std::pair{R1, t}, std::pair{R1, Vec3(-t)}, std::pair{R2, t},
      std::pair{R2, Vec3(-t)}};

  const Mat3 Kq_inv = K_query.inverse();
  const Mat3 Kc_inv = K_target.inverse();
  std::vector<Vec3> rq(n), rc(n);
  for (std::size_t i = 0; i < n; ++i) {
    rq[i] = Kq_inv * query[i].homogeneous();
    rc[i] = Kc_inv * target[i].homogeneous();
  }

  RelativePose best;
  std::size_t best_index = 0;
  for (std::size_t k = 0; k < 4; ++k) {
    const auto& [R, tk] = candidates[k];
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      // Rays without parallax carry no depth information.
      if (ray_angle(R * rq[i], rc[i]) < 1e-7) continue;
      Eigen::Matrix4d A;
      A.row(0) << -1, 0, rq[i].x() / rq[i].z(), 0;
      A.row(1) << 0, -1, rq[i].y() / rq[i].z(), 0;
      Mat34 P;
      P.leftCols<3>() = R;
      P.col(3) = tk;
      const double u = rc[i].x() / rc[i].z();
      const double v = rc[i].y() / rc[i].z();
      A.row(2) = u * P.row(2) - P.row(0);
      A.row(3) = v * P.row(2) - P.row(1);
      Eigen::JacobiSVD<Eigen::Matrix4d> s4(A, Eigen::ComputeFullV);
      const Eigen::Vector4d X = s4.matrixV().col(3);
      if (std::abs(X(3)) < 1e-12) continue;
      const Vec3 Xq = X.head<3>() / X(3);
      const Vec3 Xc = R * Xq + tk;
      if (Xq.z() > 0 && Xc.z() > 0) ++count;
    }
    best.candidate_counts[k] = count;
    if (count > best.candidate_counts[best_index]) best_index = k;
  }
  best.R = candidates[best_index].first;
  best.t = candidates[best_index].second;
  best.cheirality_count = best.candidate_counts[best_index];
  if (2 * best.cheirality_count <= n) {
    throw Error(ErrorCode::kDegeneratePose,
                "no pose candidate places a majority of points in front");
  }
  return best;
}

Vec3 triangulate_dlt(std::span<const TrackObservation> observations) {
  Eigen::MatrixXd A(2 * observations.size(), 4);
  for (std::size_t i = 0; i < observations.size(); ++i) {
    const Camera& cam = observations[i].camera;
    const Vec3 x = cam.K.inverse() * observations[i].pixel.homogeneous();
    Mat34 P;
    P.leftCols<3>() = cam.R;
    P.col(3) = cam.t;
    A.row(2 * i) = x.x() * P.row(2) - x.z() * P.row(0);
    A.row(2 * i + 1) = x.y() * P.row(2) - x.z() * P.row(1);
  }
  for (Eigen::Index r = 0; r < A.rows(); ++r) {
    const double nrm = A.row(r).norm();
    if (nrm > 0) A.row(r) /= nrm;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  const Eigen::Vector4d X = svd.matrixV().col(3);
  return X.head<3>() / X(3);
}

double mean_reprojection_error(std::span<const TrackObservation> observations,
                               const Vec3& X) {
  double sum = 0.0;
  for (const auto& o : observations) {
    sum += (o.camera.project(X) - o.pixel).norm();
  }
  return sum / static_cast<double>(observations.size());
}

TriangulationResult triangulate_track(
    std::span<const TrackObservation> observations,
    const TriangulationOptions& options) {
  if (observations.size() < 2) {
    throw Error(ErrorCode::kInsufficientData,
                "triangulation needs >= 2 observations");
  }
  for (std::size_t i = 0; i < observations.size(); ++i) {
    for (std::size_t j = i + 1; j < observations.size(); ++j) {
      if (observations[i].camera.image_id == observations[j].camera.image_id) {
        throw Error(ErrorCode::kInsufficientData,
                    "triangulation observations must come from distinct "
                    "cameras");
      }
    }
  }
  std::vector<Vec3> rays(observations.size());
  for (std::size_t i = 0; i < observations.size(); ++i) {
    const Camera& c = observations[i].camera;
    rays[i] = (c.R.transpose() * (c.K.inverse() *
                                  observations[i].pixel.homogeneous()))
                  .normalized();
  }
  double max_sin = 0.0;
  for (std::size_t i = 0; i < rays.size(); ++i) {
    for (std::size_t j = i + 1; j < rays.size(); ++j) {
      max_sin = std::max(max_sin, rays[i].cross(rays[j]).norm());
    }
  }
  if (max_sin < 1e-8) {
    throw Error(ErrorCode::kDegenerateRay, "all observation rays are parallel");
  }

  TriangulationResult result;
  Vec3 X = triangulate_dlt(observations);
  double err = mean_reprojection_error(observations, X);
  result.initial_reprojection_px = err;

  // One Gauss-Newton pass on the stacked reprojection residuals.
  Mat3 JtJ = Mat3::Zero();
  Vec3 Jtr = Vec3::Zero();
  for (const auto& o : observations) {
    const Mat3 KR = o.camera.K * o.camera.R;
    const Vec3 u = KR * X + o.camera.K * o.camera.t;
    const Vec2 r = u.hnormalized() - o.pixel;
    Eigen::Matrix<double, 2, 3> dproj;
    dproj << 1.0 / u.z(), 0.0, -u.x() / (u.z() * u.z()), 0.0, 1.0 / u.z(),
        -u.y() / (u.z() * u.z());
    const Eigen::Matrix<double, 2, 3> J = dproj * KR;
    JtJ += J.transpose() * J;
    Jtr += J.transpose() * r;
  }
  const Vec3 step = JtJ.ldlt().solve(-Jtr);
  if (step.allFinite()) {
    const Vec3 refined = X + step;
    const double refined_err = mean_reprojection_error(observations, refined);
    if (refined_err <= err) {
      X = refined;
      err = refined_err;
    }
  }
  result.position = X;
  result.mean_reprojection_px = err;

  double max_angle = 0.0;
  bool negative = false;
  for (std::size_t i = 0; i < observations.size(); ++i) {
    const Camera& ci = observations[i].camera;
    if (ci.to_camera(X).z() <= 0.0) negative = true;
    for (std::size_t j = i + 1; j < observations.size(); ++j) {
      const Camera& cj = observations[j].camera;
      max_angle = std::max(max_angle,
                           ray_angle(X - ci.center(), X - cj.center()));
    }
  }
  result.max_angle_deg = max_angle * 180.0 / kPi;
  if (negative) {
    result.status = TriangulationStatus::kNegativeDepth;
  } else if (result.max_angle_deg < options.min_angle_deg) {
    result.status = TriangulationStatus::kSmallAngle;
  } else if (err > options.max_mean_reprojection_px) {
    result.status = TriangulationStatus::kHighReprojection;
  }
  return result;
}

}  // namespace msfm
