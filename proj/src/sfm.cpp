#include "msfm/sfm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include <Eigen/Geometry>

namespace msfm {

namespace {

constexpr double kRadToDeg = 180.0 / 3.14159265358979323846;

struct UnionFind {
  std::vector<std::uint32_t> parent;
  explicit UnionFind(std::size_t n) : parent(n) {
    std::iota(parent.begin(), parent.end(), 0U);
  }
  std::uint32_t find(std::uint32_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(std::uint32_t a, std::uint32_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

Vec2 pixel_of(const FeatureStore& store, const FeatureRef& r) {
  return feature_point(store.get(r.image_id).features.at(r.feature_id));
}

/// Relative spread of a point set: smallest / largest principal extent.
Vec3 principal_extents(std::span<const Vec3> X) {
  Vec3 c = Vec3::Zero();
  for (const auto& p : X) c += p;
  c /= static_cast<double>(X.size());
  Mat3 cov = Mat3::Zero();
  for (const auto& p : X) cov += (p - c) * (p - c).transpose();
  Vec3 ev = Eigen::SelfAdjointEigenSolver<Mat3>(cov).eigenvalues();
  return ev.cwiseMax(0.0).cwiseSqrt();  // ascending
}

}  // namespace

// ---- tracks -------------------------------------------------------------

std::optional<std::uint32_t> TrackSet::track_of(const FeatureRef& r) const {
  auto it = index.find(r);
  if (it == index.end()) return std::nullopt;
  return it->second;
}

TrackSet build_tracks(const MatchGraph& graph) {
  std::vector<FeatureRef> nodes;
  for (const auto& [key, e] : graph.edges) {
    for (const Match& m : e.inliers()) {
      nodes.push_back({e.a, m.query});
      nodes.push_back({e.b, m.target});
    }
  }
  std::sort(nodes.begin(), nodes.end());
  nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());
  auto id_of = [&](const FeatureRef& r) {
    return static_cast<std::uint32_t>(
        std::lower_bound(nodes.begin(), nodes.end(), r) - nodes.begin());
  };
  UnionFind uf(nodes.size());
  for (const auto& [key, e] : graph.edges) {
    for (const Match& m : e.inliers()) uf.unite(id_of({e.a, m.query}), id_of({e.b, m.target}));
  }
  std::map<std::uint32_t, std::vector<FeatureRef>> comps;
  for (std::uint32_t i = 0; i < nodes.size(); ++i) comps[uf.find(i)].push_back(nodes[i]);

  TrackSet out;
  for (auto& [root, refs] : comps) {
    // refs are sorted; drop every image that appears more than once.
    std::vector<FeatureRef> clean;
    for (std::size_t i = 0; i < refs.size();) {
      std::size_t j = i;
      while (j < refs.size() && refs[j].image_id == refs[i].image_id) ++j;
      if (j - i == 1) clean.push_back(refs[i]);
      i = j;
    }
    if (clean.size() < 2) continue;
    const auto tid = static_cast<std::uint32_t>(out.tracks.size());
    for (const auto& r : clean) out.index.emplace(r, tid);
    out.tracks.push_back(std::move(clean));
  }
  return out;
}

// ---- pose -----------------------------------------------------------------

std::pair<Mat3, Vec3> pose_dlt(std::span<const Vec3> X, std::span<const Vec2> x,
                               const Mat3& K) {
  const std::size_t n = X.size();
  if (n < 6 || x.size() != n) {
    throw Error(ErrorCode::kInsufficientData, "pose DLT needs >= 6 points");
  }
  const Vec3 ext = principal_extents(X);
  if (!(ext(0) > 1e-3 * ext(2))) {
    throw Error(ErrorCode::kDegenerateGeometry, "pose DLT: coplanar or collinear points");
  }
  Vec3 c = Vec3::Zero();
  for (const auto& p : X) c += p;
  c /= static_cast<double>(n);
  double spread = 0.0;
  for (const auto& p : X) spread += (p - c).norm();
  spread = spread / static_cast<double>(n) / std::sqrt(3.0);

  const Mat3 Kinv = K.inverse();
  Eigen::MatrixXd A(2 * n, 12);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::Vector4d Xh;
    Xh << (X[i] - c) / spread, 1.0;
    const Vec3 xn = Kinv * x[i].homogeneous();
    const double u = xn(0) / xn(2), v = xn(1) / xn(2);
    A.row(2 * i) << Xh.transpose(), Eigen::RowVector4d::Zero(), -u * Xh.transpose();
    A.row(2 * i + 1) << Eigen::RowVector4d::Zero(), Xh.transpose(), -v * Xh.transpose();
  }
  const Eigen::Matrix<double, 12, 12> AtA = A.transpose() * A;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 12, 12>> es(AtA);
  const Eigen::Matrix<double, 12, 1> p = es.eigenvectors().col(0);
  Mat34 Pn;
  Pn.row(0) = p.segment<4>(0).transpose();
  Pn.row(1) = p.segment<4>(4).transpose();
  Pn.row(2) = p.segment<4>(8).transpose();
  Eigen::Matrix4d T = Eigen::Matrix4d::Identity();
  T.block<3, 3>(0, 0) /= spread;
  T.block<3, 1>(0, 3) = -c / spread;
  Mat34 P = Pn * T;
  Mat3 M = P.leftCols<3>();
  if (M.determinant() < 0.0) {
    P = -P;
    M = -M;
  }
  Eigen::JacobiSVD<Mat3> svd(M, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Mat3 R = svd.matrixU() * svd.matrixV().transpose();
  const double scale = svd.singularValues().mean();
  if (!(scale > 0.0)) {
    throw Error(ErrorCode::kDegenerateGeometry, "pose DLT: zero scale");
  }
  return {R, P.col(3) / scale};
}

void refine_pose(Camera& camera, std::span<const Vec3> X,
                 std::span<const Vec2> x, int max_iterations) {
  auto cost_of = [&](const Camera& c) {
    double s = 0.0;
    for (std::size_t i = 0; i < X.size(); ++i) {
      const Vec3 Xc = c.to_camera(X[i]);
      if (!(Xc.z() > 0.0)) return std::numeric_limits<double>::infinity();
      s += (c.project(X[i]) - x[i]).squaredNorm();
    }
    return s;
  };
  double cost = cost_of(camera);
  if (!std::isfinite(cost)) return;
  double lambda = 1e-3;
  for (int it = 0; it < max_iterations; ++it) {
    Eigen::Matrix<double, 6, 6> H = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> g = Eigen::Matrix<double, 6, 1>::Zero();
    for (std::size_t i = 0; i < X.size(); ++i) {
      const auto oj = observation_jacobian(camera, X[i], x[i]);
      const Eigen::Matrix<double, 2, 6> J = oj.camera.leftCols<6>();
      H += J.transpose() * J;
      g -= J.transpose() * oj.residual;
    }
    bool accepted = false;
    while (lambda < 1e10) {
      Eigen::Matrix<double, 6, 6> Hd = H;
      Hd.diagonal() *= (1.0 + lambda);
      Hd.diagonal().array() += 1e-12;
      const Eigen::Matrix<double, 6, 1> d = Hd.ldlt().solve(g);
      Eigen::Matrix<double, kCameraParams, 1> full;
      full << d, 0.0;
      const Camera trial = apply_camera_update(camera, full);
      const double c = cost_of(trial);
      if (c < cost) {
        const double rel = (cost - c) / std::max(cost, 1e-300);
        camera = trial;
        cost = c;
        lambda = std::max(lambda * 0.3, 1e-12);
        accepted = true;
        if (rel < 1e-10) return;
        break;
      }
      lambda *= 10.0;
    }
    if (!accepted) return;
  }
}

PnPResult pnp_ransac(std::span<const Vec3> X, std::span<const Vec2> x,
                     const Intrinsics& intrinsics, ImageId image_id,
                     const PnPOptions& options) {
  const std::size_t n = X.size();
  if (n < 6 || x.size() != n) {
    throw Error(ErrorCode::kInsufficientData, "PnP needs >= 6 correspondences");
  }
  PnPResult res;
  res.camera = Camera::from_intrinsics(image_id, intrinsics);
  res.inlier_mask.assign(n, 0);
  const Mat3 K = res.camera.K;
  {
    const Vec3 ext = principal_extents(X);
    if (!(ext(0) > 1e-3 * ext(2))) return res;  // degenerate structure
  }
  const double thr2 = options.threshold_px * options.threshold_px;
  auto score = [&](const Camera& cam, std::vector<char>& mask) {
    std::size_t c = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool in = cam.to_camera(X[i]).z() > 0.0 &&
                      (cam.project(X[i]) - x[i]).squaredNorm() < thr2;
      mask[i] = in;
      c += in;
    }
    return c;
  };

  std::mt19937_64 rng(options.seed);
  std::vector<char> mask(n, 0);
  std::size_t best = 0;
  int limit = options.max_iterations;
  int it = 0;
  std::array<std::size_t, 6> sample{};
  std::vector<Vec3> sX(6);
  std::vector<Vec2> sx(6);
  for (; it < limit; ++it) {
    for (std::size_t k = 0; k < 6; ++k) {
      bool fresh;
      do {
        sample[k] = rng() % n;
        fresh = std::find(sample.begin(), sample.begin() + k, sample[k]) ==
                sample.begin() + k;
      } while (!fresh);
      sX[k] = X[sample[k]];
      sx[k] = x[sample[k]];
    }
    Camera cam = res.camera;
    try {
      std::tie(cam.R, cam.t) = pose_dlt(sX, sx, K);
    } catch (const Error&) {
      continue;
    }
    const std::size_t c = score(cam, mask);
    if (c > best) {
      best = c;
      res.camera = cam;
      const double w = static_cast<double>(c) / static_cast<double>(n);
      const double denom = std::log1p(-std::pow(w, 6.0));
      if (denom < 0.0) {
        const double need = std::log(1.0 - options.confidence) / denom;
        if (need < static_cast<double>(options.max_iterations)) {
          limit = std::max(it + 1, static_cast<int>(std::ceil(need)));
        }
      }
    }
  }
  res.iterations = it;
  if (best < 6) return res;

  // Refit on inliers, then nonlinear refinement; keep whichever holds more.
  for (int round = 0; round < 2; ++round) {
    score(res.camera, mask);
    std::vector<Vec3> iX;
    std::vector<Vec2> ix;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask[i]) {
        iX.push_back(X[i]);
        ix.push_back(x[i]);
      }
    }
    if (round == 0 && iX.size() >= 6) {
      Camera cam = res.camera;
      try {
        std::tie(cam.R, cam.t) = pose_dlt(iX, ix, K);
        std::vector<char> m2(n, 0);
        if (score(cam, m2) >= iX.size()) res.camera = cam;
      } catch (const Error&) {
      }
      score(res.camera, mask);
      iX.clear();
      ix.clear();
      for (std::size_t i = 0; i < n; ++i) {
        if (mask[i]) {
          iX.push_back(X[i]);
          ix.push_back(x[i]);
        }
      }
    }
    Camera refined = res.camera;
    refine_pose(refined, iX, ix);
    std::vector<char> m2(n, 0);
    if (score(refined, m2) >= iX.size()) res.camera = refined;
  }
  res.inlier_count = score(res.camera, res.inlier_mask);
  res.success = res.inlier_count >= options.min_inliers;
  return res;
}

// ---- bundle adjustment --------------------------------------------------

Mat3 rotation_exp(const Vec3& omega) {
  const double theta = omega.norm();
  if (theta < 1e-12) return Mat3::Identity() + skew(omega);
  return Eigen::AngleAxisd(theta, omega / theta).toRotationMatrix();
}

ObservationJacobian observation_jacobian(const Camera& camera, const Vec3& X,
                                         const Vec2& observed) {
  ObservationJacobian o;
  const Vec3 RX = camera.R * X;
  const Vec3 Xc = RX + camera.t;
  const double f = camera.focal();
  const double z = Xc.z();
  o.valid = z > 0.0;
  if (z == 0.0) {
    o.residual.setConstant(std::numeric_limits<double>::infinity());
    o.camera.setZero();
    o.point.setZero();
    return o;
  }
  const double iz = 1.0 / z;
  const Vec2 proj(f * Xc.x() * iz + camera.K(0, 2), f * Xc.y() * iz + camera.K(1, 2));
  o.residual = proj - observed;
  Eigen::Matrix<double, 2, 3> dp;
  dp << f * iz, 0.0, -f * Xc.x() * iz * iz, 0.0, f * iz, -f * Xc.y() * iz * iz;
  o.camera.leftCols<3>() = -dp * skew(RX);
  o.camera.block<2, 3>(0, 3) = dp;
  o.camera(0, 6) = Xc.x() * iz;
  o.camera(1, 6) = Xc.y() * iz;
  o.point = dp * camera.R;
  return o;
}

Camera apply_camera_update(const Camera& camera,
                           const Eigen::Matrix<double, kCameraParams, 1>& d) {
  Camera c = camera;
  c.R = rotation_exp(d.head<3>()) * camera.R;
  c.t = camera.t + d.segment<3>(3);
  c.set_focal(camera.focal() + d(6));
  return c;
}

double reprojection_cost(const Model& model, const FeatureStore& store) {
  double s = 0.0;
  for (const Point3D& p : model.points()) {
    for (const FeatureRef& r : p.track) {
      const Camera& cam = model.camera(r.image_id);
      if (!(cam.to_camera(p.position).z() > 0.0)) {
        return std::numeric_limits<double>::infinity();
      }
      s += (cam.project(p.position) - pixel_of(store, r)).squaredNorm();
    }
  }
  return s;
}

namespace {

struct BAProblem {
  std::vector<ImageId> image_ids;
  std::vector<Camera> cams;
  std::vector<Vec3> pts;
  struct Obs {
    std::uint32_t cam;
    std::uint32_t pt;
    Vec2 pixel;
  };
  std::vector<Obs> obs;  // grouped by point
  std::vector<std::uint32_t> point_begin;

  double cost(const std::vector<Camera>& c, const std::vector<Vec3>& p) const {
    double s = 0.0;
    for (const Obs& o : obs) {
      const Vec3 Xc = c[o.cam].to_camera(p[o.pt]);
      if (!(Xc.z() > 0.0)) return std::numeric_limits<double>::infinity();
      const Vec2 r = c[o.cam].project(p[o.pt]) - o.pixel;
      s += r.squaredNorm();
    }
    return std::isfinite(s) ? s : std::numeric_limits<double>::infinity();
  }
};

BAProblem make_problem(const Model& model, const FeatureStore& store) {
  BAProblem pb;
  std::map<ImageId, std::uint32_t> cam_index;
  for (const auto& [id, cam] : model.cameras()) {
    cam_index[id] = static_cast<std::uint32_t>(pb.cams.size());
    pb.image_ids.push_back(id);
    pb.cams.push_back(cam);
  }
  for (std::size_t j = 0; j < model.num_points(); ++j) {
    const Point3D& p = model.point(static_cast<PointId>(j));
    pb.point_begin.push_back(static_cast<std::uint32_t>(pb.obs.size()));
    pb.pts.push_back(p.position);
    for (const FeatureRef& r : p.track) {
      pb.obs.push_back({cam_index.at(r.image_id), static_cast<std::uint32_t>(j),
                        pixel_of(store, r)});
    }
  }
  pb.point_begin.push_back(static_cast<std::uint32_t>(pb.obs.size()));
  return pb;
}

}  // namespace

BundleReport bundle_adjust(Model& model, const FeatureStore& store,
                           const BundleOptions& options) {
  if (model.num_cameras() < 2) {
    throw Error(ErrorCode::kArgument, "bundle adjustment needs >= 2 cameras");
  }
  BundleReport rep;
  BAProblem pb = make_problem(model, store);
  double cost = pb.cost(pb.cams, pb.pts);
  if (!std::isfinite(cost)) {
    // Prune points with a non-finite residual and retry once.
    std::vector<PointId> bad;
    for (std::size_t j = 0; j < pb.pts.size(); ++j) {
      for (auto k = pb.point_begin[j]; k < pb.point_begin[j + 1]; ++k) {
        const auto& o = pb.obs[k];
        const Vec3 Xc = pb.cams[o.cam].to_camera(pb.pts[j]);
        if (!(Xc.z() > 0.0) || !pb.pts[j].allFinite()) {
          bad.push_back(static_cast<PointId>(j));
          break;
        }
      }
    }
    model.remove_points(bad);
    rep.pruned_points = bad.size();
    pb = make_problem(model, store);
    cost = pb.cost(pb.cams, pb.pts);
    if (!std::isfinite(cost)) {
      throw Error(ErrorCode::kStageFailure, "bundle adjustment: non-finite cost");
    }
  }
  rep.initial_cost = cost;
  rep.cost_history.push_back(cost);

  const std::size_t m = pb.cams.size();
  const std::size_t n = pb.pts.size();
  const std::size_t dim = kCameraParams * m;
  using Mat7 = Eigen::Matrix<double, kCameraParams, kCameraParams>;
  using Mat73 = Eigen::Matrix<double, kCameraParams, 3>;
  using Vec7 = Eigen::Matrix<double, kCameraParams, 1>;

  std::vector<Mat7> U(m);
  std::vector<Vec7> gc(m);
  std::vector<Mat3> V(n);
  std::vector<Vec3> gp(n);
  std::vector<Mat73> W(pb.obs.size());
  std::vector<char> free_f(m, options.optimize_focal ? 1 : 0);
  for (std::size_t a = 0; a < m; ++a) {
    if (options.fix_calibrated_focal && store.has_calibration(pb.image_ids[a])) free_f[a] = 0;
  }
  double lambda = 1e-4;

  for (int it = 0; it < options.max_iterations && cost > 0.0; ++it) {
    for (auto& u : U) u.setZero();
    for (auto& g : gc) g.setZero();
    for (std::size_t j = 0; j < n; ++j) {
      V[j].setZero();
      gp[j].setZero();
      for (auto k = pb.point_begin[j]; k < pb.point_begin[j + 1]; ++k) {
        const auto& o = pb.obs[k];
        auto oj = observation_jacobian(pb.cams[o.cam], pb.pts[j], o.pixel);
        if (!free_f[o.cam]) oj.camera.col(6).setZero();
        U[o.cam] += oj.camera.transpose() * oj.camera;
        gc[o.cam] -= oj.camera.transpose() * oj.residual;
        V[j] += oj.point.transpose() * oj.point;
        gp[j] -= oj.point.transpose() * oj.residual;
        W[k] = oj.camera.transpose() * oj.point;
      }
    }
    rep.iterations = it + 1;

    bool accepted = false;
    while (!accepted && lambda < 1e12) {
      Eigen::MatrixXd S = Eigen::MatrixXd::Zero(dim, dim);
      Eigen::VectorXd rhs(dim);
      for (std::size_t a = 0; a < m; ++a) {
        Mat7 Ud = U[a];
        Ud.diagonal() *= (1.0 + lambda);
        Ud.diagonal().array() += 1e-9;
        if (!free_f[a]) Ud(6, 6) = 1.0;
        S.block<kCameraParams, kCameraParams>(kCameraParams * a, kCameraParams * a) = Ud;
        rhs.segment<kCameraParams>(kCameraParams * a) = gc[a];
      }
      std::vector<Mat3> Vinv(n);
      for (std::size_t j = 0; j < n; ++j) {
        Mat3 Vd = V[j];
        Vd.diagonal() *= (1.0 + lambda);
        Vd.diagonal().array() += 1e-12;
        Vinv[j] = Vd.inverse();
        const auto b = pb.point_begin[j], e = pb.point_begin[j + 1];
        for (auto k = b; k < e; ++k) {
          const std::uint32_t ca = pb.obs[k].cam;
          const Mat73 Y = W[k] * Vinv[j];
          rhs.segment<kCameraParams>(kCameraParams * ca) -= Y * gp[j];
          for (auto l = k; l < e; ++l) {
            const std::uint32_t cb = pb.obs[l].cam;
            const Mat7 blk = Y * W[l].transpose();
            S.block<kCameraParams, kCameraParams>(kCameraParams * ca, kCameraParams * cb) -= blk;
            if (l != k) {
              S.block<kCameraParams, kCameraParams>(kCameraParams * cb, kCameraParams * ca) -=
                  blk.transpose();
            }
          }
        }
      }
      const Eigen::VectorXd dc = S.ldlt().solve(rhs);
      std::vector<Camera> cams = pb.cams;
      for (std::size_t a = 0; a < m; ++a) {
        Vec7 d = dc.segment<kCameraParams>(kCameraParams * a);
        if (!free_f[a]) d(6) = 0.0;
        cams[a] = apply_camera_update(pb.cams[a], d);
      }
      std::vector<Vec3> pts = pb.pts;
      for (std::size_t j = 0; j < n; ++j) {
        Vec3 r = gp[j];
        for (auto k = pb.point_begin[j]; k < pb.point_begin[j + 1]; ++k) {
          r -= W[k].transpose() * dc.segment<kCameraParams>(kCameraParams * pb.obs[k].cam);
        }
        pts[j] += Vinv[j] * r;
      }
      const double c = dc.allFinite() ? pb.cost(cams, pts)
                                      : std::numeric_limits<double>::infinity();
      if (c < cost) {
        const double rel = (cost - c) / cost;
        pb.cams = std::move(cams);
        pb.pts = std::move(pts);
        cost = c;
        rep.cost_history.push_back(cost);
        lambda = std::max(lambda * 0.3, 1e-12);
        accepted = true;
        if (rel < options.relative_tolerance) it = options.max_iterations;
      } else {
        lambda *= 10.0;
      }
    }
    if (!accepted) break;
  }
  rep.final_cost = cost;
  for (std::size_t a = 0; a < m; ++a) model.set_camera(pb.cams[a]);
  for (std::size_t j = 0; j < n; ++j) model.set_position(static_cast<PointId>(j), pb.pts[j]);
  return rep;
}

std::size_t filter_observations(Model& model, const FeatureStore& store,
                                double max_reprojection_px) {
  std::size_t removed = 0;
  for (std::size_t j = 0; j < model.num_points(); ++j) {
    const Point3D p = model.point(static_cast<PointId>(j));
    for (const FeatureRef& r : p.track) {
      const Camera& cam = model.camera(r.image_id);
      const bool behind = !(cam.to_camera(p.position).z() > 0.0);
      if (behind || (cam.project(p.position) - pixel_of(store, r)).norm() >
                        max_reprojection_px) {
        model.remove_observation(static_cast<PointId>(j), r);
        ++removed;
      }
    }
  }
  model.prune_short_tracks();
  return removed;
}

// ---- incremental reconstruction ----------------------------------------

namespace {

struct EdgePose {
  RelativePose pose;
  std::vector<Vec2> qa, tb;
};

std::optional<EdgePose> edge_pose(const MatchEdge& edge, const FeatureStore& store) {
  if (!edge.geometry) return std::nullopt;
  EdgePose ep;
  const auto& fa = store.get(edge.a);
  const auto& fb = store.get(edge.b);
  for (const Match& m : edge.inliers()) {
    ep.qa.push_back(feature_point(fa.features[m.query]));
    ep.tb.push_back(feature_point(fb.features[m.target]));
  }
  if (ep.qa.size() < 8) return std::nullopt;
  const Mat3 Ka = Camera::from_intrinsics(edge.a, store.intrinsics(edge.a)).K;
  const Mat3 Kb = Camera::from_intrinsics(edge.b, store.intrinsics(edge.b)).K;
  try {
    ep.pose = relative_pose_from_fundamental(edge.geometry->F, Ka, Kb, ep.qa, ep.tb);
  } catch (const Error&) {
    return std::nullopt;
  }
  return ep;
}

}  // namespace

std::optional<double> median_triangulation_angle(const MatchEdge& edge,
                                                 const FeatureStore& store) {
  const auto ep = edge_pose(edge, store);
  if (!ep) return std::nullopt;
  const Camera A = Camera::from_intrinsics(edge.a, store.intrinsics(edge.a));
  const Camera B = Camera::from_intrinsics(edge.b, store.intrinsics(edge.b),
                                           ep->pose.R, ep->pose.t);
  std::vector<double> angles;
  for (std::size_t i = 0; i < ep->qa.size(); ++i) {
    const TrackObservation obs[2] = {{A, ep->qa[i]}, {B, ep->tb[i]}};
    const Vec3 X = triangulate_dlt(obs);
    if (!(A.to_camera(X).z() > 0.0) || !(B.to_camera(X).z() > 0.0)) continue;
    const Vec3 ra = (X - A.center()).normalized();
    const Vec3 rb = (X - B.center()).normalized();
    angles.push_back(std::acos(std::clamp(ra.dot(rb), -1.0, 1.0)) * kRadToDeg);
  }
  if (angles.empty()) return std::nullopt;
  const std::size_t mid = angles.size() / 2;
  std::nth_element(angles.begin(), angles.begin() + mid, angles.end());
  return angles[mid];
}

ImagePair select_seed_pair(const MatchGraph& graph, const FeatureStore& store,
                           const ReconstructionConfig& config) {
  std::vector<const MatchEdge*> order;
  for (const auto& [key, e] : graph.edges) {
    if (e.geometry && e.inlier_count() >= config.min_seed_inliers) order.push_back(&e);
  }
  std::stable_sort(order.begin(), order.end(), [](const MatchEdge* x, const MatchEdge* y) {
    return x->inlier_count() > y->inlier_count();
  });
  for (const MatchEdge* e : order) {
    const auto angle = median_triangulation_angle(*e, store);
    if (angle && *angle >= config.min_seed_angle_deg) return {e->a, e->b};
  }
  throw Error(ErrorCode::kNoSeed, "no edge passes the seed triangulation-angle gate");
}

Model incremental_reconstruct(const MatchGraph& graph, const FeatureStore& store,
                              const ReconstructionConfig& config) {
  if (graph.edges.empty()) {
    throw Error(ErrorCode::kInsufficientData, "empty match graph");
  }
  const TrackSet ts = build_tracks(graph);
  const auto [sa, sb] = select_seed_pair(graph, store, config);
  const MatchEdge& seed_edge = *graph.find(sa, sb);
  const auto ep = edge_pose(seed_edge, store);
  if (!ep) throw Error(ErrorCode::kNoSeed, "seed pose failed");

  Model model;
  model.stage_tag = {Stage::kCoarse, 0};
  model.attach_camera(Camera::from_intrinsics(sa, store.intrinsics(sa)), {});
  model.attach_camera(
      Camera::from_intrinsics(sb, store.intrinsics(sb), ep->pose.R, ep->pose.t), {});

  std::vector<std::optional<PointId>> track_point(ts.tracks.size());
  auto refresh_track_points = [&]() {
    for (std::size_t t = 0; t < ts.tracks.size(); ++t) {
      track_point[t].reset();
      for (const FeatureRef& r : ts.tracks[t]) {
        if (model.is_registered(r.image_id)) {
          if (auto p = model.point_of(r)) {
            track_point[t] = *p;
            break;
          }
        }
      }
    }
  };
  // Triangulate every point-less track touching `image` (all tracks when
  // image is unset) from its registered views.
  auto triangulate_new = [&](std::optional<ImageId> image) {
    for (std::size_t t = 0; t < ts.tracks.size(); ++t) {
      if (track_point[t]) continue;
      const auto& track = ts.tracks[t];
      if (image && std::none_of(track.begin(), track.end(), [&](const FeatureRef& r) {
            return r.image_id == *image;
          })) {
        continue;
      }
      std::vector<TrackObservation> obs;
      std::vector<FeatureRef> refs;
      for (const FeatureRef& r : track) {
        if (!model.is_registered(r.image_id) || model.point_of(r)) continue;
        obs.push_back({model.camera(r.image_id), pixel_of(store, r)});
        refs.push_back(r);
      }
      if (obs.size() < 2) continue;
      TriangulationResult tr;
      try {
        tr = triangulate_track(obs, config.triangulation);
      } catch (const Error&) {
        continue;
      }
      if (!tr.accepted()) continue;
      track_point[t] = model.add_point(tr.position, refs);
    }
  };
  auto run_ba = [&](int iterations) {
    BundleOptions bo;
    bo.max_iterations = iterations;
    bo.relative_tolerance = config.ba_tolerance;
    const auto rep = bundle_adjust(model, store, bo);
    filter_observations(model, store, config.max_reprojection_px);
    refresh_track_points();
    log_record("bundle_adjust", "cameras=" + std::to_string(model.num_cameras()) +
                                    " points=" + std::to_string(model.num_points()) +
                                    " iterations=" + std::to_string(rep.iterations) +
                                    " initial_cost=" + std::to_string(rep.initial_cost) +
                                    " final_cost=" + std::to_string(rep.final_cost));
  };

  triangulate_new(std::nullopt);
  run_ba(config.ba_iterations);

  const auto ids = store.image_ids();
  std::map<ImageId, std::size_t> failed_at;
  int since_ba = 0;
  int attempt = 0;
  while (true) {
    std::map<ImageId, std::size_t> counts;
    for (std::size_t t = 0; t < ts.tracks.size(); ++t) {
      if (!track_point[t]) continue;
      for (const FeatureRef& r : ts.tracks[t]) {
        if (!model.is_registered(r.image_id)) ++counts[r.image_id];
      }
    }
    ImageId next = 0;
    std::size_t best = 0;
    for (const auto& [id, c] : counts) {
      auto f = failed_at.find(id);
      if (f != failed_at.end() && c * 5 <= f->second * 6) continue;  // < +20%
      if (c > best) {
        best = c;
        next = id;
      }
    }
    if (best < config.min_registration_points) break;

    std::vector<Vec3> X;
    std::vector<Vec2> x;
    std::vector<PointObservation> corr;
    for (std::size_t t = 0; t < ts.tracks.size(); ++t) {
      if (!track_point[t]) continue;
      for (const FeatureRef& r : ts.tracks[t]) {
        if (r.image_id != next) continue;
        X.push_back(model.point(*track_point[t]).position);
        x.push_back(pixel_of(store, r));
        corr.emplace_back(*track_point[t], r);
      }
    }
    PnPOptions po = config.pnp;
    po.min_inliers = config.min_registration_points;
    po.seed = mix_seed(config.seed, next, static_cast<std::uint64_t>(attempt++));
    const PnPResult pr = pnp_ransac(X, x, store.intrinsics(next), next, po);
    if (!pr.success) {
      failed_at[next] = best;
      log_record("register", "image=" + std::to_string(next) + " outcome=failed inliers=" +
                                 std::to_string(pr.inlier_count) +
                                 " candidates=" + std::to_string(X.size()));
      continue;
    }
    std::vector<PointObservation> inliers;
    for (std::size_t i = 0; i < corr.size(); ++i) {
      if (pr.inlier_mask[i]) inliers.push_back(corr[i]);
    }
    model.attach_camera(pr.camera, inliers);
    log_record("register", "image=" + std::to_string(next) + " outcome=ok inliers=" +
                               std::to_string(pr.inlier_count));
    triangulate_new(next);
    if (++since_ba >= config.ba_batch) {
      run_ba(config.ba_iterations);
      since_ba = 0;
    }
  }
  if (model.num_cameras() >= 2) run_ba(config.ba_final_iterations);
  model.stage_tag = {Stage::kCoarse, 0};
  return model;
}

}  // namespace msfm
