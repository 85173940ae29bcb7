#include "msfm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include <Eigen/Geometry>

namespace msfm {

namespace {

constexpr double kPi = 3.14159265358979323846;

Mat3 look_at(const Vec3& C, const Vec3& target) {
  const Vec3 fwd = (target - C).normalized();
  Vec3 up(0.0, 0.0, 1.0);
  if (std::abs(fwd.dot(up)) > 0.99) up = Vec3(0.0, 1.0, 0.0);
  const Vec3 right = fwd.cross(up).normalized();
  const Vec3 down = fwd.cross(right);
  Mat3 R;
  R.row(0) = right.transpose();
  R.row(1) = down.transpose();
  R.row(2) = fwd.transpose();
  return R;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t m = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + m, v.end());
  double hi = v[m];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + m);
  return 0.5 * (lo + hi);
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

SceneSpec parse_scene_spec(std::istream& in) {
  SceneSpec s;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::kFormat,
                  "scene spec line " + std::to_string(lineno) + ": expected key=value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    auto num = [&]() {
      try {
        std::size_t used = 0;
        const double v = std::stod(val, &used);
        if (used != val.size()) throw std::invalid_argument(val);
        return v;
      } catch (const std::exception&) {
        throw Error(ErrorCode::kFormat, "scene spec: bad value for " + key + ": " + val);
      }
    };
    if (key == "cameras") s.cameras = static_cast<int>(num());
    else if (key == "layout") {
      if (val == "ring") s.layout = CameraLayout::kRing;
      else if (val == "grid") s.layout = CameraLayout::kGrid;
      else if (val == "sphere_cap") s.layout = CameraLayout::kSphereCap;
      else throw Error(ErrorCode::kFormat, "scene spec: unknown layout " + val);
    } else if (key == "camera_distance") s.camera_distance = num();
    else if (key == "points") s.points = static_cast<int>(num());
    else if (key == "structure_radius") s.structure_radius = num();
    else if (key == "structure_height") s.structure_height = num();
    else if (key == "normal_cone_deg") s.normal_cone_deg = num();
    else if (key == "width") s.width = static_cast<std::uint32_t>(num());
    else if (key == "height") s.height = static_cast<std::uint32_t>(num());
    else if (key == "focal") s.focal = num();
    else if (key == "pixel_noise") s.pixel_noise = num();
    else if (key == "descriptor_noise") s.descriptor_noise = num();
    else if (key == "visibility") s.visibility = num();
    else if (key == "clutter_fraction") s.clutter_fraction = num();
    else if (key == "repetition_groups") s.repetition_groups = static_cast<int>(num());
    else if (key == "repetition_size") s.repetition_size = static_cast<int>(num());
    else if (key == "octaves") s.octaves = static_cast<int>(num());
    else if (key == "sigma0") s.sigma0 = num();
    else if (key == "scale_jitter") s.scale_jitter = num();
    else if (key == "seed") s.seed = static_cast<std::uint64_t>(num());
    else throw Error(ErrorCode::kFormat, "scene spec: unknown key " + key);
  }
  return s;
}

SceneSpec load_scene_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  return parse_scene_spec(in);
}

void write_scene_spec(std::ostream& out, const SceneSpec& s) {
  const char* layout = s.layout == CameraLayout::kRing   ? "ring"
                       : s.layout == CameraLayout::kGrid ? "grid"
                                                         : "sphere_cap";
  out << std::setprecision(17) << "cameras = " << s.cameras << "\nlayout = " << layout
      << "\ncamera_distance = " << s.camera_distance << "\npoints = " << s.points
      << "\nstructure_radius = " << s.structure_radius
      << "\nstructure_height = " << s.structure_height
      << "\nnormal_cone_deg = " << s.normal_cone_deg << "\nwidth = " << s.width
      << "\nheight = " << s.height << "\nfocal = " << s.focal
      << "\npixel_noise = " << s.pixel_noise
      << "\ndescriptor_noise = " << s.descriptor_noise
      << "\nvisibility = " << s.visibility
      << "\nclutter_fraction = " << s.clutter_fraction
      << "\nrepetition_groups = " << s.repetition_groups
      << "\nrepetition_size = " << s.repetition_size << "\noctaves = " << s.octaves
      << "\nsigma0 = " << s.sigma0 << "\nscale_jitter = " << s.scale_jitter
      << "\nseed = " << s.seed << '\n';
}

SyntheticScene generate_scene(const SceneSpec& spec) {
  if (spec.cameras < 1 || spec.points < 0 || spec.width == 0 ||
      spec.height == 0 || !(spec.focal > 0.0) || spec.octaves < 1 ||
      spec.repetition_groups < 0 || spec.repetition_size < 0 ||
      spec.repetition_groups * spec.repetition_size > spec.points) {
    throw Error(ErrorCode::kArgument, "invalid scene spec");
  }
  SyntheticScene scene;
  scene.spec = spec;
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const double W = spec.width, H = spec.height;
  const Intrinsics intr{spec.focal, W / 2.0, H / 2.0};
  const double D = spec.camera_distance;

  // Cameras.
  for (int i = 0; i < spec.cameras; ++i) {
    Vec3 C;
    Vec3 target = Vec3::Zero();
    switch (spec.layout) {
      case CameraLayout::kRing: {
        const double a = 2.0 * kPi * i / spec.cameras;
        C = Vec3(D * std::cos(a), D * std::sin(a), 0.0);
        break;
      }
      case CameraLayout::kGrid: {
        const int cols = static_cast<int>(std::ceil(std::sqrt(spec.cameras)));
        const double step = spec.structure_radius / std::max(1, cols - 1);
        C = Vec3((i % cols - (cols - 1) / 2.0) * step,
                 (i / cols - (cols - 1) / 2.0) * step, -D);
        target = Vec3(C.x(), C.y(), 0.0);
        break;
      }
      case CameraLayout::kSphereCap: {
        // Fibonacci spiral over a 45 degree cap around +z.
        const double golden = kPi * (3.0 - std::sqrt(5.0));
        const double z = 1.0 - (1.0 - std::cos(kPi / 4)) * (i + 0.5) / spec.cameras;
        const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
        C = D * Vec3(r * std::cos(golden * i), r * std::sin(golden * i), z);
        break;
      }
    }
    const Mat3 R = look_at(C, target);
    scene.cameras.push_back(Camera::from_intrinsics(static_cast<ImageId>(i), intr, R, -R * C));
  }

  // Points with outward normals and intrinsic scales.
  std::vector<Vec3> normals;
  std::vector<double> intrinsic_scale;
  std::vector<double> orientation;
  const double rho = spec.structure_radius;
  const double ptotal = 2.0 - std::ldexp(1.0, 1 - spec.octaves);
  for (int p = 0; p < spec.points; ++p) {
    Vec3 X, n;
    switch (spec.layout) {
      case CameraLayout::kRing: {
        const double a = 2.0 * kPi * unit(rng);
        const double z = (unit(rng) - 0.5) * spec.structure_height;
        n = Vec3(std::cos(a), std::sin(a), 0.0);
        X = rho * n + Vec3(0.0, 0.0, z);
        break;
      }
      case CameraLayout::kGrid: {
        const double ext = 1.5 * rho;
        X = Vec3((unit(rng) - 0.5) * 2.0 * ext, (unit(rng) - 0.5) * 2.0 * ext,
                 (unit(rng) - 0.5) * 0.3 * rho);
        n = Vec3(0.0, 0.0, -1.0);
        break;
      }
      case CameraLayout::kSphereCap: {
        Vec3 g(gauss(rng), gauss(rng), gauss(rng));
        n = g.normalized();
        X = rho * n;
        break;
      }
    }
    scene.points.push_back(X);
    normals.push_back(n);
    // Octave o with probability 2^-o / ptotal.
    double u = unit(rng) * ptotal;
    int o = 0;
    for (; o + 1 < spec.octaves; ++o) {
      const double po = std::ldexp(1.0, -o);
      if (u < po) break;
      u -= po;
    }
    intrinsic_scale.push_back(spec.sigma0 * std::pow(2.0, o + unit(rng)));
    orientation.push_back(2.0 * kPi * unit(rng));
  }

  // Base descriptors: one per repetition group, one per ungrouped point.
  auto random_descriptor = [&]() {
    std::vector<double> b(kDescriptorSize);
    for (double& v : b) v = std::floor(unit(rng) * 256.0);
    return b;
  };
  const int grouped = spec.repetition_groups * spec.repetition_size;
  std::vector<std::vector<double>> group_base(spec.repetition_groups);
  for (auto& b : group_base) b = random_descriptor();
  std::vector<std::vector<double>> base(spec.points);
  scene.point_group.assign(spec.points, -1);
  for (int p = 0; p < spec.points; ++p) {
    if (p < grouped) {
      scene.point_group[p] = p / spec.repetition_size;
      base[p] = group_base[p / spec.repetition_size];
    } else {
      base[p] = random_descriptor();
    }
  }
  auto noisy = [&](const std::vector<double>& b) {
    Descriptor d;
    for (std::size_t k = 0; k < kDescriptorSize; ++k) {
      const double v = std::round(b[k] + spec.descriptor_noise * gauss(rng));
      d[k] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
    }
    return d;
  };

  const double cos_cone = std::cos(spec.normal_cone_deg * kPi / 180.0);
  scene.truth.resize(spec.cameras);
  for (int i = 0; i < spec.cameras; ++i) {
    const Camera& cam = scene.cameras[i];
    const Vec3 C = cam.center();
    FeatureSet fs;
    fs.image_id = static_cast<ImageId>(i);
    fs.width = spec.width;
    fs.height = spec.height;
    std::vector<std::int32_t> owner;
    for (int p = 0; p < spec.points; ++p) {
      const Vec3& X = scene.points[p];
      const Vec3 Xc = cam.to_camera(X);
      // Every point consumes the same draws so visibility changes do not
      // shift the random stream of later points.
      const double vis = unit(rng);
      const double nx = gauss(rng), ny = gauss(rng), sj = gauss(rng), oj = gauss(rng);
      if (Xc.z() <= 0.1) continue;
      if (normals[p].dot((C - X).normalized()) < cos_cone) continue;
      if (vis >= spec.visibility) continue;
      const Vec2 px = cam.project(X) + spec.pixel_noise * Vec2(nx, ny);
      if (px.x() < 0.0 || px.y() < 0.0 || px.x() >= W || px.y() >= H) continue;
      Feature f;
      f.x = static_cast<float>(px.x());
      f.y = static_cast<float>(px.y());
      f.scale = static_cast<float>(intrinsic_scale[p] * D / Xc.z() *
                                   std::exp(spec.scale_jitter * sj));
      f.orientation = static_cast<float>(orientation[p] + 0.05 * oj);
      f.descriptor = noisy(base[p]);
      fs.features.push_back(f);
      owner.push_back(p);
    }
    const std::size_t seen = owner.size();
    if (seen < 8) {
      scene.warnings.push_back("camera " + std::to_string(i) + " sees " +
                               std::to_string(seen) + " points");
    }
    const auto clutter = static_cast<std::size_t>(
        std::llround(spec.clutter_fraction * static_cast<double>(seen)));
    for (std::size_t c = 0; c < clutter; ++c) {
      Feature f;
      f.x = static_cast<float>(std::min(unit(rng) * W, W - 1e-3));
      f.y = static_cast<float>(std::min(unit(rng) * H, H - 1e-3));
      double u = unit(rng) * ptotal;
      int o = 0;
      for (; o + 1 < spec.octaves; ++o) {
        const double po = std::ldexp(1.0, -o);
        if (u < po) break;
        u -= po;
      }
      f.scale = static_cast<float>(spec.sigma0 * std::pow(2.0, o + unit(rng)));
      f.orientation = static_cast<float>(2.0 * kPi * unit(rng));
      f.descriptor = noisy(random_descriptor());
      fs.features.push_back(f);
      owner.push_back(-1);
    }
    // Descending scale, stable.
    std::vector<std::size_t> order(fs.features.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return fs.features[a].scale > fs.features[b].scale;
    });
    FeatureSet sorted = fs;
    std::vector<std::int32_t> sorted_owner(owner.size());
    for (std::size_t k = 0; k < order.size(); ++k) {
      sorted.features[k] = fs.features[order[k]];
      sorted_owner[k] = owner[order[k]];
    }
    sorted.coarse_count = sorted.features.size();
    scene.truth[i] = std::move(sorted_owner);
    scene.store.add(std::move(sorted));
    scene.store.set_intrinsics(static_cast<ImageId>(i), intr);
  }
  return scene;
}

std::vector<std::vector<FeatureRef>> SyntheticScene::tracks() const {
  std::vector<std::vector<FeatureRef>> out(points.size());
  for (std::size_t i = 0; i < truth.size(); ++i) {
    for (std::size_t f = 0; f < truth[i].size(); ++f) {
      if (truth[i][f] >= 0) {
        out[truth[i][f]].push_back({static_cast<ImageId>(i), static_cast<FeatureId>(f)});
      }
    }
  }
  return out;
}

std::size_t SyntheticScene::triangulable_points() const {
  std::size_t n = 0;
  for (const auto& t : tracks()) n += t.size() >= 2;
  return n;
}

Model SyntheticScene::ground_truth_model() const {
  Model m;
  for (const Camera& c : cameras) m.attach_camera(c, {});
  const auto all = tracks();
  for (std::size_t p = 0; p < all.size(); ++p) {
    if (all[p].size() >= 2) m.add_point(points[p], all[p]);
  }
  return m;
}

void write_scene(const SyntheticScene& scene, const std::filesystem::path& dir) {
  scene.store.write_dir(dir);
  save_model(dir / "truth.msfm", scene.ground_truth_model());
  std::ofstream truth(dir / "truth.txt");
  if (!truth) throw Error(ErrorCode::kIo, "cannot write truth.txt");
  for (std::size_t i = 0; i < scene.truth.size(); ++i) {
    for (std::size_t f = 0; f < scene.truth[i].size(); ++f) {
      const int p = scene.truth[i][f];
      truth << "OBS " << i << ' ' << f << ' ' << p << ' '
            << (p >= 0 ? scene.point_group[p] : -1) << '\n';
    }
  }
  std::ofstream spec(dir / "scene.cfg");
  write_scene_spec(spec, scene.spec);
}

std::vector<std::pair<FeatureId, FeatureId>> oracle_matches(
    const SyntheticScene& scene, ImageId a, ImageId b) {
  if (a >= scene.truth.size() || b >= scene.truth.size()) {
    throw Error(ErrorCode::kArgument, "oracle_matches: unknown image");
  }
  std::map<std::int32_t, FeatureId> in_b;
  for (std::size_t f = 0; f < scene.truth[b].size(); ++f) {
    if (scene.truth[b][f] >= 0) in_b.emplace(scene.truth[b][f], static_cast<FeatureId>(f));
  }
  std::vector<std::pair<FeatureId, FeatureId>> out;
  for (std::size_t f = 0; f < scene.truth[a].size(); ++f) {
    const auto p = scene.truth[a][f];
    if (p < 0) continue;
    auto it = in_b.find(p);
    if (it != in_b.end()) out.emplace_back(static_cast<FeatureId>(f), it->second);
  }
  std::sort(out.begin(), out.end());
  return out;
}

void similarity_umeyama(std::span<const Vec3> src, std::span<const Vec3> dst,
                        double& scale, Mat3& R, Vec3& t) {
  Eigen::Matrix3Xd S(3, src.size()), T(3, dst.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    S.col(i) = src[i];
    T.col(i) = dst[i];
  }
  const Eigen::Matrix4d M = Eigen::umeyama(S, T, true);
  const Mat3 sR = M.block<3, 3>(0, 0);
  scale = sR.col(0).norm();
  R = sR / scale;
  t = M.block<3, 1>(0, 3);
}

AlignmentReport align_models(const Model& estimated, const Model& reference,
                             std::uint64_t seed) {
  AlignmentReport rep;
  std::vector<Vec3> src, dst;
  for (const auto& [id, cam] : estimated.cameras()) {
    if (!reference.is_registered(id)) continue;
    rep.image_ids.push_back(id);
    src.push_back(cam.center());
    dst.push_back(reference.camera(id).center());
  }
  const std::size_t n = src.size();
  rep.common_cameras = n;
  if (n < 3) {
    throw Error(ErrorCode::kInsufficientOverlap,
                "alignment needs >= 3 common cameras, have " + std::to_string(n));
  }
  auto spread = [](const std::vector<Vec3>& pts) {
    Vec3 mean = Vec3::Zero();
    for (const auto& p : pts) mean += p;
    mean /= static_cast<double>(pts.size());
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (const auto& p : pts) cov += (p - mean) * (p - mean).transpose();
    const Vec3 ev = Eigen::SelfAdjointEigenSolver<Mat3>(cov).eigenvalues();
    return std::pair<double, double>{ev(2), ev(1)};
  };
  for (const auto* pts : {&src, &dst}) {
    const auto [l0, l1] = spread(*pts);
    if (!(l0 > 0.0) || l1 <= 1e-12 * l0) {
      throw Error(ErrorCode::kDegenerateAlignment, "camera centers are collinear");
    }
  }
  double dist_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) dist_sum += (dst[i] - dst[j]).norm();
  }
  rep.reference_camera_distance = dist_sum / (static_cast<double>(n) * (n - 1) / 2.0);
  const double thresh = 0.05 * rep.reference_camera_distance;

  auto count_inliers = [&](double s, const Mat3& R, const Vec3& t,
                           std::vector<char>* mask, double* resid) {
    std::size_t c = 0;
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = (s * R * src[i] + t - dst[i]).norm();
      const bool in = e <= thresh;
      if (mask) (*mask)[i] = in;
      if (in) {
        ++c;
        sum += e;
      }
    }
    if (resid) *resid = sum;
    return c;
  };

  std::mt19937_64 rng(seed);
  std::size_t best = 0;
  double best_resid = 0.0;
  double bs = 1.0;
  Mat3 bR = Mat3::Identity();
  Vec3 bt = Vec3::Zero();
  const int iterations = 500;
  for (int it = 0; it < iterations; ++it) {
    std::size_t idx[3];
    idx[0] = rng() % n;
    do idx[1] = rng() % n; while (idx[1] == idx[0]);
    do idx[2] = rng() % n; while (idx[2] == idx[0] || idx[2] == idx[1]);
    std::vector<Vec3> s3, d3;
    for (std::size_t k : idx) {
      s3.push_back(src[k]);
      d3.push_back(dst[k]);
    }
    const Vec3 u = d3[1] - d3[0], v = d3[2] - d3[0];
    if (u.cross(v).norm() <= 1e-9 * u.norm() * v.norm()) continue;
    double s;
    Mat3 R;
    Vec3 t;
    similarity_umeyama(s3, d3, s, R, t);
    double resid = 0.0;
    const std::size_t c = count_inliers(s, R, t, nullptr, &resid);
    if (c > best || (c == best && resid < best_resid)) {
      best = c;
      best_resid = resid;
      bs = s;
      bR = R;
      bt = t;
    }
  }
  // Refit on inliers until the set stops changing.
  std::vector<char> mask(n, 0);
  count_inliers(bs, bR, bt, &mask, nullptr);
  for (int round = 0; round < 5; ++round) {
    std::vector<Vec3> si, di;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask[i]) {
        si.push_back(src[i]);
        di.push_back(dst[i]);
      }
    }
    if (si.size() < 3) break;
    similarity_umeyama(si, di, bs, bR, bt);
    std::vector<char> next(n, 0);
    count_inliers(bs, bR, bt, &next, nullptr);
    if (next == mask) break;
    mask = std::move(next);
  }
  rep.scale = bs;
  rep.R = bR;
  rep.t = bt;
  rep.inliers = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1));

  for (std::size_t i = 0; i < n; ++i) {
    const Camera& ce = estimated.camera(rep.image_ids[i]);
    const Camera& cr = reference.camera(rep.image_ids[i]);
    const Mat3 Rin = ce.R * bR.transpose();
    const Eigen::AngleAxisd aa(Rin * cr.R.transpose());
    rep.rotation_error_deg.push_back(std::abs(aa.angle()) * 180.0 / kPi);
    const double e = (bs * bR * src[i] + bt - dst[i]).norm();
    rep.translation_error.push_back(e);
    rep.relative_translation_error.push_back(e / rep.reference_camera_distance);
  }
  rep.mean_rotation_deg = mean_of(rep.rotation_error_deg);
  rep.median_rotation_deg = median_of(rep.rotation_error_deg);
  rep.mean_translation = mean_of(rep.translation_error);
  rep.median_translation = median_of(rep.translation_error);
  rep.mean_relative_translation = mean_of(rep.relative_translation_error);
  rep.median_relative_translation = median_of(rep.relative_translation_error);
  return rep;
}

}  // namespace msfm
