#pragma once

#include <algorithm>
#include <numeric>
#include <random>
#include <vector>

#include "msfm/features.hpp"
#include "msfm/model.hpp"
#include "msfm/synth.hpp"

#define EXPECT_MSFM_ERROR(stmt, expected_code)                        \
  do {                                                                \
    bool thrown_ = false;                                             \
    try {                                                             \
      stmt;                                                           \
    } catch (const ::msfm::Error& e_) {                               \
      thrown_ = true;                                                 \
      EXPECT_EQ(e_.code(), expected_code) << e_.what();               \
    }                                                                 \
    EXPECT_TRUE(thrown_) << "no msfm::Error from " #stmt;             \
  } while (0)

namespace msfm::test {

inline Descriptor random_descriptor(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> byte(0, 255);
  Descriptor d;
  for (auto& v : d) v = static_cast<std::uint8_t>(byte(rng));
  return d;
}

inline FeatureSet random_features(std::size_t n, std::uint32_t width, std::uint32_t height,
                                  std::mt19937_64& rng, ImageId id = 0) {
  std::uniform_real_distribution<float> ux(0.0F, static_cast<float>(width) - 1e-3F);
  std::uniform_real_distribution<float> uy(0.0F, static_cast<float>(height) - 1e-3F);
  std::uniform_real_distribution<float> us(1.6F, 40.0F);
  FeatureSet fs;
  fs.image_id = id;
  fs.width = width;
  fs.height = height;
  fs.features.resize(n);
  for (auto& f : fs.features) {
    f.x = ux(rng);
    f.y = uy(rng);
    f.scale = us(rng);
    f.descriptor = random_descriptor(rng);
  }
  sort_by_scale(fs);
  fs.coarse_count = fs.size();
  return fs;
}

/// A copy of `d` with independent gaussian byte noise.
inline Descriptor perturb(const Descriptor& d, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, sigma);
  Descriptor out;
  for (std::size_t k = 0; k < d.size(); ++k) {
    out[k] = static_cast<std::uint8_t>(std::clamp(d[k] + n(rng), 0.0, 255.0));
  }
  return out;
}

/// Small ring scene for tests that must stay fast.
inline SceneSpec small_ring(int cameras = 16, int points = 800, std::uint64_t seed = 3) {
  SceneSpec s;
  s.cameras = cameras;
  s.points = points;
  s.seed = seed;
  return s;
}

/// Ground truth restricted to the cameras with id < `registered`; points
/// keep their observations in those cameras when at least two remain.
inline Model truth_subset(const SyntheticScene& scene, ImageId registered) {
  Model m;
  for (ImageId id = 0; id < registered && id < scene.cameras.size(); ++id) {
    m.attach_camera(scene.cameras[id], {});
  }
  for (const auto& track : scene.tracks()) {
    std::vector<FeatureRef> kept;
    for (const auto& r : track) {
      if (r.image_id < registered) kept.push_back(r);
    }
    if (kept.size() < 2) continue;
    const auto p = scene.truth[kept[0].image_id][kept[0].feature_id];
    m.add_point(scene.points[p], kept);
  }
  return m;
}

inline Mat3 rotation_about(const Vec3& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

}  // namespace msfm::test
