#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "msfm/synth.hpp"
#include "support.hpp"

using namespace msfm;

TEST(SceneSpec, ParseAndWrite) {
  std::istringstream in("# test\ncameras = 12\nlayout = sphere_cap\npixel_noise=0.25\nseed = 99\n");
  const SceneSpec s = parse_scene_spec(in);
  EXPECT_EQ(s.cameras, 12);
  EXPECT_EQ(s.layout, CameraLayout::kSphereCap);
  EXPECT_DOUBLE_EQ(s.pixel_noise, 0.25);
  EXPECT_EQ(s.seed, 99u);
  std::ostringstream out;
  write_scene_spec(out, s);
  std::istringstream back(out.str());
  const SceneSpec t = parse_scene_spec(back);
  EXPECT_EQ(t.cameras, 12);
  EXPECT_EQ(t.layout, CameraLayout::kSphereCap);
  std::istringstream bad("cameraz = 3\n");
  EXPECT_MSFM_ERROR(parse_scene_spec(bad), ErrorCode::kFormat);
}

TEST(Synth, DeterministicForSeed) {
  const SceneSpec spec = test::small_ring(8, 300);
  const SyntheticScene a = generate_scene(spec);
  const SyntheticScene b = generate_scene(spec);
  for (ImageId id : a.store.image_ids()) {
    EXPECT_EQ(serialize_features(a.store.get(id)), serialize_features(b.store.get(id)));
  }
  EXPECT_EQ(a.truth, b.truth);
  SceneSpec other = spec;
  other.seed = spec.seed + 1;
  EXPECT_NE(serialize_features(generate_scene(other).store.get(0)),
            serialize_features(a.store.get(0)));
}

TEST(Synth, ObservationsMatchProjections) {
  SceneSpec spec = test::small_ring(10, 500);
  spec.pixel_noise = 0.0;
  const SyntheticScene sc = generate_scene(spec);
  std::size_t observed = 0;
  for (ImageId id = 0; id < sc.cameras.size(); ++id) {
    const FeatureSet& fs = sc.store.get(id);
    ASSERT_EQ(sc.truth[id].size(), fs.size());
    for (std::size_t f = 1; f < fs.size(); ++f) ASSERT_GE(fs.features[f - 1].scale, fs.features[f].scale);
    for (std::size_t f = 0; f < fs.size(); ++f) {
      const int p = sc.truth[id][f];
      if (p < 0) continue;
      ++observed;
      const Vec3 Xc = sc.cameras[id].to_camera(sc.points[p]);
      EXPECT_GT(Xc.z(), 0.0);
      EXPECT_LT((sc.cameras[id].project(sc.points[p]) - feature_point(fs.features[f])).norm(), 1e-3);
    }
    EXPECT_TRUE(sc.store.has_calibration(id));
  }
  EXPECT_GT(observed, 1000u);
}

TEST(Synth, RepetitionGroupsShareBaseDescriptors) {
  SceneSpec spec = test::small_ring(8, 400);
  spec.repetition_groups = 5;
  spec.repetition_size = 10;
  const SyntheticScene sc = generate_scene(spec);
  std::size_t grouped = 0;
  for (int g : sc.point_group) grouped += g >= 0;
  EXPECT_EQ(grouped, 50u);
}

TEST(Synth, WriteSceneLayout) {
  const auto dir = std::filesystem::temp_directory_path() / "msfm_synth_test";
  std::filesystem::remove_all(dir);
  const SyntheticScene sc = generate_scene(test::small_ring(6, 200));
  write_scene(sc, dir);
  EXPECT_TRUE(std::filesystem::exists(dir / "calibration.txt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "truth.msfm"));
  EXPECT_TRUE(std::filesystem::exists(dir / "truth.txt"));
  const FeatureStore back = FeatureStore::load_dir(dir);
  EXPECT_EQ(back.size(), 6u);
  const Model truth = load_model(dir / "truth.msfm");
  EXPECT_EQ(truth.num_cameras(), 6u);
  std::filesystem::remove_all(dir);
}

TEST(Align, RecoversKnownSimilarity) {
  const SyntheticScene sc = generate_scene(test::small_ring(12, 300));
  const Model ref = sc.ground_truth_model();
  // est = (R0 * ref + t0) * s0: cameras transform accordingly.
  const Mat3 R0 = test::rotation_about(Vec3(1, 2, 3), 0.7);
  const Vec3 t0(3, -1, 2);
  const double s0 = 0.4;
  Model est;
  for (const auto& [id, c] : ref.cameras()) {
    Camera e = c;
    e.R = c.R * R0.transpose();
    e.t = s0 * (c.t - e.R * t0);
    est.attach_camera(e, {});
  }
  const AlignmentReport rep = align_models(est, ref);
  EXPECT_EQ(rep.common_cameras, 12u);
  EXPECT_EQ(rep.inliers, 12u);
  EXPECT_NEAR(rep.scale, 1.0 / s0, 1e-6);
  EXPECT_LT(rep.median_rotation_deg, 1e-6);
  EXPECT_LT(rep.median_relative_translation, 1e-6);
}

TEST(Align, Errors) {
  const SyntheticScene sc = generate_scene(test::small_ring(12, 300));
  const Model ref = sc.ground_truth_model();
  Model two;
  two.attach_camera(ref.camera(0), {});
  two.attach_camera(ref.camera(1), {});
  EXPECT_MSFM_ERROR(align_models(two, ref), ErrorCode::kInsufficientOverlap);
  Model line, line_ref;
  for (ImageId i = 0; i < 4; ++i) {
    const Camera c = Camera::from_intrinsics(i, {800, 512, 384}, Mat3::Identity(), Vec3(-double(i), 0, 0));
    line.attach_camera(c, {});
    line_ref.attach_camera(c, {});
  }
  EXPECT_MSFM_ERROR(align_models(line, line_ref), ErrorCode::kDegenerateAlignment);
}

TEST(Umeyama, ExactOnCleanData) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  std::vector<Vec3> src, dst;
  const Mat3 R = test::rotation_about(Vec3(0, 1, 1), -1.1);
  for (int i = 0; i < 20; ++i) {
    src.emplace_back(g(rng), g(rng), g(rng));
    dst.push_back(2.5 * R * src.back() + Vec3(1, 2, 3));
  }
  double s = 0;
  Mat3 Re;
  Vec3 te;
  similarity_umeyama(src, dst, s, Re, te);
  EXPECT_NEAR(s, 2.5, 1e-9);
  EXPECT_LT((Re - R).norm(), 1e-9);
  EXPECT_LT((te - Vec3(1, 2, 3)).norm(), 1e-9);
}
