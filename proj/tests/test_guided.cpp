#include <gtest/gtest.h>

#include <set>

#include "msfm/guided.hpp"
#include "msfm/synth.hpp"
#include "support.hpp"

using namespace msfm;

namespace {

Feature at(double x, double y) {
  Feature f;
  f.x = static_cast<float>(x);
  f.y = static_cast<float>(y);
  return f;
}

EpipolarLine through(const Vec2& p, const Vec2& q) {
  Vec3 l = p.homogeneous().cross(q.homogeneous());
  l /= std::hypot(l.x(), l.y());
  return {l.x(), l.y(), l.z()};
}

std::vector<Feature> uniform(std::size_t n, double w, double h, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> ux(0, w), uy(0, h);
  std::vector<Feature> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(at(ux(rng), uy(rng)));
  return out;
}

EpipolarLine random_line(double w, double h, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> ux(0, w), uy(0, h);
  return through({ux(rng), uy(rng)}, {ux(rng), uy(rng)});
}

}  // namespace

TEST(Grid, OriginFeatureCells) {
  const std::vector<Feature> fs = {at(0, 0)};
  const OverlapGrid g = build_grid(fs, 10.0);
  EXPECT_EQ(g.cell_of(0, {0, 0}), (OverlapGrid::CellRef{0, 0, 0}));
  EXPECT_EQ(g.cell_of(1, {0, 0}), (OverlapGrid::CellRef{1, -1, 0}));
  EXPECT_EQ(g.cell_of(2, {0, 0}), (OverlapGrid::CellRef{2, 0, -1}));
  EXPECT_EQ(g.cell_of(3, {0, 0}), (OverlapGrid::CellRef{3, -1, -1}));
  for (int k = 0; k < 4; ++k) {
    const auto m = g.members(g.cell_of(k, {0, 0}));
    ASSERT_EQ(m.size(), 1u);
  }
}

TEST(Grid, CenterFormula) {
  const std::vector<Feature> fs = {at(25, 25)};
  const OverlapGrid g = build_grid(fs, 10.0);
  const auto c = g.cell_of(0, {25, 25});
  EXPECT_EQ(c, (OverlapGrid::CellRef{0, 1, 1}));
  EXPECT_LT((g.center(c) - Vec2(30, 30)).norm(), 1e-12);
  EXPECT_LT((g.center({3, 0, 0}) - Vec2(20, 20)).norm(), 1e-12);
}

TEST(Grid, BinsPartitionAndRespectCellBounds) {
  std::mt19937_64 rng(1);
  const auto fs = uniform(10000, 1024, 768, rng);
  const double d = 8.0;
  const OverlapGrid g = build_grid(fs, d);
  for (int grid = 0; grid < 4; ++grid) {
    std::vector<int> seen(fs.size(), 0);
    std::set<OverlapGrid::CellRef> cells;
    for (std::size_t i = 0; i < fs.size(); ++i) cells.insert(g.cell_of(grid, {fs[i].x, fs[i].y}));
    for (const auto& c : cells) {
      const Vec2 lo = Vec2(c.ix, c.iy) * 2 * d + OverlapGrid::offset(grid, d);
      for (std::uint32_t id : g.members(c)) {
        ++seen[id];
        EXPECT_GE(fs[id].x, lo.x() - 1e-9);
        EXPECT_LT(fs[id].x, lo.x() + 2 * d);
        EXPECT_GE(fs[id].y, lo.y() - 1e-9);
        EXPECT_LT(fs[id].y, lo.y() + 2 * d);
      }
    }
    for (int s : seen) ASSERT_EQ(s, 1);  // exactly one bin per grid
  }
  EXPECT_MSFM_ERROR(build_grid(fs, 0.0), ErrorCode::kArgument);
  EXPECT_MSFM_ERROR(build_grid(fs, 8.0, 2.5), ErrorCode::kArgument);
}

TEST(LineSampling, HorizontalLine) {
  const auto pts = equidistant_line_points({0, 1, -50}, {640, 480}, 10.0);
  ASSERT_EQ(pts.size(), 65u);
  std::set<double> xs;
  for (const Vec2& p : pts) {
    EXPECT_NEAR(p.y(), 50.0, 1e-9);
    xs.insert(p.x());
  }
  EXPECT_NEAR(*xs.begin(), 0.0, 1e-9);
  EXPECT_NEAR(*xs.rbegin(), 640.0, 1e-9);
  for (std::size_t k = 1; k < pts.size(); ++k) EXPECT_LE((pts[k] - pts[k - 1]).norm(), 10.0 + 1e-9);
}

TEST(LineSampling, CornerClipAndMiss) {
  // Cuts the top-left corner: segment from (3,0) to (0,3).
  const auto pts = equidistant_line_points(through({3, 0}, {0, 3}), {640, 480}, 10.0);
  EXPECT_EQ(pts.size(), 2u);
  EXPECT_TRUE(equidistant_line_points({0, 1, 10}, {640, 480}, 10.0).empty());
}

TEST(LineSampling, BandFeaturesNearSomeSample) {
  std::mt19937_64 rng(2);
  const double d = 8.0;
  const auto fs = uniform(5000, 1024, 768, rng);
  for (int l = 0; l < 100; ++l) {
    const EpipolarLine line = random_line(1024, 768, rng);
    // Samples over the margin-grown rectangle reach every band feature.
    const auto pts = equidistant_line_points(line, ImageBounds{1024, 768}.grown(d), d);
    for (std::uint32_t i : candidates_linear(fs, line, d)) {
      double best = 1e18;
      for (const Vec2& p : pts) best = std::min(best, (p - Vec2(fs[i].x, fs[i].y)).norm());
      ASSERT_LE(best, d * std::sqrt(2.0) + 1e-9);
    }
  }
}

TEST(Linear, InclusiveBoundary) {
  const std::vector<Feature> fs = {at(10, 58), at(10, 58.5), at(10, 42)};
  const auto c = candidates_linear(fs, {0, 1, -50}, 8.0);
  EXPECT_EQ(c, (std::vector<std::uint32_t>{0, 2}));
  EXPECT_TRUE(candidates_linear({}, {0, 1, -50}, 8.0).empty());
}

TEST(GridCandidates, OnLineAndEmpty) {
  std::mt19937_64 rng(3);
  auto fs = uniform(2000, 1024, 768, rng);
  const Vec2 p(120, 700), r(900, 35);
  const EpipolarLine line = through(p, r);
  const Vec2 mid = 0.37 * p + 0.63 * r;
  fs.push_back(at(mid.x(), mid.y()));
  const OverlapGrid g = build_grid(fs, 8.0, 1.0);
  const auto c = candidates_grid(g, line, {1024, 768});
  EXPECT_TRUE(std::binary_search(c.begin(), c.end(), static_cast<std::uint32_t>(fs.size() - 1)));
  const OverlapGrid empty = build_grid(std::vector<Feature>{}, 8.0);
  EXPECT_TRUE(candidates_grid(empty, line, {1024, 768}).empty());
}

TEST(GridCandidates, ContainmentAtGoldenInflation) {
  // With the centermost-cell rule the worst per-axis offset between a band
  // feature and its cell center is d/2 + d*sqrt(5)/2, i.e. inflation 1.618.
  std::mt19937_64 rng(4);
  const double d = 8.0;
  for (int inst = 0; inst < 5; ++inst) {
    const auto fs = uniform(10000, 1024, 768, rng);
    const OverlapGrid g = build_grid(fs, d, 1.62);
    for (int l = 0; l < 200; ++l) {
      const EpipolarLine line = random_line(1024, 768, rng);
      const auto lin = candidates_linear(fs, line, d);
      const auto grid = candidates_grid(g, line, {1024, 768});
      ASSERT_TRUE(std::includes(grid.begin(), grid.end(), lin.begin(), lin.end()));
    }
  }
}

TEST(GridCandidates, RecallAndSizeAtDefaultInflation) {
  std::mt19937_64 rng(5);
  const double d = 8.0;
  std::size_t hit = 0, total = 0, retrieved = 0;
  for (int inst = 0; inst < 5; ++inst) {
    const auto fs = uniform(10000, 1024, 768, rng);
    const OverlapGrid g = build_grid(fs, d, 1.25);
    for (int l = 0; l < 200; ++l) {
      const EpipolarLine line = random_line(1024, 768, rng);
      const auto lin = candidates_linear(fs, line, d);
      const auto grid = candidates_grid(g, line, {1024, 768});
      total += lin.size();
      retrieved += grid.size();
      for (auto i : lin) hit += std::binary_search(grid.begin(), grid.end(), i);
    }
  }
  EXPECT_GE(static_cast<double>(hit) / total, 0.99);
  EXPECT_LE(retrieved, 4 * total);
}

TEST(RadialCandidates, ContainsLinear) {
  std::mt19937_64 rng(6);
  const double d = 8.0;
  const auto fs = uniform(10000, 1024, 768, rng);
  const PointIndex2D index(fs);
  for (int l = 0; l < 200; ++l) {
    const EpipolarLine line = random_line(1024, 768, rng);
    const auto lin = candidates_linear(fs, line, d);
    const auto rad = candidates_radial(index, line, {1024, 768}, d);
    ASSERT_TRUE(std::includes(rad.begin(), rad.end(), lin.begin(), lin.end()));
  }
  // A feature 2d away never comes back.
  const std::vector<Feature> far = {at(100, 66)};
  const PointIndex2D fi(far);
  EXPECT_TRUE(candidates_radial(fi, {0, 1, -50}, {640, 480}, d).empty());
  const std::vector<Feature> on = {at(100, 50)};
  const PointIndex2D oi(on);
  EXPECT_EQ(candidates_radial(oi, {0, 1, -50}, {640, 480}, d).size(), 1u);
}

TEST(QueryGroups, SameLineAndToleranceSplit) {
  // Identity-like geometry: F = [e]x with the epipole far away gives nearly
  // parallel lines; two query points on one epipolar line share a group.
  const Camera a = Camera::from_intrinsics(0, {500, 320, 240}, Mat3::Identity(), Vec3(0, 0, 0));
  const Camera b = Camera::from_intrinsics(1, {500, 320, 240}, Mat3::Identity(), Vec3(-1, 0, 0));
  const TwoViewGeometry geom = fundamental_from_poses(a, b);
  FeatureSet q;
  q.width = 640;
  q.height = 480;
  q.features = {at(100, 200), at(400, 200), at(100, 203)};
  const auto groups = group_queries(q, {}, geom, {640, 480});
  ASSERT_EQ(groups.size(), 2u);
  std::multiset<std::size_t> sizes;
  for (const auto& g : groups) sizes.insert(g.members.size());
  EXPECT_EQ(sizes, (std::multiset<std::size_t>{1, 2}));
}

TEST(QueryGroups, PartitionAndSpread) {
  SceneSpec spec = test::small_ring(8, 800);
  const SyntheticScene sc = generate_scene(spec);
  const TwoViewGeometry geom = fundamental_from_poses(sc.cameras[0], sc.cameras[1]);
  const FeatureSet& q = sc.store.get(0);
  const ImageBounds tb = bounds_of(sc.store.get(1));
  const auto groups = group_queries(q, {}, geom, tb, 2.0);
  std::vector<int> seen(q.size(), 0);
  for (const auto& g : groups) {
    for (FeatureId m : g.members) {
      ++seen[m];
      const auto ends = clip_line(epipolar_line(geom, feature_point(q.features[m])), tb);
      ASSERT_EQ(ends.size(), 2u);
      const double d1 = std::min((ends[0] - g.boundary_points[0]).norm(), (ends[1] - g.boundary_points[0]).norm());
      const double d2 = std::min((ends[0] - g.boundary_points[1]).norm(), (ends[1] - g.boundary_points[1]).norm());
      EXPECT_LE(d1, 2.0 + 1e-9);
      EXPECT_LE(d2, 2.0 + 1e-9);
    }
  }
  for (std::size_t i = 0; i < q.size(); ++i) {
    const auto ends = clip_line(epipolar_line(geom, feature_point(q.features[i])), tb);
    EXPECT_EQ(seen[i], ends.size() == 2 ? 1 : 0);
  }
}

TEST(GuidedMatch, OracleCorrespondencesAndBand) {
  SceneSpec spec = test::small_ring(8, 1500);
  spec.pixel_noise = 0.0;
  spec.descriptor_noise = 2.0;
  const SyntheticScene sc = generate_scene(spec);
  const TwoViewGeometry geom = fundamental_from_poses(sc.cameras[0], sc.cameras[1]);
  const FeatureSet& q = sc.store.get(0);
  const FeatureSet& t = sc.store.get(1);
  GuidedConfig cfg;
  GuidedCounters counters;
  const auto ms = guided_match_pair(q, t, geom, cfg, &counters);
  std::size_t correct = 0;
  for (const Match& m : ms) {
    correct += sc.truth[0][m.query] >= 0 && sc.truth[0][m.query] == sc.truth[1][m.target];
    const double dist = point_line_distance(feature_point(t.features[m.target]),
                                            epipolar_line(geom, feature_point(q.features[m.query])));
    EXPECT_LE(dist, guided_band_limit(cfg) + 1e-9);
  }
  const auto oracle = oracle_matches(sc, 0, 1);
  ASSERT_FALSE(oracle.empty());
  EXPECT_GE(static_cast<double>(correct) / ms.size(), 0.99);
  EXPECT_GE(correct, oracle.size() * 95 / 100);
  EXPECT_GT(counters.groups, 0u);
  EXPECT_EQ(counters.queries, q.size());

  cfg.threads = 3;
  const auto ms3 = guided_match_pair(q, t, geom, cfg);
  ASSERT_EQ(ms3.size(), ms.size());
  for (std::size_t i = 0; i < ms.size(); ++i) {
    EXPECT_EQ(ms3[i].query, ms[i].query);
    EXPECT_EQ(ms3[i].target, ms[i].target);
  }
}

TEST(GuidedMatch, StrategiesAgreeOnCorrectMatches) {
  const SyntheticScene sc = generate_scene(test::small_ring(8, 1500));
  const TwoViewGeometry geom = fundamental_from_poses(sc.cameras[2], sc.cameras[3]);
  const FeatureSet& q = sc.store.get(2);
  const FeatureSet& t = sc.store.get(3);
  std::vector<std::size_t> correct;
  for (auto s : {CandidateStrategy::kLinear, CandidateStrategy::kRadial, CandidateStrategy::kGrid}) {
    GuidedConfig cfg;
    cfg.strategy = s;
    std::size_t c = 0;
    for (const Match& m : guided_match_pair(q, t, geom, cfg)) {
      c += sc.truth[2][m.query] >= 0 && sc.truth[2][m.query] == sc.truth[3][m.target];
    }
    correct.push_back(c);
  }
  EXPECT_NEAR(static_cast<double>(correct[2]), static_cast<double>(correct[0]), 0.03 * correct[0]);
  EXPECT_NEAR(static_cast<double>(correct[1]), static_cast<double>(correct[0]), 0.03 * correct[0]);
}

TEST(GuidedMatch, SubsetsMapToGlobalIds) {
  const SyntheticScene sc = generate_scene(test::small_ring(8, 1000));
  const TwoViewGeometry geom = fundamental_from_poses(sc.cameras[0], sc.cameras[1]);
  const FeatureSet& q = sc.store.get(0);
  const FeatureSet& t = sc.store.get(1);
  std::vector<FeatureId> qids, tids;
  for (FeatureId i = 0; i < q.size(); i += 2) qids.push_back(i);
  for (FeatureId i = 1; i < t.size(); i += 2) tids.push_back(i);
  for (const Match& m : guided_match_pair(q, t, geom, {}, nullptr, qids, tids)) {
    EXPECT_EQ(m.query % 2, 0u);
    EXPECT_EQ(m.target % 2, 1u);
  }
}
