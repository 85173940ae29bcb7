#include "msfm/localizer.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <tuple>

namespace msfm {

std::vector<float> mean_descriptor(const Point3D& point, const FeatureStore& store) {
  if (point.track.empty()) {
    throw Error(ErrorCode::kArgument, "mean descriptor of an empty track");
  }
  std::vector<double> acc(kDescriptorSize, 0.0);
  for (const FeatureRef& r : point.track) {
    const Descriptor& d = store.get(r.image_id).features.at(r.feature_id).descriptor;
    for (std::size_t k = 0; k < kDescriptorSize; ++k) acc[k] += d[k];
  }
  std::vector<float> out(kDescriptorSize);
  const double n = static_cast<double>(point.track.size());
  for (std::size_t k = 0; k < kDescriptorSize; ++k) out[k] = static_cast<float>(acc[k] / n);
  return out;
}

void cache_mean_descriptors(Model& model, const FeatureStore& store) {
  for (std::size_t i = 0; i < model.num_points(); ++i) {
    const auto id = static_cast<PointId>(i);
    if (!model.point(id).mean_descriptor) {
      model.set_mean_descriptor(id, mean_descriptor(model.point(id), store));
    }
  }
}

SetCover compute_set_cover(const Model& model, std::size_t k) {
  if (k < 1) throw Error(ErrorCode::kArgument, "set cover needs k >= 1");
  SetCover sc;
  sc.k = k;
  std::map<ImageId, std::size_t> need, have;
  for (const auto& [id, cam] : model.cameras()) {
    need[id] = std::min(k, model.observations(id).size());
    have[id] = 0;
  }
  auto gain = [&](PointId p) {
    std::size_t g = 0;
    for (const auto& r : model.point(p).track) g += have[r.image_id] < need[r.image_id];
    return g;
  };
  // Lazy greedy: gains only shrink, so a popped entry whose gain is still
  // current is the true maximum. Order: gain, then track length, then -id.
  using Key = std::tuple<std::size_t, std::size_t, std::int64_t>;
  std::priority_queue<Key> heap;
  for (std::size_t i = 0; i < model.num_points(); ++i) {
    const auto p = static_cast<PointId>(i);
    heap.emplace(gain(p), model.point(p).track.size(), -static_cast<std::int64_t>(i));
  }
  while (!heap.empty()) {
    auto [g, len, neg] = heap.top();
    heap.pop();
    if (g == 0) break;
    const auto p = static_cast<PointId>(-neg);
    const std::size_t now = gain(p);
    if (now != g) {
      if (now > 0) heap.emplace(now, len, neg);
      continue;
    }
    sc.selected.push_back(p);
    for (const auto& r : model.point(p).track) ++have[r.image_id];
  }
  // Reverse pass: drop picks every camera of which stays covered without it.
  std::vector<char> keep(sc.selected.size(), 1);
  for (std::size_t i = sc.selected.size(); i-- > 0;) {
    const auto& track = model.point(sc.selected[i]).track;
    const bool redundant = std::all_of(track.begin(), track.end(), [&](const FeatureRef& r) {
      return have[r.image_id] > need[r.image_id];
    });
    if (redundant) {
      keep[i] = 0;
      for (const auto& r : track) --have[r.image_id];
    }
  }
  std::vector<PointId> kept;
  for (std::size_t i = 0; i < sc.selected.size(); ++i) {
    if (keep[i]) kept.push_back(sc.selected[i]);
  }
  sc.selected = std::move(kept);
  for (const auto& [id, h] : have) sc.coverage[id] = std::min(k, h);
  return sc;
}

namespace {

std::vector<const Descriptor*> descriptors_of(const FeatureSet& fs) {
  std::vector<const Descriptor*> out(fs.size());
  for (std::size_t i = 0; i < fs.size(); ++i) out[i] = &fs.features[i].descriptor;
  return out;
}

/// One correspondence per point and per feature, smallest distance first.
void make_unique(std::vector<Correspondence>& c) {
  auto by_dist = [](const Correspondence& a, const Correspondence& b) {
    return std::tie(a.distance, a.point, a.feature) < std::tie(b.distance, b.point, b.feature);
  };
  std::sort(c.begin(), c.end(), by_dist);
  std::vector<char> point_used, feat_used;
  std::vector<Correspondence> out;
  for (const auto& x : c) {
    if (x.point >= point_used.size()) point_used.resize(x.point + 1, 0);
    if (x.feature.feature_id >= feat_used.size()) feat_used.resize(x.feature.feature_id + 1, 0);
    if (point_used[x.point] || feat_used[x.feature.feature_id]) continue;
    point_used[x.point] = feat_used[x.feature.feature_id] = 1;
    out.push_back(x);
  }
  std::sort(out.begin(), out.end(), [](const Correspondence& a, const Correspondence& b) {
    return a.point < b.point;
  });
  c = std::move(out);
}

}  // namespace

std::vector<Correspondence> direct_3d2d_search(const Model& model,
                                               std::span<const PointId> points,
                                               const FeatureSet& image,
                                               double ratio,
                                               const MatchOptions& base) {
  std::vector<Correspondence> out;
  if (image.size() == 0) return out;
  const auto ptrs = descriptors_of(image);
  const DescriptorIndex index(ptrs);
  NeighborSearch params;
  params.leaf_budget = image.size() <= base.exact_limit ? 0 : base.leaf_budget;
  params.ratio_bound = ratio;
  MatchOptions mo = base;
  mo.ratio = ratio;
  for (PointId p : points) {
    const auto& md = model.point(p).mean_descriptor;
    if (!md) throw Error(ErrorCode::kArgument, "mean descriptor not cached");
    const TwoNearest nn = index.search(std::span<const float>(*md), params);
    if (auto m = ratio_decision(0, nn, image.size(), mo)) {
      out.push_back({p, {image.image_id, m->target}, m->distance});
    }
  }
  make_unique(out);
  return out;
}

RankedSearch ranked_2d2d_search(const Model& model, const MatchGraph& graph,
                                const FeatureStore& store, ImageId image,
                                std::size_t top_k, double ratio, std::size_t gate) {
  RankedSearch rs;
  std::vector<std::pair<std::size_t, ImageId>> ranked;
  for (const auto& [key, e] : graph.edges) {
    if (e.a != image && e.b != image) continue;
    const ImageId other = e.a == image ? e.b : e.a;
    if (model.is_registered(other)) ranked.emplace_back(e.matches.size(), other);
  }
  if (ranked.empty()) {
    rs.no_neighbors = true;
    return rs;
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& x, const auto& y) {
    return x.first != y.first ? x.first > y.first : x.second < y.second;
  });
  if (ranked.size() > top_k) ranked.resize(top_k);

  const FeatureSet& target = store.get(image);
  const auto ptrs = descriptors_of(target);
  const DescriptorIndex index(ptrs);
  MatchOptions mo;
  mo.ratio = ratio;
  NeighborSearch params;
  params.leaf_budget = target.size() <= mo.exact_limit ? 0 : mo.leaf_budget;
  params.ratio_bound = ratio;
  std::vector<Correspondence> out;
  for (const auto& [count, nb] : ranked) {
    rs.neighbors.push_back(nb);
    const FeatureSet& proxy = store.get(nb);
    for (const auto& [fid, pid] : model.observations(nb)) {
      const TwoNearest nn = index.search(proxy.features.at(fid).descriptor, params);
      if (auto m = ratio_decision(0, nn, target.size(), mo)) {
        out.push_back({pid, {image, m->target}, m->distance});
      }
    }
  }
  make_unique(out);
  if (out.size() <= gate) {
    rs.below_gate = true;
    return rs;
  }
  rs.correspondences = std::move(out);
  return rs;
}

const char* to_string(LocalizationMethod m) {
  switch (m) {
    case LocalizationMethod::kNone: return "none";
    case LocalizationMethod::kDirect3D2D: return "direct3d2d";
    case LocalizationMethod::kRanked2D2D: return "ranked2d2d";
  }
  return "?";
}

namespace {

bool solve_pose(const Model& model, const FeatureStore& store,
                const LocalizerConfig& config, LocalizationResult& res) {
  std::vector<Vec3> X;
  std::vector<Vec2> x;
  const FeatureSet& fs = store.get(res.image_id);
  for (const auto& c : res.correspondences) {
    X.push_back(model.point(c.point).position);
    x.push_back(feature_point(fs.features[c.feature.feature_id]));
  }
  if (X.size() < 6) return false;
  PnPOptions po = config.pnp;
  po.min_inliers = config.gate;
  po.seed = mix_seed(config.seed, res.image_id, static_cast<int>(res.method));
  const PnPResult pr = pnp_ransac(X, x, store.intrinsics(res.image_id), res.image_id, po);
  res.inlier_count = pr.inlier_count;
  if (!pr.success) return false;
  res.pose = pr.camera;
  res.inliers.clear();
  for (std::size_t i = 0; i < res.correspondences.size(); ++i) {
    if (pr.inlier_mask[i]) {
      res.inliers.emplace_back(res.correspondences[i].point, res.correspondences[i].feature);
    }
  }
  return true;
}

}  // namespace

LocalizationResult localize_image(const Model& snapshot,
                                  std::span<const PointId> points,
                                  const FeatureStore& store,
                                  const MatchGraph& graph, ImageId image,
                                  const LocalizerConfig& config) {
  LocalizationResult res;
  res.image_id = image;
  if (snapshot.is_registered(image)) {
    throw Error(ErrorCode::kAlreadyRegistered, "image already registered");
  }
  res.method = LocalizationMethod::kDirect3D2D;
  res.correspondences = direct_3d2d_search(snapshot, points, store.get(image), config.ratio);
  if (res.correspondences.size() >= config.gate && solve_pose(snapshot, store, config, res)) {
    res.outcome = "localized";
    return res;
  }
  const RankedSearch rs = ranked_2d2d_search(snapshot, graph, store, image, config.ranked_k,
                                             config.ratio, config.gate);
  if (rs.no_neighbors || rs.below_gate) {
    res.outcome = rs.no_neighbors ? "no_neighbors" : "below_gate";
    res.pose.reset();
    res.inliers.clear();
    return res;
  }
  res.method = LocalizationMethod::kRanked2D2D;
  res.correspondences = rs.correspondences;
  res.pose.reset();
  if (solve_pose(snapshot, store, config, res)) {
    res.outcome = "localized";
  } else {
    res.outcome = "pose_failed";
    res.inliers.clear();
  }
  return res;
}

LocalizeReport localize_all(Model& model, const FeatureStore& store,
                            const MatchGraph& graph, const LocalizerConfig& config,
                            int iteration) {
  const auto ids = store.image_ids();
  return localize_images(model, store, graph, ids, config, iteration);
}

LocalizeReport localize_images(Model& model, const FeatureStore& store,
                               const MatchGraph& graph, std::span<const ImageId> images,
                               const LocalizerConfig& config, int iteration) {
  LocalizeReport rep;
  std::vector<ImageId> pending;
  for (ImageId id : images) {
    if (!model.is_registered(id)) pending.push_back(id);
  }
  std::sort(pending.begin(), pending.end());
  pending.erase(std::unique(pending.begin(), pending.end()), pending.end());
  model.stage_tag = {Stage::kAfterLocalize, iteration};
  if (pending.empty() || model.num_points() == 0) {
    for (ImageId id : pending) {
      LocalizationResult r;
      r.image_id = id;
      r.outcome = "empty_model";
      rep.results.push_back(r);
    }
    return rep;
  }
  cache_mean_descriptors(model, store);
  std::vector<PointId> points;
  rep.set_cover_used = config.force_set_cover || model.num_points() > config.set_cover_threshold;
  if (rep.set_cover_used) {
    points = compute_set_cover(model, config.set_cover_k).selected;
    std::sort(points.begin(), points.end());
  } else {
    points.resize(model.num_points());
    for (std::size_t i = 0; i < points.size(); ++i) points[i] = static_cast<PointId>(i);
  }
  rep.query_points = points.size();

  const Model& snapshot = model;
  rep.results.resize(pending.size());
  parallel_for(pending.size(), config.threads, [&](std::size_t i) {
    rep.results[i] = localize_image(snapshot, points, store, graph, pending[i], config);
  });
  for (const LocalizationResult& r : rep.results) {
    log_record("localize", "image=" + std::to_string(r.image_id) +
                               " method=" + to_string(r.method) +
                               " correspondences=" + std::to_string(r.correspondences.size()) +
                               " inliers=" + std::to_string(r.inlier_count) +
                               " outcome=" + r.outcome);
    if (!r.pose) continue;
    model.attach_camera(*r.pose, r.inliers);
    ++rep.localized;
  }
  return rep;
}

}  // namespace msfm
