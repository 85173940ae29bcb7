#include "msfm/densify.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <unordered_map>

namespace msfm {

CandidateSet candidate_images(const Model& model, ImageId query, std::size_t T,
                              std::size_t k_limit) {
  if (!model.is_registered(query)) {
    throw Error(ErrorCode::kNotRegistered, "candidate query not registered");
  }
  std::map<ImageId, std::size_t> shared;
  for (const auto& [fid, pid] : model.observations(query)) {
    for (const FeatureRef& r : model.point(pid).track) {
      if (r.image_id != query) ++shared[r.image_id];
    }
  }
  CandidateSet cs;
  cs.query = query;
  for (const auto& [id, n] : shared) {
    if (n > T) cs.candidates.emplace_back(id, n);
  }
  std::stable_sort(cs.candidates.begin(), cs.candidates.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (cs.candidates.size() > k_limit) cs.candidates.resize(k_limit);
  return cs;
}

std::size_t default_k_limit(std::size_t registered, double fraction) {
  const auto k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(registered) - 1e-9));
  return std::max<std::size_t>(1, k);
}

std::vector<std::pair<ImageId, ImageId>> unique_pairs(std::span<const CandidateSet> sets) {
  std::vector<std::pair<ImageId, ImageId>> out;
  for (const CandidateSet& s : sets) {
    for (const auto& [id, n] : s.candidates) {
      if (id == s.query) continue;
      out.emplace_back(std::min(id, s.query), std::max(id, s.query));
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

namespace {

// Node ids: existing points first as "point nodes", then loose features.
struct MergeGraph {
  std::vector<std::optional<PointId>> point;  // set for point nodes
  std::vector<FeatureRef> ref;                // loose features only
  std::vector<std::vector<std::pair<std::uint32_t, float>>> adj;
};

template <typename Less>
std::vector<std::vector<std::uint32_t>> components(
    const MergeGraph& g, const std::vector<std::uint32_t>& nodes,
    const std::vector<char>& alive, Less less) {
  std::vector<std::vector<std::uint32_t>> out;
  std::vector<char> seen(g.adj.size(), 0);
  std::vector<std::uint32_t> stack;
  for (std::uint32_t s : nodes) {
    if (!alive[s] || seen[s]) continue;
    out.emplace_back();
    stack.push_back(s);
    seen[s] = 1;
    while (!stack.empty()) {
      const std::uint32_t u = stack.back();
      stack.pop_back();
      out.back().push_back(u);
      for (const auto& [v, d] : g.adj[u]) {
        if (alive[v] && !seen[v]) {
          seen[v] = 1;
          stack.push_back(v);
        }
      }
    }
    std::sort(out.back().begin(), out.back().end(), less);
  }
  return out;
}

}  // namespace

MergedTracks merge_tracks(std::span<const TrackMatch> matches, const Model& model) {
  MergedTracks out;
  MergeGraph g;
  std::map<PointId, std::uint32_t> point_node;
  std::map<FeatureRef, std::uint32_t> ref_node;
  auto node_of = [&](const FeatureRef& r) -> std::uint32_t {
    if (auto p = model.point_of(r)) {
      auto [it, fresh] = point_node.try_emplace(*p, static_cast<std::uint32_t>(g.adj.size()));
      if (fresh) {
        g.point.emplace_back(*p);
        g.ref.emplace_back();
        g.adj.emplace_back();
      }
      return it->second;
    }
    auto [it, fresh] = ref_node.try_emplace(r, static_cast<std::uint32_t>(g.adj.size()));
    if (fresh) {
      g.point.emplace_back();
      g.ref.push_back(r);
      g.adj.emplace_back();
    }
    return it->second;
  };
  for (const TrackMatch& m : matches) {
    const std::uint32_t u = node_of(m.a);
    const std::uint32_t v = node_of(m.b);
    if (u == v) continue;
    g.adj[u].emplace_back(v, m.distance);
    g.adj[v].emplace_back(u, m.distance);
  }
  const std::size_t n = g.adj.size();
  std::vector<std::uint32_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = static_cast<std::uint32_t>(i);
  // Visit in (point id | feature ref) order so output does not depend on
  // match order.
  auto node_less = [&](std::uint32_t a, std::uint32_t b) {
    if (g.point[a].has_value() != g.point[b].has_value()) return g.point[a].has_value();
    if (g.point[a]) return *g.point[a] < *g.point[b];
    return g.ref[a] < g.ref[b];
  };
  std::sort(all.begin(), all.end(), node_less);
  std::vector<char> alive(n, 1);
  auto best_edge = [&](std::uint32_t u) {
    float best = std::numeric_limits<float>::infinity();
    for (const auto& [v, d] : g.adj[u]) best = std::min(best, d);
    return best;
  };

  for (const auto& comp : components(g, all, alive, node_less)) {
    // One existing point at most.
    std::optional<std::uint32_t> keep_point;
    std::size_t keep_edges = 0;
    for (std::uint32_t u : comp) {
      if (!g.point[u]) continue;
      const std::size_t e = g.adj[u].size();
      if (!keep_point || e > keep_edges ||
          (e == keep_edges && *g.point[u] < *g.point[*keep_point])) {
        keep_point = u;
        keep_edges = e;
      }
    }
    for (std::uint32_t u : comp) {
      if (g.point[u] && u != keep_point) alive[u] = 0;
    }
    // One feature per image.
    std::map<ImageId, std::uint32_t> owner;
    if (keep_point) {
      for (const FeatureRef& r : model.point(*g.point[*keep_point]).track) {
        owner[r.image_id] = *keep_point;
      }
    }
    for (std::uint32_t u : comp) {
      if (g.point[u]) continue;
      const ImageId img = g.ref[u].image_id;
      auto it = owner.find(img);
      if (it == owner.end()) {
        owner[img] = u;
        continue;
      }
      const std::uint32_t w = it->second;
      if (g.point[w]) {
        alive[u] = 0;
      } else if (best_edge(u) < best_edge(w)) {  // comp is ref-sorted: ties keep w
        alive[w] = 0;
        it->second = u;
      } else {
        alive[u] = 0;
      }
    }
    for (std::uint32_t u : comp) {
      if (!g.point[u] && !alive[u]) ++out.dropped_features;
    }
    for (const auto& piece : components(g, comp, alive, node_less)) {
      std::vector<FeatureRef> refs;
      std::optional<PointId> pid;
      for (std::uint32_t u : piece) {
        if (g.point[u]) {
          pid = g.point[u];
        } else {
          refs.push_back(g.ref[u]);
        }
      }
      std::sort(refs.begin(), refs.end());
      if (pid) {
        if (!refs.empty()) out.extensions.emplace_back(*pid, std::move(refs));
      } else if (refs.size() >= 2) {
        out.new_tracks.push_back(std::move(refs));
      }
    }
  }
  std::sort(out.new_tracks.begin(), out.new_tracks.end());
  std::sort(out.extensions.begin(), out.extensions.end());
  return out;
}

namespace {

std::vector<FeatureId> untracked_features(const Model& model, const FeatureSet& fs) {
  const auto& obs = model.observations(fs.image_id);
  std::vector<FeatureId> out;
  for (std::size_t i = 0; i < fs.size(); ++i) {
    if (!obs.count(static_cast<FeatureId>(i))) out.push_back(static_cast<FeatureId>(i));
  }
  return out;
}

std::vector<TrackObservation> observations_of(const Model& model, const FeatureStore& store,
                                              std::span<const FeatureRef> track) {
  std::vector<TrackObservation> obs;
  obs.reserve(track.size());
  for (const FeatureRef& r : track) {
    obs.push_back({model.camera(r.image_id),
                   feature_point(store.get(r.image_id).features.at(r.feature_id))});
  }
  return obs;
}

}  // namespace

DensifyReport densify_stage(Model& model, const FeatureStore& store,
                            const DensifyConfig& config, int iteration,
                            std::span<const ImageId> new_images) {
  if (model.num_cameras() < 2) {
    throw Error(ErrorCode::kArgument, "densify needs at least two cameras");
  }
  DensifyReport rep;
  model.stage_tag = {Stage::kAfterDensify, iteration};

  std::vector<ImageId> queries;
  if (iteration <= 1) {
    for (const auto& [id, cam] : model.cameras()) queries.push_back(id);
  } else {
    for (ImageId id : new_images) {
      if (model.is_registered(id)) queries.push_back(id);
    }
    std::sort(queries.begin(), queries.end());
    queries.erase(std::unique(queries.begin(), queries.end()), queries.end());
  }
  rep.query_images = queries.size();
  const std::size_t k_limit = default_k_limit(model.num_cameras(), config.k_fraction);
  std::vector<CandidateSet> sets;
  for (ImageId q : queries) sets.push_back(candidate_images(model, q, config.T, k_limit));
  const auto pairs = unique_pairs(sets);
  rep.pairs = pairs.size();

  std::map<ImageId, std::vector<FeatureId>> untracked;
  for (const auto& [a, b] : pairs) {
    for (ImageId id : {a, b}) {
      if (!untracked.count(id)) untracked[id] = untracked_features(model, store.get(id));
    }
  }

  // Matching runs on the read-only model; results are merged afterwards.
  std::vector<std::vector<TrackMatch>> per_pair(pairs.size());
  std::vector<GuidedCounters> counters(pairs.size());
  GuidedConfig gc = config.guided;
  gc.threads = 1;
  const Model& snapshot = model;
  parallel_for(pairs.size(), config.threads, [&](std::size_t i) {
    const auto [a, b] = pairs[i];
    const FeatureSet& fa = store.get(a);
    const FeatureSet& fb = store.get(b);
    const TwoViewGeometry geom = fundamental_from_poses(snapshot.camera(a), snapshot.camera(b));
    try {
      if (!untracked.at(a).empty()) {
        for (const Match& m : guided_match_pair(fa, fb, geom, gc, &counters[i], untracked.at(a))) {
          per_pair[i].push_back({{a, m.query}, {b, m.target}, m.distance});
        }
      }
      if (!untracked.at(b).empty()) {
        for (const Match& m : guided_match_pair(fb, fa, geom.transposed(), gc, &counters[i],
                                                untracked.at(b))) {
          per_pair[i].push_back({{a, m.target}, {b, m.query}, m.distance});
        }
      }
    } catch (const Error& e) {
      per_pair[i].clear();
      log_record("densify_pair_failed", "a=" + std::to_string(a) + " b=" + std::to_string(b) +
                                            " error=" + to_string(e.code()));
    }
  });
  std::vector<TrackMatch> all;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    all.insert(all.end(), per_pair[i].begin(), per_pair[i].end());
    rep.counters.comparisons += counters[i].comparisons;
    rep.counters.candidates += counters[i].candidates;
    rep.counters.groups += counters[i].groups;
    rep.counters.queries += counters[i].queries;
  }
  rep.matches = all.size();

  const MergedTracks merged = merge_tracks(all, model);
  for (const auto& track : merged.new_tracks) {
    const auto obs = observations_of(model, store, track);
    const TriangulationResult tr = triangulate_track(obs, config.triangulation);
    if (!tr.accepted()) {
      ++rep.rejected_tracks;
      continue;
    }
    model.add_point(tr.position, track);
    ++rep.new_points;
  }
  for (const auto& [pid, refs] : merged.extensions) {
    const Vec3 old_position = model.point(pid).position;
    std::vector<FeatureRef> added;
    for (const FeatureRef& r : refs) {
      if (model.extend_track(pid, r)) added.push_back(r);
    }
    if (added.empty()) continue;
    const auto obs = observations_of(model, store, model.point(pid).track);
    const TriangulationResult tr = triangulate_track(obs, config.triangulation);
    if (tr.accepted()) {
      model.set_position(pid, tr.position);
      model.clear_descriptor_cache(pid);
      ++rep.extended_points;
    } else {
      for (const FeatureRef& r : added) model.remove_observation(pid, r);
      model.set_position(pid, old_position);
      ++rep.reverted_extensions;
    }
  }
  log_record("densify", "iteration=" + std::to_string(iteration) +
                            " queries=" + std::to_string(rep.query_images) +
                            " pairs=" + std::to_string(rep.pairs) +
                            " matches=" + std::to_string(rep.matches) +
                            " new_points=" + std::to_string(rep.new_points) +
                            " rejected=" + std::to_string(rep.rejected_tracks) +
                            " extended=" + std::to_string(rep.extended_points));
  return rep;
}

}  // namespace msfm
