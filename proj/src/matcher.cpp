#include "msfm/matcher.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>

namespace msfm {

namespace {

std::vector<const Descriptor*> descriptor_ptrs(std::span<const Feature> fs) {
  std::vector<const Descriptor*> out(fs.size());
  for (std::size_t i = 0; i < fs.size(); ++i) out[i] = &fs[i].descriptor;
  return out;
}

NeighborSearch search_params(std::size_t targets, const MatchOptions& o) {
  NeighborSearch p;
  // Small sets get a full two-nearest search so the reported ratio is exact;
  // large ones prune what cannot pass the ratio test.
  const bool exact = targets <= o.exact_limit;
  p.leaf_budget = exact ? 0 : o.leaf_budget;
  p.ratio_bound = exact ? 0.0 : o.ratio;
  return p;
}

/// Raw per-query decisions of `query[begin, end)` against a prebuilt index.
void match_range(std::span<const Feature> query, std::size_t begin,
                 std::size_t end, const DescriptorIndex& index,
                 const MatchOptions& options, std::vector<Match>& out,
                 MatchCounters* counters) {
  const NeighborSearch params = search_params(index.size(), options);
  std::uint64_t comparisons = 0;
  for (std::size_t i = begin; i < end; ++i) {
    const TwoNearest nn = index.search(query[i].descriptor, params, &comparisons);
    if (auto m = ratio_decision(static_cast<FeatureId>(i), nn, index.size(),
                                options)) {
      out.push_back(*m);
    }
  }
  if (counters) {
    counters->comparisons += comparisons;
    counters->queries += end - begin;
  }
}

}  // namespace

std::optional<Match> ratio_decision(FeatureId query, const TwoNearest& nn,
                                    std::size_t candidates,
                                    const MatchOptions& options) {
  if (candidates == 0 || nn.best < 0) return std::nullopt;
  Match m;
  m.query = query;
  m.target = static_cast<FeatureId>(nn.best);
  m.distance = std::sqrt(nn.best_d2);
  if (candidates == 1) {
    if (m.distance >= options.single_candidate_cap) return std::nullopt;
    m.ratio = 0.0F;
    return m;
  }
  // An unseen second neighbour lies beyond best / ratio, so the test passes.
  m.ratio = nn.second >= 0 && nn.second_d2 > 0.0F
                ? std::sqrt(nn.best_d2 / nn.second_d2)
                : (nn.second >= 0 ? 1.0F : 0.0F);
  if (!(m.ratio < options.ratio)) return std::nullopt;
  return m;
}

void resolve_duplicate_targets(std::vector<Match>& matches) {
  std::sort(matches.begin(), matches.end(), [](const Match& a, const Match& b) {
    if (a.target != b.target) return a.target < b.target;
    if (a.distance != b.distance) return a.distance < b.distance;
    return a.query < b.query;
  });
  std::vector<Match> kept;
  kept.reserve(matches.size());
  for (const Match& m : matches) {
    if (kept.empty() || kept.back().target != m.target) kept.push_back(m);
  }
  std::sort(kept.begin(), kept.end(),
            [](const Match& a, const Match& b) { return a.query < b.query; });
  matches = std::move(kept);
}

std::vector<Match> match_pair(std::span<const Feature> query,
                              std::span<const Feature> target,
                              const MatchOptions& options,
                              MatchCounters* counters) {
  std::vector<Match> out;
  if (query.empty() || target.empty()) return out;
  const auto ptrs = descriptor_ptrs(target);
  const DescriptorIndex index(ptrs);
  match_range(query, 0, query.size(), index, options, out, counters);
  resolve_duplicate_targets(out);
  return out;
}

std::vector<Match> match_pair_exhaustive(std::span<const Feature> query,
                                         std::span<const Feature> target,
                                         const MatchOptions& options) {
  std::vector<Match> out;
  if (query.empty() || target.empty()) return out;
  const auto ptrs = descriptor_ptrs(target);
  for (std::size_t i = 0; i < query.size(); ++i) {
    const TwoNearest nn = brute_force_two_nearest(query[i].descriptor, ptrs);
    if (auto m = ratio_decision(static_cast<FeatureId>(i), nn, ptrs.size(),
                                options)) {
      out.push_back(*m);
    }
  }
  resolve_duplicate_targets(out);
  return out;
}

HybridResult hybrid_match(const FeatureSet& query, const FeatureSet& target,
                          const MatchOptions& options,
                          const HybridOptions& hybrid) {
  HybridResult result;
  const auto target_tier = target.tier();
  if (query.size() == 0 || target_tier.empty()) return result;
  const auto ptrs = descriptor_ptrs(target_tier);
  const DescriptorIndex index(ptrs);

  const std::size_t tier_end = std::min(query.coarse_count, query.size());
  std::size_t batch = query.size() < hybrid.small_image_limit
                          ? tier_end
                          : static_cast<std::size_t>(std::ceil(
                                hybrid.batch_fraction * query.size()));
  batch = std::max<std::size_t>(batch, 1);
  std::vector<Match> raw;
  for (std::size_t begin = 0; begin < tier_end; begin += batch) {
    const std::size_t end = std::min(tier_end, begin + batch);
    match_range(query.features, begin, end, index, options, raw, nullptr);
    ++result.batches;
    std::vector<Match> resolved = raw;
    resolve_duplicate_targets(resolved);
    result.matches = std::move(resolved);
    if (result.matches.size() >= hybrid.early_stop) break;
    if (result.matches.size() <= hybrid.continue_above) break;
  }
  return result;
}

bool preemptive_keep(const FeatureSet& a, const FeatureSet& b,
                     const PreemptiveOptions& pre,
                     const MatchOptions& options) {
  const std::span<const Feature> fa(a.features.data(),
                                    std::min(pre.n_top, a.size()));
  const std::span<const Feature> fb(b.features.data(),
                                    std::min(pre.n_top, b.size()));
  return match_pair(fa, fb, options).size() >= pre.min_matches;
}

std::vector<ImagePair> preemptive_pair_filter(const FeatureStore& store,
                                              const PreemptiveOptions& pre,
                                              const MatchOptions& options,
                                              int threads) {
  if (pre.n_top < 1) throw Error(ErrorCode::kArgument, "n_top must be >= 1");
  const auto ids = store.image_ids();
  std::vector<ImagePair> all;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    for (std::size_t j = i + 1; j < ids.size(); ++j) all.emplace_back(ids[i], ids[j]);
  }
  std::vector<char> keep(all.size(), 0);
  parallel_for(all.size(), threads, [&](std::size_t k) {
    keep[k] = preemptive_keep(store.get(all[k].first), store.get(all[k].second),
                              pre, options);
  });
  std::vector<ImagePair> out;
  for (std::size_t k = 0; k < all.size(); ++k) {
    if (keep[k]) out.push_back(all[k]);
  }
  return out;
}

std::size_t MatchEdge::inlier_count() const {
  return static_cast<std::size_t>(
      std::count(inlier_mask.begin(), inlier_mask.end(), 1));
}

std::vector<Match> MatchEdge::inliers() const {
  std::vector<Match> out;
  for (std::size_t i = 0; i < matches.size(); ++i) {
    if (i < inlier_mask.size() && inlier_mask[i]) out.push_back(matches[i]);
  }
  return out;
}

const MatchEdge* MatchGraph::find(ImageId a, ImageId b) const {
  auto it = edges.find({std::min(a, b), std::max(a, b)});
  return it == edges.end() ? nullptr : &it->second;
}

std::size_t MatchGraph::inliers_between(ImageId a, ImageId b) const {
  const MatchEdge* e = find(a, b);
  return e ? e->inlier_count() : 0;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  // splitmix64 over the combined key
  std::uint64_t z = seed ^ (a * 0x9E3779B97F4A7C15ULL) ^ (b << 32 | b >> 32);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

MatchGraph build_coarse_matchgraph(FeatureStore& store,
                                   const CoarseMatchConfig& config) {
  store.apply_tier(config.eta);
  std::vector<ImagePair> pairs;
  if (config.preemptive) {
    pairs = preemptive_pair_filter(store, config.pre, config.match,
                                   config.threads);
  } else {
    const auto ids = store.image_ids();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      for (std::size_t j = i + 1; j < ids.size(); ++j) pairs.emplace_back(ids[i], ids[j]);
    }
  }

  std::vector<std::optional<MatchEdge>> results(pairs.size());
  parallel_for(pairs.size(), config.threads, [&](std::size_t k) {
    const auto [a, b] = pairs[k];
    const FeatureSet& fa = store.get(a);
    const FeatureSet& fb = store.get(b);
    HybridResult h = hybrid_match(fa, fb, config.match, config.hybrid);
    if (h.matches.size() < config.min_edge_matches) return;
    std::vector<Vec2> qa, tb;
    for (const Match& m : h.matches) {
      qa.push_back(feature_point(fa.features[m.query]));
      tb.push_back(feature_point(fb.features[m.target]));
    }
    RansacOptions ro = config.ransac;
    ro.min_inliers = config.min_edge_matches;
    ro.seed = mix_seed(config.seed, a, b);
    FundamentalEstimate est = estimate_fundamental_ransac(qa, tb, ro);
    if (!est.verified) return;
    MatchEdge edge;
    edge.a = a;
    edge.b = b;
    edge.matches = std::move(h.matches);
    edge.geometry = est.geometry;
    edge.inlier_mask = std::move(est.inlier_mask);
    results[k] = std::move(edge);
  });

  MatchGraph graph;
  for (auto& r : results) {
    if (r) {
      const ImagePair key{r->a, r->b};
      graph.edges.emplace(key, std::move(*r));
    }
  }
  log_record("coarse_matchgraph",
             "pairs=" + std::to_string(pairs.size()) +
                 " edges=" + std::to_string(graph.edges.size()));
  return graph;
}

namespace {
std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}
}  // namespace

void write_matchgraph(std::ostream& out, const MatchGraph& graph) {
  out << "MSFM-MATCHES 1\n";
  for (const auto& [key, e] : graph.edges) {
    out << "EDGE " << e.a << ' ' << e.b << ' ' << e.matches.size() << ' '
        << e.inlier_count();
    if (e.geometry) {
      for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) out << ' ' << fmt(e.geometry->F(r, c));
      }
    }
    out << '\n';
    for (std::size_t i = 0; i < e.matches.size(); ++i) {
      const Match& m = e.matches[i];
      out << m.query << ' ' << m.target << ' ' << fmt(m.distance) << ' '
          << fmt(m.ratio) << ' '
          << (i < e.inlier_mask.size() && e.inlier_mask[i] ? 1 : 0) << '\n';
    }
  }
}

MatchGraph read_matchgraph(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "MSFM-MATCHES 1") {
    throw Error(ErrorCode::kFormat, "match graph: missing header");
  }
  MatchGraph graph;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag;
    MatchEdge e;
    std::size_t n = 0, n_inl = 0;
    ls >> tag >> e.a >> e.b >> n >> n_inl;
    if (tag != "EDGE" || !ls) {
      throw Error(ErrorCode::kFormat, "match graph: bad EDGE line: " + line);
    }
    Mat3 F;
    bool has_f = true;
    for (int k = 0; k < 9 && has_f; ++k) {
      if (!(ls >> F(k / 3, k % 3))) has_f = false;
    }
    if (has_f) {
      TwoViewGeometry g;
      g.F = F;
      g.inlier_count = n_inl;
      g.source = GeometrySource::kEstimated;
      e.geometry = g;
    }
    e.matches.resize(n);
    e.inlier_mask.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::getline(in, line)) {
        throw Error(ErrorCode::kFormat, "match graph: truncated edge");
      }
      std::istringstream ms(line);
      Match& m = e.matches[i];
      int flag = 0;
      ms >> m.query >> m.target >> m.distance >> m.ratio >> flag;
      if (!ms) throw Error(ErrorCode::kFormat, "match graph: bad match line");
      e.inlier_mask[i] = static_cast<char>(flag != 0);
    }
    const ImagePair key{e.a, e.b};
    graph.edges.emplace(key, std::move(e));
  }
  return graph;
}

}  // namespace msfm
