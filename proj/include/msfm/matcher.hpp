#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "msfm/features.hpp"
#include "msfm/geometry.hpp"
#include "msfm/nn.hpp"

namespace msfm {

/// Correspondence between feature ids of a (query, target) image pair.
struct Match {
  FeatureId query = 0;
  FeatureId target = 0;
  float distance = 0.0F;  // descriptor L2
  float ratio = 0.0F;     // best / second-best distance
};

struct MatchOptions {
  double ratio = 0.6;
  // Acceptance cap on the descriptor distance when only one candidate
  // exists and no ratio can be formed.
  double single_candidate_cap = 45.0;
  int leaf_budget = 200;
  std::size_t exact_limit = 2000;  // exhaustive search up to this many targets
};

struct MatchCounters {
  std::uint64_t comparisons = 0;
  std::uint64_t queries = 0;
};

/// Ratio-test decision on a two-nearest result among `candidates` targets;
/// the returned Match carries candidate-local ids.
std::optional<Match> ratio_decision(FeatureId query, const TwoNearest& nn,
                                    std::size_t candidates,
                                    const MatchOptions& options);

/// Keeps, for every target id, only the match with the smallest distance
/// (ties to the lower query id). Output sorted by query id.
void resolve_duplicate_targets(std::vector<Match>& matches);

std::vector<Match> match_pair(std::span<const Feature> query,
                              std::span<const Feature> target,
                              const MatchOptions& options,
                              MatchCounters* counters = nullptr);

/// Same decisions through an exhaustive O(m^2) scan.
std::vector<Match> match_pair_exhaustive(std::span<const Feature> query,
                                         std::span<const Feature> target,
                                         const MatchOptions& options);

struct HybridOptions {
  double batch_fraction = 0.10;
  std::size_t continue_above = 4;  // next batch only if > this many matches
  std::size_t early_stop = 64;
  std::size_t small_image_limit = 1000;
};

struct HybridResult {
  std::vector<Match> matches;
  int batches = 0;
};

/// Batched high-scale matching of `query` against the coarse tier of
/// `target`: 10% query batches up to the query's coarse tier.
HybridResult hybrid_match(const FeatureSet& query, const FeatureSet& target,
                          const MatchOptions& options,
                          const HybridOptions& hybrid = {});

struct PreemptiveOptions {
  std::size_t n_top = 100;
  std::size_t min_matches = 4;
};

bool preemptive_keep(const FeatureSet& a, const FeatureSet& b,
                     const PreemptiveOptions& pre, const MatchOptions& options);

using ImagePair = std::pair<ImageId, ImageId>;

std::vector<ImagePair> preemptive_pair_filter(const FeatureStore& store,
                                              const PreemptiveOptions& pre,
                                              const MatchOptions& options,
                                              int threads = 1);

struct MatchEdge {
  ImageId a = 0;  // query side, a < b
  ImageId b = 0;
  std::vector<Match> matches;
  std::optional<TwoViewGeometry> geometry;
  std::vector<char> inlier_mask;

  std::size_t inlier_count() const;
  std::vector<Match> inliers() const;
};

struct MatchGraph {
  std::map<ImagePair, MatchEdge> edges;

  const MatchEdge* find(ImageId a, ImageId b) const;
  /// Inlier count of the edge between a and b (either order), 0 if absent.
  std::size_t inliers_between(ImageId a, ImageId b) const;
};

struct CoarseMatchConfig {
  double eta = 20.0;
  bool preemptive = true;
  MatchOptions match;
  HybridOptions hybrid;
  PreemptiveOptions pre;
  std::size_t min_edge_matches = 16;
  RansacOptions ransac;
  int threads = 1;
  std::uint64_t seed = 0;
};

/// Tiers the store, filters pairs, runs hybrid matching per pair and keeps
/// geometry-verified edges. Output is independent of thread count.
MatchGraph build_coarse_matchgraph(FeatureStore& store,
                                   const CoarseMatchConfig& config);

// Text dump: "MSFM-MATCHES 1", then per edge
// "EDGE a b n_matches n_inliers [f0 .. f8]" followed by n_matches lines
// "qid tid dist ratio inlier_flag".
void write_matchgraph(std::ostream& out, const MatchGraph& graph);
MatchGraph read_matchgraph(std::istream& in);

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b);

}  // namespace msfm
