#pragma once

#include <optional>
#include <span>
#include <vector>

#include "msfm/features.hpp"
#include "msfm/guided.hpp"
#include "msfm/model.hpp"

namespace msfm {

struct CandidateSet {
  ImageId query = 0;
  std::vector<std::pair<ImageId, std::size_t>> candidates;  // (image, covisible)
};

/// Registered images sharing more than T points with the query, best first,
/// at most k_limit of them. Throws kNotRegistered for an unregistered query.
CandidateSet candidate_images(const Model& model, ImageId query, std::size_t T,
                              std::size_t k_limit);

/// ceil(fraction * registered), at least 1.
std::size_t default_k_limit(std::size_t registered, double fraction = 0.10);

std::vector<std::pair<ImageId, ImageId>> unique_pairs(
    std::span<const CandidateSet> sets);

/// A guided match between two features, both directions allowed.
struct TrackMatch {
  FeatureRef a;
  FeatureRef b;
  float distance = 0.0F;
};

struct MergedTracks {
  std::vector<std::vector<FeatureRef>> new_tracks;  // sorted refs, sorted list
  std::vector<std::pair<PointId, std::vector<FeatureRef>>> extensions;  // by point
  std::size_t dropped_features = 0;
};

/// Connected components over features (tracked features collapse into their
/// point). A component keeps at most one existing point, the one with most
/// edges into it (ties to the lower id). Within one image the existing
/// point's feature wins, otherwise the feature whose best match is closest.
/// Dropped features split the component; the pieces are kept.
MergedTracks merge_tracks(std::span<const TrackMatch> matches, const Model& model);

struct DensifyConfig {
  std::size_t T = 8;
  double k_fraction = 0.10;
  GuidedConfig guided;
  TriangulationOptions triangulation;
  int threads = 1;
};

struct DensifyReport {
  std::size_t query_images = 0;
  std::size_t pairs = 0;
  std::size_t matches = 0;
  std::size_t new_points = 0;
  std::size_t rejected_tracks = 0;
  std::size_t extended_points = 0;
  std::size_t reverted_extensions = 0;
  GuidedCounters counters;
};

/// Iteration 1 queries every registered image; later iterations only
/// `new_images`. Adds points, extends tracks; no bundle adjustment.
DensifyReport densify_stage(Model& model, const FeatureStore& store,
                            const DensifyConfig& config, int iteration,
                            std::span<const ImageId> new_images = {});

}  // namespace msfm
