#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msfm/features.hpp"
#include "msfm/matcher.hpp"
#include "msfm/model.hpp"
#include "msfm/sfm.hpp"

namespace msfm {

/// Mean of the track's descriptors, kept in floating point.
std::vector<float> mean_descriptor(const Point3D& point, const FeatureStore& store);

/// Fills every missing mean-descriptor cache entry.
void cache_mean_descriptors(Model& model, const FeatureStore& store);

struct SetCover {
  std::vector<PointId> selected;  // greedy order
  std::size_t k = 0;
  std::map<ImageId, std::size_t> coverage;  // min(k, selected points seen)
};

/// Greedy k-cover of the cameras followed by a reverse pass that drops
/// redundant picks.
SetCover compute_set_cover(const Model& model, std::size_t k);

struct Correspondence {
  PointId point = 0;
  FeatureRef feature;
  float distance = 0.0F;
};

/// Mean descriptors of `points` against an index over the image's features;
/// ratio test, then one point per feature (closest wins). Requires cached
/// mean descriptors.
std::vector<Correspondence> direct_3d2d_search(const Model& model,
                                               std::span<const PointId> points,
                                               const FeatureSet& image,
                                               double ratio,
                                               const MatchOptions& base = {});

struct RankedSearch {
  std::vector<Correspondence> correspondences;  // empty unless > gate
  bool no_neighbors = false;
  bool below_gate = false;
  std::vector<ImageId> neighbors;
};

/// Tracked features of the top-K localized coarse-graph neighbours act as
/// proxies for their points.
RankedSearch ranked_2d2d_search(const Model& model, const MatchGraph& graph,
                                const FeatureStore& store, ImageId image,
                                std::size_t top_k, double ratio,
                                std::size_t gate = 16);

enum class LocalizationMethod { kNone, kDirect3D2D, kRanked2D2D };
const char* to_string(LocalizationMethod m);

struct LocalizationResult {
  ImageId image_id = 0;
  std::vector<Correspondence> correspondences;
  std::optional<Camera> pose;
  LocalizationMethod method = LocalizationMethod::kNone;
  std::size_t inlier_count = 0;
  std::vector<PointObservation> inliers;
  std::string outcome;
};

struct LocalizerConfig {
  double ratio = 0.6;
  std::size_t ranked_k = 10;
  std::size_t set_cover_k = 400;
  std::size_t set_cover_threshold = 100000;  // engage above this many points
  bool force_set_cover = false;
  std::size_t gate = 16;
  PnPOptions pnp;
  int threads = 1;
  std::uint64_t seed = 0;
};

/// Localizes one image against a read-only model (mean descriptors of the
/// listed points must be cached).
LocalizationResult localize_image(const Model& snapshot,
                                  std::span<const PointId> points,
                                  const FeatureStore& store,
                                  const MatchGraph& graph, ImageId image,
                                  const LocalizerConfig& config);

struct LocalizeReport {
  std::vector<LocalizationResult> results;  // by image id
  std::size_t localized = 0;
  bool set_cover_used = false;
  std::size_t query_points = 0;
};

/// Every unregistered image against the same snapshot; successful poses
/// attached in image-id order. Tags the model after_localize(iteration).
LocalizeReport localize_all(Model& model, const FeatureStore& store,
                            const MatchGraph& graph,
                            const LocalizerConfig& config, int iteration = 1);

/// Same over an explicit image list in any order; ids already registered
/// are skipped.
LocalizeReport localize_images(Model& model, const FeatureStore& store,
                               const MatchGraph& graph, std::span<const ImageId> images,
                               const LocalizerConfig& config, int iteration = 1);

}  // namespace msfm
