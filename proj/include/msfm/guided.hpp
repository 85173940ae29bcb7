#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "msfm/features.hpp"
#include "msfm/geometry.hpp"
#include "msfm/matcher.hpp"

namespace msfm {

/// Image rectangle [0, width] x [0, height], grown by `margin` on every
/// side.
struct ImageBounds {
  double width = 0.0;
  double height = 0.0;
  double margin = 0.0;

  ImageBounds grown(double m) const { return {width, height, margin + m}; }
};

inline ImageBounds bounds_of(const FeatureSet& fs) {
  return {static_cast<double>(fs.width), static_cast<double>(fs.height)};
}

enum class GridCenters {
  kGeometric,  // index * 2d + offset + d, the center of the indexed cell
  kPrinted,    // floor(x/2d [- 1/2]) * d + 2d as printed; A/B comparison only
};

/// Four grids of cell 2d x 2d with origins (0,0), (d,0), (0,d), (d,d).
/// Cell (g, ix, iy) spans index * 2d + offset along each axis. With
/// inflation s > 1 every cell additionally holds the features within
/// s * d of its center per axis, so cells of one grid overlap and a
/// feature can sit in up to four cells per grid. s = 1 is plain binning.
class OverlapGrid {
 public:
  struct CellRef {
    int grid = 0;
    int ix = 0;
    int iy = 0;
    auto operator<=>(const CellRef&) const = default;
  };

  OverlapGrid() = default;

  double d() const { return d_; }
  double inflation() const { return inflation_; }
  GridCenters centers() const { return centers_; }
  std::size_t feature_count() const { return points_.size(); }

  static Vec2 offset(int grid, double d);
  /// Cell of `grid` whose un-inflated extent holds p.
  CellRef cell_of(int grid, const Vec2& p) const;
  Vec2 center(const CellRef& c) const;
  /// Cell among the four containing p whose center is nearest to p.
  CellRef centermost(const Vec2& p) const;
  std::span<const std::uint32_t> members(const CellRef& c) const;

  friend OverlapGrid build_grid(std::span<const Feature>, double, double,
                                GridCenters);

 private:
  struct Layer {
    int ix0 = 0;
    int iy0 = 0;
    int nx = 0;
    int ny = 0;
    std::vector<std::uint32_t> start;  // CSR offsets, nx * ny + 1
    std::vector<std::uint32_t> items;
  };

  double d_ = 0.0;
  double inflation_ = 1.0;
  GridCenters centers_ = GridCenters::kGeometric;
  std::vector<Vec2> points_;
  std::array<Layer, 4> layers_;
};

/// Throws kArgument unless d > 0 and 1 <= inflation <= 2.
OverlapGrid build_grid(std::span<const Feature> features, double d,
                       double inflation = 1.0,
                       GridCenters centers = GridCenters::kGeometric);

/// Intersections of the line with the image rectangle, empty when it misses.
std::vector<Vec2> clip_line(const EpipolarLine& line, const ImageBounds& bounds);

/// K + 1 points from p_B (k = 0) to p_A, K = max(1, ceil(|p_A p_B| / d)).
std::vector<Vec2> equidistant_line_points(const EpipolarLine& line,
                                          const ImageBounds& bounds, double d);

/// Indices (sorted) of all features within distance d of the line.
std::vector<std::uint32_t> candidates_linear(std::span<const Feature> features,
                                             const EpipolarLine& line,
                                             double d);

/// Samples span the bounds grown by d: a feature within d of the line has
/// its foot point there even when the foot leaves the image.
std::vector<std::uint32_t> candidates_grid(const OverlapGrid& grid,
                                           const EpipolarLine& line,
                                           const ImageBounds& bounds);

/// Static 2-d kd-tree over feature positions for disk queries.
class PointIndex2D {
 public:
  PointIndex2D() = default;
  explicit PointIndex2D(std::span<const Feature> features);
  void radius_query(const Vec2& p, double r,
                    std::vector<std::uint32_t>& out) const;
  std::size_t size() const { return ids_.size(); }

 private:
  struct Node {
    std::uint32_t begin = 0;
    std::uint32_t end = 0;
    int dim = -1;
    double value = 0.0;
    std::int32_t left = -1;
    std::int32_t right = -1;
  };
  std::int32_t build(std::uint32_t begin, std::uint32_t end);

  std::vector<std::uint32_t> ids_;
  std::vector<Vec2> pts_;  // tree order
  std::vector<Node> nodes_;
};

/// Union of radius-r disks around the equidistant samples (r = d * sqrt(2)
/// by default, which covers the band of half-width d).
std::vector<std::uint32_t> candidates_radial(const PointIndex2D& index,
                                             const EpipolarLine& line,
                                             const ImageBounds& bounds,
                                             double d, double radius = 0.0);

struct QueryGroup {
  EpipolarLine representative_line;
  std::vector<FeatureId> members;
  std::array<Vec2, 2> boundary_points;
};

/// Groups query features whose epipolar lines cross the target boundary
/// within `tolerance_px` at both ends. Queries whose lines miss the target
/// are left out. `query_ids` selects a subset (all when empty).
std::vector<QueryGroup> group_queries(const FeatureSet& query,
                                      std::span<const FeatureId> query_ids,
                                      const TwoViewGeometry& geom,
                                      const ImageBounds& target_bounds,
                                      double tolerance_px = 2.0);

enum class CandidateStrategy { kLinear, kRadial, kGrid };

struct GuidedConfig {
  double d = 8.0;
  double inflation = 1.25;
  double ratio = 0.8;
  double single_candidate_cap = 45.0;
  double group_tolerance_px = 2.0;
  CandidateStrategy strategy = CandidateStrategy::kGrid;
  GridCenters centers = GridCenters::kGeometric;
  int threads = 1;
};

struct GuidedCounters {
  std::uint64_t comparisons = 0;  // descriptor distance evaluations
  std::uint64_t candidates = 0;   // sum of |C'| over groups
  std::uint64_t groups = 0;
  std::uint64_t queries = 0;
};

/// Largest distance from a member's own epipolar line a guided match may
/// have; everything farther is rejected.
double guided_band_limit(const GuidedConfig& config);

/// Geometry-aware matching of query -> target. `query_ids` and `target_ids`
/// restrict either side (empty = all). Returned ids index the full sets.
std::vector<Match> guided_match_pair(const FeatureSet& query,
                                     const FeatureSet& target,
                                     const TwoViewGeometry& geom,
                                     const GuidedConfig& config,
                                     GuidedCounters* counters = nullptr,
                                     std::span<const FeatureId> query_ids = {},
                                     std::span<const FeatureId> target_ids = {});

}  // namespace msfm
