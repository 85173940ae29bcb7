#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "msfm/features.hpp"

namespace msfm {

struct NeighborSearch {
  /// Best-bin-first leaf budget; 0 searches exhaustively.
  int leaf_budget = 200;
  /// When > 0, points farther than best / ratio_bound are pruned: they can
  /// not change the outcome of a ratio test at this threshold.
  double ratio_bound = 0.0;
};

struct TwoNearest {
  int best = -1;
  int second = -1;
  float best_d2 = std::numeric_limits<float>::infinity();
  float second_d2 = std::numeric_limits<float>::infinity();
};

/// kd-tree over 128-byte descriptors with bucket leaves and priority
/// (best-bin-first) search. Distances are squared L2 in 32-bit
/// accumulation; ties go to the lower input index.
class DescriptorIndex {
 public:
  static constexpr std::size_t kLeafSize = 8;

  DescriptorIndex() = default;
  explicit DescriptorIndex(std::span<const Descriptor* const> descriptors);

  std::size_t size() const { return ids_.size(); }

  TwoNearest search(const Descriptor& query, const NeighborSearch& params,
                    std::uint64_t* comparisons = nullptr) const;
  TwoNearest search(std::span<const float> query, const NeighborSearch& params,
                    std::uint64_t* comparisons = nullptr) const;

 private:
  struct Node {
    // Leaves: [begin, end) into ids_/data_; inner: split on dim at value.
    std::uint32_t begin = 0;
    std::uint32_t end = 0;
    int dim = -1;
    float value = 0.0F;
    float lo = 0.0F;  // cell bounds along dim
    float hi = 0.0F;
    std::int32_t left = -1;
    std::int32_t right = -1;
  };

  std::int32_t build(std::uint32_t begin, std::uint32_t end,
                     std::vector<float>& lo, std::vector<float>& hi);
  template <typename Q>
  TwoNearest search_impl(const Q* query, const NeighborSearch& params,
                         std::uint64_t* comparisons) const;

  std::vector<std::uint32_t> ids_;
  std::vector<std::uint8_t> data_;  // ids_.size() x 128, tree order
  std::vector<Node> nodes_;
};

/// Exhaustive two-nearest scan (reference for tests and tiny sets).
TwoNearest brute_force_two_nearest(const Descriptor& query,
                                   std::span<const Descriptor* const> targets);

std::int32_t descriptor_distance2(const Descriptor& a, const Descriptor& b);

}  // namespace msfm
