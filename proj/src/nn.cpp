#include "msfm/nn.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>
#include <queue>

namespace msfm {

namespace {

inline std::int32_t dist2_u8(const std::uint8_t* a, const std::uint8_t* b) {
  std::int32_t s = 0;
  for (std::size_t i = 0; i < kDescriptorSize; ++i) {
    const std::int32_t d = static_cast<std::int32_t>(a[i]) - b[i];
    s += d * d;
  }
  return s;
}

inline float dist2(const std::uint8_t* q, const std::uint8_t* t) {
  return static_cast<float>(dist2_u8(q, t));
}

inline float dist2(const float* q, const std::uint8_t* t) {
  float s = 0.0F;
  for (std::size_t i = 0; i < kDescriptorSize; ++i) {
    const float d = q[i] - static_cast<float>(t[i]);
    s += d * d;
  }
  return s;
}

inline void offer(TwoNearest& r, int id, float d2) {
  if (d2 < r.best_d2 || (d2 == r.best_d2 && id < r.best)) {
    r.second = r.best;
    r.second_d2 = r.best_d2;
    r.best = id;
    r.best_d2 = d2;
  } else if (d2 < r.second_d2 || (d2 == r.second_d2 && id < r.second)) {
    r.second = id;
    r.second_d2 = d2;
  }
}

}  // namespace

std::int32_t descriptor_distance2(const Descriptor& a, const Descriptor& b) {
  return dist2_u8(a.data(), b.data());
}

DescriptorIndex::DescriptorIndex(
    std::span<const Descriptor* const> descriptors) {
  const auto n = static_cast<std::uint32_t>(descriptors.size());
  ids_.resize(n);
  std::iota(ids_.begin(), ids_.end(), 0U);
  data_.resize(std::size_t{n} * kDescriptorSize);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::memcpy(&data_[std::size_t{i} * kDescriptorSize],
                descriptors[i]->data(), kDescriptorSize);
  }
  if (n == 0) return;
  std::vector<float> lo(kDescriptorSize, 0.0F);
  std::vector<float> hi(kDescriptorSize, 255.0F);
  nodes_.reserve(2 * (n / kLeafSize + 1));
  build(0, n, lo, hi);

  // Reorder payload into tree order so leaves are contiguous.
  std::vector<std::uint8_t> ordered(data_.size());
  for (std::uint32_t i = 0; i < n; ++i) {
    std::memcpy(&ordered[std::size_t{i} * kDescriptorSize],
                &data_[std::size_t{ids_[i]} * kDescriptorSize],
                kDescriptorSize);
  }
  data_ = std::move(ordered);
}

std::int32_t DescriptorIndex::build(std::uint32_t begin, std::uint32_t end,
                                    std::vector<float>& lo,
                                    std::vector<float>& hi) {
  const auto index = static_cast<std::int32_t>(nodes_.size());
  nodes_.emplace_back();
  if (end - begin <= kLeafSize) {
    nodes_[index].begin = begin;
    nodes_[index].end = end;
    return index;
  }
  // Split on the highest-variance dimension (first 100 points) at the median.
  const std::uint32_t sample = std::min<std::uint32_t>(end - begin, 100);
  int best_dim = 0;
  double best_var = -1.0;
  for (std::size_t d = 0; d < kDescriptorSize; ++d) {
    double s = 0.0, s2 = 0.0;
    for (std::uint32_t i = begin; i < begin + sample; ++i) {
      const double v = data_[std::size_t{ids_[i]} * kDescriptorSize + d];
      s += v;
      s2 += v * v;
    }
    const double var = s2 / sample - (s / sample) * (s / sample);
    if (var > best_var) {
      best_var = var;
      best_dim = static_cast<int>(d);
    }
  }
  const std::uint32_t mid = begin + (end - begin) / 2;
  auto key = [&](std::uint32_t id) {
    return data_[std::size_t{id} * kDescriptorSize + best_dim];
  };
  std::nth_element(ids_.begin() + begin, ids_.begin() + mid,
                   ids_.begin() + end, [&](std::uint32_t a, std::uint32_t b) {
                     return key(a) < key(b) || (key(a) == key(b) && a < b);
                   });
  const float split = key(ids_[mid]);

  nodes_[index].dim = best_dim;
  nodes_[index].value = split;
  nodes_[index].lo = lo[best_dim];
  nodes_[index].hi = hi[best_dim];

  const float saved_hi = hi[best_dim];
  hi[best_dim] = split;
  const std::int32_t left = build(begin, mid, lo, hi);
  hi[best_dim] = saved_hi;
  const float saved_lo = lo[best_dim];
  lo[best_dim] = split;
  const std::int32_t right = build(mid, end, lo, hi);
  lo[best_dim] = saved_lo;

  nodes_[index].left = left;
  nodes_[index].right = right;
  return index;
}

template <typename Q>
TwoNearest DescriptorIndex::search_impl(const Q* query,
                                        const NeighborSearch& params,
                                        std::uint64_t* comparisons) const {
  TwoNearest result;
  if (ids_.empty()) return result;
  const float ratio2 =
      params.ratio_bound > 0.0
          ? static_cast<float>(params.ratio_bound * params.ratio_bound)
          : 0.0F;
  auto radius = [&]() {
    float r = result.second_d2;
    if (ratio2 > 0.0F && result.best >= 0) r = std::min(r, result.best_d2 / ratio2);
    return r;
  };

  using Entry = std::pair<float, std::int32_t>;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> heap;
  heap.emplace(0.0F, 0);
  int leaves = 0;
  std::uint64_t compared = 0;
  while (!heap.empty()) {
    auto [bound, node_index] = heap.top();
    heap.pop();
    if (bound >= radius()) break;
    if (params.leaf_budget > 0 && leaves >= params.leaf_budget) break;
    // Descend to a leaf, queueing the far side of every split.
    while (nodes_[node_index].dim >= 0) {
      const Node& nd = nodes_[node_index];
      const float q = static_cast<float>(query[nd.dim]);
      const float cut = q - nd.value;
      float box = 0.0F;
      if (q < nd.lo) box = nd.lo - q;
      if (q > nd.hi) box = q - nd.hi;
      const std::int32_t near = cut < 0.0F ? nd.left : nd.right;
      const std::int32_t far = cut < 0.0F ? nd.right : nd.left;
      const float far_bound = bound + cut * cut - box * box;
      if (far_bound < radius()) heap.emplace(far_bound, far);
      node_index = near;
    }
    const Node& leaf = nodes_[node_index];
    ++leaves;
    for (std::uint32_t i = leaf.begin; i < leaf.end; ++i) {
      const float d2 = dist2(query, &data_[std::size_t{i} * kDescriptorSize]);
      ++compared;
      offer(result, static_cast<int>(ids_[i]), d2);
    }
  }
  if (comparisons) *comparisons += compared;
  return result;
}

TwoNearest DescriptorIndex::search(const Descriptor& query,
                                   const NeighborSearch& params,
                                   std::uint64_t* comparisons) const {
  return search_impl(query.data(), params, comparisons);
}

TwoNearest DescriptorIndex::search(std::span<const float> query,
                                   const NeighborSearch& params,
                                   std::uint64_t* comparisons) const {
  return search_impl(query.data(), params, comparisons);
}

TwoNearest brute_force_two_nearest(const Descriptor& query,
                                   std::span<const Descriptor* const> targets) {
  TwoNearest r;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    offer(r, static_cast<int>(i),
          static_cast<float>(descriptor_distance2(query, *targets[i])));
  }
  return r;
}

}  // namespace msfm
