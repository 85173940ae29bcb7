#include "msfm/guided.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

namespace msfm {

namespace {

int floor_div(double v, double cell) {
  return static_cast<int>(std::floor(v / cell));
}

}  // namespace

Vec2 OverlapGrid::offset(int grid, double d) {
  return {(grid & 1) ? d : 0.0, (grid & 2) ? d : 0.0};
}

OverlapGrid::CellRef OverlapGrid::cell_of(int grid, const Vec2& p) const {
  const Vec2 o = offset(grid, d_);
  return {grid, floor_div(p.x() - o.x(), 2.0 * d_),
          floor_div(p.y() - o.y(), 2.0 * d_)};
}

Vec2 OverlapGrid::center(const CellRef& c) const {
  if (centers_ == GridCenters::kPrinted) {
    return {c.ix * d_ + 2.0 * d_, c.iy * d_ + 2.0 * d_};
  }
  const Vec2 o = offset(c.grid, d_);
  return {c.ix * 2.0 * d_ + o.x() + d_, c.iy * 2.0 * d_ + o.y() + d_};
}

OverlapGrid::CellRef OverlapGrid::centermost(const Vec2& p) const {
  CellRef best = cell_of(0, p);
  double best_d2 = (center(best) - p).squaredNorm();
  for (int g = 1; g < 4; ++g) {
    const CellRef c = cell_of(g, p);
    const double d2 = (center(c) - p).squaredNorm();
    if (d2 < best_d2) {
      best = c;
      best_d2 = d2;
    }
  }
  return best;
}

std::span<const std::uint32_t> OverlapGrid::members(const CellRef& c) const {
  const Layer& L = layers_[c.grid];
  const int x = c.ix - L.ix0;
  const int y = c.iy - L.iy0;
  if (x < 0 || y < 0 || x >= L.nx || y >= L.ny) return {};
  const std::size_t k = static_cast<std::size_t>(y) * L.nx + x;
  return {L.items.data() + L.start[k], L.start[k + 1] - L.start[k]};
}

OverlapGrid build_grid(std::span<const Feature> features, double d,
                       double inflation, GridCenters centers) {
  if (!(d > 0.0)) throw Error(ErrorCode::kArgument, "grid: d must be > 0");
  if (!(inflation >= 1.0 && inflation <= 2.0)) {
    throw Error(ErrorCode::kArgument, "grid: inflation must be in [1, 2]");
  }
  OverlapGrid grid;
  grid.d_ = d;
  grid.inflation_ = inflation;
  grid.centers_ = centers;
  grid.points_.reserve(features.size());
  for (const Feature& f : features) grid.points_.emplace_back(f.x, f.y);

  const double cell = 2.0 * d;
  const double r = inflation * d;
  for (int g = 0; g < 4; ++g) {
    const Vec2 o = OverlapGrid::offset(g, d);
    // Cell i holds v when center_i - r <= v < center_i + r.
    auto range = [&](double v, double off) {
      const double u = v - off - d;
      return std::pair<int, int>{floor_div(u - r, cell) + 1,
                                 floor_div(u + r, cell)};
    };
    auto& L = grid.layers_[g];
    if (features.empty()) {
      L.start.assign(1, 0);
      continue;
    }
    int x0 = std::numeric_limits<int>::max(), x1 = std::numeric_limits<int>::min();
    int y0 = x0, y1 = x1;
    for (const Vec2& p : grid.points_) {
      const auto [ax, bx] = range(p.x(), o.x());
      const auto [ay, by] = range(p.y(), o.y());
      x0 = std::min(x0, ax);
      x1 = std::max(x1, bx);
      y0 = std::min(y0, ay);
      y1 = std::max(y1, by);
    }
    L.ix0 = x0;
    L.iy0 = y0;
    L.nx = x1 - x0 + 1;
    L.ny = y1 - y0 + 1;
    const std::size_t ncell = static_cast<std::size_t>(L.nx) * L.ny;
    L.start.assign(ncell + 1, 0);
    auto each_cell = [&](const Vec2& p, auto&& fn) {
      const auto [ax, bx] = range(p.x(), o.x());
      const auto [ay, by] = range(p.y(), o.y());
      for (int iy = ay; iy <= by; ++iy) {
        for (int ix = ax; ix <= bx; ++ix) {
          fn(static_cast<std::size_t>(iy - y0) * L.nx + (ix - x0));
        }
      }
    };
    for (const Vec2& p : grid.points_) {
      each_cell(p, [&](std::size_t k) { ++L.start[k + 1]; });
    }
    std::partial_sum(L.start.begin(), L.start.end(), L.start.begin());
    L.items.resize(L.start.back());
    std::vector<std::uint32_t> fill(L.start.begin(), L.start.end() - 1);
    for (std::uint32_t i = 0; i < grid.points_.size(); ++i) {
      each_cell(grid.points_[i], [&](std::size_t k) { L.items[fill[k]++] = i; });
    }
  }
  return grid;
}

std::vector<Vec2> clip_line(const EpipolarLine& l, const ImageBounds& b) {
  constexpr double eps = 1e-9;
  std::vector<Vec2> hits;
  const double x0 = -b.margin, y0 = -b.margin;
  const double x1 = b.width + b.margin, y1 = b.height + b.margin;
  auto add = [&](double x, double y) {
    if (x < x0 - eps || x > x1 + eps || y < y0 - eps || y > y1 + eps) return;
    const Vec2 p(std::clamp(x, x0, x1), std::clamp(y, y0, y1));
    for (const Vec2& h : hits) {
      if ((h - p).norm() < 1e-7) return;
    }
    hits.push_back(p);
  };
  if (std::abs(l.b) > eps) {
    add(x0, -(l.a * x0 + l.c) / l.b);
    add(x1, -(l.a * x1 + l.c) / l.b);
  }
  if (std::abs(l.a) > eps) {
    add(-(l.b * y0 + l.c) / l.a, y0);
    add(-(l.b * y1 + l.c) / l.a, y1);
  }
  if (hits.size() <= 2) return hits;
  // Line through a corner plus the opposite side: keep the farthest pair.
  std::size_t bi = 0, bj = 1;
  double best = -1.0;
  for (std::size_t i = 0; i < hits.size(); ++i) {
    for (std::size_t j = i + 1; j < hits.size(); ++j) {
      const double n = (hits[i] - hits[j]).squaredNorm();
      if (n > best) {
        best = n;
        bi = i;
        bj = j;
      }
    }
  }
  return {hits[bi], hits[bj]};
}

std::vector<Vec2> equidistant_line_points(const EpipolarLine& line,
                                          const ImageBounds& bounds, double d) {
  if (!(d > 0.0)) throw Error(ErrorCode::kArgument, "line sampling: d must be > 0");
  const auto ends = clip_line(line, bounds);
  if (ends.size() < 2) return ends;
  const Vec2& A = ends[0];
  const Vec2& B = ends[1];
  const double len = (B - A).norm();
  const int K = std::max(1, static_cast<int>(std::ceil(len / d - 1e-12)));
  std::vector<Vec2> out;
  out.reserve(K + 1);
  for (int k = 0; k <= K; ++k) {
    out.push_back((k * A + (K - k) * B) / K);
  }
  return out;
}

std::vector<std::uint32_t> candidates_linear(std::span<const Feature> features,
                                             const EpipolarLine& line,
                                             double d) {
  const double norm = std::hypot(line.a, line.b);
  if (norm == 0.0) throw Error(ErrorCode::kInvalidLine, "line has a = b = 0");
  const double lim = d * norm;
  std::vector<std::uint32_t> out;
  for (std::uint32_t i = 0; i < features.size(); ++i) {
    const Feature& f = features[i];
    if (std::abs(line.a * f.x + line.b * f.y + line.c) <= lim) out.push_back(i);
  }
  return out;
}

std::vector<std::uint32_t> candidates_grid(const OverlapGrid& grid,
                                           const EpipolarLine& line,
                                           const ImageBounds& bounds) {
  std::vector<std::uint32_t> out;
  if (grid.feature_count() == 0) return out;
  const auto samples = equidistant_line_points(line, bounds.grown(grid.d()), grid.d());
  std::vector<OverlapGrid::CellRef> cells;
  cells.reserve(samples.size());
  for (const Vec2& p : samples) {
    const auto c = grid.centermost(p);
    if (cells.empty() || cells.back() != c) cells.push_back(c);
  }
  std::sort(cells.begin(), cells.end());
  cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
  for (const auto& c : cells) {
    const auto m = grid.members(c);
    out.insert(out.end(), m.begin(), m.end());
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

PointIndex2D::PointIndex2D(std::span<const Feature> features) {
  ids_.resize(features.size());
  std::iota(ids_.begin(), ids_.end(), 0U);
  pts_.reserve(features.size());
  for (const Feature& f : features) pts_.emplace_back(f.x, f.y);
  if (!ids_.empty()) build(0, static_cast<std::uint32_t>(ids_.size()));
  std::vector<Vec2> ordered(pts_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) ordered[i] = pts_[ids_[i]];
  pts_ = std::move(ordered);
}

std::int32_t PointIndex2D::build(std::uint32_t begin, std::uint32_t end) {
  const auto index = static_cast<std::int32_t>(nodes_.size());
  nodes_.emplace_back();
  if (end - begin <= 8) {
    nodes_[index].begin = begin;
    nodes_[index].end = end;
    return index;
  }
  Vec2 lo = pts_[ids_[begin]], hi = lo;
  for (std::uint32_t i = begin; i < end; ++i) {
    lo = lo.cwiseMin(pts_[ids_[i]]);
    hi = hi.cwiseMax(pts_[ids_[i]]);
  }
  const int dim = (hi.x() - lo.x()) >= (hi.y() - lo.y()) ? 0 : 1;
  const std::uint32_t mid = begin + (end - begin) / 2;
  std::nth_element(ids_.begin() + begin, ids_.begin() + mid, ids_.begin() + end,
                   [&](std::uint32_t a, std::uint32_t b) {
                     return pts_[a][dim] < pts_[b][dim] ||
                            (pts_[a][dim] == pts_[b][dim] && a < b);
                   });
  nodes_[index].dim = dim;
  nodes_[index].value = pts_[ids_[mid]][dim];
  const auto left = build(begin, mid);
  const auto right = build(mid, end);
  nodes_[index].left = left;
  nodes_[index].right = right;
  return index;
}

void PointIndex2D::radius_query(const Vec2& p, double r,
                                std::vector<std::uint32_t>& out) const {
  if (nodes_.empty()) return;
  const double r2 = r * r;
  std::int32_t stack[64];
  int top = 0;
  stack[top++] = 0;
  while (top > 0) {
    const Node& n = nodes_[stack[--top]];
    if (n.dim < 0) {
      for (std::uint32_t i = n.begin; i < n.end; ++i) {
        if ((pts_[i] - p).squaredNorm() <= r2) out.push_back(ids_[i]);
      }
      continue;
    }
    const double diff = p[n.dim] - n.value;
    if (diff - r <= 0.0) stack[top++] = n.left;
    if (diff + r >= 0.0) stack[top++] = n.right;
  }
}

std::vector<std::uint32_t> candidates_radial(const PointIndex2D& index,
                                             const EpipolarLine& line,
                                             const ImageBounds& bounds,
                                             double d, double radius) {
  if (radius <= 0.0) radius = d * std::sqrt(2.0);
  std::vector<std::uint32_t> out;
  for (const Vec2& p : equidistant_line_points(line, bounds.grown(d), d)) {
    index.radius_query(p, radius, out);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<QueryGroup> group_queries(const FeatureSet& query,
                                      std::span<const FeatureId> query_ids,
                                      const TwoViewGeometry& geom,
                                      const ImageBounds& target_bounds,
                                      double tolerance_px) {
  std::vector<QueryGroup> groups;
  std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> buckets;
  const double cell = std::max(tolerance_px, 1e-6);
  auto key = [&](long ix, long iy) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(ix)) << 32) |
           static_cast<std::uint32_t>(iy);
  };
  auto cell_xy = [&](const Vec2& p) {
    return std::pair<long, long>{static_cast<long>(std::floor(p.x() / cell)),
                                 static_cast<long>(std::floor(p.y() / cell))};
  };
  const double tol2 = tolerance_px * tolerance_px;
  auto near = [&](const Vec2& a, const Vec2& b) {
    return (a - b).squaredNorm() <= tol2;
  };

  const std::size_t n = query_ids.empty() ? query.size() : query_ids.size();
  for (std::size_t k = 0; k < n; ++k) {
    const FeatureId id =
        query_ids.empty() ? static_cast<FeatureId>(k) : query_ids[k];
    EpipolarLine line;
    try {
      line = epipolar_line(geom.F, feature_point(query.features.at(id)));
    } catch (const Error& e) {
      if (e.code() == ErrorCode::kEpipoleDegenerate) continue;
      throw;
    }
    auto ends = clip_line(line, target_bounds);
    if (ends.empty()) continue;
    if (ends.size() == 1) ends.push_back(ends[0]);
    if (std::tie(ends[1].x(), ends[1].y()) < std::tie(ends[0].x(), ends[0].y())) {
      std::swap(ends[0], ends[1]);
    }
    const Vec2 A = ends[0], B = ends[1];

    std::uint32_t found = std::numeric_limits<std::uint32_t>::max();
    const auto [cx, cy] = cell_xy(A);
    for (long dy = -1; dy <= 1; ++dy) {
      for (long dx = -1; dx <= 1; ++dx) {
        auto it = buckets.find(key(cx + dx, cy + dy));
        if (it == buckets.end()) continue;
        for (std::uint32_t g : it->second) {
          if (g >= found) continue;
          const auto& bp = groups[g].boundary_points;
          if ((near(A, bp[0]) && near(B, bp[1])) ||
              (near(A, bp[1]) && near(B, bp[0]))) {
            found = g;
          }
        }
      }
    }
    if (found == std::numeric_limits<std::uint32_t>::max()) {
      found = static_cast<std::uint32_t>(groups.size());
      QueryGroup g;
      g.representative_line = line;
      g.boundary_points = {A, B};
      groups.push_back(std::move(g));
      const auto [ax, ay] = cell_xy(A);
      const auto [bx, by] = cell_xy(B);
      buckets[key(ax, ay)].push_back(found);
      if (key(bx, by) != key(ax, ay)) buckets[key(bx, by)].push_back(found);
    }
    groups[found].members.push_back(id);
  }
  return groups;
}

double guided_band_limit(const GuidedConfig& c) {
  const double tol = c.group_tolerance_px;
  switch (c.strategy) {
    case CandidateStrategy::kLinear:
      return c.d + tol;
    case CandidateStrategy::kRadial:
      return c.d * std::sqrt(2.0) + tol;
    case CandidateStrategy::kGrid:
      break;
  }
  // Sample to chosen center is at most d/2 per axis (geometric centers); a
  // member lies within inflation * d of that center per axis.
  const double per_axis = c.centers == GridCenters::kGeometric
                              ? c.d * (0.5 + c.inflation)
                              : 2.0 * c.d * c.inflation;
  return per_axis * std::sqrt(2.0) + tol;
}

std::vector<Match> guided_match_pair(const FeatureSet& query,
                                     const FeatureSet& target,
                                     const TwoViewGeometry& geom,
                                     const GuidedConfig& config,
                                     GuidedCounters* counters,
                                     std::span<const FeatureId> query_ids,
                                     std::span<const FeatureId> target_ids) {
  // Local target view: position i of `local` is target feature `global[i]`.
  std::vector<Feature> subset;
  std::vector<FeatureId> global;
  std::span<const Feature> local(target.features);
  if (!target_ids.empty()) {
    subset.reserve(target_ids.size());
    for (FeatureId id : target_ids) {
      subset.push_back(target.features.at(id));
      global.push_back(id);
    }
    local = subset;
  }
  std::vector<Match> out;
  if (local.empty()) return out;

  const ImageBounds bounds = bounds_of(target);
  OverlapGrid grid;
  PointIndex2D radial;
  if (config.strategy == CandidateStrategy::kGrid) {
    grid = build_grid(local, config.d, config.inflation, config.centers);
  } else if (config.strategy == CandidateStrategy::kRadial) {
    radial = PointIndex2D(local);
  }
  const auto groups = group_queries(query, query_ids, geom, bounds,
                                    config.group_tolerance_px);

  MatchOptions mo;
  mo.ratio = config.ratio;
  mo.single_candidate_cap = config.single_candidate_cap;
  NeighborSearch exact;
  exact.leaf_budget = 0;
  exact.ratio_bound = config.ratio;
  const double band = guided_band_limit(config);

  struct GroupOut {
    std::vector<Match> matches;
    std::uint64_t comparisons = 0;
    std::uint64_t candidates = 0;
  };
  std::vector<GroupOut> per_group(groups.size());
  parallel_for(groups.size(), config.threads, [&](std::size_t gi) {
    const QueryGroup& g = groups[gi];
    std::vector<std::uint32_t> cand;
    switch (config.strategy) {
      case CandidateStrategy::kGrid:
        cand = candidates_grid(grid, g.representative_line, bounds);
        break;
      case CandidateStrategy::kRadial:
        cand = candidates_radial(radial, g.representative_line, bounds, config.d);
        break;
      case CandidateStrategy::kLinear:
        cand = candidates_linear(local, g.representative_line, config.d);
        break;
    }
    GroupOut& res = per_group[gi];
    res.candidates = cand.size();
    if (cand.empty()) return;
    std::vector<const Descriptor*> ptrs(cand.size());
    for (std::size_t i = 0; i < cand.size(); ++i) ptrs[i] = &local[cand[i]].descriptor;
    const DescriptorIndex index(ptrs);
    for (FeatureId qid : g.members) {
      const Feature& qf = query.features[qid];
      const TwoNearest nn = index.search(qf.descriptor, exact, &res.comparisons);
      auto m = ratio_decision(qid, nn, cand.size(), mo);
      if (!m) continue;
      const std::uint32_t li = cand[m->target];
      const Feature& tf = local[li];
      const EpipolarLine own = epipolar_line(geom.F, feature_point(qf));
      if (point_line_distance(feature_point(tf), own) > band) continue;
      m->target = global.empty() ? li : global[li];
      res.matches.push_back(*m);
    }
  });

  for (GroupOut& r : per_group) {
    out.insert(out.end(), r.matches.begin(), r.matches.end());
    if (counters) {
      counters->comparisons += r.comparisons;
      counters->candidates += r.candidates;
    }
  }
  if (counters) {
    counters->groups += groups.size();
    for (const auto& g : groups) counters->queries += g.members.size();
  }
  resolve_duplicate_targets(out);
  return out;
}

}  // namespace msfm
