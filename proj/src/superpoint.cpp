#include "unidet/superpoint.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

#include <json.hpp>

namespace unidet {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

struct Edge {
  double w;
  int a, b;
  bool operator<(const Edge& o) const {
    if (w != o.w) return w < o.w;
    if (a != o.a) return a < o.a;
    return b < o.b;
  }
};

// Union-find tracking component size and heaviest internal edge.
struct Components {
  std::vector<int> parent;
  std::vector<int> size;
  std::vector<double> internal;

  explicit Components(int n) : parent(n), size(n, 1), internal(n, 0.0) {
    std::iota(parent.begin(), parent.end(), 0);
  }
  int find(int x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  }
  void unite(int ra, int rb, double w) {
    if (size[ra] < size[rb]) std::swap(ra, rb);
    parent[rb] = ra;
    size[ra] += size[rb];
    internal[ra] = w;
  }
};

std::int64_t cell_key(std::int32_t x, std::int32_t y, std::int32_t z) {
  const std::int64_t mask = (1ll << 21) - 1;
  return ((static_cast<std::int64_t>(x) & mask) << 42) |
         ((static_cast<std::int64_t>(y) & mask) << 21) |
         (static_cast<std::int64_t>(z) & mask);
}

// k nearest neighbors by spatial distance via a uniform grid with expanding
// ring search. Neighbor order is (distance, index), so results do not depend
// on hash iteration order.
std::vector<std::vector<int>> knn_graph(const Scene& scene, std::size_t k) {
  const std::size_t n = scene.points.size();
  std::vector<std::vector<int>> result(n);
  if (n <= 1 || k == 0) return result;
  const std::size_t kc = std::min(k, n - 1);

  double lo[3], hi[3];
  for (int c = 0; c < 3; ++c) lo[c] = hi[c] = scene.points[0][c];
  for (const auto& p : scene.points) {
    for (int c = 0; c < 3; ++c) {
      lo[c] = std::min(lo[c], p[c]);
      hi[c] = std::max(hi[c], p[c]);
    }
  }
  double max_extent = 0.0;
  double vol = 1.0;
  for (int c = 0; c < 3; ++c) {
    max_extent = std::max(max_extent, hi[c] - lo[c]);
    vol *= std::max(hi[c] - lo[c], 1e-9);
  }
  // Aim for about one point per cell, but never more than ~cbrt(n) cells per
  // axis; a flat or stretched cloud would otherwise make the ring search
  // enumerate enormous numbers of empty cells.
  const double per_axis = std::ceil(std::cbrt(static_cast<double>(n))) + 1.0;
  const double cell = std::max(
      {1e-6, std::cbrt(vol / static_cast<double>(n)), max_extent / per_axis});

  std::unordered_map<std::int64_t, std::vector<int>> grid;
  std::vector<std::array<std::int32_t, 3>> cells(n);
  std::int32_t cmin[3] = {0, 0, 0}, cmax[3] = {0, 0, 0};
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) {
      cells[i][c] = static_cast<std::int32_t>(std::floor(scene.points[i][c] / cell));
      if (i == 0 || cells[i][c] < cmin[c]) cmin[c] = cells[i][c];
      if (i == 0 || cells[i][c] > cmax[c]) cmax[c] = cells[i][c];
    }
    grid[cell_key(cells[i][0], cells[i][1], cells[i][2])].push_back(static_cast<int>(i));
  }
  std::int32_t max_span = 0;
  for (int c = 0; c < 3; ++c) max_span = std::max(max_span, cmax[c] - cmin[c]);

  std::vector<std::pair<double, int>> cand;
  for (std::size_t i = 0; i < n; ++i) {
    cand.clear();
    const auto& pi = scene.points[i];
    for (std::int32_t ring = 0; ring <= max_span + 1; ++ring) {
      // cells whose Chebyshev distance from the home cell equals `ring`
      for (std::int32_t dx = -ring; dx <= ring; ++dx) {
        for (std::int32_t dy = -ring; dy <= ring; ++dy) {
          for (std::int32_t dz = -ring; dz <= ring; ++dz) {
            if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
            const auto it = grid.find(
                cell_key(cells[i][0] + dx, cells[i][1] + dy, cells[i][2] + dz));
            if (it == grid.end()) continue;
            for (int j : it->second) {
              if (static_cast<std::size_t>(j) == i) continue;
              const auto& pj = scene.points[j];
              const double d2 = (pi[0] - pj[0]) * (pi[0] - pj[0]) +
                                (pi[1] - pj[1]) * (pi[1] - pj[1]) +
                                (pi[2] - pj[2]) * (pi[2] - pj[2]);
              cand.emplace_back(d2, j);
            }
          }
        }
      }
      if (cand.size() >= kc) {
        std::nth_element(cand.begin(), cand.begin() + (kc - 1), cand.end());
        const double kth = cand[kc - 1].first;
        // everything in an unscanned ring is at least ring*cell away, so a
        // strict comparison keeps equidistant candidates in play
        const double safe = static_cast<double>(ring) * cell;
        if (safe * safe > kth) break;
      }
    }
    std::sort(cand.begin(), cand.end());
    result[i].reserve(kc);
    for (std::size_t t = 0; t < kc && t < cand.size(); ++t) {
      result[i].push_back(cand[t].second);
    }
  }
  return result;
}

}  // namespace

SuperpointPartition compute_superpoints(const Scene& scene,
                                        const SuperpointParams& params) {
  validate_scene(scene);
  if (params.k == 0) fail("superpoints: k must be positive");
  if (!(params.threshold > 0.0)) fail("superpoints: threshold must be positive");
  if (params.color_weight < 0.0) fail("superpoints: color weight must be non-negative");
  const std::size_t n = scene.points.size();

  const auto neighbors = knn_graph(scene, params.k);
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < n; ++i) {
    for (int j : neighbors[i]) {
      const int a = std::min<int>(static_cast<int>(i), j);
      const int b = std::max<int>(static_cast<int>(i), j);
      const auto& pa = scene.points[a];
      const auto& pb = scene.points[b];
      const double spatial = std::sqrt((pa[0] - pb[0]) * (pa[0] - pb[0]) +
                                       (pa[1] - pb[1]) * (pa[1] - pb[1]) +
                                       (pa[2] - pb[2]) * (pa[2] - pb[2]));
      const double color = std::sqrt((pa[3] - pb[3]) * (pa[3] - pb[3]) +
                                     (pa[4] - pb[4]) * (pa[4] - pb[4]) +
                                     (pa[5] - pb[5]) * (pa[5] - pb[5]));
      edges.push_back({spatial + params.color_weight * color, a, b});
    }
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end(),
                          [](const Edge& x, const Edge& y) {
                            return x.a == y.a && x.b == y.b && x.w == y.w;
                          }),
              edges.end());

  Components comp(static_cast<int>(n));
  for (const Edge& e : edges) {
    const int ra = comp.find(e.a);
    const int rb = comp.find(e.b);
    if (ra == rb) continue;
    const double cap_a = comp.internal[ra] + params.threshold / comp.size[ra];
    const double cap_b = comp.internal[rb] + params.threshold / comp.size[rb];
    if (e.w <= std::min(cap_a, cap_b)) comp.unite(ra, rb, e.w);
  }
  // Absorb undersized fragments, but only along edges cheap enough that the
  // merge cannot bridge a genuine gap.
  for (const Edge& e : edges) {
    if (e.w > params.threshold) break;
    const int ra = comp.find(e.a);
    const int rb = comp.find(e.b);
    if (ra == rb) continue;
    if (comp.size[ra] < static_cast<int>(params.min_size) ||
        comp.size[rb] < static_cast<int>(params.min_size)) {
      comp.unite(ra, rb, e.w);
    }
  }

  std::vector<int> assignment(n, -1);
  std::vector<int> label_of_root(n, -1);
  int next = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int r = comp.find(static_cast<int>(i));
    if (label_of_root[r] < 0) label_of_root[r] = next++;
    assignment[i] = label_of_root[r];
  }
  return partition_from_assignment(std::move(assignment), scene);
}

SuperpointPartition partition_from_assignment(std::vector<int> assignment,
                                              const Scene& scene) {
  if (assignment.size() != scene.points.size()) {
    fail("superpoints: assignment size " + std::to_string(assignment.size()) +
         " does not match point count " + std::to_string(scene.points.size()));
  }
  int next = 0;
  for (int a : assignment) {
    if (a < 0) fail("superpoints: negative label in assignment");
    if (a > next) {
      fail("superpoints: label " + std::to_string(a) +
           " appears before label " + std::to_string(next) +
           "; labels must be contiguous in order of first appearance");
    }
    if (a == next) ++next;
  }
  SuperpointPartition part;
  part.assignment = std::move(assignment);
  part.count = static_cast<std::size_t>(next);
  part.sizes.assign(part.count, 0);
  part.centers.assign(part.count, {0.0, 0.0, 0.0});
  for (std::size_t i = 0; i < part.assignment.size(); ++i) {
    const int s = part.assignment[i];
    part.sizes[s] += 1;
    for (int c = 0; c < 3; ++c) part.centers[s][c] += scene.points[i][c];
  }
  for (std::size_t s = 0; s < part.count; ++s) {
    for (int c = 0; c < 3; ++c) part.centers[s][c] /= part.sizes[s];
  }
  return part;
}

Tensor pool_features(const Tensor& point_features,
                     const SuperpointPartition& partition) {
  if (!point_features.defined() || point_features.ndim() != 2 ||
      point_features.rows() != partition.assignment.size()) {
    fail("pool_features: features must be 2-D with one row per point");
  }
  return segment_mean(point_features, partition.assignment, partition.count);
}

std::vector<int> nearest_superpoints(const SuperpointPartition& partition,
                                     const Box3D& box, std::size_t count) {
  validate_box(box);
  if (count == 0) fail("nearest_superpoints: count must be positive");
  std::vector<std::pair<double, int>> dist;
  dist.reserve(partition.count);
  for (std::size_t s = 0; s < partition.count; ++s) {
    const auto& c = partition.centers[s];
    const double d2 = (c[0] - box.cx) * (c[0] - box.cx) +
                      (c[1] - box.cy) * (c[1] - box.cy) +
                      (c[2] - box.cz) * (c[2] - box.cz);
    dist.emplace_back(d2, static_cast<int>(s));
  }
  std::sort(dist.begin(), dist.end());
  std::vector<int> result;
  for (std::size_t t = 0; t < std::min(count, dist.size()); ++t) {
    result.push_back(dist[t].second);
  }
  return result;
}

void save_superpoints(const SuperpointPartition& partition, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail("save_superpoints: cannot open '" + path + "' for writing");
  out << json{{"assignment", partition.assignment}}.dump() << "\n";
  if (!out) fail("save_superpoints: write to '" + path + "' failed");
}

SuperpointPartition load_superpoints(const std::string& path, const Scene& scene) {
  std::ifstream in(path);
  if (!in) fail("load_superpoints: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) fail("load_superpoints: '" + path + "' is empty");
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    fail("load_superpoints: '" + path + "' is not valid JSON: " + e.what());
  }
  std::vector<int> assignment;
  for (const auto& v : j.at("assignment")) assignment.push_back(v.get<int>());
  return partition_from_assignment(std::move(assignment), scene);
}

}  // namespace unidet
