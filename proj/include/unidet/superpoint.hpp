#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "unidet/geometry.hpp"
#include "unidet/scene.hpp"
#include "unidet/tensor.hpp"

namespace unidet {

struct SuperpointParams {
  std::size_t k = 16;            // neighbors per point in the graph
  double color_weight = 0.5;     // color distance contribution to edge weight
  double threshold = 0.25;       // merge tolerance (meters, plus weighted color)
  std::size_t min_size = 20;     // fragments below this merge along cheap edges
};

// Clustering of all scene points. Labels are contiguous 0..count-1 in order
// of first appearance; every label is non-empty.
struct SuperpointPartition {
  std::vector<int> assignment;
  std::size_t count = 0;
  std::vector<std::array<double, 3>> centers;  // member mass centers
  std::vector<int> sizes;
};

// Greedy graph segmentation over a k-nearest-neighbor graph. Edge weight is
// spatial distance plus color_weight times color distance; a merge needs the
// edge to be no heavier than either side's internal maximum plus an
// adaptive slack threshold/|component|. Small leftovers are then absorbed
// along edges no heavier than the threshold, so point sets further apart
// than the threshold never merge.
SuperpointPartition compute_superpoints(const Scene& scene,
                                        const SuperpointParams& params);

// Per-superpoint mean of point feature rows (differentiable).
Tensor pool_features(const Tensor& point_features,
                     const SuperpointPartition& partition);

// Indices of the `count` superpoints whose mass centers are closest to the
// box center; ties break toward the lower index. Returns fewer when the
// partition has fewer superpoints.
std::vector<int> nearest_superpoints(const SuperpointPartition& partition,
                                     const Box3D& box, std::size_t count);

// Sidecar `.spt.jsonl`: one record {"assignment": [...]}. Loading validates
// the labeling against the scene and recomputes centers and sizes.
void save_superpoints(const SuperpointPartition& partition, const std::string& path);
SuperpointPartition load_superpoints(const std::string& path, const Scene& scene);

// Recomputes centers/sizes for an assignment (used after point transforms).
SuperpointPartition partition_from_assignment(std::vector<int> assignment,
                                              const Scene& scene);

}  // namespace unidet
