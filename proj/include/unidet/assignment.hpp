#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "unidet/geometry.hpp"
#include "unidet/heads.hpp"
#include "unidet/superpoint.hpp"
#include "unidet/tensor.hpp"

namespace unidet {

// Proposal-to-ground-truth matching costs. Masked entries hold +infinity for
// inspection, but every consumer gates on the `finite` mask so infinities
// never enter arithmetic.
struct CostMatrix {
  std::size_t proposals = 0;
  std::size_t gts = 0;
  std::vector<double> values;  // row-major, proposals x gts
  std::vector<char> finite;
  double lambda = 0.25;

  double at(std::size_t i, std::size_t k) const { return values[i * gts + k]; }
  bool is_finite(std::size_t i, std::size_t k) const { return finite[i * gts + k] != 0; }
};

// Pairs (proposal index, gt index), injective in both coordinates, sorted by
// proposal index.
struct Matching {
  std::vector<std::pair<int, int>> pairs;
};

// -lambda * class_scores[gt_class] + diou_distance(predicted, gt); lower is
// better.
double match_cost(const std::vector<double>& class_scores, int gt_class,
                  const Box3D& predicted, const Box3D& gt, double lambda);

// Entry (i, k) is finite exactly when proposal i sits on one of the j
// superpoints nearest to ground truth k; proposal i must be the proposal for
// superpoint i.
CostMatrix build_masked_costs(const std::vector<Proposal>& proposals,
                              const std::vector<Box3D>& gt_boxes,
                              const std::vector<int>& gt_classes,
                              const SuperpointPartition& partition, std::size_t j = 3,
                              double lambda = 0.25);

// Exact minimum-cost matching over the finite entries, maximizing the number
// of matched pairs first. Ground truths whose candidates are all taken by
// cheaper assignments stay unmatched; nothing is ever matched through a
// masked entry.
Matching match_disentangled(const CostMatrix& costs);

// Exact minimum-cost assignment of size min(rows, cols) on a dense row-major
// matrix. Every entry must be finite.
Matching match_hungarian(const std::vector<double>& costs, std::size_t rows,
                         std::size_t cols);

struct DetectionLoss {
  Tensor total;
  Tensor classification;
  Tensor regression;  // zero constant when regression_active is false
  bool regression_active = false;
};

// total = beta * classification + regression. Classification is the mean
// cross-entropy over every proposal row of `logits` (matched rows target
// their gt class, unmatched rows the trailing no-object slot); regression is
// the mean DIoU distance over matched pairs, absent when nothing matched.
DetectionLoss detection_loss(const Matching& matching, const Tensor& logits,
                             const Tensor& encodings, const std::vector<Vec3>& refs,
                             const std::vector<Box3D>& gt_boxes,
                             const std::vector<int>& gt_classes, double beta = 0.5);

}  // namespace unidet
