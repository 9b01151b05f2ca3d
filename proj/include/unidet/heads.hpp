#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "unidet/geometry.hpp"
#include "unidet/random.hpp"
#include "unidet/tensor.hpp"

namespace unidet {

// One detection per query: an upright box and a distribution over the active
// label space.
struct Proposal {
  Box3D box;
  std::vector<double> class_scores;  // one entry per real class, sums to 1
  int query_index = 0;
};

struct HeadConfig {
  std::size_t in_channels = 32;
  // Real classes only; the classification branch appends one extra slot used
  // as the training target for unmatched queries.
  std::size_t num_classes = 0;
  // Linear maps per branch; every map but the last feeds a ReLU of width
  // in_channels, the last stays linear.
  std::size_t depth = 2;
};

struct PredictionHeads {
  HeadConfig config;
  std::vector<Tensor> cls_w, cls_b;
  std::vector<Tensor> box_w, box_b;
};

PredictionHeads make_heads(const HeadConfig& config, Rng& rng);

// M x (num_classes + 1) raw scores; the trailing column is the no-object slot
// consumed only by the training loss.
Tensor class_logits(const PredictionHeads& heads, const Tensor& features);

// M x num_classes probabilities over the real classes (softmax of the leading
// logits); rows sum to 1.
Tensor class_head(const PredictionHeads& heads, const Tensor& features);

// M x 8 box parameters per query: six face distances made strictly positive
// through exp, then (sin yaw, cos yaw) left raw.
Tensor box_encodings(const PredictionHeads& heads, const Tensor& features);

// One box per encoding row, decoded against that query's reference point
// (its superpoint mass center).
std::vector<Box3D> decode_boxes(const Tensor& encodings, const std::vector<Vec3>& refs);

std::vector<Box3D> box_head(const PredictionHeads& heads, const Tensor& features,
                            const std::vector<Vec3>& refs);

std::vector<Proposal> make_proposals(const PredictionHeads& heads, const Tensor& features,
                                     const std::vector<Vec3>& refs);

// rows[p] picks an encoding row, targets[p] the box it should reproduce.
// Returns a P x 1 tensor of DIoU distances, differentiable in the encodings;
// derivatives come from dual-number forward mode through the box geometry.
Tensor diou_matched(const Tensor& encodings, const std::vector<Vec3>& refs,
                    const std::vector<int>& rows, const std::vector<Box3D>& targets);

std::vector<std::pair<std::string, Tensor>> head_parameters(const PredictionHeads& heads);

}  // namespace unidet
