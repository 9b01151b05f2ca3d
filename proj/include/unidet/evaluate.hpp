#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "unidet/geometry.hpp"
#include "unidet/labelspace.hpp"

namespace unidet {

struct Detection {
  Box3D box;
  int class_id = 0;  // global label-space index
  double score = 0.0;
};

// One scene's predictions and ground truth, classes already projected into
// the global label space.
struct SceneEval {
  std::string dataset_id;
  std::vector<Detection> detections;
  std::vector<Box3D> gt_boxes;
  std::vector<int> gt_classes;
};

struct ClassAP {
  int class_id = 0;
  std::size_t gt_count = 0;
  std::map<double, double> ap;  // IoU threshold -> average precision
};

struct EvalReport {
  std::vector<double> thresholds;
  std::vector<ClassAP> per_class;  // classes with at least one gt, ascending id
  std::map<double, double> map;    // IoU threshold -> mean AP over per_class
  std::map<std::string, std::map<double, double>> per_dataset;
  double seconds = 0.0;
};

// Average precision per class: detections sorted by descending score, each
// greedily matched to the unmatched same-class gt of its scene with the
// highest IoU at or above the threshold, precision-recall area integrated
// over all points with the precision envelope. Classes without ground truth
// are excluded from the mean.
EvalReport evaluate(const std::vector<SceneEval>& scenes, const LabelSpace& labels,
                    const std::vector<double>& thresholds = {0.25, 0.5});

std::string eval_report_json(const EvalReport& report, const LabelSpace& labels);
std::string eval_report_csv(const EvalReport& report, const LabelSpace& labels);

}  // namespace unidet
