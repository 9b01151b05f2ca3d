#include "unidet/evaluate.hpp"

#include <algorithm>
#include <chrono>
#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace unidet {

namespace {

using json = nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void validate_inputs(const std::vector<SceneEval>& scenes, const LabelSpace& labels,
                     const std::vector<double>& thresholds) {
  if (thresholds.empty()) fail("evaluate: no IoU thresholds");
  for (double t : thresholds) {
    if (!(t > 0.0) || !(t < 1.0)) {
      fail("evaluate: IoU threshold " + std::to_string(t) + " outside (0, 1)");
    }
  }
  const int classes = static_cast<int>(labels.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const SceneEval& scene = scenes[s];
    if (scene.gt_boxes.size() != scene.gt_classes.size()) {
      fail("evaluate: scene " + std::to_string(s) + " has " +
           std::to_string(scene.gt_boxes.size()) + " gt boxes but " +
           std::to_string(scene.gt_classes.size()) + " gt classes");
    }
    for (int c : scene.gt_classes) {
      if (c < 0 || c >= classes) {
        fail("evaluate: gt class " + std::to_string(c) + " outside the label space");
      }
    }
    for (const Detection& d : scene.detections) {
      if (d.class_id < 0 || d.class_id >= classes) {
        fail("evaluate: detection class " + std::to_string(d.class_id) +
             " outside the label space");
      }
    }
  }
}

double class_ap(const std::vector<SceneEval>& scenes, int class_id, double threshold,
                std::size_t gt_count) {
  struct Ref {
    double score;
    std::size_t scene;
    std::size_t index;
  };
  std::vector<Ref> dets;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    for (std::size_t d = 0; d < scenes[s].detections.size(); ++d) {
      if (scenes[s].detections[d].class_id == class_id) {
        dets.push_back({scenes[s].detections[d].score, s, d});
      }
    }
  }
  std::sort(dets.begin(), dets.end(), [](const Ref& a, const Ref& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.scene != b.scene) return a.scene < b.scene;
    return a.index < b.index;
  });
  std::vector<std::vector<char>> taken(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    taken[s].assign(scenes[s].gt_boxes.size(), 0);
  }
  std::vector<double> precisions, recalls;
  std::size_t tp = 0, fp = 0;
  for (const Ref& ref : dets) {
    const SceneEval& scene = scenes[ref.scene];
    const Box3D& box = scene.detections[ref.index].box;
    double best_iou = 0.0;
    std::size_t best_gt = 0;
    bool found = false;
    for (std::size_t g = 0; g < scene.gt_boxes.size(); ++g) {
      if (scene.gt_classes[g] != class_id || taken[ref.scene][g]) continue;
      const double overlap = iou(box, scene.gt_boxes[g]);
      if (overlap >= threshold && overlap > best_iou) {
        best_iou = overlap;
        best_gt = g;
        found = true;
      }
    }
    if (found) {
      taken[ref.scene][best_gt] = 1;
      ++tp;
    } else {
      ++fp;
    }
    precisions.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recalls.push_back(static_cast<double>(tp) / static_cast<double>(gt_count));
  }
  for (std::size_t i = precisions.size(); i-- > 1;) {
    precisions[i - 1] = std::max(precisions[i - 1], precisions[i]);
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < precisions.size(); ++i) {
    ap += (recalls[i] - prev_recall) * precisions[i];
    prev_recall = recalls[i];
  }
  return ap;
}

std::map<double, double> scoped_map(const std::vector<SceneEval>& scenes,
                                    const LabelSpace& labels,
                                    const std::vector<double>& thresholds,
                                    std::vector<ClassAP>* per_class) {
  std::vector<std::size_t> gt_counts(labels.size(), 0);
  for (const SceneEval& scene : scenes) {
    for (int c : scene.gt_classes) gt_counts[static_cast<std::size_t>(c)] += 1;
  }
  std::map<double, double> result;
  std::map<double, std::size_t> counted;
  for (double t : thresholds) {
    result[t] = 0.0;
    counted[t] = 0;
  }
  for (std::size_t c = 0; c < labels.size(); ++c) {
    if (gt_counts[c] == 0) continue;
    ClassAP entry;
    entry.class_id = static_cast<int>(c);
    entry.gt_count = gt_counts[c];
    for (double t : thresholds) {
      const double ap = class_ap(scenes, static_cast<int>(c), t, gt_counts[c]);
      entry.ap[t] = ap;
      result[t] += ap;
      counted[t] += 1;
    }
    if (per_class != nullptr) per_class->push_back(std::move(entry));
  }
  for (double t : thresholds) {
    if (counted[t] > 0) result[t] /= static_cast<double>(counted[t]);
  }
  return result;
}

}  // namespace

EvalReport evaluate(const std::vector<SceneEval>& scenes, const LabelSpace& labels,
                    const std::vector<double>& thresholds) {
  const auto start = std::chrono::steady_clock::now();
  validate_inputs(scenes, labels, thresholds);
  EvalReport report;
  report.thresholds = thresholds;
  report.map = scoped_map(scenes, labels, thresholds, &report.per_class);
  std::vector<std::string> dataset_ids;
  for (const SceneEval& scene : scenes) {
    if (std::find(dataset_ids.begin(), dataset_ids.end(), scene.dataset_id) ==
        dataset_ids.end()) {
      dataset_ids.push_back(scene.dataset_id);
    }
  }
  for (const std::string& id : dataset_ids) {
    std::vector<SceneEval> subset;
    for (const SceneEval& scene : scenes) {
      if (scene.dataset_id == id) subset.push_back(scene);
    }
    report.per_dataset[id] = scoped_map(subset, labels, thresholds, nullptr);
  }
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

std::string eval_report_json(const EvalReport& report, const LabelSpace& labels) {
  auto threshold_key = [](double t) {
    std::ostringstream key;
    key << "mAP@" << t;
    return key.str();
  };
  json summary = json::object();
  for (const auto& [t, value] : report.map) summary[threshold_key(t)] = value;
  json per_class = json::array();
  for (const ClassAP& entry : report.per_class) {
    json row = {{"class", labels.classes.at(static_cast<std::size_t>(entry.class_id))},
                {"gt_count", entry.gt_count}};
    for (const auto& [t, value] : entry.ap) row[threshold_key(t)] = value;
    per_class.push_back(std::move(row));
  }
  json per_dataset = json::object();
  for (const auto& [id, values] : report.per_dataset) {
    json row = json::object();
    for (const auto& [t, value] : values) row[threshold_key(t)] = value;
    per_dataset[id] = std::move(row);
  }
  const json doc = {{"summary", std::move(summary)},
                    {"per_class", std::move(per_class)},
                    {"per_dataset", std::move(per_dataset)},
                    {"seconds", report.seconds}};
  return doc.dump(2) + "\n";
}

std::string eval_report_csv(const EvalReport& report, const LabelSpace& labels) {
  std::ostringstream out;
  out << "class,gt_count";
  for (double t : report.thresholds) out << ",ap@" << t;
  out << "\n";
  for (const ClassAP& entry : report.per_class) {
    out << labels.classes.at(static_cast<std::size_t>(entry.class_id)) << ","
        << entry.gt_count;
    for (double t : report.thresholds) out << "," << entry.ap.at(t);
    out << "\n";
  }
  out << "mean,";
  for (double t : report.thresholds) out << "," << report.map.at(t);
  out << "\n";
  return out.str();
}

}  // namespace unidet
