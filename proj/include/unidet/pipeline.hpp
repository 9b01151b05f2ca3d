#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "unidet/backbone.hpp"
#include "unidet/encoder.hpp"
#include "unidet/evaluate.hpp"
#include "unidet/heads.hpp"
#include "unidet/labelspace.hpp"
#include "unidet/scene.hpp"
#include "unidet/superpoint.hpp"
#include "unidet/tensor.hpp"

namespace unidet {

class Rng;

// One dataset in a training mixture. Train and val entries are scene files
// or directories; a directory expands to every *.scene.jsonl inside it,
// sorted by name.
struct DatasetConfig {
  std::string dataset_id;
  std::string vocabulary;  // vocabulary JSON path
  std::vector<std::string> train;
  std::vector<std::string> val;
  double weight = 0.0;  // sampling weight; 0 means proportional to pool size
};

// Full training recipe. The JSON loader rejects unknown keys at every
// nesting level, and the UNIDET_SEED environment variable overrides the
// seed when set.
struct TrainConfig {
  std::string scheme = "from_scratch";  // from_scratch | fine_tune | joint
  std::string label_mode = "unified";   // separate | partitioned | unified
  double lr = 1e-4;
  double weight_decay = 0.05;
  std::size_t batch_size = 8;
  std::size_t epochs = 1024;
  double poly_power = 0.9;
  std::uint64_t seed = 0;
  double lambda = 0.25;  // class score weight in the matching cost
  double beta = 0.5;     // classification weight in the loss
  std::size_t candidates = 3;  // nearest superpoints considered per gt
  std::string matching = "disentangled";  // disentangled | hungarian
  std::string backbone = "unet";          // unet | pointwise
  std::size_t head_depth = 2;
  EncoderConfig encoder;
  UnetConfig unet;
  PointwiseMlpConfig pointwise;
  double voxel_size = 0.02;
  std::size_t point_limit = 100000;
  double score_threshold = 0.1;
  double nms_iou = 0.5;
  AugmentParams augment;
  SuperpointParams superpoints;
  std::string init_checkpoint;  // starting weights; required by fine_tune
  std::string synonyms;         // synonym JSON path, optional
  std::vector<DatasetConfig> datasets;

  static TrainConfig from_json_file(const std::string& path);
};

void validate_train_config(const TrainConfig& config);

// A trained detector: backbone, query encoder, prediction heads, and the
// label space they were built against. Only the configured backbone is
// populated.
struct DetectionModel {
  std::string backbone = "unet";
  double voxel_size = 0.02;
  SuperpointParams superpoints;
  LabelSpace labels;
  SynonymTable synonyms;
  SparseUnet unet;
  PointwiseMlp mlp;
  Encoder encoder;
  PredictionHeads heads;
};

DetectionModel build_model(const TrainConfig& config, const LabelSpace& labels,
                           const SynonymTable& synonyms, Rng& rng);

// Unique name -> tensor pairs over the active backbone, encoder, and heads.
std::vector<std::pair<std::string, Tensor>> model_parameters(
    const DetectionModel& model);

// Single-line JSON checkpoint holding the architecture, label space,
// synonyms, and every parameter. Saving an unchanged model reproduces the
// file byte for byte.
void save_checkpoint(const DetectionModel& model, const std::string& path);
DetectionModel load_checkpoint(const std::string& path);

// Copies checkpoint tensors whose name and shape both match into the model
// and returns how many were copied; everything else keeps its current
// values. This is the fine-tune path: a head sized for a different label
// space stays freshly initialized while the rest transfers.
std::size_t load_matching_parameters(DetectionModel& model, const std::string& path);

struct LoadedScene {
  Scene scene;
  SuperpointPartition superpoints;
  std::string path;
};

struct LoadedDataset {
  DatasetConfig config;
  Vocabulary vocabulary;
  std::vector<LoadedScene> train;
  std::vector<LoadedScene> val;
  double weight = 0.0;
};

struct LoadedMixture {
  std::vector<LoadedDataset> datasets;
};

// Expands directory entries and returns the scene file paths in listing
// order.
std::vector<std::string> expand_scene_paths(const std::vector<std::string>& entries);

// Loads every dataset's scenes and computes their superpoints once up
// front. Scenes that fail to load or segment are skipped with a warning on
// stderr; a dataset whose train pool ends up empty is an error.
LoadedMixture load_mixture(const TrainConfig& config);

struct TrainResult {
  DetectionModel model;
  std::vector<double> losses;  // mean batch loss per epoch
};

// One epoch covers the training pool once: ceil(pool / batch_size) optimizer
// steps, each on a freshly sampled batch. Scenes are drawn dataset-first by
// weight, capped, augmented, and run through the model; a batch's loss is
// the mean scene loss and an epoch logs the mean over its steps. The
// polynomial schedule decays the learning rate to zero across the epochs.
TrainResult train(const LoadedMixture& mixture, const TrainConfig& config);
TrainResult train(const TrainConfig& config);

// Detections above the score threshold after class-wise suppression,
// strongest first. Queries whose best class is the no-object slot are
// dropped.
std::vector<Detection> infer_scene(const DetectionModel& model, const Scene& scene,
                                   double score_threshold, double nms_iou);

// Runs inference over the scenes and scores it against their labels
// projected into the model's label space.
EvalReport evaluate_model(const DetectionModel& model, const std::vector<Scene>& scenes,
                          double score_threshold, double nms_iou,
                          const std::vector<double>& thresholds = {0.25, 0.5});

// JSONL, one detection per line using the scene box schema plus a score.
void save_detections(const std::vector<Detection>& detections,
                     const LabelSpace& labels, const std::string& path);

// epoch,loss,lr rows for the loss curve.
std::string training_curve_csv(const std::vector<double>& losses,
                               const TrainConfig& config);

struct AblationArm {
  std::string name;
  EvalReport report;
  std::size_t cls_parameters = 0;  // scalar count of the classification branch
  double final_loss = 0.0;
};

struct AblationReport {
  std::string suite;
  std::vector<AblationArm> arms;
};

// Trains one model per arm and evaluates each on the val scenes (train
// scenes when a dataset has no val split). Suites: "layers" sweeps encoder
// depth, "matching" compares disentangled against hungarian, "pe" toggles
// positional encoding, "label_mode" compares partitioned against unified,
// and "scheme" compares from_scratch, fine_tune, and joint on the first
// dataset (the rest form the pretraining pool; needs at least two).
AblationReport ablate(const std::string& suite, const TrainConfig& config);

std::string ablation_csv(const AblationReport& report);

}  // namespace unidet
