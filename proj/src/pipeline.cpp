#include "unidet/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

#include <json.hpp>

#include "unidet/assignment.hpp"
#include "unidet/geometry.hpp"
#include "unidet/optim.hpp"
#include "unidet/random.hpp"

namespace unidet {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check_keys(const json& obj, std::initializer_list<const char*> known,
                const std::string& where) {
  if (!obj.is_object()) fail("config: " + where + " must be an object");
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    if (std::find_if(known.begin(), known.end(),
                     [&](const char* k) { return key == k; }) == known.end()) {
      fail("config: unknown key '" + key + "' in " + where);
    }
  }
}

void parse_encoder(const json& obj, EncoderConfig* out) {
  check_keys(obj, {"layers", "heads", "model_dim", "ffn_dim", "positional_encoding"},
             "encoder");
  if (obj.contains("layers")) out->layers = obj.at("layers").get<std::size_t>();
  if (obj.contains("heads")) out->heads = obj.at("heads").get<std::size_t>();
  if (obj.contains("model_dim")) out->model_dim = obj.at("model_dim").get<std::size_t>();
  if (obj.contains("ffn_dim")) out->ffn_dim = obj.at("ffn_dim").get<std::size_t>();
  if (obj.contains("positional_encoding")) {
    out->use_positional_encoding = obj.at("positional_encoding").get<bool>();
  }
}

void parse_unet(const json& obj, UnetConfig* out) {
  check_keys(obj, {"stem_channels", "stage_channels", "out_channels"}, "unet");
  if (obj.contains("stem_channels")) {
    out->stem_channels = obj.at("stem_channels").get<std::size_t>();
  }
  if (obj.contains("stage_channels")) {
    out->stage_channels = obj.at("stage_channels").get<std::vector<std::size_t>>();
  }
  if (obj.contains("out_channels")) {
    out->out_channels = obj.at("out_channels").get<std::size_t>();
  }
}

void parse_pointwise(const json& obj, PointwiseMlpConfig* out) {
  check_keys(obj, {"hidden", "out_channels"}, "pointwise");
  if (obj.contains("hidden")) {
    out->hidden = obj.at("hidden").get<std::vector<std::size_t>>();
  }
  if (obj.contains("out_channels")) {
    out->out_channels = obj.at("out_channels").get<std::size_t>();
  }
}

void parse_augment(const json& obj, AugmentParams* out) {
  check_keys(obj, {"enabled", "flip_prob", "rot_min", "rot_max", "scale_min",
                   "scale_max"},
             "augment");
  if (obj.contains("enabled")) out->enabled = obj.at("enabled").get<bool>();
  if (obj.contains("flip_prob")) out->flip_prob = obj.at("flip_prob").get<double>();
  if (obj.contains("rot_min")) out->rot_min = obj.at("rot_min").get<double>();
  if (obj.contains("rot_max")) out->rot_max = obj.at("rot_max").get<double>();
  if (obj.contains("scale_min")) out->scale_min = obj.at("scale_min").get<double>();
  if (obj.contains("scale_max")) out->scale_max = obj.at("scale_max").get<double>();
}

void parse_superpoints(const json& obj, SuperpointParams* out) {
  check_keys(obj, {"k", "color_weight", "threshold", "min_size"}, "superpoints");
  if (obj.contains("k")) out->k = obj.at("k").get<std::size_t>();
  if (obj.contains("color_weight")) {
    out->color_weight = obj.at("color_weight").get<double>();
  }
  if (obj.contains("threshold")) out->threshold = obj.at("threshold").get<double>();
  if (obj.contains("min_size")) out->min_size = obj.at("min_size").get<std::size_t>();
}

DatasetConfig parse_dataset(const json& obj) {
  check_keys(obj, {"dataset_id", "vocabulary", "train", "val", "weight"}, "datasets[]");
  DatasetConfig out;
  out.dataset_id = obj.at("dataset_id").get<std::string>();
  out.vocabulary = obj.at("vocabulary").get<std::string>();
  out.train = obj.at("train").get<std::vector<std::string>>();
  if (obj.contains("val")) out.val = obj.at("val").get<std::vector<std::string>>();
  if (obj.contains("weight")) out.weight = obj.at("weight").get<double>();
  return out;
}

std::uint64_t seed_from_env(const char* text) {
  const std::string value(text);
  if (value.empty()) fail("config: UNIDET_SEED is empty");
  for (char c : value) {
    if (!std::isdigit(static_cast<unsigned char>(c))) {
      fail("config: UNIDET_SEED '" + value + "' is not an unsigned integer");
    }
  }
  errno = 0;
  char* end = nullptr;
  const unsigned long long parsed = std::strtoull(value.c_str(), &end, 10);
  if (errno != 0 || end != value.c_str() + value.size()) {
    fail("config: UNIDET_SEED '" + value + "' is out of range");
  }
  return parsed;
}

}  // namespace

TrainConfig TrainConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("config: cannot open '" + path + "'");
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    fail("config: '" + path + "' is not valid JSON: " + std::string(e.what()));
  }
  TrainConfig config;
  try {
    check_keys(doc,
               {"scheme", "label_mode", "lr", "weight_decay", "batch_size", "epochs",
                "poly_power", "seed", "lambda", "beta", "candidates", "matching",
                "backbone", "head_depth", "encoder", "unet", "pointwise", "voxel_size",
                "point_limit", "score_threshold", "nms_iou", "augment", "superpoints",
                "init_checkpoint", "synonyms", "datasets"},
               "the top level");
    if (doc.contains("scheme")) config.scheme = doc.at("scheme").get<std::string>();
    if (doc.contains("label_mode")) {
      config.label_mode = doc.at("label_mode").get<std::string>();
    }
    if (doc.contains("lr")) config.lr = doc.at("lr").get<double>();
    if (doc.contains("weight_decay")) {
      config.weight_decay = doc.at("weight_decay").get<double>();
    }
    if (doc.contains("batch_size")) {
      config.batch_size = doc.at("batch_size").get<std::size_t>();
    }
    if (doc.contains("epochs")) config.epochs = doc.at("epochs").get<std::size_t>();
    if (doc.contains("poly_power")) {
      config.poly_power = doc.at("poly_power").get<double>();
    }
    if (doc.contains("seed")) config.seed = doc.at("seed").get<std::uint64_t>();
    if (doc.contains("lambda")) config.lambda = doc.at("lambda").get<double>();
    if (doc.contains("beta")) config.beta = doc.at("beta").get<double>();
    if (doc.contains("candidates")) {
      config.candidates = doc.at("candidates").get<std::size_t>();
    }
    if (doc.contains("matching")) config.matching = doc.at("matching").get<std::string>();
    if (doc.contains("backbone")) config.backbone = doc.at("backbone").get<std::string>();
    if (doc.contains("head_depth")) {
      config.head_depth = doc.at("head_depth").get<std::size_t>();
    }
    if (doc.contains("encoder")) parse_encoder(doc.at("encoder"), &config.encoder);
    if (doc.contains("unet")) parse_unet(doc.at("unet"), &config.unet);
    if (doc.contains("pointwise")) {
      parse_pointwise(doc.at("pointwise"), &config.pointwise);
    }
    if (doc.contains("voxel_size")) {
      config.voxel_size = doc.at("voxel_size").get<double>();
    }
    if (doc.contains("point_limit")) {
      config.point_limit = doc.at("point_limit").get<std::size_t>();
    }
    if (doc.contains("score_threshold")) {
      config.score_threshold = doc.at("score_threshold").get<double>();
    }
    if (doc.contains("nms_iou")) config.nms_iou = doc.at("nms_iou").get<double>();
    if (doc.contains("augment")) parse_augment(doc.at("augment"), &config.augment);
    if (doc.contains("superpoints")) {
      parse_superpoints(doc.at("superpoints"), &config.superpoints);
    }
    if (doc.contains("init_checkpoint")) {
      config.init_checkpoint = doc.at("init_checkpoint").get<std::string>();
    }
    if (doc.contains("synonyms")) config.synonyms = doc.at("synonyms").get<std::string>();
    for (const json& entry : doc.at("datasets")) {
      config.datasets.push_back(parse_dataset(entry));
    }
  } catch (const json::exception& e) {
    fail("config: '" + path + "': " + std::string(e.what()));
  }
  if (const char* env = std::getenv("UNIDET_SEED")) config.seed = seed_from_env(env);
  validate_train_config(config);
  return config;
}

void validate_train_config(const TrainConfig& config) {
  auto bad = [](const std::string& msg) { fail("config: " + msg); };
  if (config.scheme != "from_scratch" && config.scheme != "fine_tune" &&
      config.scheme != "joint") {
    bad("unknown scheme '" + config.scheme + "'");
  }
  const LabelMode mode = parse_label_mode(config.label_mode);
  if (config.matching != "disentangled" && config.matching != "hungarian") {
    bad("unknown matching '" + config.matching + "'");
  }
  if (config.backbone != "unet" && config.backbone != "pointwise") {
    bad("unknown backbone '" + config.backbone + "'");
  }
  if (!(config.lr > 0.0)) bad("lr must be positive");
  if (config.weight_decay < 0.0) bad("weight_decay must be non-negative");
  if (config.batch_size == 0) bad("batch_size must be positive");
  if (config.epochs == 0) bad("epochs must be positive");
  if (config.poly_power < 0.0) bad("poly_power must be non-negative");
  if (config.lambda < 0.0) bad("lambda must be non-negative");
  if (config.beta < 0.0) bad("beta must be non-negative");
  if (config.candidates == 0) bad("candidates must be positive");
  if (config.head_depth == 0) bad("head_depth must be positive");
  validate_encoder_config(config.encoder);
  if (config.backbone == "unet") {
    if (config.unet.in_channels != 6) bad("unet backbone expects 6 input channels");
    if (config.encoder.model_dim != config.unet.out_channels) {
      bad("encoder model_dim must match the unet output width");
    }
  } else {
    if (config.pointwise.in_channels != 6) {
      bad("pointwise backbone expects 6 input channels");
    }
    if (config.encoder.model_dim != config.pointwise.out_channels) {
      bad("encoder model_dim must match the pointwise output width");
    }
  }
  if (!(config.voxel_size > 0.0)) bad("voxel_size must be positive");
  if (config.point_limit == 0) bad("point_limit must be positive");
  if (config.score_threshold < 0.0 || config.score_threshold >= 1.0) {
    bad("score_threshold must be in [0, 1)");
  }
  if (!(config.nms_iou > 0.0) || config.nms_iou > 1.0) {
    bad("nms_iou must be in (0, 1]");
  }
  if (config.augment.flip_prob < 0.0 || config.augment.flip_prob > 1.0) {
    bad("augment flip_prob must be in [0, 1]");
  }
  if (config.augment.rot_min > config.augment.rot_max) {
    bad("augment rotation range is inverted");
  }
  if (!(config.augment.scale_min > 0.0) ||
      config.augment.scale_min > config.augment.scale_max) {
    bad("augment scale range is invalid");
  }
  if (config.superpoints.k == 0) bad("superpoints k must be positive");
  if (config.superpoints.color_weight < 0.0) {
    bad("superpoints color_weight must be non-negative");
  }
  if (!(config.superpoints.threshold > 0.0)) {
    bad("superpoints threshold must be positive");
  }
  if (config.superpoints.min_size == 0) bad("superpoints min_size must be positive");
  if (config.scheme == "fine_tune" && config.init_checkpoint.empty()) {
    bad("fine_tune needs an init_checkpoint");
  }
  if (config.datasets.empty()) bad("at least one dataset is required");
  if (mode == LabelMode::kSeparate && config.datasets.size() != 1) {
    bad("separate label mode trains one dataset at a time");
  }
  for (std::size_t i = 0; i < config.datasets.size(); ++i) {
    const DatasetConfig& dataset = config.datasets[i];
    if (dataset.dataset_id.empty()) bad("dataset with an empty id");
    for (std::size_t k = 0; k < i; ++k) {
      if (config.datasets[k].dataset_id == dataset.dataset_id) {
        bad("duplicate dataset id '" + dataset.dataset_id + "'");
      }
    }
    if (dataset.vocabulary.empty()) {
      bad("dataset '" + dataset.dataset_id + "' has no vocabulary path");
    }
    if (dataset.train.empty()) {
      bad("dataset '" + dataset.dataset_id + "' has no train entries");
    }
    if (dataset.weight < 0.0) {
      bad("dataset '" + dataset.dataset_id + "' has a negative weight");
    }
  }
}

DetectionModel build_model(const TrainConfig& config, const LabelSpace& labels,
                           const SynonymTable& synonyms, Rng& rng) {
  if (labels.size() == 0) fail("build_model: empty label space");
  DetectionModel model;
  model.backbone = config.backbone;
  model.voxel_size = config.voxel_size;
  model.superpoints = config.superpoints;
  model.labels = labels;
  model.synonyms = synonyms;
  std::size_t feature_dim = 0;
  if (config.backbone == "unet") {
    model.unet = make_sparse_unet(config.unet, rng);
    feature_dim = config.unet.out_channels;
  } else if (config.backbone == "pointwise") {
    model.mlp = make_pointwise_mlp(config.pointwise, rng);
    feature_dim = config.pointwise.out_channels;
  } else {
    fail("build_model: unknown backbone '" + config.backbone + "'");
  }
  if (config.encoder.model_dim != feature_dim) {
    fail("build_model: encoder model_dim " + std::to_string(config.encoder.model_dim) +
         " does not match the backbone output width " + std::to_string(feature_dim));
  }
  model.encoder = make_encoder(config.encoder, rng);
  HeadConfig heads;
  heads.in_channels = config.encoder.model_dim;
  heads.num_classes = labels.size();
  heads.depth = config.head_depth;
  model.heads = make_heads(heads, rng);
  return model;
}

std::vector<std::pair<std::string, Tensor>> model_parameters(
    const DetectionModel& model) {
  std::vector<std::pair<std::string, Tensor>> out;
  if (model.backbone == "unet") {
    for (const auto& [name, tensor] : unet_parameters(model.unet)) {
      out.emplace_back("backbone." + name, tensor);
    }
  } else {
    for (const auto& [name, tensor] : pointwise_parameters(model.mlp)) {
      out.emplace_back("backbone." + name, tensor);
    }
  }
  for (const auto& [name, tensor] : encoder_parameters(model.encoder)) {
    out.emplace_back("encoder." + name, tensor);
  }
  for (const auto& [name, tensor] : head_parameters(model.heads)) {
    out.emplace_back(name, tensor);
  }
  return out;
}

namespace {

json model_to_json(const DetectionModel& model) {
  json labels;
  labels["mode"] = label_mode_name(model.labels.mode);
  labels["classes"] = model.labels.classes;
  json datasets = json::array();
  for (const LabelSpace::DatasetEntry& entry : model.labels.datasets) {
    datasets.push_back({{"dataset_id", entry.dataset_id},
                        {"local_classes", entry.local_classes},
                        {"to_global", entry.to_global}});
  }
  labels["datasets"] = std::move(datasets);
  labels["note"] = model.labels.note;

  json synonyms = json::array();
  for (const auto& [from, to] : model.synonyms.entries()) {
    synonyms.push_back({{"from", from}, {"to", to}});
  }

  const EncoderConfig& enc = model.encoder.config;
  json doc;
  doc["backbone"] = model.backbone;
  doc["voxel_size"] = model.voxel_size;
  doc["superpoints"] = {{"k", model.superpoints.k},
                        {"color_weight", model.superpoints.color_weight},
                        {"threshold", model.superpoints.threshold},
                        {"min_size", model.superpoints.min_size}};
  doc["encoder"] = {{"layers", enc.layers},
                    {"heads", enc.heads},
                    {"model_dim", enc.model_dim},
                    {"ffn_dim", enc.ffn_dim},
                    {"positional_encoding", enc.use_positional_encoding}};
  doc["head_depth"] = model.heads.config.depth;
  doc["labels"] = std::move(labels);
  doc["synonyms"] = std::move(synonyms);
  if (model.backbone == "unet") {
    doc["unet"] = {{"in_channels", model.unet.config.in_channels},
                   {"stem_channels", model.unet.config.stem_channels},
                   {"stage_channels", model.unet.config.stage_channels},
                   {"out_channels", model.unet.config.out_channels}};
  } else {
    doc["pointwise"] = {{"in_channels", model.mlp.config.in_channels},
                        {"hidden", model.mlp.config.hidden},
                        {"out_channels", model.mlp.config.out_channels}};
  }
  return doc;
}

json load_checkpoint_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("checkpoint: cannot open '" + path + "'");
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    fail("checkpoint: '" + path + "' is not valid JSON: " + std::string(e.what()));
  }
  check_keys(doc, {"format", "model", "params"}, "the checkpoint");
  if (!doc.contains("format") || !doc.at("format").is_number_integer() ||
      doc.at("format").get<int>() != 1) {
    fail("checkpoint: '" + path + "' has an unsupported format");
  }
  return doc;
}

void copy_params_into(const json& params, const std::string& path,
                      std::vector<std::pair<std::string, Tensor>>& targets) {
  if (params.size() != targets.size()) {
    fail("checkpoint: '" + path + "' holds " + std::to_string(params.size()) +
         " parameters, the model needs " + std::to_string(targets.size()));
  }
  for (auto& [name, tensor] : targets) {
    if (!params.contains(name)) {
      fail("checkpoint: '" + path + "' is missing parameter '" + name + "'");
    }
    const json& entry = params.at(name);
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    if (shape != tensor.shape()) {
      fail("checkpoint: parameter '" + name + "' has a mismatched shape");
    }
    const auto data = entry.at("data").get<std::vector<double>>();
    if (data.size() != tensor.numel()) {
      fail("checkpoint: parameter '" + name + "' has a mismatched length");
    }
    std::copy(data.begin(), data.end(), tensor.data());
  }
}

}  // namespace

void save_checkpoint(const DetectionModel& model, const std::string& path) {
  json params = json::object();
  for (const auto& [name, tensor] : model_parameters(model)) {
    params[name] = {{"shape", tensor.shape()},
                    {"data", std::vector<double>(tensor.data(),
                                                 tensor.data() + tensor.numel())}};
  }
  json doc;
  doc["format"] = 1;
  doc["model"] = model_to_json(model);
  doc["params"] = std::move(params);
  std::ofstream out(path);
  if (!out) fail("checkpoint: cannot write '" + path + "'");
  out << doc.dump() << "\n";
  if (!out) fail("checkpoint: failed writing '" + path + "'");
}

DetectionModel load_checkpoint(const std::string& path) {
  const json doc = load_checkpoint_json(path);
  DetectionModel model;
  try {
    const json& m = doc.at("model");
    check_keys(m,
               {"backbone", "voxel_size", "superpoints", "encoder", "head_depth",
                "labels", "synonyms", "unet", "pointwise"},
               "the checkpoint model");
    model.backbone = m.at("backbone").get<std::string>();
    model.voxel_size = m.at("voxel_size").get<double>();
    const json& sp = m.at("superpoints");
    model.superpoints.k = sp.at("k").get<std::size_t>();
    model.superpoints.color_weight = sp.at("color_weight").get<double>();
    model.superpoints.threshold = sp.at("threshold").get<double>();
    model.superpoints.min_size = sp.at("min_size").get<std::size_t>();

    const json& lb = m.at("labels");
    model.labels.mode = parse_label_mode(lb.at("mode").get<std::string>());
    model.labels.classes = lb.at("classes").get<std::vector<std::string>>();
    for (const json& entry : lb.at("datasets")) {
      LabelSpace::DatasetEntry dataset;
      dataset.dataset_id = entry.at("dataset_id").get<std::string>();
      dataset.local_classes = entry.at("local_classes").get<std::vector<std::string>>();
      dataset.to_global = entry.at("to_global").get<std::vector<int>>();
      model.labels.datasets.push_back(std::move(dataset));
    }
    model.labels.note = lb.at("note").get<std::string>();

    std::vector<std::pair<std::string, std::string>> pairs;
    for (const json& entry : m.at("synonyms")) {
      pairs.emplace_back(entry.at("from").get<std::string>(),
                         entry.at("to").get<std::string>());
    }
    model.synonyms = SynonymTable::from_pairs(pairs);

    const json& enc = m.at("encoder");
    EncoderConfig encoder;
    encoder.layers = enc.at("layers").get<std::size_t>();
    encoder.heads = enc.at("heads").get<std::size_t>();
    encoder.model_dim = enc.at("model_dim").get<std::size_t>();
    encoder.ffn_dim = enc.at("ffn_dim").get<std::size_t>();
    encoder.use_positional_encoding = enc.at("positional_encoding").get<bool>();

    Rng rng(0);
    if (model.backbone == "unet") {
      const json& unet = m.at("unet");
      UnetConfig cfg;
      cfg.in_channels = unet.at("in_channels").get<std::size_t>();
      cfg.stem_channels = unet.at("stem_channels").get<std::size_t>();
      cfg.stage_channels = unet.at("stage_channels").get<std::vector<std::size_t>>();
      cfg.out_channels = unet.at("out_channels").get<std::size_t>();
      model.unet = make_sparse_unet(cfg, rng);
    } else if (model.backbone == "pointwise") {
      const json& mlp = m.at("pointwise");
      PointwiseMlpConfig cfg;
      cfg.in_channels = mlp.at("in_channels").get<std::size_t>();
      cfg.hidden = mlp.at("hidden").get<std::vector<std::size_t>>();
      cfg.out_channels = mlp.at("out_channels").get<std::size_t>();
      model.mlp = make_pointwise_mlp(cfg, rng);
    } else {
      fail("checkpoint: unknown backbone '" + model.backbone + "'");
    }
    model.encoder = make_encoder(encoder, rng);
    HeadConfig heads;
    heads.in_channels = encoder.model_dim;
    heads.num_classes = model.labels.size();
    heads.depth = m.at("head_depth").get<std::size_t>();
    model.heads = make_heads(heads, rng);
  } catch (const json::exception& e) {
    fail("checkpoint: '" + path + "': " + std::string(e.what()));
  }
  auto params = model_parameters(model);
  copy_params_into(doc.at("params"), path, params);
  return model;
}

std::size_t load_matching_parameters(DetectionModel& model, const std::string& path) {
  const json doc = load_checkpoint_json(path);
  const json& params = doc.at("params");
  std::size_t copied = 0;
  auto targets = model_parameters(model);
  for (auto& [name, tensor] : targets) {
    if (!params.contains(name)) continue;
    const json& entry = params.at(name);
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    if (shape != tensor.shape()) continue;
    const auto data = entry.at("data").get<std::vector<double>>();
    if (data.size() != tensor.numel()) {
      fail("checkpoint: parameter '" + name + "' has a mismatched length");
    }
    std::copy(data.begin(), data.end(), tensor.data());
    ++copied;
  }
  return copied;
}

std::vector<std::string> expand_scene_paths(const std::vector<std::string>& entries) {
  std::vector<std::string> out;
  for (const std::string& entry : entries) {
    if (fs::is_directory(entry)) {
      std::vector<std::string> found;
      for (const auto& item : fs::directory_iterator(entry)) {
        if (!item.is_regular_file()) continue;
        const std::string name = item.path().filename().string();
        static const std::string kSuffix = ".scene.jsonl";
        if (name.size() > kSuffix.size() &&
            name.compare(name.size() - kSuffix.size(), kSuffix.size(), kSuffix) == 0) {
          found.push_back(item.path().string());
        }
      }
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else {
      out.push_back(entry);
    }
  }
  return out;
}

namespace {

std::vector<LoadedScene> load_scene_pool(const std::vector<std::string>& entries,
                                         const std::string& dataset_id,
                                         const SuperpointParams& params) {
  std::vector<LoadedScene> out;
  for (const std::string& path : expand_scene_paths(entries)) {
    LoadedScene entry;
    entry.path = path;
    try {
      entry.scene = load_scene(path);
    } catch (const std::exception& e) {
      std::cerr << "warning: skipping '" << path << "': " << e.what() << "\n";
      continue;
    }
    if (entry.scene.dataset_id != dataset_id) {
      fail("scene '" + path + "' belongs to dataset '" + entry.scene.dataset_id +
           "', expected '" + dataset_id + "'");
    }
    try {
      entry.superpoints = compute_superpoints(entry.scene, params);
    } catch (const std::exception& e) {
      std::cerr << "warning: skipping '" << path << "': " << e.what() << "\n";
      continue;
    }
    out.push_back(std::move(entry));
  }
  return out;
}

}  // namespace

LoadedMixture load_mixture(const TrainConfig& config) {
  validate_train_config(config);
  LoadedMixture mixture;
  for (const DatasetConfig& dataset : config.datasets) {
    LoadedDataset loaded;
    loaded.config = dataset;
    loaded.vocabulary = load_vocabulary(dataset.vocabulary);
    if (loaded.vocabulary.dataset_id != dataset.dataset_id) {
      fail("load_mixture: vocabulary '" + dataset.vocabulary + "' describes dataset '" +
           loaded.vocabulary.dataset_id + "', expected '" + dataset.dataset_id + "'");
    }
    loaded.train = load_scene_pool(dataset.train, dataset.dataset_id,
                                   config.superpoints);
    loaded.val = load_scene_pool(dataset.val, dataset.dataset_id, config.superpoints);
    if (loaded.train.empty()) {
      fail("load_mixture: dataset '" + dataset.dataset_id +
           "' has no usable training scenes");
    }
    loaded.weight =
        dataset.weight > 0.0 ? dataset.weight : static_cast<double>(loaded.train.size());
    mixture.datasets.push_back(std::move(loaded));
  }
  return mixture;
}

namespace {

struct QueryForward {
  Tensor encoded;    // M x model_dim
  Tensor logits;     // M x (classes + 1)
  Tensor encodings;  // M x 8
  std::vector<Vec3> refs;
};

QueryForward forward_queries(const DetectionModel& model, const Scene& scene,
                             const SuperpointPartition& partition) {
  const Tensor point_features =
      model.backbone == "unet"
          ? unet_forward(model.unet, voxelize(scene, model.voxel_size))
          : pointwise_mlp_forward(model.mlp, scene);
  QuerySet queries;
  queries.features = pool_features(point_features, partition);
  queries.superpoint.resize(partition.count);
  std::iota(queries.superpoint.begin(), queries.superpoint.end(), 0);
  queries.centers = partition.centers;
  QueryForward out;
  out.encoded = encode(model.encoder, queries);
  out.logits = class_logits(model.heads, out.encoded);
  out.encodings = box_encodings(model.heads, out.encoded);
  out.refs = partition.centers;
  return out;
}

// Restricts a cached point-to-superpoint assignment to the kept rows and
// relabels to contiguous ids in first-appearance order.
std::vector<int> subset_assignment(const std::vector<int>& assignment,
                                   std::size_t count, const std::vector<int>& kept) {
  std::vector<int> relabel(count, -1);
  std::vector<int> out;
  out.reserve(kept.size());
  int next = 0;
  for (int row : kept) {
    const int old_label = assignment[static_cast<std::size_t>(row)];
    if (relabel[static_cast<std::size_t>(old_label)] < 0) {
      relabel[static_cast<std::size_t>(old_label)] = next++;
    }
    out.push_back(relabel[static_cast<std::size_t>(old_label)]);
  }
  return out;
}

Tensor scene_loss(const DetectionModel& model, const TrainConfig& config,
                  const LoadedScene& entry, Rng& rng) {
  const CapResult capped = cap_points(entry.scene, config.point_limit, rng);
  const Scene scene = augment(capped.scene, config.augment, rng);
  const SuperpointPartition partition = partition_from_assignment(
      subset_assignment(entry.superpoints.assignment, entry.superpoints.count,
                        capped.kept),
      scene);
  const QueryForward fwd = forward_queries(model, scene, partition);
  std::vector<Box3D> gt_boxes;
  std::vector<int> gt_classes;
  for (const LabeledBox& labeled : scene.boxes) {
    gt_boxes.push_back(labeled.box);
    gt_classes.push_back(
        model.labels.project(scene.dataset_id, labeled.class_name, model.synonyms));
  }
  Matching matching;
  if (!gt_boxes.empty()) {
    const std::vector<Proposal> proposals =
        make_proposals(model.heads, fwd.encoded, fwd.refs);
    if (config.matching == "hungarian") {
      std::vector<double> dense(proposals.size() * gt_boxes.size());
      for (std::size_t i = 0; i < proposals.size(); ++i) {
        for (std::size_t k = 0; k < gt_boxes.size(); ++k) {
          dense[i * gt_boxes.size() + k] =
              match_cost(proposals[i].class_scores, gt_classes[k], proposals[i].box,
                         gt_boxes[k], config.lambda);
        }
      }
      matching = match_hungarian(dense, proposals.size(), gt_boxes.size());
    } else {
      matching = match_disentangled(build_masked_costs(
          proposals, gt_boxes, gt_classes, partition, config.candidates,
          config.lambda));
    }
  }
  return detection_loss(matching, fwd.logits, fwd.encodings, fwd.refs, gt_boxes,
                        gt_classes, config.beta)
      .total;
}

}  // namespace

TrainResult train(const LoadedMixture& mixture, const TrainConfig& config) {
  validate_train_config(config);
  if (mixture.datasets.empty()) fail("train: empty mixture");
  std::vector<Vocabulary> vocabularies;
  std::vector<double> weights;
  for (const LoadedDataset& dataset : mixture.datasets) {
    if (dataset.train.empty()) {
      fail("train: dataset '" + dataset.config.dataset_id + "' has no training scenes");
    }
    vocabularies.push_back(dataset.vocabulary);
    weights.push_back(dataset.weight > 0.0
                          ? dataset.weight
                          : static_cast<double>(dataset.train.size()));
  }
  const SynonymTable synonyms = config.synonyms.empty()
                                    ? SynonymTable()
                                    : SynonymTable::load(config.synonyms);
  const LabelSpace labels =
      build_label_space(vocabularies, parse_label_mode(config.label_mode), synonyms);
  Rng root(config.seed);
  Rng init_rng = root.fork();
  Rng sample_rng = root.fork();
  TrainResult result;
  result.model = build_model(config, labels, synonyms, init_rng);
  if (!config.init_checkpoint.empty()) {
    load_matching_parameters(result.model, config.init_checkpoint);
  }
  auto params = model_parameters(result.model);
  AdamW optimizer;
  std::size_t pool = 0;
  for (const LoadedDataset& dataset : mixture.datasets) pool += dataset.train.size();
  const std::size_t steps_per_epoch =
      (pool + config.batch_size - 1) / config.batch_size;
  result.losses.reserve(config.epochs);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_at(epoch, config.epochs, config.lr, config.poly_power);
    double epoch_loss = 0.0;
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      zero_grads(params);
      Tensor batch;
      for (std::size_t b = 0; b < config.batch_size; ++b) {
        const LoadedDataset& dataset =
            mixture.datasets[sample_rng.weighted_index(weights)];
        const LoadedScene& entry = dataset.train[sample_rng.index(dataset.train.size())];
        const Tensor loss = scene_loss(result.model, config, entry, sample_rng);
        batch = b == 0 ? loss : add(batch, loss);
      }
      batch = scale(batch, 1.0 / static_cast<double>(config.batch_size));
      backward(batch);
      optimizer.step(params, lr, config.weight_decay);
      epoch_loss += batch.value();
    }
    result.losses.push_back(epoch_loss / static_cast<double>(steps_per_epoch));
  }
  return result;
}

TrainResult train(const TrainConfig& config) {
  return train(load_mixture(config), config);
}

std::vector<Detection> infer_scene(const DetectionModel& model, const Scene& scene,
                                   double score_threshold, double nms_iou) {
  if (score_threshold < 0.0 || score_threshold >= 1.0) {
    fail("infer_scene: score_threshold must be in [0, 1)");
  }
  if (!(nms_iou > 0.0) || nms_iou > 1.0) fail("infer_scene: nms_iou must be in (0, 1]");
  validate_scene(scene);
  const SuperpointPartition partition = compute_superpoints(scene, model.superpoints);
  const QueryForward fwd = forward_queries(model, scene, partition);
  const std::vector<Box3D> boxes = decode_boxes(fwd.encodings, fwd.refs);
  const std::size_t rows = fwd.logits.rows();
  const std::size_t cols = fwd.logits.cols();
  const double* logits = fwd.logits.data();
  std::vector<ScoredBox> scored;
  for (std::size_t i = 0; i < rows; ++i) {
    const Box3D& box = boxes[i];
    const bool usable = std::isfinite(box.cx) && std::isfinite(box.cy) &&
                        std::isfinite(box.cz) && std::isfinite(box.yaw) &&
                        box.sx > 0.0 && std::isfinite(box.sx) && box.sy > 0.0 &&
                        std::isfinite(box.sy) && box.sz > 0.0 && std::isfinite(box.sz);
    if (!usable) continue;  // the size encoding under- or overflowed
    const double* row = logits + i * cols;
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c) {
      if (row[c] > row[best]) best = c;
    }
    if (best + 1 == cols) continue;  // no-object wins this query
    double denom = 0.0;
    for (std::size_t c = 0; c < cols; ++c) denom += std::exp(row[c] - row[best]);
    const double score = 1.0 / denom;
    if (score < score_threshold) continue;
    scored.push_back({boxes[i], static_cast<int>(best), score});
  }
  std::vector<Detection> out;
  for (std::size_t index : nms(scored, nms_iou, false)) {
    out.push_back({scored[index].box, scored[index].class_id, scored[index].score});
  }
  return out;
}

EvalReport evaluate_model(const DetectionModel& model, const std::vector<Scene>& scenes,
                          double score_threshold, double nms_iou,
                          const std::vector<double>& thresholds) {
  std::vector<SceneEval> evals;
  evals.reserve(scenes.size());
  for (const Scene& scene : scenes) {
    SceneEval eval;
    eval.dataset_id = scene.dataset_id;
    eval.detections = infer_scene(model, scene, score_threshold, nms_iou);
    for (const LabeledBox& labeled : scene.boxes) {
      eval.gt_boxes.push_back(labeled.box);
      eval.gt_classes.push_back(
          model.labels.project(scene.dataset_id, labeled.class_name, model.synonyms));
    }
    evals.push_back(std::move(eval));
  }
  return evaluate(evals, model.labels, thresholds);
}

void save_detections(const std::vector<Detection>& detections,
                     const LabelSpace& labels, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail("save_detections: cannot write '" + path + "'");
  for (const Detection& detection : detections) {
    if (detection.class_id < 0 ||
        static_cast<std::size_t>(detection.class_id) >= labels.size()) {
      fail("save_detections: class " + std::to_string(detection.class_id) +
           " outside the label space");
    }
    const Box3D& box = detection.box;
    const json row = {
        {"center", {box.cx, box.cy, box.cz}},
        {"size", {box.sx, box.sy, box.sz}},
        {"yaw", box.yaw},
        {"class", labels.classes[static_cast<std::size_t>(detection.class_id)]},
        {"score", detection.score}};
    out << row.dump() << "\n";
  }
  if (!out) fail("save_detections: failed writing '" + path + "'");
}

std::string training_curve_csv(const std::vector<double>& losses,
                               const TrainConfig& config) {
  std::ostringstream out;
  out << "epoch,loss,lr\n";
  for (std::size_t epoch = 0; epoch < losses.size(); ++epoch) {
    out << epoch << "," << losses[epoch] << ","
        << lr_at(epoch, config.epochs, config.lr, config.poly_power) << "\n";
  }
  return out.str();
}

namespace {

std::vector<Scene> eval_scenes_of(const std::vector<const LoadedDataset*>& datasets) {
  std::vector<Scene> scenes;
  for (const LoadedDataset* dataset : datasets) {
    const std::vector<LoadedScene>& pool =
        dataset->val.empty() ? dataset->train : dataset->val;
    for (const LoadedScene& entry : pool) scenes.push_back(entry.scene);
  }
  return scenes;
}

AblationArm run_ablation_arm(const std::string& name, const TrainConfig& config,
                             const LoadedMixture& mixture,
                             const std::vector<Scene>& eval_scenes) {
  const TrainResult trained = train(mixture, config);
  AblationArm arm;
  arm.name = name;
  arm.report = evaluate_model(trained.model, eval_scenes, config.score_threshold,
                              config.nms_iou);
  for (const auto& [pname, tensor] : model_parameters(trained.model)) {
    if (pname.rfind("cls.", 0) == 0) arm.cls_parameters += tensor.numel();
  }
  arm.final_loss = trained.losses.back();
  return arm;
}

}  // namespace

AblationReport ablate(const std::string& suite, const TrainConfig& config) {
  AblationReport report;
  report.suite = suite;
  const LoadedMixture mixture = load_mixture(config);
  std::vector<const LoadedDataset*> all_datasets;
  for (const LoadedDataset& dataset : mixture.datasets) all_datasets.push_back(&dataset);
  const std::vector<Scene> all_eval = eval_scenes_of(all_datasets);

  if (suite == "layers") {
    for (std::size_t layers : {std::size_t{0}, std::size_t{1}, std::size_t{2},
                               std::size_t{4}, std::size_t{6}}) {
      TrainConfig arm = config;
      arm.encoder.layers = layers;
      report.arms.push_back(run_ablation_arm("layers=" + std::to_string(layers), arm,
                                             mixture, all_eval));
    }
  } else if (suite == "matching") {
    for (const char* matching : {"disentangled", "hungarian"}) {
      TrainConfig arm = config;
      arm.matching = matching;
      report.arms.push_back(run_ablation_arm(std::string("matching=") + matching, arm,
                                             mixture, all_eval));
    }
  } else if (suite == "pe") {
    for (bool enabled : {false, true}) {
      TrainConfig arm = config;
      arm.encoder.use_positional_encoding = enabled;
      report.arms.push_back(run_ablation_arm(enabled ? "pe=on" : "pe=off", arm,
                                             mixture, all_eval));
    }
  } else if (suite == "label_mode") {
    for (const char* mode : {"partitioned", "unified"}) {
      TrainConfig arm = config;
      arm.label_mode = mode;
      report.arms.push_back(run_ablation_arm(std::string("label_mode=") + mode, arm,
                                             mixture, all_eval));
    }
  } else if (suite == "scheme") {
    if (mixture.datasets.size() < 2) {
      fail("ablate: the scheme suite needs at least two datasets");
    }
    LoadedMixture target;
    target.datasets.push_back(mixture.datasets.front());
    LoadedMixture others;
    others.datasets.assign(mixture.datasets.begin() + 1, mixture.datasets.end());
    const std::vector<Scene> target_eval = eval_scenes_of({&mixture.datasets.front()});
    {
      TrainConfig arm = config;
      arm.scheme = "from_scratch";
      arm.init_checkpoint.clear();
      arm.datasets = {config.datasets.front()};
      report.arms.push_back(
          run_ablation_arm("scheme=from_scratch", arm, target, target_eval));
    }
    {
      TrainConfig pretrain = config;
      pretrain.scheme = "joint";
      pretrain.init_checkpoint.clear();
      pretrain.datasets.assign(config.datasets.begin() + 1, config.datasets.end());
      const TrainResult pretrained = train(others, pretrain);
      const std::string checkpoint =
          (fs::temp_directory_path() /
           ("unidet_pretrain_" + std::to_string(config.seed) + ".json"))
              .string();
      save_checkpoint(pretrained.model, checkpoint);
      TrainConfig arm = config;
      arm.scheme = "fine_tune";
      arm.init_checkpoint = checkpoint;
      arm.datasets = {config.datasets.front()};
      report.arms.push_back(
          run_ablation_arm("scheme=fine_tune", arm, target, target_eval));
      std::error_code ec;
      fs::remove(checkpoint, ec);
    }
    {
      TrainConfig arm = config;
      arm.scheme = "joint";
      arm.init_checkpoint.clear();
      report.arms.push_back(run_ablation_arm("scheme=joint", arm, mixture, target_eval));
    }
  } else {
    fail("ablate: unknown suite '" + suite + "'");
  }
  return report;
}

std::string ablation_csv(const AblationReport& report) {
  std::ostringstream out;
  out << "arm";
  const std::vector<double> thresholds =
      report.arms.empty() ? std::vector<double>{} : report.arms.front().report.thresholds;
  for (double t : thresholds) out << ",mAP@" << t;
  out << ",cls_parameters,final_loss\n";
  for (const AblationArm& arm : report.arms) {
    out << arm.name;
    for (double t : thresholds) out << "," << arm.report.map.at(t);
    out << "," << arm.cls_parameters << "," << arm.final_loss << "\n";
  }
  return out.str();
}

}  // namespace unidet
