#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "unidet/pipeline.hpp"
#include "unidet/scene.hpp"

namespace {

namespace fs = std::filesystem;

void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << content;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

void print_map(const unidet::EvalReport& report) {
  for (const auto& [threshold, value] : report.map) {
    std::printf("mAP@%.2f %.4f\n", threshold, value);
  }
}

void run_train(const std::string& config_path, const std::string& resume,
               const std::string& out_dir) {
  unidet::TrainConfig config = unidet::TrainConfig::from_json_file(config_path);
  if (!resume.empty()) config.init_checkpoint = resume;
  unidet::TrainResult result = unidet::train(config);

  const fs::path checkpoint = fs::path(out_dir) / "checkpoint.json";
  const fs::path curve = fs::path(out_dir) / "train_curve.csv";
  fs::create_directories(out_dir);
  unidet::save_checkpoint(result.model, checkpoint.string());
  write_file(curve, unidet::training_curve_csv(result.losses, config));

  std::printf("epochs %zu  loss %.6f -> %.6f\n", result.losses.size(),
              result.losses.front(), result.losses.back());
  std::printf("checkpoint %s\n", checkpoint.string().c_str());
  std::printf("curve %s\n", curve.string().c_str());
}

void run_eval(const std::string& ckpt, const std::string& data, const std::string& out_dir,
              double score_threshold, double nms_iou) {
  unidet::DetectionModel model = unidet::load_checkpoint(ckpt);
  const std::vector<std::string> paths = unidet::expand_scene_paths({data});
  if (paths.empty()) throw std::runtime_error("no .scene.jsonl files under " + data);
  std::vector<unidet::Scene> scenes;
  scenes.reserve(paths.size());
  for (const std::string& path : paths) scenes.push_back(unidet::load_scene(path));

  unidet::EvalReport report =
      unidet::evaluate_model(model, scenes, score_threshold, nms_iou);
  const fs::path json_path = fs::path(out_dir) / "eval_report.json";
  const fs::path csv_path = fs::path(out_dir) / "eval_report.csv";
  write_file(json_path, unidet::eval_report_json(report, model.labels));
  write_file(csv_path, unidet::eval_report_csv(report, model.labels));

  std::printf("scenes %zu  seconds %.3f\n", scenes.size(), report.seconds);
  print_map(report);
  std::printf("report %s\n", json_path.string().c_str());
  std::printf("report %s\n", csv_path.string().c_str());
}

void run_infer(const std::string& ckpt, const std::string& scene_path,
               const std::string& out_path, double score_threshold, double nms_iou) {
  unidet::DetectionModel model = unidet::load_checkpoint(ckpt);
  unidet::Scene scene = unidet::load_scene(scene_path);
  const std::vector<unidet::Detection> detections =
      unidet::infer_scene(model, scene, score_threshold, nms_iou);
  unidet::save_detections(detections, model.labels, out_path);
  std::printf("detections %zu -> %s\n", detections.size(), out_path.c_str());
}

void run_ablate(const std::string& suite, const std::string& config_path,
                const std::string& out_dir) {
  unidet::TrainConfig config = unidet::TrainConfig::from_json_file(config_path);
  unidet::AblationReport report = unidet::ablate(suite, config);
  const fs::path csv_path = fs::path(out_dir) / ("ablation_" + suite + ".csv");
  write_file(csv_path, unidet::ablation_csv(report));

  for (const unidet::AblationArm& arm : report.arms) {
    std::printf("%-24s", arm.name.c_str());
    for (const auto& [threshold, value] : arm.report.map) {
      std::printf("  mAP@%.2f %.4f", threshold, value);
    }
    std::printf("  loss %.6f\n", arm.final_loss);
  }
  std::printf("table %s\n", csv_path.string().c_str());
}

void run_gen(const std::string& spec_path, const std::string& out_dir) {
  unidet::SynthSpec spec = unidet::SynthSpec::from_json_file(spec_path);
  const std::vector<std::string> paths = unidet::generate_synthetic(spec, out_dir);
  std::printf("scenes %zu -> %s\n", paths.size(), out_dir.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "unidet: multi-dataset indoor 3D object detection on point clouds.\n"
      "Shipped defaults: lr=1e-4, wd=0.05, poly 0.9 schedule, matching cost\n"
      "weight λ=0.25, classification loss weight β=0.5, j=3 candidate\n"
      "superpoints per box. UNIDET_SEED overrides the config seed."};
  app.require_subcommand(1);

  std::string config_path;
  std::string resume;
  std::string ckpt;
  std::string data;
  std::string scene_path;
  std::string out = ".";
  std::string suite;
  std::string spec_path;
  double score_threshold = 0.1;
  double nms_iou = 0.5;

  CLI::App* train = app.add_subcommand("train", "Train a detector from a JSON config");
  train->add_option("--config", config_path, "training config JSON")->required();
  train->add_option("--resume", resume, "checkpoint to start from");
  train->add_option("--out", out, "output directory (checkpoint + loss curve)");
  train->callback([&] { run_train(config_path, resume, out); });

  CLI::App* eval = app.add_subcommand("eval", "Score a checkpoint on a scene directory");
  eval->add_option("--ckpt", ckpt, "checkpoint JSON")->required();
  eval->add_option("--data", data, "directory of .scene.jsonl files")->required();
  eval->add_option("--out", out, "output directory (report JSON + CSV)");
  eval->add_option("--score-threshold", score_threshold, "detection score cutoff");
  eval->add_option("--nms-iou", nms_iou, "suppression IoU threshold");
  eval->callback([&] { run_eval(ckpt, data, out, score_threshold, nms_iou); });

  CLI::App* infer = app.add_subcommand("infer", "Detect objects in one scene");
  infer->add_option("--ckpt", ckpt, "checkpoint JSON")->required();
  infer->add_option("--scene", scene_path, "scene JSONL file")->required();
  infer->add_option("--out", out, "detections output path (.det.jsonl)")->required();
  infer->add_option("--score-threshold", score_threshold, "detection score cutoff");
  infer->add_option("--nms-iou", nms_iou, "suppression IoU threshold");
  infer->callback([&] { run_infer(ckpt, scene_path, out, score_threshold, nms_iou); });

  CLI::App* ablate = app.add_subcommand(
      "ablate", "Train and score one model per arm of a comparison suite");
  ablate->add_option("--suite", suite, "layers | matching | pe | label_mode | scheme")
      ->required();
  ablate->add_option("--config", config_path, "training config JSON")->required();
  ablate->add_option("--out", out, "output directory (comparison CSV)");
  ablate->callback([&] { run_ablate(suite, config_path, out); });

  CLI::App* gen = app.add_subcommand("gen-synthetic", "Generate a synthetic dataset");
  gen->add_option("--spec", spec_path, "room spec JSON")->required();
  gen->add_option("--out", out, "output directory")->required();
  gen->callback([&] { run_gen(spec_path, out); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "unidet: %s\n", e.what());
    return 1;
  }
  return 0;
}
