#include "unidet/scene.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "unidet/random.hpp"

namespace unidet {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

constexpr int kSceneFormatVersion = 1;

double fract(double x) { return x - std::floor(x); }

// Distinct, reproducible color per class index (golden-ratio hue walk).
std::array<double, 3> class_color(std::size_t k) {
  const double h = fract(0.61803398875 * static_cast<double>(k) + 0.12);
  const double s = 0.65, v = 0.85;
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) r = c, g = x;
  else if (hp < 2) r = x, g = c;
  else if (hp < 3) g = c, b = x;
  else if (hp < 4) g = x, b = c;
  else if (hp < 5) r = x, b = c;
  else r = c, g = x;
  const double m = v - c;
  return {r + m, g + m, b + m};
}

std::array<double, 3> class_base_size(std::size_t k) {
  const double kd = static_cast<double>(k);
  return {0.5 + 0.35 * fract(kd * 0.357 + 0.11),
          0.5 + 0.35 * fract(kd * 0.769 + 0.31),
          0.6 + 0.5 * fract(kd * 0.213 + 0.71)};
}

}  // namespace

void validate_scene(const Scene& scene) {
  if (scene.points.empty()) fail("scene: must contain at least one point");
  for (std::size_t i = 0; i < scene.points.size(); ++i) {
    const auto& p = scene.points[i];
    for (int c = 0; c < 6; ++c) {
      if (!std::isfinite(p[c])) {
        fail("scene: non-finite value in point row " + std::to_string(i));
      }
    }
    for (int c = 3; c < 6; ++c) {
      if (p[c] < 0.0 || p[c] > 1.0) {
        fail("scene: color outside [0, 1] in point row " + std::to_string(i));
      }
    }
  }
  for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
    validate_box(scene.boxes[i].box);
    if (scene.boxes[i].class_name.empty()) {
      fail("scene: box " + std::to_string(i) + " has an empty class name");
    }
  }
}

void save_scene(const Scene& scene, const std::string& path) {
  validate_scene(scene);
  std::ofstream out(path);
  if (!out) fail("save_scene: cannot open '" + path + "' for writing");

  json header = {{"version", kSceneFormatVersion},
                 {"dataset_id", scene.dataset_id},
                 {"num_points", scene.points.size()}};
  out << header.dump() << "\n";

  json points = json::array();
  for (const auto& p : scene.points) {
    points.push_back(json::array({p[0], p[1], p[2], p[3], p[4], p[5]}));
  }
  out << json{{"points", std::move(points)}}.dump() << "\n";

  json boxes = json::array();
  for (const auto& lb : scene.boxes) {
    boxes.push_back({{"center", {lb.box.cx, lb.box.cy, lb.box.cz}},
                     {"size", {lb.box.sx, lb.box.sy, lb.box.sz}},
                     {"yaw", lb.box.yaw},
                     {"class", lb.class_name}});
  }
  out << json{{"boxes", std::move(boxes)}}.dump() << "\n";
  if (!out) fail("save_scene: write to '" + path + "' failed");
}

Scene load_scene(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("load_scene: cannot open '" + path + "'");
  std::string line;
  auto next_record = [&](const char* what) {
    while (std::getline(in, line)) {
      if (!line.empty()) return json::parse(line);
    }
    fail("load_scene: '" + path + "' is missing the " + what + " record");
  };

  const json header = next_record("header");
  if (!header.contains("version") || header["version"].get<int>() != kSceneFormatVersion) {
    fail("load_scene: '" + path + "' has an unsupported format version");
  }
  Scene scene;
  scene.dataset_id = header.at("dataset_id").get<std::string>();
  const auto declared = header.at("num_points").get<std::size_t>();

  const json points = next_record("points");
  const auto& rows = points.at("points");
  scene.points.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& row = rows[i];
    if (!row.is_array() || row.size() != 6) {
      fail("load_scene: point row " + std::to_string(i) + " must have 6 columns, got " +
           std::to_string(row.size()));
    }
    std::array<double, 6> p;
    for (int c = 0; c < 6; ++c) p[c] = row[c].get<double>();
    scene.points.push_back(p);
  }
  if (scene.points.size() != declared) {
    fail("load_scene: header declares " + std::to_string(declared) + " points but " +
         std::to_string(scene.points.size()) + " were found");
  }

  const json boxes = next_record("boxes");
  for (const auto& jb : boxes.at("boxes")) {
    LabeledBox lb;
    const auto& c = jb.at("center");
    const auto& s = jb.at("size");
    lb.box = {c.at(0), c.at(1), c.at(2), s.at(0), s.at(1), s.at(2), jb.at("yaw")};
    lb.class_name = jb.at("class").get<std::string>();
    scene.boxes.push_back(std::move(lb));
  }

  validate_scene(scene);
  return scene;
}

CapResult cap_points(const Scene& scene, std::size_t limit, Rng& rng) {
  validate_scene(scene);
  if (limit == 0) fail("cap_points: limit must be positive");
  CapResult result;
  result.kept.resize(scene.points.size());
  std::iota(result.kept.begin(), result.kept.end(), 0);
  if (scene.points.size() > limit) {
    // Partial Fisher-Yates: the first `limit` slots end up a uniform sample.
    for (std::size_t i = 0; i < limit; ++i) {
      std::swap(result.kept[i], result.kept[i + rng.index(result.kept.size() - i)]);
    }
    result.kept.resize(limit);
    std::sort(result.kept.begin(), result.kept.end());
  }
  result.scene.dataset_id = scene.dataset_id;
  result.scene.boxes = scene.boxes;
  result.scene.points.reserve(result.kept.size());
  for (int idx : result.kept) result.scene.points.push_back(scene.points[idx]);
  return result;
}

Scene augment(const Scene& scene, const AugmentParams& params, Rng& rng) {
  validate_scene(scene);
  if (!params.enabled) return scene;
  if (params.rot_min > params.rot_max || params.scale_min > params.scale_max ||
      !(params.scale_min > 0.0)) {
    fail("augment: invalid parameter ranges");
  }
  const bool flip = rng.bernoulli(params.flip_prob);
  const double angle = rng.uniform(params.rot_min, params.rot_max);
  const double s = rng.uniform(params.scale_min, params.scale_max);
  const double c = std::cos(angle), sn = std::sin(angle);

  Scene out;
  out.dataset_id = scene.dataset_id;
  out.points.reserve(scene.points.size());
  for (auto p : scene.points) {
    if (flip) p[0] = -p[0];
    const double x = p[0] * c - p[1] * sn;
    const double y = p[0] * sn + p[1] * c;
    p[0] = x * s;
    p[1] = y * s;
    p[2] *= s;
    out.points.push_back(p);
  }
  out.boxes.reserve(scene.boxes.size());
  for (LabeledBox lb : scene.boxes) {
    Box3D& b = lb.box;
    if (flip) {
      b.cx = -b.cx;
      b.yaw = 3.14159265358979323846 - b.yaw;
    }
    const double x = b.cx * c - b.cy * sn;
    const double y = b.cx * sn + b.cy * c;
    b.cx = x * s;
    b.cy = y * s;
    b.cz *= s;
    b.sx *= s;
    b.sy *= s;
    b.sz *= s;
    b.yaw = std::remainder(b.yaw + angle, 2 * 3.14159265358979323846);
    out.boxes.push_back(std::move(lb));
  }
  return out;
}

VoxelGrid voxelize(const Scene& scene, double voxel_size) {
  validate_scene(scene);
  if (!(voxel_size > 0.0)) fail("voxelize: voxel size must be positive");
  const std::size_t n = scene.points.size();

  std::vector<std::array<std::int32_t, 3>> keys(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) {
      const double f = std::floor(scene.points[i][c] / voxel_size);
      if (f < -2147483648.0 || f > 2147483647.0) {
        fail("voxelize: point coordinate out of voxel index range");
      }
      keys[i][c] = static_cast<std::int32_t>(f);
    }
  }

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (keys[a] != keys[b]) return keys[a] < keys[b];
    return a < b;
  });

  VoxelGrid grid;
  grid.voxel_size = voxel_size;
  grid.point_to_voxel.assign(n, -1);
  grid.member_indices.reserve(n);
  for (std::size_t pos = 0; pos < n; ++pos) {
    const int i = order[pos];
    if (grid.coords.empty() || grid.coords.back() != keys[i]) {
      grid.member_offsets.push_back(static_cast<int>(grid.member_indices.size()));
      grid.coords.push_back(keys[i]);
    }
    grid.point_to_voxel[i] = static_cast<int>(grid.coords.size()) - 1;
    grid.member_indices.push_back(i);
  }
  grid.member_offsets.push_back(static_cast<int>(grid.member_indices.size()));

  const std::size_t k = grid.coords.size();
  grid.features.assign(k * 6, 0.0);
  for (std::size_t v = 0; v < k; ++v) {
    const int lo = grid.member_offsets[v], hi = grid.member_offsets[v + 1];
    for (int m = lo; m < hi; ++m) {
      const auto& p = scene.points[grid.member_indices[m]];
      for (int c = 0; c < 6; ++c) grid.features[v * 6 + c] += p[c];
    }
    const double inv = 1.0 / static_cast<double>(hi - lo);
    for (int c = 0; c < 6; ++c) grid.features[v * 6 + c] *= inv;
  }
  return grid;
}

SynthSpec SynthSpec::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("synth spec: cannot open '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail("synth spec: '" + path + "' is not valid JSON: " + e.what());
  }
  static const char* kKnown[] = {"dataset_id", "num_scenes", "seed",
                                 "room",       "classes",    "objects_per_scene",
                                 "points_per_object", "clutter_points", "rotated"};
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::find_if(std::begin(kKnown), std::end(kKnown),
                     [&](const char* k) { return key == k; }) == std::end(kKnown)) {
      fail("synth spec: unknown key '" + key + "'");
    }
  }
  SynthSpec spec;
  spec.dataset_id = j.at("dataset_id").get<std::string>();
  spec.num_scenes = j.at("num_scenes").get<std::size_t>();
  spec.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& name : j.at("classes")) spec.classes.push_back(name.get<std::string>());
  if (j.contains("room")) {
    for (int i = 0; i < 3; ++i) spec.room[i] = j["room"].at(i).get<double>();
  }
  if (j.contains("objects_per_scene")) {
    spec.objects_min = j["objects_per_scene"].at(0).get<std::size_t>();
    spec.objects_max = j["objects_per_scene"].at(1).get<std::size_t>();
  }
  if (j.contains("points_per_object")) {
    spec.points_per_object = j["points_per_object"].get<std::size_t>();
  }
  if (j.contains("clutter_points")) {
    spec.clutter_points = j["clutter_points"].get<std::size_t>();
  }
  if (j.contains("rotated")) spec.rotated = j["rotated"].get<bool>();
  if (spec.classes.empty()) fail("synth spec: classes must be non-empty");
  if (spec.objects_min == 0 || spec.objects_min > spec.objects_max) {
    fail("synth spec: objects_per_scene range is invalid");
  }
  if (spec.points_per_object == 0) fail("synth spec: points_per_object must be positive");
  return spec;
}

Scene generate_scene(const SynthSpec& spec, Rng& rng) {
  Scene scene;
  scene.dataset_id = spec.dataset_id;
  const double margin = 0.3;

  const std::size_t want =
      spec.objects_min + rng.index(spec.objects_max - spec.objects_min + 1);
  for (std::size_t obj = 0; obj < want; ++obj) {
    const std::size_t cls = rng.index(spec.classes.size());
    const auto base = class_base_size(cls);
    Box3D box;
    box.sx = base[0] * rng.uniform(0.85, 1.15);
    box.sy = base[1] * rng.uniform(0.85, 1.15);
    box.sz = base[2] * rng.uniform(0.85, 1.15);
    box.yaw = spec.rotated ? rng.uniform(-3.14159265358979323846, 3.14159265358979323846) : 0.0;

    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      const double reach = std::hypot(box.sx, box.sy) / 2;
      box.cx = rng.uniform(margin + reach, spec.room[0] - margin - reach);
      box.cy = rng.uniform(margin + reach, spec.room[1] - margin - reach);
      box.cz = box.sz / 2;
      placed = true;
      for (const auto& other : scene.boxes) {
        if (iou(box, other.box) > 0.0) {
          placed = false;
          break;
        }
      }
    }
    if (!placed) continue;  // crowded room, place fewer objects

    const auto color = class_color(cls);
    const double areas[3] = {box.sy * box.sz, box.sx * box.sz, box.sx * box.sy};
    const std::vector<double> face_weights = {areas[0], areas[0], areas[1],
                                              areas[1], areas[2], areas[2]};
    const double half[3] = {box.sx / 2, box.sy / 2, box.sz / 2};
    const double cos_yaw = std::cos(box.yaw), sin_yaw = std::sin(box.yaw);
    for (std::size_t p = 0; p < spec.points_per_object; ++p) {
      const std::size_t face = rng.weighted_index(face_weights);
      const int axis = static_cast<int>(face / 2);
      const double sign = (face % 2 == 0) ? -1.0 : 1.0;
      double local[3];
      for (int c = 0; c < 3; ++c) local[c] = rng.uniform(-half[c], half[c]);
      const double inset = rng.uniform(0.0, std::min(0.06, half[axis]));
      local[axis] = sign * (half[axis] - inset);

      std::array<double, 6> row;
      row[0] = box.cx + local[0] * cos_yaw - local[1] * sin_yaw;
      row[1] = box.cy + local[0] * sin_yaw + local[1] * cos_yaw;
      row[2] = box.cz + local[2];
      for (int c = 0; c < 3; ++c) {
        row[3 + c] = std::clamp(color[c] + rng.uniform(-0.05, 0.05), 0.0, 1.0);
      }
      scene.points.push_back(row);
    }
    scene.boxes.push_back({box, spec.classes[cls]});
  }

  for (std::size_t p = 0; p < spec.clutter_points; ++p) {
    std::array<double, 6> row;
    bool clear = false;
    for (int attempt = 0; attempt < 50 && !clear; ++attempt) {
      row[0] = rng.uniform(0.0, spec.room[0]);
      row[1] = rng.uniform(0.0, spec.room[1]);
      row[2] = rng.uniform(0.0, spec.room[2] * 0.25);
      clear = true;
      for (const auto& lb : scene.boxes) {
        if (point_in_box(lb.box, {row[0], row[1], row[2]}, 0.05)) {
          clear = false;
          break;
        }
      }
    }
    const double shade = rng.uniform(0.25, 0.5);
    row[3] = shade;
    row[4] = shade;
    row[5] = std::clamp(shade + rng.uniform(-0.03, 0.03), 0.0, 1.0);
    scene.points.push_back(row);
  }

  validate_scene(scene);
  return scene;
}

std::vector<std::string> generate_synthetic(const SynthSpec& spec,
                                            const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  Rng root(spec.seed);
  std::vector<std::string> paths;
  for (std::size_t i = 0; i < spec.num_scenes; ++i) {
    Rng scene_rng = root.fork();
    const Scene scene = generate_scene(spec, scene_rng);
    std::ostringstream name;
    name << spec.dataset_id << "_" << i << ".scene.jsonl";
    const std::string path = (fs::path(out_dir) / name.str()).string();
    save_scene(scene, path);
    paths.push_back(path);
  }

  json vocab = {{"dataset_id", spec.dataset_id}, {"classes", spec.classes}};
  const std::string vocab_path =
      (fs::path(out_dir) / (spec.dataset_id + ".vocab.json")).string();
  std::ofstream out(vocab_path);
  out << vocab.dump(2) << "\n";
  return paths;
}

}  // namespace unidet
