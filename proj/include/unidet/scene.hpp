#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "unidet/geometry.hpp"

namespace unidet {

class Rng;

struct LabeledBox {
  Box3D box;
  std::string class_name;
};

// One point cloud with annotations. Each point row is (x, y, z, r, g, b)
// with colors in [0, 1].
struct Scene {
  std::string dataset_id;
  std::vector<std::array<double, 6>> points;
  std::vector<LabeledBox> boxes;

  std::size_t num_points() const { return points.size(); }
};

// Throws std::invalid_argument when the scene is empty, has non-finite
// values, colors outside [0, 1], or invalid boxes.
void validate_scene(const Scene& scene);

// Three-record JSONL: a header with the dataset id and point count, the point
// rows, and the labeled boxes. Writing is byte-stable for identical scenes.
void save_scene(const Scene& scene, const std::string& path);
Scene load_scene(const std::string& path);

// Random subsample to at most `limit` points, preserving original order.
// `kept` maps new row -> original row and is the identity when nothing was
// dropped. Boxes are never touched.
struct CapResult {
  Scene scene;
  std::vector<int> kept;
};
CapResult cap_points(const Scene& scene, std::size_t limit, Rng& rng);

struct AugmentParams {
  bool enabled = false;
  double flip_prob = 0.5;
  double rot_min = -3.14159265358979323846;
  double rot_max = 3.14159265358979323846;
  double scale_min = 0.9;
  double scale_max = 1.1;
};

// Random mirror across the x = 0 plane, rotation about the vertical axis
// through the origin, and uniform rescaling. Points and boxes transform
// together; disabled params return the scene unchanged.
Scene augment(const Scene& scene, const AugmentParams& params, Rng& rng);

// Occupancy grid at a fixed edge length. Voxel order is lexicographic in
// (x, y, z) index; features are the mean of the member point rows.
struct VoxelGrid {
  double voxel_size = 0.0;
  std::vector<std::array<std::int32_t, 3>> coords;
  std::vector<double> features;       // coords.size() x 6, row-major
  std::vector<int> point_to_voxel;    // one entry per scene point
  std::vector<int> member_offsets;    // CSR over member_indices
  std::vector<int> member_indices;
};
VoxelGrid voxelize(const Scene& scene, double voxel_size);

// Synthetic room recipe. Every class gets a deterministic color and size
// profile so geometry and color identify the label.
struct SynthSpec {
  std::string dataset_id;
  std::size_t num_scenes = 1;
  std::uint64_t seed = 0;
  std::array<double, 3> room = {6.0, 6.0, 2.8};
  std::vector<std::string> classes;
  std::size_t objects_min = 4;
  std::size_t objects_max = 8;
  std::size_t points_per_object = 150;
  std::size_t clutter_points = 300;
  bool rotated = true;

  static SynthSpec from_json_file(const std::string& path);
};

Scene generate_scene(const SynthSpec& spec, Rng& rng);

// Writes `<dataset_id>_<index>.scene.jsonl` files plus a
// `<dataset_id>.vocab.json` listing the classes. Returns the scene paths.
std::vector<std::string> generate_synthetic(const SynthSpec& spec,
                                            const std::string& out_dir);

}  // namespace unidet
