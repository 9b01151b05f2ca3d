#pragma once

#include <array>
#include <cstddef>
#include <vector>

namespace unidet {

// Upright 3-D box: center, full extents along the local axes, rotation about
// the vertical axis.
struct Box3D {
  double cx = 0.0, cy = 0.0, cz = 0.0;
  double sx = 0.0, sy = 0.0, sz = 0.0;
  double yaw = 0.0;
};

using Vec3 = std::array<double, 3>;

// Eight values: distances from a reference point to the six faces in the
// yaw-aligned frame (-x, +x, -y, +y, -z, +z), then (sin yaw, cos yaw).
using BoxEncoding = std::array<double, 8>;

// Throws std::invalid_argument when sizes are not positive or any field is
// non-finite.
void validate_box(const Box3D& box);

// Volumetric IoU in [0, 1]. Exact closed form when both yaws are zero;
// polygon clipping otherwise. Symmetric bit-for-bit.
double iou(const Box3D& a, const Box3D& b);

// 1 - IoU + (center distance / enclosing diagonal)^2, in [0, 2). Symmetric,
// exactly zero for identical boxes.
double diou_distance(const Box3D& a, const Box3D& b);

// Face distances of `box` as seen from `ref`, which must be strictly inside.
BoxEncoding encode_box(const Box3D& box, const Vec3& ref);

// Inverse of encode_box. The six distance channels must be non-negative and
// each opposing pair must sum to a positive size.
Box3D decode_box(const BoxEncoding& enc, const Vec3& ref);

bool point_in_box(const Box3D& box, const Vec3& p, double eps = 0.0);

// Axis-aligned bounds of the (possibly rotated) box.
void box_aabb(const Box3D& box, Vec3& lo, Vec3& hi);

struct ScoredBox {
  Box3D box;
  int class_id = 0;
  double score = 0.0;
};

// Greedy descending-score suppression: drops any box whose IoU with an
// already kept box of the same class exceeds the threshold (all classes
// compete when class_agnostic). Returns kept indices in keep order; ties in
// score break toward the lower index.
std::vector<std::size_t> nms(const std::vector<ScoredBox>& boxes, double iou_threshold,
                             bool class_agnostic = false);

}  // namespace unidet
