#include "unidet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "unidet/boxmath.hpp"

namespace unidet {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

std::string box_str(const Box3D& b) {
  std::ostringstream os;
  os << "center (" << b.cx << ", " << b.cy << ", " << b.cz << ") size (" << b.sx << ", "
     << b.sy << ", " << b.sz << ") yaw " << b.yaw;
  return os.str();
}

boxmath::BoxT<double> to_math(const Box3D& b) {
  return {b.cx, b.cy, b.cz, b.sx, b.sy, b.sz, b.yaw};
}

double overlap_1d(double lo_a, double hi_a, double lo_b, double hi_b) {
  return std::max(0.0, std::min(hi_a, hi_b) - std::max(lo_a, lo_b));
}

double iou_axis_aligned(const Box3D& a, const Box3D& b) {
  const double ox = overlap_1d(a.cx - a.sx / 2, a.cx + a.sx / 2, b.cx - b.sx / 2, b.cx + b.sx / 2);
  const double oy = overlap_1d(a.cy - a.sy / 2, a.cy + a.sy / 2, b.cy - b.sy / 2, b.cy + b.sy / 2);
  const double oz = overlap_1d(a.cz - a.sz / 2, a.cz + a.sz / 2, b.cz - b.sz / 2, b.cz + b.sz / 2);
  const double inter = ox * oy * oz;
  if (inter == 0.0) return 0.0;
  const double va = a.sx * a.sy * a.sz;
  const double vb = b.sx * b.sy * b.sz;
  return inter / (va + vb - inter);
}

// Canonical argument order makes the clipped-polygon path symmetric
// bit-for-bit; the math itself is symmetric only up to rounding.
bool canonical_before(const Box3D& a, const Box3D& b) {
  const double* pa = &a.cx;
  const double* pb = &b.cx;
  for (int i = 0; i < 7; ++i) {
    if (pa[i] != pb[i]) return pa[i] < pb[i];
  }
  return true;
}

}  // namespace

void validate_box(const Box3D& box) {
  const double* f = &box.cx;
  for (int i = 0; i < 7; ++i) {
    if (!std::isfinite(f[i])) fail("box: non-finite field in " + box_str(box));
  }
  if (!(box.sx > 0.0) || !(box.sy > 0.0) || !(box.sz > 0.0)) {
    fail("box: sizes must be positive in " + box_str(box));
  }
}

double iou(const Box3D& a, const Box3D& b) {
  validate_box(a);
  validate_box(b);
  if (a.yaw == 0.0 && b.yaw == 0.0) return iou_axis_aligned(a, b);
  const Box3D& first = canonical_before(a, b) ? a : b;
  const Box3D& second = canonical_before(a, b) ? b : a;
  return boxmath::iou_general(to_math(first), to_math(second));
}

double diou_distance(const Box3D& a, const Box3D& b) {
  validate_box(a);
  validate_box(b);
  const Box3D& first = canonical_before(a, b) ? a : b;
  const Box3D& second = canonical_before(a, b) ? b : a;
  if (first.yaw == 0.0 && second.yaw == 0.0) {
    // Reuse the exact axis-aligned overlap but keep the remaining terms
    // identical to the general path.
    const double v = iou_axis_aligned(first, second);
    const double dx = first.cx - second.cx;
    const double dy = first.cy - second.cy;
    const double dz = first.cz - second.cz;
    const double rho2 = dx * dx + dy * dy + dz * dz;
    Vec3 lo_a, hi_a, lo_b, hi_b;
    box_aabb(first, lo_a, hi_a);
    box_aabb(second, lo_b, hi_b);
    double c2 = 0.0;
    for (int i = 0; i < 3; ++i) {
      const double e = std::max(hi_a[i], hi_b[i]) - std::min(lo_a[i], lo_b[i]);
      c2 += e * e;
    }
    return 1.0 - v + rho2 / c2;
  }
  return boxmath::diou_general(to_math(first), to_math(second));
}

BoxEncoding encode_box(const Box3D& box, const Vec3& ref) {
  validate_box(box);
  const double c = std::cos(box.yaw);
  const double s = std::sin(box.yaw);
  const double dx = ref[0] - box.cx;
  const double dy = ref[1] - box.cy;
  const double lx = dx * c + dy * s;
  const double ly = -dx * s + dy * c;
  const double lz = ref[2] - box.cz;
  const BoxEncoding enc = {
      box.sx / 2 + lx, box.sx / 2 - lx, box.sy / 2 + ly,
      box.sy / 2 - ly, box.sz / 2 + lz, box.sz / 2 - lz,
      std::sin(box.yaw), std::cos(box.yaw),
  };
  static const char* kFaces[6] = {"-x", "+x", "-y", "+y", "-z", "+z"};
  for (int i = 0; i < 6; ++i) {
    if (!(enc[i] > 0.0)) {
      std::ostringstream os;
      os << "encode_box: reference (" << ref[0] << ", " << ref[1] << ", " << ref[2]
         << ") is not strictly inside " << box_str(box) << " (face " << kFaces[i]
         << " distance " << enc[i] << ")";
      fail(os.str());
    }
  }
  return enc;
}

Box3D decode_box(const BoxEncoding& enc, const Vec3& ref) {
  static const char* kFaces[6] = {"-x", "+x", "-y", "+y", "-z", "+z"};
  for (int i = 0; i < 6; ++i) {
    if (!(enc[i] >= 0.0) || !std::isfinite(enc[i])) {
      fail("decode_box: face " + std::string(kFaces[i]) + " distance " +
           std::to_string(enc[i]) + " must be non-negative");
    }
  }
  std::array<double, 8> e;
  std::copy(enc.begin(), enc.end(), e.begin());
  const auto m = boxmath::decode_box_general<double>(e, ref);
  const Box3D box{m.cx, m.cy, m.cz, m.sx, m.sy, m.sz, m.yaw};
  validate_box(box);
  return box;
}

bool point_in_box(const Box3D& box, const Vec3& p, double eps) {
  validate_box(box);
  const double c = std::cos(box.yaw);
  const double s = std::sin(box.yaw);
  const double dx = p[0] - box.cx;
  const double dy = p[1] - box.cy;
  const double lx = dx * c + dy * s;
  const double ly = -dx * s + dy * c;
  const double lz = p[2] - box.cz;
  return std::abs(lx) <= box.sx / 2 + eps && std::abs(ly) <= box.sy / 2 + eps &&
         std::abs(lz) <= box.sz / 2 + eps;
}

void box_aabb(const Box3D& box, Vec3& lo, Vec3& hi) {
  const auto corners = boxmath::corners_bev(to_math(box));
  lo[0] = hi[0] = corners[0].x;
  lo[1] = hi[1] = corners[0].y;
  for (const auto& c : corners) {
    lo[0] = std::min(lo[0], c.x);
    hi[0] = std::max(hi[0], c.x);
    lo[1] = std::min(lo[1], c.y);
    hi[1] = std::max(hi[1], c.y);
  }
  lo[2] = box.cz - box.sz / 2;
  hi[2] = box.cz + box.sz / 2;
}

std::vector<std::size_t> nms(const std::vector<ScoredBox>& boxes, double iou_threshold,
                             bool class_agnostic) {
  if (!(iou_threshold >= 0.0 && iou_threshold <= 1.0)) {
    fail("nms: iou threshold must be in [0, 1]");
  }
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return boxes[i].score > boxes[j].score;
  });
  std::vector<std::size_t> kept;
  std::vector<bool> dead(boxes.size(), false);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (dead[i]) continue;
    kept.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (dead[j]) continue;
      if (!class_agnostic && boxes[i].class_id != boxes[j].class_id) continue;
      if (iou(boxes[i].box, boxes[j].box) > iou_threshold) dead[j] = true;
    }
  }
  return kept;
}

}  // namespace unidet
