#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

// Scalar-generic box geometry. Instantiated with double for plain evaluation
// and with Dual<N> where exact derivatives of overlap terms are needed.
namespace unidet::boxmath {

template <std::size_t N>
struct Dual {
  double v = 0.0;
  std::array<double, N> d{};

  Dual() = default;
  Dual(double value) : v(value) {}  // NOLINT: implicit by design for templates
  static Dual seed(double value, std::size_t slot) {
    Dual x(value);
    x.d[slot] = 1.0;
    return x;
  }
};

template <std::size_t N>
Dual<N> operator+(const Dual<N>& a, const Dual<N>& b) {
  Dual<N> r(a.v + b.v);
  for (std::size_t i = 0; i < N; ++i) r.d[i] = a.d[i] + b.d[i];
  return r;
}

template <std::size_t N>
Dual<N> operator-(const Dual<N>& a, const Dual<N>& b) {
  Dual<N> r(a.v - b.v);
  for (std::size_t i = 0; i < N; ++i) r.d[i] = a.d[i] - b.d[i];
  return r;
}

template <std::size_t N>
Dual<N> operator-(const Dual<N>& a) {
  Dual<N> r(-a.v);
  for (std::size_t i = 0; i < N; ++i) r.d[i] = -a.d[i];
  return r;
}

template <std::size_t N>
Dual<N> operator*(const Dual<N>& a, const Dual<N>& b) {
  Dual<N> r(a.v * b.v);
  for (std::size_t i = 0; i < N; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
  return r;
}

template <std::size_t N>
Dual<N> operator/(const Dual<N>& a, const Dual<N>& b) {
  Dual<N> r(a.v / b.v);
  const double inv2 = 1.0 / (b.v * b.v);
  for (std::size_t i = 0; i < N; ++i) r.d[i] = (a.d[i] * b.v - a.v * b.d[i]) * inv2;
  return r;
}

template <std::size_t N> bool operator<(const Dual<N>& a, const Dual<N>& b) { return a.v < b.v; }
template <std::size_t N> bool operator>(const Dual<N>& a, const Dual<N>& b) { return a.v > b.v; }
template <std::size_t N> bool operator<=(const Dual<N>& a, const Dual<N>& b) { return a.v <= b.v; }
template <std::size_t N> bool operator>=(const Dual<N>& a, const Dual<N>& b) { return a.v >= b.v; }
template <std::size_t N> bool operator==(const Dual<N>& a, const Dual<N>& b) { return a.v == b.v; }

template <std::size_t N>
Dual<N> sqrt(const Dual<N>& a) {
  Dual<N> r(std::sqrt(a.v));
  const double scale = 0.5 / r.v;
  for (std::size_t i = 0; i < N; ++i) r.d[i] = a.d[i] * scale;
  return r;
}

template <std::size_t N>
Dual<N> sin(const Dual<N>& a) {
  Dual<N> r(std::sin(a.v));
  const double c = std::cos(a.v);
  for (std::size_t i = 0; i < N; ++i) r.d[i] = a.d[i] * c;
  return r;
}

template <std::size_t N>
Dual<N> cos(const Dual<N>& a) {
  Dual<N> r(std::cos(a.v));
  const double s = -std::sin(a.v);
  for (std::size_t i = 0; i < N; ++i) r.d[i] = a.d[i] * s;
  return r;
}

template <std::size_t N>
Dual<N> atan2(const Dual<N>& y, const Dual<N>& x) {
  Dual<N> r(std::atan2(y.v, x.v));
  const double denom = y.v * y.v + x.v * x.v;
  for (std::size_t i = 0; i < N; ++i) {
    r.d[i] = (x.v * y.d[i] - y.v * x.d[i]) / denom;
  }
  return r;
}

// Selection by value; derivatives follow the selected branch.
template <typename T> const T& vmin(const T& a, const T& b) { return b < a ? b : a; }
template <typename T> const T& vmax(const T& a, const T& b) { return a < b ? b : a; }

inline double value_of(double x) { return x; }
template <std::size_t N> double value_of(const Dual<N>& x) { return x.v; }

template <typename T>
struct BoxT {
  T cx, cy, cz;
  T sx, sy, sz;
  T yaw;
};

template <typename T>
struct Vec2T {
  T x, y;
};

template <typename T>
T cross2(const Vec2T<T>& o, const Vec2T<T>& a, const Vec2T<T>& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

// Counterclockwise top-view corners.
template <typename T>
std::array<Vec2T<T>, 4> corners_bev(const BoxT<T>& box) {
  using std::cos;
  using std::sin;
  const T c = cos(box.yaw);
  const T s = sin(box.yaw);
  const T hx = box.sx * T(0.5);
  const T hy = box.sy * T(0.5);
  auto at = [&](double ex, double ey) {
    const T lx = hx * T(ex);
    const T ly = hy * T(ey);
    return Vec2T<T>{box.cx + lx * c - ly * s, box.cy + lx * s + ly * c};
  };
  return {at(1, 1), at(-1, 1), at(-1, -1), at(1, -1)};
}

template <typename T>
T polygon_area(const std::vector<Vec2T<T>>& poly) {
  if (poly.size() < 3) return T(0);
  T twice(0);
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const auto& p = poly[i];
    const auto& q = poly[(i + 1) % poly.size()];
    twice = twice + (p.x * q.y - q.x * p.y);
  }
  const T area = twice * T(0.5);
  return area < T(0) ? -area : area;
}

// Sutherland-Hodgman intersection of the subject polygon with a convex CCW
// clip polygon. Vertices on a clip edge count as inside, so clipping a
// polygon by itself returns it unchanged.
template <typename T>
std::vector<Vec2T<T>> clip_polygon(std::vector<Vec2T<T>> subject,
                                   const std::array<Vec2T<T>, 4>& clip) {
  for (std::size_t e = 0; e < clip.size() && !subject.empty(); ++e) {
    const Vec2T<T>& a = clip[e];
    const Vec2T<T>& b = clip[(e + 1) % clip.size()];
    std::vector<Vec2T<T>> out;
    out.reserve(subject.size() + 2);
    for (std::size_t i = 0; i < subject.size(); ++i) {
      const Vec2T<T>& s = subject[i];
      const Vec2T<T>& t = subject[(i + 1) % subject.size()];
      const T ds = cross2(a, b, s);
      const T dt = cross2(a, b, t);
      const bool s_in = ds >= T(0);
      const bool t_in = dt >= T(0);
      if (s_in != t_in) {
        const T w = ds / (ds - dt);
        out.push_back({s.x + w * (t.x - s.x), s.y + w * (t.y - s.y)});
      }
      if (t_in) out.push_back(t);
    }
    subject = std::move(out);
  }
  return subject;
}

template <typename T>
T intersection_area_bev(const BoxT<T>& a, const BoxT<T>& b) {
  const auto ca = corners_bev(a);
  const auto cb = corners_bev(b);
  std::vector<Vec2T<T>> subject(ca.begin(), ca.end());
  return polygon_area(clip_polygon(std::move(subject), cb));
}

// Volumetric IoU via top-view polygon overlap times vertical overlap. All
// three volumes go through the same polygon-area pipeline so identical boxes
// cancel exactly to 1.
template <typename T>
T iou_general(const BoxT<T>& a, const BoxT<T>& b) {
  const T a_top = a.cz + a.sz * T(0.5);
  const T a_bot = a.cz - a.sz * T(0.5);
  const T b_top = b.cz + b.sz * T(0.5);
  const T b_bot = b.cz - b.sz * T(0.5);
  const T dz = vmin(a_top, b_top) - vmax(a_bot, b_bot);
  const auto ca = corners_bev(a);
  const auto cb = corners_bev(b);
  const T va = polygon_area(std::vector<Vec2T<T>>(ca.begin(), ca.end())) * (a_top - a_bot);
  const T vb = polygon_area(std::vector<Vec2T<T>>(cb.begin(), cb.end())) * (b_top - b_bot);
  if (!(dz > T(0))) return T(0);
  std::vector<Vec2T<T>> subject(ca.begin(), ca.end());
  const T inter = polygon_area(clip_polygon(std::move(subject), cb)) * dz;
  return inter / (va + vb - inter);
}

template <typename T>
void extend_bounds(const BoxT<T>& box, T& lox, T& hix, T& loy, T& hiy, T& loz, T& hiz) {
  for (const auto& c : corners_bev(box)) {
    lox = vmin(lox, c.x);
    hix = vmax(hix, c.x);
    loy = vmin(loy, c.y);
    hiy = vmax(hiy, c.y);
  }
  loz = vmin(loz, box.cz - box.sz * T(0.5));
  hiz = vmax(hiz, box.cz + box.sz * T(0.5));
}

// 1 - IoU + (center distance)^2 / (enclosing box diagonal)^2. Zero for
// identical boxes, approaches 2 for small far-apart boxes.
template <typename T>
T diou_general(const BoxT<T>& a, const BoxT<T>& b) {
  const T iou = iou_general(a, b);
  const T dx = a.cx - b.cx;
  const T dy = a.cy - b.cy;
  const T dz = a.cz - b.cz;
  const T rho2 = dx * dx + dy * dy + dz * dz;
  T lox = a.cx, hix = a.cx, loy = a.cy, hiy = a.cy;
  T loz = a.cz, hiz = a.cz;
  extend_bounds(a, lox, hix, loy, hiy, loz, hiz);
  extend_bounds(b, lox, hix, loy, hiy, loz, hiz);
  const T ex = hix - lox;
  const T ey = hiy - loy;
  const T ez = hiz - loz;
  const T c2 = ex * ex + ey * ey + ez * ez;
  return T(1) - iou + rho2 / c2;
}

// Inverse of the 8-value box parameterization: six positive distances from a
// reference point to the faces (in the yaw-aligned frame) plus (sin, cos).
template <typename T>
BoxT<T> decode_box_general(const std::array<T, 8>& enc,
                           const std::array<double, 3>& ref) {
  using std::atan2;
  using std::cos;
  using std::sin;
  const T yaw = atan2(enc[6], enc[7]);
  const T off_x = (enc[1] - enc[0]) * T(0.5);
  const T off_y = (enc[3] - enc[2]) * T(0.5);
  const T off_z = (enc[5] - enc[4]) * T(0.5);
  const T c = cos(yaw);
  const T s = sin(yaw);
  BoxT<T> box;
  box.cx = T(ref[0]) + off_x * c - off_y * s;
  box.cy = T(ref[1]) + off_x * s + off_y * c;
  box.cz = T(ref[2]) + off_z;
  box.sx = enc[0] + enc[1];
  box.sy = enc[2] + enc[3];
  box.sz = enc[4] + enc[5];
  box.yaw = yaw;
  return box;
}

}  // namespace unidet::boxmath
