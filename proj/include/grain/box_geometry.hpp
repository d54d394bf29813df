#pragma once

// Axis-aligned box arithmetic in normalized image coordinates.
//
// Every function is a template over the coordinate type so the same code runs
// on plain doubles (annotation, matching, evaluation) and on ad::Var scalars
// (the differentiable box loss).

#include <algorithm>
#include <cmath>
#include <ostream>

#include "grain/errors.hpp"

namespace grain {

// Center-x, center-y, width, height as fractions of the image extent.
template <typename T>
struct BasicBox {
  T cx{};
  T cy{};
  T w{};
  T h{};
};

template <typename T>
struct BasicCorners {
  T x0{};
  T y0{};
  T x1{};
  T y1{};
};

using NormBox = BasicBox<double>;
using Corners = BasicCorners<double>;

inline bool operator==(const NormBox& a, const NormBox& b) {
  return a.cx == b.cx && a.cy == b.cy && a.w == b.w && a.h == b.h;
}

inline std::ostream& operator<<(std::ostream& os, const NormBox& b) {
  return os << "(" << b.cx << ", " << b.cy << ", " << b.w << ", " << b.h << ")";
}

inline bool is_valid(const NormBox& b) {
  auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  return unit(b.cx) && unit(b.cy) && b.w > 0.0 && b.w <= 1.0 && b.h > 0.0 && b.h <= 1.0;
}

template <typename T>
BasicCorners<T> to_corners(const BasicBox<T>& b) {
  return {b.cx - b.w * 0.5, b.cy - b.h * 0.5, b.cx + b.w * 0.5, b.cy + b.h * 0.5};
}

template <typename T>
BasicBox<T> from_corners(const BasicCorners<T>& c) {
  return {(c.x0 + c.x1) * 0.5, (c.y0 + c.y1) * 0.5, c.x1 - c.x0, c.y1 - c.y0};
}

namespace geometry_detail {

template <typename T>
T clip_unit(const T& v) {
  using std::max;
  using std::min;
  return min(max(v, 0.0), 1.0);
}

template <typename T>
BasicCorners<T> clipped_corners(const BasicBox<T>& b) {
  auto c = to_corners(b);
  return {clip_unit(c.x0), clip_unit(c.y0), clip_unit(c.x1), clip_unit(c.y1)};
}

template <typename T>
T area(const BasicCorners<T>& c) {
  using std::max;
  return max(c.x1 - c.x0, 0.0) * max(c.y1 - c.y0, 0.0);
}

template <typename T>
struct Overlap {
  T intersection;
  T union_area;
};

template <typename T>
Overlap<T> overlap(const BasicCorners<T>& a, const BasicCorners<T>& b) {
  using std::max;
  using std::min;
  const T iw = max(min(a.x1, b.x1) - max(a.x0, b.x0), 0.0);
  const T ih = max(min(a.y1, b.y1) - max(a.y0, b.y0), 0.0);
  const T inter = iw * ih;
  return {inter, area(a) + area(b) - inter};
}

inline bool positive(double v) { return v > 0.0; }

template <typename T>
bool positive(const T& v) {
  return v.item() > 0.0;
}

}  // namespace geometry_detail

// Intersection over union of the clipped boxes; 0 when the union is empty.
template <typename T>
T iou(const BasicBox<T>& a, const BasicBox<T>& b) {
  using namespace geometry_detail;
  const auto ov = overlap(clipped_corners(a), clipped_corners(b));
  if (!positive(ov.union_area)) return ov.intersection * 0.0;
  return ov.intersection / ov.union_area;
}

// IoU minus the fraction of the smallest enclosing box not covered by the union.
template <typename T>
T generalized_iou(const BasicBox<T>& a, const BasicBox<T>& b) {
  using namespace geometry_detail;
  using std::max;
  using std::min;
  const auto ca = clipped_corners(a);
  const auto cb = clipped_corners(b);
  const auto ov = overlap(ca, cb);
  const BasicCorners<T> hull{min(ca.x0, cb.x0), min(ca.y0, cb.y0), max(ca.x1, cb.x1), max(ca.y1, cb.y1)};
  const T enclosing = area(hull);
  if (!positive(enclosing)) return ov.intersection * 0.0;
  const T ratio = positive(ov.union_area) ? ov.intersection / ov.union_area : ov.intersection * 0.0;
  return ratio - (enclosing - ov.union_area) / enclosing;
}

template <typename T>
T l1_distance(const BasicBox<T>& a, const BasicBox<T>& b) {
  using std::abs;
  return abs(a.cx - b.cx) + abs(a.cy - b.cy) + abs(a.w - b.w) + abs(a.h - b.h);
}

// Source-pixel corner box to a normalized box. The result depends only on the
// box's position relative to the image extent, so a box detected on a 960x960
// frame and its 224x224 downscale map to the same NormBox.
inline NormBox rescale_to_normalized(const Corners& pixels, int source_w, int source_h) {
  if (source_w <= 0 || source_h <= 0) throw DegenerateBox("source dimensions must be positive");
  if (!(pixels.x1 > pixels.x0) || !(pixels.y1 > pixels.y0))
    throw DegenerateBox("box has zero or negative extent");
  const double sw = static_cast<double>(source_w);
  const double sh = static_cast<double>(source_h);
  const Corners unit{std::clamp(pixels.x0 / sw, 0.0, 1.0), std::clamp(pixels.y0 / sh, 0.0, 1.0),
                     std::clamp(pixels.x1 / sw, 0.0, 1.0), std::clamp(pixels.y1 / sh, 0.0, 1.0)};
  if (!(unit.x1 > unit.x0) || !(unit.y1 > unit.y0)) throw DegenerateBox("box lies outside the image");
  return from_corners(unit);
}

}  // namespace grain
