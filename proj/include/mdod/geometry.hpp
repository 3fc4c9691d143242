#pragma once

// Axis-aligned boxes in continuous pixel coordinates, overlap and NMS.

#include <algorithm>
#include <array>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

namespace mdod {

/// Axis-aligned rectangle in ltrb pixel coordinates.
///
/// `class_id` follows the C+1 layout of the class probabilities: foreground
/// classes are 0..C-1 and C is background. `score` is set on detections.
struct Box {
  double l = 0.0;
  double t = 0.0;
  double r = 0.0;
  double b = 0.0;
  std::optional<int> class_id;
  std::optional<double> score;

  double width() const { return r - l; }
  double height() const { return b - t; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }

  bool valid() const {
    return std::isfinite(l) && std::isfinite(t) && std::isfinite(r) && std::isfinite(b) &&
           l <= r && t <= b;
  }

  std::array<double, 4> coords() const { return {l, t, r, b}; }

  static Box from_coords(const std::array<double, 4>& c) { return Box{c[0], c[1], c[2], c[3]}; }

  friend bool operator==(const Box&, const Box&) = default;
};

/// Center/size representation.
struct Xywh {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  friend bool operator==(const Xywh&, const Xywh&) = default;
};

inline std::array<double, 4> xywh_to_ltrb(double cx, double cy, double w, double h) {
  assert(w >= 0.0 && h >= 0.0);
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

inline Box xywh_to_ltrb(const Xywh& x) { return Box::from_coords(xywh_to_ltrb(x.cx, x.cy, x.w, x.h)); }

inline std::array<double, 4> ltrb_to_xywh(double l, double t, double r, double b) {
  return {0.5 * (l + r), 0.5 * (t + b), r - l, b - t};
}

inline Xywh ltrb_to_xywh(const Box& box) {
  auto c = ltrb_to_xywh(box.l, box.t, box.r, box.b);
  return {c[0], c[1], c[2], c[3]};
}

/// Intersection over union. Two degenerate boxes (zero union) give 0.
inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.r, b.r) - std::max(a.l, b.l);
  const double ih = std::min(a.b, b.b) - std::max(a.t, b.t);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

/// Greedy per-class non-maximum suppression.
///
/// Candidates are visited by descending score; among equal scores the lower
/// input index goes first. A candidate is dropped when it overlaps an already
/// kept box of the same class by more than `iou_threshold`. Boxes without a
/// class id form one shared class.
inline std::vector<Box> nms(std::span<const Box> dets, double iou_threshold) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return dets[i].score.value_or(0.0) > dets[j].score.value_or(0.0);
  });

  std::vector<Box> kept;
  kept.reserve(dets.size());
  for (std::size_t idx : order) {
    const Box& cand = dets[idx];
    bool suppressed = false;
    for (const Box& k : kept) {
      if (k.class_id == cand.class_id && iou(k, cand) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(cand);
  }
  return kept;
}

}  // namespace mdod
