#pragma once

// Greedy detection matching and COCO-style 101-point interpolated AP.

#include <algorithm>
#include <cstddef>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mdod/geometry.hpp"

namespace mdod {

struct PRPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

/// True-positive flags for detections of one image, visited in the given
/// (descending-score) order. Each detection takes the highest-IoU unmatched
/// ground truth of its class with IoU >= threshold.
inline std::vector<bool> match_detections(std::span<const Box> dets, std::span<const Box> gts, double iou_threshold) {
  std::vector<bool> used(gts.size(), false), tp(dets.size(), false);
  for (std::size_t d = 0; d < dets.size(); ++d) {
    double best = -1.0;
    std::size_t best_g = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].class_id != dets[d].class_id) continue;
      const double v = iou(dets[d], gts[g]);
      if (v >= iou_threshold && v > best) {
        best = v;
        best_g = g;
      }
    }
    if (best_g < gts.size()) {
      used[best_g] = true;
      tp[d] = true;
    }
  }
  return tp;
}

namespace detail {

struct ScoredFlag {
  double score;
  bool tp;
};

/// Flags for every detection of class `cls` across images, sorted by
/// descending score (stable in image, then detection order).
inline std::vector<ScoredFlag> class_flags(std::span<const std::vector<Box>> dets, std::span<const std::vector<Box>> gts,
                                           int cls, double iou_threshold) {
  std::vector<ScoredFlag> flags;
  for (std::size_t img = 0; img < dets.size(); ++img) {
    std::vector<Box> d, g;
    for (const Box& b : dets[img]) {
      if (b.class_id == cls) d.push_back(b);
    }
    if (img < gts.size()) {
      for (const Box& b : gts[img]) {
        if (b.class_id == cls) g.push_back(b);
      }
    }
    std::stable_sort(d.begin(), d.end(), [](const Box& a, const Box& b) { return a.score.value_or(0) > b.score.value_or(0); });
    const auto tp = match_detections(d, g, iou_threshold);
    for (std::size_t i = 0; i < d.size(); ++i) flags.push_back({d[i].score.value_or(0.0), tp[i]});
  }
  std::stable_sort(flags.begin(), flags.end(), [](const ScoredFlag& a, const ScoredFlag& b) { return a.score > b.score; });
  return flags;
}

inline std::size_t count_class(std::span<const std::vector<Box>> gts, int cls) {
  std::size_t n = 0;
  for (const auto& img : gts) {
    for (const Box& b : img) n += b.class_id == cls;
  }
  return n;
}

}  // namespace detail

/// Precision/recall after each detection of class `cls`, highest score first.
inline std::vector<PRPoint> pr_curve(std::span<const std::vector<Box>> dets, std::span<const std::vector<Box>> gts, int cls,
                                     double iou_threshold) {
  const auto flags = detail::class_flags(dets, gts, cls, iou_threshold);
  const double npos = static_cast<double>(detail::count_class(gts, cls));
  std::vector<PRPoint> out;
  double tp = 0, fp = 0;
  for (const auto& f : flags) {
    (f.tp ? tp : fp) += 1.0;
    out.push_back({f.score, tp / (tp + fp), npos > 0 ? tp / npos : 0.0});
  }
  return out;
}

/// 101-point interpolated AP of one class; nullopt when it has no ground truth.
inline std::optional<double> class_average_precision(std::span<const std::vector<Box>> dets,
                                                     std::span<const std::vector<Box>> gts, int cls, double iou_threshold) {
  if (detail::count_class(gts, cls) == 0) return std::nullopt;
  auto curve = pr_curve(dets, gts, cls, iou_threshold);
  for (std::size_t i = curve.size(); i-- > 1;) curve[i - 1].precision = std::max(curve[i - 1].precision, curve[i].precision);
  double sum = 0.0;
  for (int step = 0; step <= 100; ++step) {
    const double r = step / 100.0;
    const auto it = std::lower_bound(curve.begin(), curve.end(), r, [](const PRPoint& p, double v) { return p.recall < v; });
    if (it != curve.end()) sum += it->precision;
  }
  return sum / 101.0;
}

inline std::set<int> gt_classes(std::span<const std::vector<Box>> gts) {
  std::set<int> out;
  for (const auto& img : gts) {
    for (const Box& b : img) {
      if (b.class_id) out.insert(*b.class_id);
    }
  }
  return out;
}

/// Mean over ground-truth classes of the per-class AP at one IoU threshold;
/// nullopt when there is no ground truth at all.
inline std::optional<double> average_precision(std::span<const std::vector<Box>> dets, std::span<const std::vector<Box>> gts,
                                               double iou_threshold) {
  const auto classes = gt_classes(gts);
  if (classes.empty()) return std::nullopt;
  double sum = 0.0;
  for (int c : classes) sum += *class_average_precision(dets, gts, c, iou_threshold);
  return sum / static_cast<double>(classes.size());
}

inline std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

struct EvalReport {
  double ap = 0.0;
  double ap50 = 0.0;
  std::map<int, double> per_class_ap;  // averaged over 0.50:0.05:0.95
};

/// AP over 0.50:0.05:0.95 and AP50; nullopt when there is no ground truth.
inline std::optional<EvalReport> evaluate(std::span<const std::vector<Box>> dets, std::span<const std::vector<Box>> gts) {
  const auto classes = gt_classes(gts);
  if (classes.empty()) return std::nullopt;
  EvalReport rep;
  const auto thresholds = coco_iou_thresholds();
  for (int c : classes) {
    double s = 0.0;
    for (double t : thresholds) s += *class_average_precision(dets, gts, c, t);
    rep.per_class_ap[c] = s / static_cast<double>(thresholds.size());
    rep.ap += rep.per_class_ap[c];
  }
  rep.ap /= static_cast<double>(classes.size());
  rep.ap50 = *average_precision(dets, gts, 0.5);
  return rep;
}

inline void write_eval_csv(std::ostream& os, const EvalReport& rep) {
  os << "metric,value\n";
  os << "AP," << rep.ap << "\n";
  os << "AP50," << rep.ap50 << "\n";
  for (const auto& [c, v] : rep.per_class_ap) os << "AP_class_" << c << "," << v << "\n";
}

}  // namespace mdod
