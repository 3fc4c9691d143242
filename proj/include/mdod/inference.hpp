#pragma once

// Mixture model -> detections: filter components, take their mu as boxes, NMS.

#include <algorithm>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "mdod/geometry.hpp"
#include "mdod/mixture.hpp"

namespace mdod {

struct Detection {
  Box box;  // class_id and score mirror the fields below
  int class_id = 0;
  double score = 0.0;
};

struct InferenceConfig {
  double pi_filter = 0.1;
  double score_filter = 0.05;
  double nms_threshold = 0.5;
};

/// pi / max(pi).
inline std::vector<double> normalized_pi(std::span<const double> pi) {
  const double m = pi.empty() ? 0.0 : *std::max_element(pi.begin(), pi.end());
  if (!(m > 0.0)) throw std::invalid_argument("normalized_pi: pi has no positive entry");
  std::vector<double> out(pi.size());
  for (std::size_t k = 0; k < pi.size(); ++k) out[k] = pi[k] / m;
  return out;
}

/// Components that pass the normalized-pi and score filters, before NMS.
/// A component whose most likely channel is background yields nothing.
inline std::vector<Detection> candidate_detections(const MixtureModel& model, double pi_filter, double score_filter) {
  const auto pin = normalized_pi(model.pi);
  std::vector<Detection> out;
  for (std::size_t k = 0; k < model.K(); ++k) {
    if (pin[k] < pi_filter) continue;
    const auto p = model.p_row(k);
    const auto fg_end = p.begin() + static_cast<std::ptrdiff_t>(model.num_classes);
    const auto best = std::max_element(p.begin(), fg_end);
    const double score = *best;
    if (score < score_filter || p[model.background()] > score) continue;
    const int cls = static_cast<int>(best - p.begin());
    Box box = model.component_box(k);
    box.class_id = cls;
    box.score = score;
    out.push_back({box, cls, score});
  }
  return out;
}

inline std::vector<Detection> extract_detections(const MixtureModel& model, double pi_filter, double score_filter,
                                                 double nms_threshold) {
  const auto cands = candidate_detections(model, pi_filter, score_filter);
  std::vector<Box> boxes;
  boxes.reserve(cands.size());
  for (const auto& d : cands) boxes.push_back(d.box);
  std::vector<Detection> out;
  for (const Box& b : nms(boxes, nms_threshold)) out.push_back({b, *b.class_id, *b.score});
  return out;
}

inline std::vector<Detection> extract_detections(const MixtureModel& model, const InferenceConfig& cfg) {
  return extract_detections(model, cfg.pi_filter, cfg.score_filter, cfg.nms_threshold);
}

}  // namespace mdod
