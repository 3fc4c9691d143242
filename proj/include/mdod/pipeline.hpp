#pragma once

// Whole-dataset passes shared by the command-line tool and the tests:
// detection, evaluation and the RoI/underflow diagnostics.

#include <array>
#include <cmath>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mdod/data.hpp"
#include "mdod/eval.hpp"
#include "mdod/inference.hpp"
#include "mdod/network.hpp"
#include "mdod/training.hpp"

namespace mdod {

inline std::vector<Detection> detect(const Detector& net, const diff::Tensor& image, const InferenceConfig& cfg) {
  return extract_detections(net.forward(image).mixture.model(), cfg);
}

/// Detections per scene, as boxes carrying class and score.
inline std::vector<std::vector<Box>> detect_dataset(const Detector& net, std::span<const Scene> scenes,
                                                    const InferenceConfig& cfg) {
  std::vector<std::vector<Box>> out;
  out.reserve(scenes.size());
  for (const Scene& s : scenes) {
    std::vector<Box> boxes;
    for (const auto& d : detect(net, s.image(), cfg)) boxes.push_back(d.box);
    out.push_back(std::move(boxes));
  }
  return out;
}

inline std::vector<std::vector<Box>> ground_truths(std::span<const Scene> scenes) {
  std::vector<std::vector<Box>> out;
  for (const Scene& s : scenes) out.push_back(s.annotations);
  return out;
}

/// nullopt when the scenes carry no ground truth.
inline std::optional<EvalReport> evaluate_detector(const Detector& net, std::span<const Scene> scenes,
                                                   const InferenceConfig& cfg) {
  const auto dets = detect_dataset(net, scenes, cfg);
  const auto gts = ground_truths(scenes);
  return evaluate(dets, gts);
}

inline void write_detections_csv(std::ostream& os, std::span<const std::string> image_ids,
                                 std::span<const std::vector<Box>> dets) {
  os << "image_id,class_id,score,l,t,r,b\n";
  for (std::size_t i = 0; i < dets.size(); ++i) {
    for (const Box& b : dets[i]) {
      os << image_ids[i] << ',' << b.class_id.value_or(-1) << ',' << format_double(b.score.value_or(0.0)) << ','
         << format_double(b.l) << ',' << format_double(b.t) << ',' << format_double(b.r) << ',' << format_double(b.b)
         << '\n';
    }
  }
}

/// Same records as JSON: [{"image_id":..., "class_id":..., "score":..., "box":[l,t,r,b]}, ...]
inline void write_detections_json(std::ostream& os, std::span<const std::string> image_ids,
                                  std::span<const std::vector<Box>> dets) {
  os << "[";
  bool first = true;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    for (const Box& b : dets[i]) {
      os << (first ? "\n" : ",\n") << "  {\"image_id\": \"" << image_ids[i] << "\", \"class_id\": " << b.class_id.value_or(-1)
         << ", \"score\": " << format_double(b.score.value_or(0.0)) << ", \"box\": [" << format_double(b.l) << ", "
         << format_double(b.t) << ", " << format_double(b.r) << ", " << format_double(b.b) << "]}";
      first = false;
    }
  }
  os << (first ? "]\n" : "\n]\n");
}

struct DatasetDiagnostics {
  TrainDiagnostics summary;  // half-precision underflow columns
  // underflow[distribution][precision], precision order half, single, double
  std::array<std::array<double, 3>, 2> underflow{};
  std::size_t nonfinite_cauchy_logliks = 0;
  std::size_t scenes = 0;
};

/// Recomputes the training-time diagnostics for a fixed detector.
inline DatasetDiagnostics diagnose_dataset(const Detector& net, std::span<const Scene> scenes, const TrainConfig& cfg) {
  DatasetDiagnostics out;
  Rng rng(derive_seed(cfg.seed, 3));
  StepMetrics m;
  std::array<std::array<std::size_t, 3>, 2> zero{};
  std::size_t pairs = 0;
  constexpr std::array<Precision, 3> precisions{Precision::half, Precision::single, Precision::double_};
  constexpr std::array<Distribution, 2> dists{Distribution::cauchy, Distribution::gaussian};
  for (const Scene& s : scenes) {
    const auto fwd = net.forward(s.image());
    const MixtureModel model = fwd.mixture.model();
    std::size_t n_roi = cfg.empty_scene_rois;
    if (!s.annotations.empty()) {
      const double moc = loss_moc(fwd.mixture, s.annotations, cfg.distribution).item();
      m.loss_moc_sum += moc;
      ++m.loss_moc_count;
      n_roi = cfg.roi_multiplier * s.annotations.size();
      pairs += s.annotations.size() * model.K();
      for (std::size_t d = 0; d < 2; ++d) {
        for (std::size_t p = 0; p < 3; ++p) zero[d][p] += underflow_count(s.annotations, model, dists[d], precisions[p]);
      }
      for (const Box& b : s.annotations) out.nonfinite_cauchy_logliks += !std::isfinite(mixture_box_loglik(b, model));
    }
    const RoISet rois = sample_rois(model, s.annotations, n_roi, cfg.iou_threshold, rng);
    m.loss_mm_sum += loss_mm(fwd.mixture, rois, cfg.distribution).item();
    ++m.loss_mm_count;
    m.foreground += foreground_count(rois);
    m.rois += rois.entries.size();
    ++out.scenes;
  }
  m.underflow_pairs = pairs;
  m.underflow_cauchy = zero[0][0];
  m.underflow_gaussian = zero[1][0];
  out.summary = summarize(0, m);
  for (std::size_t d = 0; d < 2; ++d) {
    for (std::size_t p = 0; p < 3; ++p) {
      out.underflow[d][p] = pairs == 0 ? 0.0 : static_cast<double>(zero[d][p]) / static_cast<double>(pairs);
    }
  }
  return out;
}

inline void write_underflow_csv(std::ostream& os, const DatasetDiagnostics& d) {
  static constexpr const char* dist_names[] = {"cauchy", "gaussian"};
  static constexpr const char* prec_names[] = {"half", "single", "double"};
  os << "distribution,precision,underflow_ratio\n";
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t p = 0; p < 3; ++p) os << dist_names[i] << ',' << prec_names[p] << ',' << format_double(d.underflow[i][p]) << '\n';
  }
}

}  // namespace mdod
