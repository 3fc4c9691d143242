#pragma once

// RoI sampling, the two likelihood losses, and the SGD training loop.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdod/checkpoint.hpp"
#include "mdod/data.hpp"
#include "mdod/diffcore.hpp"
#include "mdod/geometry.hpp"
#include "mdod/mixture.hpp"
#include "mdod/network.hpp"
#include "mdod/random.hpp"

namespace mdod {

struct RoIEntry {
  Box box;  // class_id set: foreground class or background (= C)
  std::size_t source_component = 0;
};

struct RoISet {
  std::vector<RoIEntry> entries;
  std::size_t background_class = 0;
};

struct TrainConfig {
  double alpha = 2.0;
  std::size_t roi_multiplier = 3;
  std::size_t empty_scene_rois = 16;
  double iou_threshold = 0.5;
  Distribution distribution = Distribution::cauchy;
  double learning_rate = 1e-2;
  double grad_clip = 10.0;
  std::size_t epochs = 10;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only

  void validate() const {
    if (!(alpha >= 0.0)) throw std::invalid_argument("alpha must be non-negative");
    if (!(iou_threshold >= 0.0 && iou_threshold <= 1.0)) throw std::invalid_argument("iou_threshold must be in [0, 1]");
    if (roi_multiplier < 1 || batch_size < 1) throw std::invalid_argument("roi_multiplier and batch_size must be positive");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
  }
};

/// Draws n components from pi and labels each copied mu with the class of the
/// highest-IoU ground truth when that IoU reaches the threshold, else background.
inline RoISet sample_rois(const MixtureModel& model, std::span<const Box> gts, std::size_t n, double iou_threshold,
                          Rng& rng) {
  RoISet set;
  set.background_class = model.background();
  for (std::size_t k : sample_components(model.pi, n, rng)) {
    Box box = model.component_box(k);
    int label = static_cast<int>(model.background());
    double best = -1.0;
    for (const Box& gt : gts) {
      const double v = iou(box, gt);
      if (v > best) {
        best = v;
        if (v >= iou_threshold) label = gt.class_id.value_or(0);
      }
    }
    box.class_id = label;
    set.entries.push_back({box, k});
  }
  return set;
}

inline std::size_t foreground_count(const RoISet& rois) {
  std::size_t fg = 0;
  for (const auto& e : rois.entries) fg += e.box.class_id != static_cast<int>(rois.background_class);
  return fg;
}

inline double foreground_ratio(const RoISet& rois) {
  if (rois.entries.empty()) throw std::invalid_argument("foreground_ratio of an empty RoI set");
  return static_cast<double>(foreground_count(rois)) / static_cast<double>(rois.entries.size());
}

namespace detail {

/// d log F / d mu and d log F / d scale for one coordinate.
inline std::pair<double, double> coord_logpdf_grad(Distribution dist, double x, double mu, double scale) {
  const double d = x - mu;
  if (dist == Distribution::cauchy) {
    const double den = d * d + scale * scale;
    return {2.0 * d / den, 1.0 / scale - 2.0 * scale / den};
  }
  const double inv = 1.0 / scale;
  return {d * inv * inv, -inv + d * d * inv * inv * inv};
}

/// -(1/N) sum_i log sum_k pi_k F(x_i; mu_k, gamma_k) [p_k[c_i]].
/// `p` may be undefined, in which case class probabilities are left out.
inline diff::Tensor mixture_nll(const diff::Tensor& mu, const diff::Tensor& gamma, const diff::Tensor& pi,
                                const diff::Tensor& p, std::vector<std::array<double, 4>> xs, std::vector<std::size_t> classes,
                                Distribution dist) {
  const std::size_t K = pi.size(), N = xs.size();
  const bool with_class = p.defined();
  const std::size_t cc = with_class ? p.dim(1) : 0;
  // base[i*K+k] = log F_ik (+ log p_k[c_i]); lse[i] over k of log pi_k + base.
  std::vector<double> base(N * K), lse(N);
  std::vector<double> term(K);
  double total = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      double v = 0.0;
      for (std::size_t c = 0; c < 4; ++c) v += coord_logpdf(dist, xs[i][c], mu[4 * k + c], gamma[4 * k + c]);
      if (with_class) v += std::log(p[cc * k + classes[i]]);
      base[i * K + k] = v;
      term[k] = std::log(pi[k]) + v;
    }
    lse[i] = log_sum_exp(term);
    total += lse[i];
  }
  const double value = -total / static_cast<double>(N);

  std::vector<diff::Tensor> parents{mu, gamma, pi};
  if (with_class) parents.push_back(p);
  return diff::make_op({}, {value}, parents,
                       [=, base = std::move(base), lse = std::move(lse), xs = std::move(xs),
                        classes = std::move(classes)](diff::Node& self) {
                         diff::Node& nmu = *self.parents[0];
                         diff::Node& ngamma = *self.parents[1];
                         diff::Node& npi = *self.parents[2];
                         diff::Node* np = with_class ? self.parents[3].get() : nullptr;
                         const double g = -self.grad[0] / static_cast<double>(N);
                         for (std::size_t i = 0; i < N; ++i) {
                           for (std::size_t k = 0; k < K; ++k) {
                             // exp(base - lse) = responsibility / pi_k, finite even when pi_k = 0.
                             const double q = std::exp(base[i * K + k] - lse[i]);
                             const double resp = q * npi.value[k];
                             if (npi.requires_grad) npi.grad[k] += g * q;
                             if (np && np->requires_grad) {
                               const std::size_t idx = cc * k + classes[i];
                               np->grad[idx] += g * resp / np->value[idx];
                             }
                             if (resp == 0.0) continue;
                             for (std::size_t c = 0; c < 4; ++c) {
                               const auto [dmu, dscale] =
                                   coord_logpdf_grad(dist, xs[i][c], nmu.value[4 * k + c], ngamma.value[4 * k + c]);
                               if (nmu.requires_grad) nmu.grad[4 * k + c] += g * resp * dmu;
                               if (ngamma.requires_grad) ngamma.grad[4 * k + c] += g * resp * dscale;
                             }
                           }
                         }
                       });
}

}  // namespace detail

/// Negative log-likelihood of the ground-truth coordinates under the
/// coordinate mixture (class probabilities excluded).
inline diff::Tensor loss_moc(const MixtureTensors& m, std::span<const Box> gts,
                             Distribution dist = Distribution::cauchy) {
  if (gts.empty()) throw std::invalid_argument("loss_moc needs at least one ground truth");
  std::vector<std::array<double, 4>> xs;
  for (const Box& b : gts) xs.push_back(encode_box(b, m.encoding));
  return detail::mixture_nll(m.mu, m.gamma, m.pi, diff::Tensor{}, std::move(xs), {}, dist);
}

/// Negative log-likelihood of the labelled RoIs under the complete mixture.
/// Only the class probabilities receive gradient.
inline diff::Tensor loss_mm(const MixtureTensors& m, const RoISet& rois, Distribution dist = Distribution::cauchy) {
  if (rois.entries.empty()) throw std::invalid_argument("loss_mm needs at least one RoI");
  std::vector<std::array<double, 4>> xs;
  std::vector<std::size_t> classes;
  for (const auto& e : rois.entries) {
    xs.push_back(encode_box(e.box, m.encoding));
    classes.push_back(static_cast<std::size_t>(e.box.class_id.value()));
  }
  return detail::mixture_nll(diff::stop_gradient(m.mu), diff::stop_gradient(m.gamma), diff::stop_gradient(m.pi), m.p,
                             std::move(xs), std::move(classes), dist);
}

inline diff::Tensor total_loss(const diff::Tensor& l_moc, const diff::Tensor& l_mm, double alpha) {
  if (!l_moc.defined()) return diff::scale(l_mm, alpha);
  return diff::add(l_moc, diff::scale(l_mm, alpha));
}

// ---------------------------------------------------------------------------
// Optimization

class NonFiniteLossError : public std::runtime_error {
 public:
  NonFiniteLossError(std::string scene_id, double moc, double mm)
      : std::runtime_error("non-finite loss on scene " + scene_id + " (loss_moc=" + std::to_string(moc) +
                           ", loss_mm=" + std::to_string(mm) + ")"),
        scene_id_(std::move(scene_id)) {}
  const std::string& scene_id() const { return scene_id_; }

 private:
  std::string scene_id_;
};

/// Per-step sums; ratios are formed when aggregated.
struct StepMetrics {
  double loss_moc_sum = 0.0;
  std::size_t loss_moc_count = 0;
  double loss_mm_sum = 0.0;
  std::size_t loss_mm_count = 0;
  std::size_t foreground = 0;
  std::size_t rois = 0;
  std::size_t underflow_cauchy = 0;
  std::size_t underflow_gaussian = 0;
  std::size_t underflow_pairs = 0;
  double total_loss = 0.0;

  StepMetrics& operator+=(const StepMetrics& o) {
    loss_moc_sum += o.loss_moc_sum;
    loss_moc_count += o.loss_moc_count;
    loss_mm_sum += o.loss_mm_sum;
    loss_mm_count += o.loss_mm_count;
    foreground += o.foreground;
    rois += o.rois;
    underflow_cauchy += o.underflow_cauchy;
    underflow_gaussian += o.underflow_gaussian;
    underflow_pairs += o.underflow_pairs;
    total_loss += o.total_loss;
    return *this;
  }
};

struct TrainDiagnostics {
  std::size_t epoch = 0;
  double loss_moc = 0.0;
  double loss_mm = 0.0;
  double foreground_ratio = 0.0;
  double underflow_cauchy = 0.0;
  double underflow_gaussian = 0.0;
};

inline TrainDiagnostics summarize(std::size_t epoch, const StepMetrics& m) {
  auto ratio = [](double a, std::size_t b) { return b == 0 ? 0.0 : a / static_cast<double>(b); };
  return {epoch,
          ratio(m.loss_moc_sum, m.loss_moc_count),
          ratio(m.loss_mm_sum, m.loss_mm_count),
          ratio(static_cast<double>(m.foreground), m.rois),
          ratio(static_cast<double>(m.underflow_cauchy), m.underflow_pairs),
          ratio(static_cast<double>(m.underflow_gaussian), m.underflow_pairs)};
}

/// Loss of one scene, with its RoI and underflow bookkeeping.
struct SceneLoss {
  diff::Tensor total;
  StepMetrics metrics;
};

inline SceneLoss scene_loss(const Detector& net, const Scene& scene, const TrainConfig& cfg, Rng& rng) {
  const ForwardResult fwd = net.forward(scene.image());
  const MixtureTensors& mix = fwd.mixture;
  const MixtureModel model = mix.model();
  SceneLoss out;
  diff::Tensor l_moc;
  std::size_t n_roi = cfg.empty_scene_rois;
  // Diagnostics and RoI sampling need finite parameters.
  const auto finite = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
  };
  if (!(finite(model.mu) && finite(model.gamma) && finite(model.p) && finite(model.pi))) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    throw NonFiniteLossError(scene.image_id, nan, nan);
  }
  if (!scene.annotations.empty()) {
    l_moc = loss_moc(mix, scene.annotations, cfg.distribution);
    n_roi = cfg.roi_multiplier * scene.annotations.size();
    out.metrics.loss_moc_sum = l_moc.item();
    out.metrics.loss_moc_count = 1;
    out.metrics.underflow_pairs = scene.annotations.size() * model.K();
    out.metrics.underflow_cauchy = underflow_count(scene.annotations, model, Distribution::cauchy, Precision::half);
    out.metrics.underflow_gaussian = underflow_count(scene.annotations, model, Distribution::gaussian, Precision::half);
  }
  const RoISet rois = sample_rois(model, scene.annotations, n_roi, cfg.iou_threshold, rng);
  const diff::Tensor l_mm = loss_mm(mix, rois, cfg.distribution);
  out.metrics.loss_mm_sum = l_mm.item();
  out.metrics.loss_mm_count = 1;
  out.metrics.rois = rois.entries.size();
  out.metrics.foreground = foreground_count(rois);
  out.total = total_loss(l_moc, l_mm, cfg.alpha);
  if (!std::isfinite(out.total.item())) {
    throw NonFiniteLossError(scene.image_id, l_moc.defined() ? l_moc.item() : 0.0, l_mm.item());
  }
  out.metrics.total_loss = out.total.item();
  return out;
}

/// Plain SGD with global gradient-norm clipping.
class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg) : lr_(cfg.learning_rate), clip_(cfg.grad_clip) {}

  void step(std::vector<NamedParameter>& params) const {
    double sq = 0.0;
    for (const auto& p : params) {
      for (double g : p.tensor.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    const double factor = clip_ > 0.0 && norm > clip_ ? clip_ / norm : 1.0;
    for (auto& p : params) {
      auto values = p.tensor.mutable_values();
      const auto grad = p.tensor.grad();
      for (std::size_t j = 0; j < values.size(); ++j) values[j] -= lr_ * factor * grad[j];
    }
  }

 private:
  double lr_;
  double clip_;
};

/// Forward, losses averaged over the batch, backward, one update.
inline StepMetrics train_step(Detector& net, std::span<const Scene* const> batch, const TrainConfig& cfg, const Optimizer& opt,
                              Rng& rng) {
  StepMetrics metrics;
  std::vector<diff::Tensor> losses;
  for (const Scene* s : batch) {
    SceneLoss sl = scene_loss(net, *s, cfg, rng);
    metrics += sl.metrics;
    losses.push_back(diff::reshape(sl.total, {1}));
  }
  const diff::Tensor loss = diff::scale(diff::sum(diff::concat_first(losses)), 1.0 / static_cast<double>(batch.size()));
  net.zero_grad();
  diff::backward(loss);
  opt.step(net.parameters());
  return metrics;
}

inline void write_metrics_header(std::ostream& os) {
  os << "epoch,loss_moc,loss_mm,foreground_ratio,underflow_cauchy,underflow_gaussian\n";
}

inline void write_metrics_row(std::ostream& os, const TrainDiagnostics& d) {
  os << d.epoch << ',' << format_double(d.loss_moc) << ',' << format_double(d.loss_mm) << ','
     << format_double(d.foreground_ratio) << ',' << format_double(d.underflow_cauchy) << ','
     << format_double(d.underflow_gaussian) << '\n';
}

struct TrainResult {
  std::vector<TrainDiagnostics> history;
};

/// Epoch loop. With an output directory, writes metrics.csv, periodic
/// `checkpoint-epoch-N` files and `checkpoint-final`.
inline TrainResult train_loop(Detector& net, std::span<const Scene> dataset, const TrainConfig& cfg,
                              const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                              const std::string& checkpoint_metadata = {},
                              const std::function<void(const TrainDiagnostics&)>& on_epoch = {}) {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("train_loop: empty dataset");
  std::ofstream metrics;
  if (out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(*out_dir, ec);
    if (ec) throw std::runtime_error("cannot create output directory " + out_dir->string() + ": " + ec.message());
    metrics.open(*out_dir / "metrics.csv", std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot write " + (*out_dir / "metrics.csv").string());
    write_metrics_header(metrics);
  }
  auto save = [&](const std::string& name) {
    if (out_dir) diff::save_checkpoint(*out_dir / name, net.to_checkpoint(checkpoint_metadata));
  };

  Rng shuffle_rng(derive_seed(cfg.seed, 1));
  Rng roi_rng(derive_seed(cfg.seed, 2));
  const Optimizer opt(cfg);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  TrainResult result;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(uniform_int(shuffle_rng, 0, static_cast<std::int64_t>(i) - 1))]);
    }
    StepMetrics epoch_metrics;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      std::vector<const Scene*> batch;
      for (std::size_t j = b; j < std::min(order.size(), b + cfg.batch_size); ++j) batch.push_back(&dataset[order[j]]);
      epoch_metrics += train_step(net, batch, cfg, opt, roi_rng);
    }
    const TrainDiagnostics diag = summarize(epoch, epoch_metrics);
    result.history.push_back(diag);
    if (metrics) {
      write_metrics_row(metrics, diag);
      metrics.flush();
    }
    if (on_epoch) on_epoch(diag);
    if (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) save("checkpoint-epoch-" + std::to_string(epoch));
  }
  save("checkpoint-final");
  return result;
}

}  // namespace mdod
