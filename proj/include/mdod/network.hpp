#pragma once

// Toy feature pyramid and the mixture head: raw outputs o1..o4 per level,
// decoded into parameter maps and flattened into one mixture model.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mdod/checkpoint.hpp"
#include "mdod/diffcore.hpp"
#include "mdod/mixture.hpp"
#include "mdod/random.hpp"

namespace mdod {

using diff::Tensor;

/// Toggles for the three decoding components, plus head sizes.
struct HeadConfig {
  bool use_ltrb = true;
  bool use_center_limit = true;
  bool use_level_scale = true;
  std::size_t num_classes = 3;
  std::size_t feature_width = 32;

  friend bool operator==(const HeadConfig&, const HeadConfig&) = default;
};

struct NetworkConfig {
  std::size_t image_size = 64;
  std::size_t num_levels = 3;  // pyramid levels, topmost is level 5
  HeadConfig head;

  int lowest_level() const { return 6 - static_cast<int>(num_levels); }

  void validate() const {
    if (num_levels < 1 || num_levels > 5) throw std::invalid_argument("num_levels must be in [1, 5]");
    if (head.num_classes < 1 || head.feature_width < 1) throw std::invalid_argument("class count and feature width must be positive");
    if (image_size == 0 || image_size % 32 != 0) {
      throw std::invalid_argument("image_size " + std::to_string(image_size) + " is not divisible by the largest stride 32");
    }
  }

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

/// Level-scale factor s = 2^(l-5).
inline double level_scale(int level) { return std::ldexp(1.0, level - 5); }

struct PyramidLevel {
  int level = 0;
  std::size_t stride = 0;
  Tensor features;  // h x w x F
};

struct FeaturePyramid {
  std::vector<PyramidLevel> levels;
};

struct RawOutputs {
  Tensor o1;  // h x w x 4
  Tensor o2;  // h x w x 4
  Tensor o3;  // h x w x (C+1)
  Tensor o4;  // h x w x 1
};

struct LevelMaps {
  int level = 0;
  std::size_t stride = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  Tensor mu;        // h x w x 4, ltrb (or xywh without the ltrb transform)
  Tensor gamma;     // h x w x 4
  Tensor p;         // h x w x (C+1)
  Tensor pi_logit;  // h x w x 1
};

/// Flattened mixture whose parameters are still on the tape.
struct MixtureTensors {
  Tensor mu;     // K x 4
  Tensor gamma;  // K x 4
  Tensor p;      // K x (C+1)
  Tensor pi;     // K
  std::size_t num_classes = 0;
  BoxEncoding encoding = BoxEncoding::ltrb;

  std::size_t K() const { return pi.size(); }

  MixtureModel model() const {
    MixtureModel m;
    m.num_components = K();
    m.num_classes = num_classes;
    m.encoding = encoding;
    m.mu.assign(mu.values().begin(), mu.values().end());
    m.gamma.assign(gamma.values().begin(), gamma.values().end());
    m.p.assign(p.values().begin(), p.values().end());
    m.pi.assign(pi.values().begin(), pi.values().end());
    return m;
  }
};

/// Cell centers (x, y) in input pixels, row-major over an h x w grid.
inline std::pair<std::vector<double>, std::vector<double>> center_offsets(std::size_t stride, std::size_t h, std::size_t w) {
  std::vector<double> xs(h * w), ys(h * w);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      xs[i * w + j] = (static_cast<double>(j) + 0.5) * static_cast<double>(stride);
      ys[i * w + j] = (static_cast<double>(i) + 0.5) * static_cast<double>(stride);
    }
  }
  return {std::move(xs), std::move(ys)};
}

inline Tensor decode_mu(const Tensor& o1, int level, std::size_t stride, const HeadConfig& cfg) {
  using namespace diff;
  const std::size_t h = o1.dim(0), w = o1.dim(1);
  const double s = cfg.use_level_scale ? level_scale(level) : 1.0;
  const double st = static_cast<double>(stride);
  const Tensor scaled = scale(o1, s);
  const auto [xbar, ybar] = center_offsets(stride, h, w);

  auto center = [&](std::size_t ch, const std::vector<double>& offsets) {
    Tensor d = slice_last(scaled, ch, 1);
    if (cfg.use_center_limit) d = scale(tanh_act(d), st);
    return add_constant(d, offsets);
  };
  const Tensor cx = center(0, xbar);
  const Tensor cy = center(1, ybar);
  const Tensor bw = scale(softplus_act(slice_last(scaled, 2, 1)), st);
  const Tensor bh = scale(softplus_act(slice_last(scaled, 3, 1)), st);
  if (!cfg.use_ltrb) return concat_last({cx, cy, bw, bh});
  const Tensor half_w = scale(bw, 0.5), half_h = scale(bh, 0.5);
  return concat_last({add(cx, scale(half_w, -1.0)), add(cy, scale(half_h, -1.0)), add(cx, half_w), add(cy, half_h)});
}

inline Tensor decode_gamma(const Tensor& o2, int level, std::size_t stride, const HeadConfig& cfg) {
  using namespace diff;
  const double s = cfg.use_level_scale ? level_scale(level) : 1.0;
  return clamp_min(scale(softplus_act(scale(o2, s)), static_cast<double>(stride)), kGammaFloor);
}

inline Tensor decode_p(const Tensor& o3) { return diff::softmax(o3); }

/// One softmax over the o4 logits of every cell of every level.
inline Tensor decode_pi(const std::vector<Tensor>& o4_per_level) {
  std::vector<Tensor> flat;
  flat.reserve(o4_per_level.size());
  for (const auto& o4 : o4_per_level) flat.push_back(diff::reshape(o4, {o4.size()}));
  return diff::softmax_all(diff::concat_first(flat));
}

/// Level-major, then row-major component order.
inline MixtureTensors flatten_to_mixture(const std::vector<LevelMaps>& maps, const Tensor& pi, const HeadConfig& cfg) {
  std::vector<Tensor> mus, gammas, ps;
  for (const auto& m : maps) {
    const std::size_t cells = m.height * m.width;
    mus.push_back(diff::reshape(m.mu, {cells, 4}));
    gammas.push_back(diff::reshape(m.gamma, {cells, 4}));
    ps.push_back(diff::reshape(m.p, {cells, cfg.num_classes + 1}));
  }
  MixtureTensors out;
  out.mu = diff::concat_first(mus);
  out.gamma = diff::concat_first(gammas);
  out.p = diff::concat_first(ps);
  out.pi = pi;
  out.num_classes = cfg.num_classes;
  out.encoding = cfg.use_ltrb ? BoxEncoding::ltrb : BoxEncoding::xywh;
  return out;
}

struct ForwardResult {
  FeaturePyramid pyramid;
  std::vector<RawOutputs> raw;
  std::vector<LevelMaps> maps;
  MixtureTensors mixture;
};

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

class Detector {
 public:
  Detector(NetworkConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    const std::size_t F = cfg_.head.feature_width;
    const int lmin = cfg_.lowest_level();
    std::size_t cin = 3;
    for (int i = 1; i <= lmin; ++i) {
      const std::size_t cout = i == lmin ? F : std::min<std::size_t>(F, std::size_t{8} << i);
      add_conv("stem." + std::to_string(i), 3, cin, cout, rng);
      cin = cout;
    }
    for (int l = lmin + 1; l <= 5; ++l) add_conv("down." + std::to_string(l), 3, F, F, rng);
    for (int l = lmin; l <= 5; ++l) add_conv("lateral." + std::to_string(l), 1, F, F, rng);
    add_conv("head.conv3", 3, F, F, rng);
    add_conv("head.conv1", 1, F, F, rng);
    add_conv("head.mu", 1, F, 4, rng);
    add_conv("head.gamma", 1, F, 4, rng);
    add_conv("head.cls", 1, F, cfg_.head.num_classes + 1, rng);
    add_conv("head.pi", 1, F, 1, rng);
    // softplus(s * b) = 1 at the top level.
    auto gb = param("head.gamma.b").mutable_values();
    std::fill(gb.begin(), gb.end(), diff::softplus_inverse(1.0));
  }

  const NetworkConfig& config() const { return cfg_; }
  std::vector<NamedParameter>& parameters() { return params_; }
  const std::vector<NamedParameter>& parameters() const { return params_; }

  Tensor& param(const std::string& name) { return params_.at(index_.at(name)).tensor; }
  const Tensor& param(const std::string& name) const { return params_.at(index_.at(name)).tensor; }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  FeaturePyramid backbone_forward(const Tensor& image) const {
    using namespace diff;
    if (image.rank() != 3 || image.dim(2) != 3) throw ShapeError("image must be HxWx3");
    if (image.dim(0) % 32 != 0 || image.dim(1) % 32 != 0) {
      throw ShapeError("image extent " + shape_string(image.shape()) + " not divisible by the largest stride");
    }
    const int lmin = cfg_.lowest_level();
    Tensor x = image;
    for (int i = 1; i <= lmin; ++i) x = conv("stem." + std::to_string(i), x, 2);
    std::vector<Tensor> bottom_up{x};
    for (int l = lmin + 1; l <= 5; ++l) bottom_up.push_back(x = conv("down." + std::to_string(l), x, 2));

    FeaturePyramid pyr;
    pyr.levels.resize(cfg_.num_levels);
    Tensor top;
    for (int l = 5; l >= lmin; --l) {
      const auto idx = static_cast<std::size_t>(l - lmin);
      const Tensor& c = bottom_up[idx];
      Tensor lat = conv2d(c, param("lateral." + std::to_string(l) + ".w"), param("lateral." + std::to_string(l) + ".b"));
      if (top.defined()) lat = add(lat, upsample2x(top, c.dim(0), c.dim(1)));
      pyr.levels[idx] = PyramidLevel{l, std::size_t{1} << l, lat};
      top = lat;
    }
    return pyr;
  }

  std::vector<RawOutputs> head_forward(const FeaturePyramid& pyr) const {
    std::vector<RawOutputs> out;
    for (const auto& lvl : pyr.levels) {
      const Tensor h1 = conv("head.conv3", lvl.features, 1);
      const Tensor h2 = conv("head.conv1", h1, 1);
      out.push_back(RawOutputs{linear_conv("head.mu", h2), linear_conv("head.gamma", h2), linear_conv("head.cls", h2),
                               linear_conv("head.pi", h2)});
    }
    return out;
  }

  ForwardResult forward(const Tensor& image) const {
    ForwardResult res;
    res.pyramid = backbone_forward(image);
    res.raw = head_forward(res.pyramid);
    std::vector<Tensor> o4s;
    for (std::size_t i = 0; i < res.raw.size(); ++i) {
      const auto& lvl = res.pyramid.levels[i];
      const auto& raw = res.raw[i];
      res.maps.push_back(LevelMaps{lvl.level, lvl.stride, raw.o1.dim(0), raw.o1.dim(1),
                                   decode_mu(raw.o1, lvl.level, lvl.stride, cfg_.head),
                                   decode_gamma(raw.o2, lvl.level, lvl.stride, cfg_.head), decode_p(raw.o3), raw.o4});
      o4s.push_back(raw.o4);
    }
    res.mixture = flatten_to_mixture(res.maps, decode_pi(o4s), cfg_.head);
    return res;
  }

  diff::Checkpoint to_checkpoint(std::string metadata) const {
    diff::Checkpoint ck;
    ck.metadata = std::move(metadata);
    for (const auto& p : params_) {
      ck.tensors.push_back({p.name, p.tensor.shape(), {p.tensor.values().begin(), p.tensor.values().end()}});
    }
    return ck;
  }

  /// Copies checkpoint values into this detector; names and shapes must match.
  void load_parameters(const diff::Checkpoint& ck) {
    if (ck.tensors.size() != params_.size()) {
      throw diff::CheckpointError("checkpoint has " + std::to_string(ck.tensors.size()) + " tensors, model expects " +
                                  std::to_string(params_.size()));
    }
    for (const auto& t : ck.tensors) {
      auto it = index_.find(t.name);
      if (it == index_.end()) throw diff::CheckpointError("checkpoint tensor '" + t.name + "' is unknown to the model");
      Tensor& dst = params_[it->second].tensor;
      if (dst.shape() != t.shape) {
        throw diff::CheckpointError("checkpoint tensor '" + t.name + "' has shape " + diff::shape_string(t.shape) +
                                    ", model expects " + diff::shape_string(dst.shape()));
      }
      std::copy(t.values.begin(), t.values.end(), dst.mutable_values().begin());
    }
  }

 private:
  void add_conv(const std::string& name, std::size_t k, std::size_t cin, std::size_t cout, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(k * k * cin));
    std::vector<double> w(k * k * cin * cout);
    for (double& v : w) v = uniform(rng, -bound, bound);
    add_param(name + ".w", Tensor::from({k, k, cin, cout}, std::move(w), true));
    add_param(name + ".b", Tensor::zeros({cout}, true));
  }

  void add_param(const std::string& name, Tensor t) {
    index_[name] = params_.size();
    params_.push_back({name, std::move(t)});
  }

  Tensor conv(const std::string& name, const Tensor& x, std::size_t stride) const {
    return diff::swish(diff::conv2d(x, param(name + ".w"), param(name + ".b"), stride));
  }

  Tensor linear_conv(const std::string& name, const Tensor& x) const {
    return diff::conv2d(x, param(name + ".w"), param(name + ".b"));
  }

  NetworkConfig cfg_;
  std::vector<NamedParameter> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace mdod
