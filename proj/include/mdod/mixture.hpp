#pragma once

// Mixture of per-coordinate Cauchy (or Gaussian) box densities with
// per-component class probabilities.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdod/geometry.hpp"
#include "mdod/random.hpp"

namespace mdod {

enum class Distribution { cauchy, gaussian };
enum class Precision { half, single, double_ };
enum class BoxEncoding { ltrb, xywh };

inline const char* to_string(Distribution d) { return d == Distribution::cauchy ? "cauchy" : "gaussian"; }

inline Distribution parse_distribution(const std::string& s) {
  if (s == "cauchy") return Distribution::cauchy;
  if (s == "gaussian") return Distribution::gaussian;
  throw std::invalid_argument("unknown distribution '" + s + "' (expected cauchy|gaussian)");
}

inline constexpr double kGammaFloor = 1e-4;

inline double cauchy_logpdf(double x, double mu, double gamma) {
  if (!(gamma > 0.0)) throw std::domain_error("cauchy_logpdf: gamma must be positive");
  const double d = x - mu;
  // log(d^2 + g^2) without overflow for huge deviations.
  const double big = std::max(std::abs(d), gamma);
  const double small = std::min(std::abs(d), gamma);
  const double ratio = small / big;
  const double log_den = 2.0 * std::log(big) + std::log1p(ratio * ratio);
  return std::log(gamma) - std::log(std::numbers::pi) - log_den;
}

inline double gaussian_logpdf(double x, double mu, double sigma) {
  if (!(sigma > 0.0)) throw std::domain_error("gaussian_logpdf: sigma must be positive");
  const double z = (x - mu) / sigma;
  return -0.5 * std::log(2.0 * std::numbers::pi) - std::log(sigma) - 0.5 * z * z;
}

inline double coord_logpdf(Distribution dist, double x, double mu, double scale) {
  return dist == Distribution::cauchy ? cauchy_logpdf(x, mu, scale) : gaussian_logpdf(x, mu, scale);
}

/// Sum of the four independent per-coordinate log densities.
inline double box_logpdf(std::span<const double, 4> x, std::span<const double, 4> mu, std::span<const double, 4> gamma,
                         Distribution dist = Distribution::cauchy) {
  double s = 0.0;
  for (std::size_t c = 0; c < 4; ++c) s += coord_logpdf(dist, x[c], mu[c], gamma[c]);
  return s;
}

inline double box_logpdf(const Box& box, std::span<const double, 4> mu, std::span<const double, 4> gamma,
                         Distribution dist = Distribution::cauchy) {
  const auto c = box.coords();
  return box_logpdf(std::span<const double, 4>(c), mu, gamma, dist);
}

/// Coordinates of `box` in the given encoding.
inline std::array<double, 4> encode_box(const Box& box, BoxEncoding enc) {
  return enc == BoxEncoding::ltrb ? box.coords() : ltrb_to_xywh(box.l, box.t, box.r, box.b);
}

/// Max-subtracted log(sum(exp(v))); -inf for an empty or all -inf input.
inline double log_sum_exp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

/// Flattened K-component mixture. Rows are row-major: mu and gamma are Kx4,
/// p is Kx(C+1) with background last, pi has K entries.
struct MixtureModel {
  std::size_t num_components = 0;
  std::size_t num_classes = 0;  // C foreground classes
  BoxEncoding encoding = BoxEncoding::ltrb;
  std::vector<double> mu;
  std::vector<double> gamma;
  std::vector<double> p;
  std::vector<double> pi;

  std::size_t K() const { return num_components; }
  std::size_t class_channels() const { return num_classes + 1; }
  std::size_t background() const { return num_classes; }

  std::span<const double, 4> mu_row(std::size_t k) const { return std::span<const double, 4>(mu.data() + 4 * k, 4); }
  std::span<const double, 4> gamma_row(std::size_t k) const {
    return std::span<const double, 4>(gamma.data() + 4 * k, 4);
  }
  std::span<const double> p_row(std::size_t k) const {
    return std::span<const double>(p.data() + class_channels() * k, class_channels());
  }

  /// Component location as an ltrb box, whatever the encoding.
  Box component_box(std::size_t k) const {
    const auto m = mu_row(k);
    if (encoding == BoxEncoding::ltrb) return Box{m[0], m[1], m[2], m[3]};
    return Box::from_coords(xywh_to_ltrb(m[0], m[1], std::max(0.0, m[2]), std::max(0.0, m[3])));
  }

  /// Throws std::invalid_argument naming the first broken invariant.
  void validate(double tol = 1e-9) const {
    const std::size_t K = num_components, cc = class_channels();
    if (mu.size() != 4 * K || gamma.size() != 4 * K || p.size() != cc * K || pi.size() != K) {
      throw std::invalid_argument("mixture: array sizes do not match K=" + std::to_string(K));
    }
    double pi_sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      for (double g : gamma_row(k)) {
        if (!(g > 0.0)) throw std::invalid_argument("mixture: non-positive gamma at component " + std::to_string(k));
      }
      double ps = 0.0;
      for (double v : p_row(k)) {
        if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("mixture: p out of [0,1] at component " + std::to_string(k));
        ps += v;
      }
      if (std::abs(ps - 1.0) > tol) throw std::invalid_argument("mixture: p row " + std::to_string(k) + " does not sum to 1");
      if (!(pi[k] >= 0.0 && pi[k] <= 1.0)) throw std::invalid_argument("mixture: pi out of [0,1]");
      pi_sum += pi[k];
      if (encoding == BoxEncoding::ltrb) {
        const auto m = mu_row(k);
        if (m[0] > m[2] || m[1] > m[3]) throw std::invalid_argument("mixture: mu row " + std::to_string(k) + " has l>r or t>b");
      }
    }
    if (std::abs(pi_sum - 1.0) > tol) throw std::invalid_argument("mixture: pi does not sum to 1");
  }
};

/// log sum_k pi_k F(box; mu_k, gamma_k).
inline double mixture_box_loglik(const Box& box, const MixtureModel& model, Distribution dist = Distribution::cauchy) {
  const auto x = encode_box(box, model.encoding);
  std::vector<double> terms(model.K());
  for (std::size_t k = 0; k < model.K(); ++k) {
    terms[k] = std::log(model.pi[k]) + box_logpdf(std::span<const double, 4>(x), model.mu_row(k), model.gamma_row(k), dist);
  }
  return log_sum_exp(terms);
}

/// log sum_k pi_k F(box; mu_k, gamma_k) p_k[class], the complete mixture.
inline double mixture_full_loglik(const Box& box, const MixtureModel& model, Distribution dist = Distribution::cauchy) {
  if (!box.class_id || *box.class_id < 0 || static_cast<std::size_t>(*box.class_id) > model.num_classes) {
    throw std::invalid_argument("mixture_full_loglik: class_id outside [0, C]");
  }
  const auto cls = static_cast<std::size_t>(*box.class_id);
  const auto x = encode_box(box, model.encoding);
  std::vector<double> terms(model.K());
  for (std::size_t k = 0; k < model.K(); ++k) {
    terms[k] = std::log(model.pi[k]) + std::log(model.p_row(k)[cls]) +
               box_logpdf(std::span<const double, 4>(x), model.mu_row(k), model.gamma_row(k), dist);
  }
  return log_sum_exp(terms);
}

/// n i.i.d. categorical draws by inverse CDF.
inline std::vector<std::size_t> sample_components(std::span<const double> pi, std::size_t n, Rng& rng) {
  std::vector<double> cdf(pi.size());
  double acc = 0.0;
  for (std::size_t k = 0; k < pi.size(); ++k) cdf[k] = (acc += pi[k]);
  std::vector<std::size_t> out(n);
  if (pi.empty()) return {};
  // The last component with nonzero mass absorbs rounding in the total.
  std::size_t last = pi.size() - 1;
  while (last > 0 && pi[last] <= 0.0) --last;
  for (auto& idx : out) {
    const double u = uniform01(rng) * acc;
    const auto it = std::upper_bound(cdf.begin(), cdf.begin() + static_cast<std::ptrdiff_t>(last), u);
    idx = static_cast<std::size_t>(it - cdf.begin());
  }
  return out;
}

/// Round-to-nearest-even into IEEE binary16 (subnormals kept), back to double.
inline double round_to_half(double x) {
  if (!std::isfinite(x) || x == 0.0) return x;
  const double ax = std::abs(x);
  int e = 0;
  std::frexp(ax, &e);  // ax = m * 2^e, m in [0.5, 1)
  const int exponent = std::max(e - 1, -14);
  const double quantum = std::ldexp(1.0, exponent - 10);
  const double r = std::nearbyint(ax / quantum) * quantum;
  if (r > 65504.0) return std::copysign(std::numeric_limits<double>::infinity(), x);
  return std::copysign(r, x);
}

inline double round_to_precision(double x, Precision prec) {
  switch (prec) {
    case Precision::half: return round_to_half(x);
    case Precision::single: return static_cast<double>(static_cast<float>(x));
    case Precision::double_: return x;
  }
  return x;
}

/// Product of the four per-coordinate densities, each factor and each
/// partial product rounded to `prec`.
inline double component_density(std::span<const double, 4> x, std::span<const double, 4> mu,
                                 std::span<const double, 4> gamma, Distribution dist, Precision prec) {
  double prod = 1.0;
  for (std::size_t c = 0; c < 4; ++c) {
    const double f = round_to_precision(std::exp(coord_logpdf(dist, x[c], mu[c], gamma[c])), prec);
    prod = round_to_precision(prod * f, prec);
  }
  return prod;
}

/// Number of (box, component) pairs whose density rounds to exactly zero.
inline std::size_t underflow_count(std::span<const Box> boxes, const MixtureModel& model, Distribution dist,
                                   Precision prec) {
  std::size_t zero = 0;
  for (const Box& box : boxes) {
    const auto x = encode_box(box, model.encoding);
    for (std::size_t k = 0; k < model.K(); ++k) {
      if (component_density(std::span<const double, 4>(x), model.mu_row(k), model.gamma_row(k), dist, prec) == 0.0) ++zero;
    }
  }
  return zero;
}

/// Fraction of (box, component) pairs whose density rounds to exactly zero.
inline double underflow_ratio(std::span<const Box> boxes, const MixtureModel& model, Distribution dist, Precision prec) {
  const std::size_t total = boxes.size() * model.K();
  return total == 0 ? 0.0 : static_cast<double>(underflow_count(boxes, model, dist, prec)) / static_cast<double>(total);
}

}  // namespace mdod
