#pragma once

// Minimal reverse-mode differentiable tensors.
//
// A Tensor is a shared handle to a node holding row-major double values. Ops
// record their parents and a backward closure; backward() walks every node
// reachable from a scalar loss in reverse creation order and accumulates
// gradients into the nodes that require them.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mdod::diff {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

/// Thrown when an op receives tensors whose shapes break its contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<NodePtr> parents;
  // Reads this node's grad and accumulates into parents that require grad.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
};

namespace detail {
inline std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_size(shape) != values.size()) {
      throw ShapeError("tensor shape " + shape_string(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    }
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    n->seq = detail::next_seq();
    if (requires_grad) n->grad.assign(n->value.size(), 0.0);
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_size(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }

  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }

  /// Gradient buffer; empty when the tensor does not require grad.
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad; }

  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  const NodePtr& node() const { return node_; }

  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

 private:
  NodePtr node_;
};

/// Builds an op result. `backward` is attached only when some parent needs
/// gradients, so constant subgraphs carry no closures.
inline Tensor make_op(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                      std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->seq = detail::next_seq();
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p.requires_grad();
  if (n->requires_grad) {
    n->grad.assign(n->value.size(), 0.0);
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward);
  }
  return Tensor(std::move(n));
}

/// Ordered record of the executed ops reachable from a loss.
class ComputationTape {
 public:
  explicit ComputationTape(const Tensor& loss) : loss_(loss.node()) {
    std::vector<Node*> stack{loss_.get()};
    std::unordered_set<Node*> seen{loss_.get()};
    while (!stack.empty()) {
      Node* n = stack.back();
      stack.pop_back();
      if (!n->requires_grad) continue;
      nodes_.push_back(n);
      for (const auto& p : n->parents) {
        if (seen.insert(p.get()).second) stack.push_back(p.get());
      }
    }
    std::sort(nodes_.begin(), nodes_.end(), [](const Node* a, const Node* b) { return a->seq > b->seq; });
  }

  std::size_t size() const { return nodes_.size(); }

  /// Reverse traversal. Interior gradients are reset first so replaying the
  /// same tape is reproducible; leaf gradients accumulate.
  void backward() {
    if (loss_->value.size() != 1) {
      throw ShapeError("backward() needs a scalar loss, got " + shape_string(loss_->shape));
    }
    if (!loss_->requires_grad) return;
    for (Node* n : nodes_) {
      if (!n->is_leaf()) std::fill(n->grad.begin(), n->grad.end(), 0.0);
    }
    loss_->grad[0] += 1.0;
    for (Node* n : nodes_) {
      if (!n->is_leaf()) n->backward_fn(*n);
    }
  }

 private:
  NodePtr loss_;
  std::vector<Node*> nodes_;
};

inline void backward(const Tensor& loss) {
  ComputationTape tape(loss);
  tape.backward();
}

// ---------------------------------------------------------------------------
// Elementwise ops

namespace detail {

template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df) {
  std::vector<double> out(x.size());
  const auto in = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_op(x.shape(), std::move(out), {x}, [df](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      p.grad[i] += self.grad[i] * df(p.value[i], self.value[i]);
    }
  });
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double softplus_inverse(double y) { return y + std::log(-std::expm1(-y)); }

inline Tensor swish(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return v * detail::sigmoid(v); },
      [](double v, double) {
        const double s = detail::sigmoid(v);
        return s + v * s * (1.0 - s);
      });
}

inline Tensor tanh_act(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor softplus_act(const Tensor& x) {
  return detail::unary(x, softplus, [](double v, double) { return detail::sigmoid(v); });
}

/// max(x, floor); gradient is zero where the floor is active.
inline Tensor clamp_min(const Tensor& x, double floor) {
  return detail::unary(
      x, [floor](double v) { return std::max(v, floor); },
      [floor](double v, double) { return v > floor ? 1.0 : 0.0; });
}

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary(
      x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i] * pb.value[i];
      if (pb.requires_grad) pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
}

/// Adds a non-differentiable constant array of identical size.
inline Tensor add_constant(const Tensor& x, std::span<const double> c) {
  if (c.size() != x.size()) throw ShapeError("add_constant: size mismatch");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + c[i];
  return make_op(x.shape(), std::move(out), {x}, [](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make_op({}, {s}, {x}, [](Node& self) {
    Node& p = *self.parents[0];
    const double g = self.grad[0];
    for (double& v : p.grad) v += g;
  });
}

/// Value-identical copy that blocks gradient flow.
inline Tensor stop_gradient(const Tensor& x) {
  return Tensor::from(x.shape(), std::vector<double>(x.values().begin(), x.values().end()), false);
}

// ---------------------------------------------------------------------------
// Softmax

/// Softmax over the last axis; every leading index is one normalization row.
inline Tensor softmax(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("softmax of a scalar");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.values().data() + r * n;
    double* o = out.data() + r * n;
    const double m = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += (o[i] = std::exp(in[i] - m));
    for (std::size_t i = 0; i < n; ++i) o[i] /= z;
  }
  return make_op(x.shape(), std::move(out), {x}, [n, rows](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * n;
      const double* g = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += y[i] * g[i];
      for (std::size_t i = 0; i < n; ++i) p.grad[r * n + i] += y[i] * (g[i] - dot);
    }
  });
}

/// Softmax over every element jointly.
inline Tensor softmax_all(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto in = x.values();
  const double m = *std::max_element(in.begin(), in.end());
  double z = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) z += (out[i] = std::exp(in[i] - m));
  for (double& v : out) v /= z;
  return make_op(x.shape(), std::move(out), {x}, [](Node& self) {
    Node& p = *self.parents[0];
    double dot = 0.0;
    for (std::size_t i = 0; i < self.value.size(); ++i) dot += self.value[i] * self.grad[i];
    for (std::size_t i = 0; i < self.value.size(); ++i) p.grad[i] += self.value[i] * (self.grad[i] - dot);
  });
}

// ---------------------------------------------------------------------------
// Shape ops

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape " + shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  return make_op(std::move(shape), std::vector<double>(x.values().begin(), x.values().end()), {x},
                 [](Node& self) {
                   Node& p = *self.parents[0];
                   for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
                 });
}

/// Channels [begin, begin + count) of the last axis.
inline Tensor slice_last(const Tensor& x, std::size_t begin, std::size_t count) {
  const std::size_t n = x.shape().back();
  if (begin + count > n) throw ShapeError("slice_last out of range");
  const std::size_t rows = x.size() / n;
  Shape shape = x.shape();
  shape.back() = count;
  std::vector<double> out(rows * count);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(x.values().data() + r * n + begin, count, out.data() + r * count);
  }
  return make_op(std::move(shape), std::move(out), {x}, [n, rows, begin, count](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < count; ++c) p.grad[r * n + begin + c] += self.grad[r * count + c];
    }
  });
}

/// Concatenates along the last axis; leading extents must agree.
inline Tensor concat_last(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("concat_last of nothing");
  Shape lead(xs[0].shape().begin(), xs[0].shape().end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& x : xs) {
    if (Shape(x.shape().begin(), x.shape().end() - 1) != lead) throw ShapeError("concat_last: leading shape mismatch");
    widths.push_back(x.shape().back());
    total += x.shape().back();
  }
  const std::size_t rows = shape_size(lead);
  std::vector<double> out(rows * total);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      std::copy_n(xs[i].values().data() + r * widths[i], widths[i], out.data() + r * total + off);
      off += widths[i];
    }
  }
  Shape shape = lead;
  shape.push_back(total);
  return make_op(std::move(shape), std::move(out), xs, [widths, rows, total](Node& self) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      Node& p = *self.parents[i];
      if (p.requires_grad) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < widths[i]; ++c) p.grad[r * widths[i] + c] += self.grad[r * total + off + c];
        }
      }
      off += widths[i];
    }
  });
}

/// Concatenates along the first axis; trailing extents must agree.
inline Tensor concat_first(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("concat_first of nothing");
  Shape tail(xs[0].shape().begin() + 1, xs[0].shape().end());
  std::size_t lead = 0;
  std::vector<double> out;
  for (const auto& x : xs) {
    if (Shape(x.shape().begin() + 1, x.shape().end()) != tail) throw ShapeError("concat_first: trailing shape mismatch");
    lead += x.shape()[0];
    out.insert(out.end(), x.values().begin(), x.values().end());
  }
  Shape shape{lead};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return make_op(std::move(shape), std::move(out), xs, [](Node& self) {
    std::size_t off = 0;
    for (auto& p : self.parents) {
      const std::size_t n = p->value.size();
      if (p->requires_grad) {
        for (std::size_t i = 0; i < n; ++i) p->grad[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

/// Nearest-neighbour 2x upsampling of an HxWxC map, cropped to out_h x out_w.
inline Tensor upsample2x(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 3) throw ShapeError("upsample2x expects HxWxC");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if ((out_h + 1) / 2 != h || (out_w + 1) / 2 != w) throw ShapeError("upsample2x: target extent mismatch");
  std::vector<double> out(out_h * out_w * c);
  for (std::size_t i = 0; i < out_h; ++i) {
    for (std::size_t j = 0; j < out_w; ++j) {
      std::copy_n(x.values().data() + ((i / 2) * w + j / 2) * c, c, out.data() + (i * out_w + j) * c);
    }
  }
  return make_op({out_h, out_w, c}, std::move(out), {x}, [w, c, out_h, out_w](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < out_h; ++i) {
      for (std::size_t j = 0; j < out_w; ++j) {
        const double* g = self.grad.data() + (i * out_w + j) * c;
        double* pg = p.grad.data() + ((i / 2) * w + j / 2) * c;
        for (std::size_t k = 0; k < c; ++k) pg[k] += g[k];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution

/// Same-padded cross-correlation of an HxWxCin map with a kxkxCinxCout kernel.
/// With stride s the output extent is ceil(H/s) x ceil(W/s).
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride = 1) {
  if (input.rank() != 3 || kernel.rank() != 4 || bias.rank() != 1) {
    throw ShapeError("conv2d expects HxWxCin input, kxkxCinxCout kernel and Cout bias");
  }
  const std::size_t h = input.dim(0), w = input.dim(1), cin = input.dim(2);
  const std::size_t k = kernel.dim(0), cout = kernel.dim(3);
  if (kernel.dim(1) != k || (k != 1 && k != 3) || kernel.dim(2) != cin || bias.dim(0) != cout || stride == 0) {
    throw ShapeError("conv2d: incompatible shapes input " + shape_string(input.shape()) + " kernel " +
                     shape_string(kernel.shape()) + " bias " + shape_string(bias.shape()));
  }
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t ho = (h + stride - 1) / stride, wo = (w + stride - 1) / stride;

  const double* x = input.values().data();
  const double* wt = kernel.values().data();
  const double* bs = bias.values().data();
  std::vector<double> out(ho * wo * cout);
  for (std::size_t oi = 0; oi < ho; ++oi) {
    for (std::size_t oj = 0; oj < wo; ++oj) {
      double* o = out.data() + (oi * wo + oj) * cout;
      std::copy_n(bs, cout, o);
      for (std::size_t ki = 0; ki < k; ++ki) {
        const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * stride + ki) - pad;
        if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kj = 0; kj < k; ++kj) {
          const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj * stride + kj) - pad;
          if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(w)) continue;
          const double* xi = x + (static_cast<std::size_t>(ii) * w + static_cast<std::size_t>(jj)) * cin;
          const double* wk = wt + (ki * k + kj) * cin * cout;
          for (std::size_t c = 0; c < cin; ++c) {
            const double xv = xi[c];
            const double* wc = wk + c * cout;
            for (std::size_t d = 0; d < cout; ++d) o[d] += xv * wc[d];
          }
        }
      }
    }
  }

  return make_op({ho, wo, cout}, std::move(out), {input, kernel, bias},
                 [h, w, cin, k, cout, pad, ho, wo, stride](Node& self) {
                   Node& pin = *self.parents[0];
                   Node& pk = *self.parents[1];
                   Node& pb = *self.parents[2];
                   const double* x = pin.value.data();
                   const double* wt = pk.value.data();
                   for (std::size_t oi = 0; oi < ho; ++oi) {
                     for (std::size_t oj = 0; oj < wo; ++oj) {
                       const double* g = self.grad.data() + (oi * wo + oj) * cout;
                       if (pb.requires_grad) {
                         for (std::size_t d = 0; d < cout; ++d) pb.grad[d] += g[d];
                       }
                       for (std::size_t ki = 0; ki < k; ++ki) {
                         const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * stride + ki) - pad;
                         if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
                         for (std::size_t kj = 0; kj < k; ++kj) {
                           const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj * stride + kj) - pad;
                           if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(w)) continue;
                           const std::size_t xoff = (static_cast<std::size_t>(ii) * w + static_cast<std::size_t>(jj)) * cin;
                           const std::size_t woff = (ki * k + kj) * cin * cout;
                           for (std::size_t c = 0; c < cin; ++c) {
                             const double* wc = wt + woff + c * cout;
                             if (pin.requires_grad) {
                               double acc = 0.0;
                               for (std::size_t d = 0; d < cout; ++d) acc += wc[d] * g[d];
                               pin.grad[xoff + c] += acc;
                             }
                             if (pk.requires_grad) {
                               const double xv = x[xoff + c];
                               double* gw = pk.grad.data() + woff + c * cout;
                               for (std::size_t d = 0; d < cout; ++d) gw[d] += xv * g[d];
                             }
                           }
                         }
                       }
                     }
                   }
                 });
}

}  // namespace mdod::diff
