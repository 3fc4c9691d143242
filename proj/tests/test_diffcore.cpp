#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "mdod/checkpoint.hpp"
#include "mdod/diffcore.hpp"
#include "oracles.hpp"

using namespace mdod::diff;
using mdod::Rng;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double sd = 1.0, bool grad = true) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = sd * mdod::normal01(rng);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

// sum(y * w) with a fixed random w, so every output element matters.
Tensor weighted(const Tensor& y, const Tensor& w) { return sum(mul(y, w)); }

constexpr int kInstances = 20;
constexpr double kTol = 1e-4;

template <class Op>
void check_unary(Op op, double sd = 2.0, std::uint64_t seed = 1) {
  Rng rng(seed);
  for (int i = 0; i < kInstances; ++i) {
    std::vector<Tensor> leaves{random_tensor(rng, {3, 4}, sd)};
    const Tensor w = random_tensor(rng, {3, 4}, 1.0, false);
    const auto res = oracle::check_gradients(leaves, [&] { return weighted(op(leaves[0]), w); });
    EXPECT_LT(res.max_rel_err, kTol) << "instance " << i;
  }
}

}  // namespace

TEST(Tensor, ShapeMustMatchValues) {
  EXPECT_THROW(Tensor::from({2, 3}, {1, 2, 3}), ShapeError);
  const Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.grad().size(), 6u);
  EXPECT_TRUE(Tensor::from({2}, {1, 2}).grad().empty());
}

TEST(Backward, SumGivesOnes) {
  const Tensor x = Tensor::from({4}, {1, -2, 3, 0.5}, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SumOfSquaresGivesTwoX) {
  const Tensor x = Tensor::from({3}, {1.5, -2, 0.25}, true);
  backward(sum(mul(x, x)));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(x.grad()[i], 2 * x[i]);
}

TEST(Backward, NonScalarLossRejected) {
  const Tensor x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(backward(scale(x, 2.0)), ShapeError);
}

TEST(Backward, RepeatedRunsBitIdentical) {
  Rng rng(4);
  Tensor x = random_tensor(rng, {4, 4, 2});
  const Tensor k = random_tensor(rng, {3, 3, 2, 3});
  const Tensor b = random_tensor(rng, {3});
  const Tensor loss = sum(softmax(swish(conv2d(x, k, b))));
  ComputationTape tape(loss);
  tape.backward();
  const std::vector<double> first(x.grad().begin(), x.grad().end());
  x.zero_grad();
  tape.backward();
  const std::vector<double> second(x.grad().begin(), x.grad().end());
  EXPECT_EQ(first, second);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  const Tensor x = Tensor::from({1}, {3.0}, true);
  const Tensor y = mul(x, x);
  backward(sum(add(y, y)));  // 2x^2
  EXPECT_EQ(x.grad()[0], 12.0);
}

TEST(StopGradient, BlocksFlow) {
  const Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  const Tensor sg = stop_gradient(x);
  EXPECT_EQ(std::vector<double>(sg.values().begin(), sg.values().end()), (std::vector<double>{1, 2, 3}));
  const Tensor z = Tensor::from({3}, {1, 1, 1}, true);
  backward(sum(add(sg, z)));
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(StopGradient, ProductRule) {
  const Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  const Tensor y = Tensor::from({3}, {4, -5, 6}, true);
  backward(sum(mul(x, stop_gradient(y))));
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(y.grad()[i], 0.0);
    EXPECT_EQ(x.grad()[i], y[i]);
  }
}

TEST(Activations, SwishValues) {
  EXPECT_EQ(swish(Tensor::scalar(0.0)).item(), 0.0);
  EXPECT_NEAR(swish(Tensor::scalar(20.0)).item(), 20.0, 1e-6);
}

TEST(Activations, TanhValues) {
  EXPECT_EQ(tanh_act(Tensor::scalar(0.0)).item(), 0.0);
  EXPECT_NEAR(tanh_act(Tensor::scalar(50.0)).item(), 1.0, 1e-12);
  EXPECT_NEAR(tanh_act(Tensor::scalar(-50.0)).item(), -1.0, 1e-12);
}

TEST(Activations, SoftplusValues) {
  EXPECT_NEAR(softplus_act(Tensor::scalar(0.0)).item(), std::log(2.0), 1e-15);
  EXPECT_NEAR(softplus_act(Tensor::scalar(50.0)).item(), 50.0, 1e-12);
  EXPECT_GT(softplus_act(Tensor::scalar(-50.0)).item(), 0.0);
  EXPECT_TRUE(std::isfinite(softplus_act(Tensor::scalar(800.0)).item()));
  EXPECT_NEAR(softplus(softplus_inverse(1.0)), 1.0, 1e-15);
}

TEST(Activations, SwishGradientTight) {
  Rng rng(9);
  for (int i = 0; i < kInstances; ++i) {
    std::vector<Tensor> leaves{random_tensor(rng, {5}, 3.0)};
    const auto res = oracle::check_gradients(leaves, [&] { return sum(swish(leaves[0])); });
    EXPECT_LT(res.max_rel_err, 1e-6);
  }
}

TEST(GradCheck, Swish) { check_unary([](const Tensor& x) { return swish(x); }); }
TEST(GradCheck, Tanh) { check_unary([](const Tensor& x) { return tanh_act(x); }); }
TEST(GradCheck, Softplus) { check_unary([](const Tensor& x) { return softplus_act(x); }); }
TEST(GradCheck, Scale) { check_unary([](const Tensor& x) { return scale(x, -1.7); }); }
TEST(GradCheck, ClampMinAwayFromKink) {
  // Values kept at least 0.1 from the floor, where the derivative is defined.
  check_unary([](const Tensor& x) {
    std::vector<double> shift(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) shift[i] = std::abs(x[i]) < 0.1 ? 0.3 : 0.0;
    return clamp_min(add_constant(x, shift), 0.0);
  });
}
TEST(GradCheck, SoftmaxLastAxis) { check_unary([](const Tensor& x) { return softmax(x); }); }
TEST(GradCheck, SoftmaxAll) { check_unary([](const Tensor& x) { return softmax_all(x); }); }
TEST(GradCheck, SliceLast) { check_unary([](const Tensor& x) { return concat_last({slice_last(x, 1, 3), slice_last(x, 0, 1)}); }); }
TEST(GradCheck, Reshape) {
  check_unary([](const Tensor& x) { return reshape(softmax(reshape(x, {4, 3})), {3, 4}); });
}

TEST(GradCheck, BinaryOps) {
  Rng rng(2);
  for (int i = 0; i < kInstances; ++i) {
    std::vector<Tensor> leaves{random_tensor(rng, {6}), random_tensor(rng, {6})};
    const Tensor w = random_tensor(rng, {6}, 1.0, false);
    const auto res = oracle::check_gradients(leaves, [&] {
      return add(weighted(mul(leaves[0], leaves[1]), w), weighted(add(leaves[0], scale(leaves[1], 3.0)), w));
    });
    EXPECT_LT(res.max_rel_err, kTol);
  }
}

TEST(GradCheck, Concat) {
  Rng rng(8);
  for (int i = 0; i < kInstances; ++i) {
    std::vector<Tensor> leaves{random_tensor(rng, {2, 3}), random_tensor(rng, {2, 2}), random_tensor(rng, {1, 3})};
    const Tensor w1 = random_tensor(rng, {2, 5}, 1.0, false);
    const Tensor w2 = random_tensor(rng, {3, 3}, 1.0, false);
    const auto res = oracle::check_gradients(leaves, [&] {
      return add(weighted(concat_last({leaves[0], leaves[1]}), w1), weighted(concat_first({leaves[0], leaves[2]}), w2));
    });
    EXPECT_LT(res.max_rel_err, kTol);
  }
}

TEST(GradCheck, Upsample) {
  Rng rng(12);
  for (int i = 0; i < kInstances; ++i) {
    std::vector<Tensor> leaves{random_tensor(rng, {2, 2, 3})};
    const Tensor w = random_tensor(rng, {3, 4, 3}, 1.0, false);
    const auto res = oracle::check_gradients(leaves, [&] { return weighted(upsample2x(leaves[0], 3, 4), w); });
    EXPECT_LT(res.max_rel_err, kTol);
  }
}

TEST(GradCheck, Conv2dAllInputs) {
  Rng rng(13);
  for (int i = 0; i < kInstances; ++i) {
    const std::size_t k = i % 2 ? 1 : 3, stride = i % 3 == 0 ? 2 : 1;
    std::vector<Tensor> leaves{random_tensor(rng, {5, 5, 2}), random_tensor(rng, {k, k, 2, 3}), random_tensor(rng, {3})};
    const std::size_t ho = (5 + stride - 1) / stride;
    const Tensor w = random_tensor(rng, {ho, ho, 3}, 1.0, false);
    const auto res = oracle::check_gradients(leaves, [&] { return weighted(conv2d(leaves[0], leaves[1], leaves[2], stride), w); });
    EXPECT_LT(res.max_rel_err, kTol) << "k=" << k << " stride=" << stride;
  }
}

TEST(GradCheck, ComposedConvSwishSoftmax) {
  Rng rng(14);
  for (int i = 0; i < kInstances; ++i) {
    std::vector<Tensor> leaves{random_tensor(rng, {4, 4, 2}), random_tensor(rng, {3, 3, 2, 3}, 0.5), random_tensor(rng, {3})};
    const Tensor w = random_tensor(rng, {4, 4, 3}, 1.0, false);
    const auto res = oracle::check_gradients(
        leaves, [&] { return weighted(softmax(swish(conv2d(leaves[0], leaves[1], leaves[2]))), w); });
    EXPECT_LT(res.max_rel_err, kTol);
  }
}

TEST(Softmax, EqualLogitsUniformAndShiftInvariant) {
  const Tensor y = softmax(Tensor::from({2, 4}, {3, 3, 3, 3, -1, -1, -1, -1}));
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 0.25);
  Rng rng(1);
  const Tensor x = random_tensor(rng, {3, 5}, 3.0, false);
  std::vector<double> c(x.size(), 123.0);
  const Tensor a = softmax(x), b = softmax(add_constant(x, c));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-13);
}

TEST(Softmax, RowsSumToOneAndJacobianRowsSumToZero) {
  Rng rng(6);
  for (int i = 0; i < kInstances; ++i) {
    const Tensor x = random_tensor(rng, {3, 5}, 10.0);
    const Tensor y = softmax(x);
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 5; ++j) {
        EXPECT_GT(y[r * 5 + j], 0.0);
        EXPECT_LT(y[r * 5 + j], 1.0);
        s += y[r * 5 + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    // d(sum of a row)/dx is zero for every input.
    x.node()->grad.assign(x.size(), 0.0);
    backward(sum(softmax(x)));
    for (double g : x.grad()) EXPECT_NEAR(g, 0.0, 1e-12);
  }
}

TEST(Conv2d, IdentityKernel) {
  Rng rng(1);
  const Tensor x = random_tensor(rng, {3, 4, 2}, 1.0, false);
  const Tensor k = Tensor::from({1, 1, 2, 2}, {1, 0, 0, 1});
  const Tensor y = conv2d(x, k, Tensor::zeros({2}));
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()), std::vector<double>(x.values().begin(), x.values().end()));
}

TEST(Conv2d, ZeroKernelGivesBias) {
  Rng rng(1);
  const Tensor x = random_tensor(rng, {3, 3, 2}, 1.0, false);
  const Tensor y = conv2d(x, Tensor::zeros({3, 3, 2, 2}), Tensor::from({2}, {0.5, -1.5}));
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], i % 2 ? -1.5 : 0.5);
}

TEST(Conv2d, MatchesNaiveReference) {
  Rng rng(21);
  for (int i = 0; i < 10; ++i) {
    for (std::size_t stride : {1u, 2u}) {
      const Tensor x = random_tensor(rng, {5, 5, 3}, 1.0, false);
      const Tensor k = random_tensor(rng, {3, 3, 3, 4}, 1.0, false);
      const Tensor b = random_tensor(rng, {4}, 1.0, false);
      const Tensor y = conv2d(x, k, b, stride);
      const auto ref = oracle::naive_conv({x.values().begin(), x.values().end()}, 5, 5, 3, {k.values().begin(), k.values().end()},
                                          3, 4, {b.values().begin(), b.values().end()}, stride);
      ASSERT_EQ(y.size(), ref.size());
      for (std::size_t j = 0; j < ref.size(); ++j) EXPECT_NEAR(y[j], ref[j], 1e-12);
    }
  }
}

TEST(Conv2d, ShapeErrors) {
  const Tensor x = Tensor::zeros({4, 4, 2});
  EXPECT_THROW(conv2d(x, Tensor::zeros({3, 3, 3, 2}), Tensor::zeros({2})), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor::zeros({5, 5, 2, 2}), Tensor::zeros({2})), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({3})), ShapeError);
}

TEST(Checkpoint, RoundTrip) {
  namespace fs = std::filesystem;
  const fs::path path = fs::temp_directory_path() / "mdod_ckpt_roundtrip";
  Checkpoint ck;
  ck.metadata = "{\"a\":1}";
  ck.tensors.push_back({"w", {2, 3}, {1, -2, 3.5, 1e-300, -0.0, 7}});
  ck.tensors.push_back({"s", {}, {42}});
  save_checkpoint(path, ck);
  const Checkpoint back = load_checkpoint(path);
  EXPECT_EQ(back.metadata, ck.metadata);
  ASSERT_EQ(back.tensors.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back.tensors[i].name, ck.tensors[i].name);
    EXPECT_EQ(back.tensors[i].shape, ck.tensors[i].shape);
    EXPECT_EQ(back.tensors[i].values, ck.tensors[i].values);
  }
  fs::remove(path);
}

TEST(Checkpoint, TruncatedAndForeignFilesRejected) {
  namespace fs = std::filesystem;
  const fs::path path = fs::temp_directory_path() / "mdod_ckpt_bad";
  Checkpoint ck;
  ck.tensors.push_back({"w", {4}, {1, 2, 3, 4}});
  save_checkpoint(path, ck);
  const auto full = fs::file_size(path);
  fs::resize_file(path, full - 5);
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  {
    std::ofstream os(path, std::ios::trunc);
    os << "not a checkpoint at all";
  }
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  EXPECT_THROW(load_checkpoint(path.string() + ".missing"), CheckpointError);
  fs::remove(path);
}
