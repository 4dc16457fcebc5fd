#include "support.hpp"

#include <gtest/gtest.h>

using namespace rfb;
using rfb::test::random_tensor;

TEST(Tensor, DataLengthMatchesShape) {
  Tensor<float> t(Shape{2, 3, 4, 5});
  EXPECT_EQ(t.numel(), 120u);
  EXPECT_THROW(Tensor<float>(Shape{1, 1, 2, 2}, std::vector<float>(3)), ShapeError);
}

TEST(Tensor, RowMajorOffsets) {
  Tensor<double> t(Shape{2, 3, 4, 5});
  EXPECT_EQ(t.offset(1, 2, 3, 4), 119u);
  EXPECT_EQ(t.offset(0, 1, 0, 0), 20u);
}

TEST(Backward, SumGivesOnes) {
  Tensor<double> x(Shape{1, 2, 3, 3}, 0.5, true);
  auto loss = sum(x);
  backward(loss);
  ASSERT_TRUE(x.has_grad());
  for (double g : x.grad())
    EXPECT_EQ(g, 1.0);
}

TEST(Backward, RejectsNonScalar) {
  Tensor<double> x(Shape{1, 1, 2, 2}, 1.0, true);
  auto y = relu(x);
  EXPECT_THROW(backward(y), GraphError);
}

TEST(Backward, SecondCallWithoutResetIsAnError) {
  Tensor<double> x(Shape{1, 1, 2, 2}, 1.0, true);
  auto loss = sum(mul_scalar(x, 2.0));
  backward(loss);
  EXPECT_THROW(backward(loss), GraphError);
}

TEST(Backward, FanOutAccumulates) {
  Tensor<double> x(Shape{1, 1, 1, 3}, std::vector<double>{1, -2, 3}, true);
  auto loss = sum(add(relu(x), mul_scalar(x, 3.0)));
  backward(loss);
  EXPECT_EQ(x.grad()[0], 4.0);
  EXPECT_EQ(x.grad()[1], 3.0);
  EXPECT_EQ(x.grad()[2], 4.0);
}

TEST(Backward, Deterministic) {
  SplitMix64 rng(3);
  auto xv = random_tensor(rng, Shape{1, 2, 6, 6});
  auto wv = random_tensor(rng, Shape{3, 2, 3, 3});
  std::vector<std::vector<double>> grads;
  for (int rep = 0; rep < 2; ++rep) {
    Tensor<double> x(xv.shape(), xv.data(), true), w(wv.shape(), wv.data(), true);
    auto loss = sum(relu(conv2d<double>(x, w, std::nullopt, ConvParams::same(3, 3, 1, 2))));
    backward(loss);
    grads.push_back(w.grad());
  }
  EXPECT_EQ(grads[0], grads[1]);
}

TEST(InputGradient, IdentityIsOneHot) {
  Tensor<double> x(Shape{1, 1, 5, 5}, 0.3, true);
  auto y = mul_scalar(x, 1.0);
  auto g = input_gradient(y, {0, 0, 2, 3}, x);
  for (std::size_t i = 0; i < g.numel(); ++i)
    EXPECT_EQ(g.data()[i], i == 2 * 5 + 3 ? 1.0 : 0.0);
}

TEST(InputGradient, SingleConvFootprint) {
  SplitMix64 rng(1);
  Tensor<double> x = random_tensor(rng, Shape{1, 2, 9, 9});
  x.set_requires_grad(true);
  Tensor<double> w = random_tensor(rng, Shape{2, 2, 3, 3});
  auto y = conv2d<double>(x, w, std::nullopt, ConvParams::same(3, 3));
  auto b = test::nonzero_bbox(input_gradient(y, {0, 1, 4, 4}, x));
  EXPECT_EQ(b.height(), 3u);
  EXPECT_EQ(b.width(), 3u);
  EXPECT_EQ(b.top, 3u);
  EXPECT_EQ(b.left, 3u);
}

TEST(InputGradient, StackedDilatedConvFootprint) {
  SplitMix64 rng(2);
  Tensor<double> x = random_tensor(rng, Shape{1, 1, 15, 15});
  x.set_requires_grad(true);
  Tensor<double> w1 = random_tensor(rng, Shape{2, 1, 3, 3});
  Tensor<double> w2 = random_tensor(rng, Shape{1, 2, 3, 3});
  auto y = conv2d<double>(conv2d<double>(x, w1, std::nullopt, ConvParams::same(3, 3, 1, 1)), w2,
                          std::nullopt, ConvParams::same(3, 3, 1, 3));
  auto b = test::nonzero_bbox(input_gradient(y, {0, 0, 7, 7}, x));
  const std::size_t expected = test::chain_rf({{3, 1, 1}, {3, 3, 1}});
  EXPECT_EQ(expected, 9u);
  EXPECT_EQ(b.height(), expected);
  EXPECT_EQ(b.width(), expected);
}

TEST(InputGradient, RepeatableOnSameGraph) {
  SplitMix64 rng(4);
  Tensor<double> x = random_tensor(rng, Shape{1, 1, 6, 6});
  x.set_requires_grad(true);
  Tensor<double> w = random_tensor(rng, Shape{1, 1, 3, 3});
  auto y = conv2d<double>(x, w, std::nullopt, ConvParams::same(3, 3));
  auto a = input_gradient(y, {0, 0, 2, 2}, x);
  auto b = input_gradient(y, {0, 0, 2, 2}, x);
  EXPECT_EQ(a.data(), b.data());
}

TEST(InputGradient, RejectsOutOfRangeUnit) {
  Tensor<double> x(Shape{1, 1, 3, 3}, 1.0, true);
  auto y = mul_scalar(x, 2.0);
  EXPECT_THROW(input_gradient(y, {0, 1, 0, 0}, x), ShapeError);
}

TEST(GradCheck, EveryOpGroupPasses) {
  for (const auto &row : run_gradcheck("all", 11, 20)) {
    EXPECT_TRUE(row.pass) << row.op << " max rel err " << row.max_rel_err;
    EXPECT_EQ(row.cases, 20u);
  }
}

TEST(GradCheck, UnknownGroupRejected) { EXPECT_THROW(run_gradcheck("bogus"), ShapeError); }

TEST(GradCheck, DetectsWrongGradient) {
  // x * x with the backward rule of 3 * x: a broken op must fail the check.
  TensorFn broken = [](const std::vector<Tensor<double>> &x) {
    const auto &in = x[0];
    std::vector<double> v(in.numel());
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = in.data()[i] * in.data()[i];
    return make_result<double>(in.shape(), std::move(v), "square", {in},
                               [](detail::Node<double> &self) {
                                 auto &p = *self.parents[0];
                                 for (std::size_t i = 0; i < p.grad.size(); ++i)
                                   p.grad[i] += 3 * (*p.data)[i] * self.grad[i];
                               });
  };
  SplitMix64 rng(5);
  auto x = random_tensor(rng, Shape{1, 1, 2, 2});
  auto r = check_gradients(broken, {1, 1, 1, 1}, {x});
  EXPECT_GT(r.max_rel_err, 0.1);
}
