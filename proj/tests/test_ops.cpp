#include <gtest/gtest.h>

#include "fd_check.hpp"
#include "udanas/ops.hpp"

namespace udanas {
namespace {

using nn::Tensor;
using testing::max_fd_relative_error;
using testing::random_parameter;
using TensorD = Tensor<double>;
using Inputs = std::vector<TensorD>;

constexpr double kFdTolerance = 1e-4;

// Weighted sum so that every output element gets a distinct upstream gradient.
TensorD probe(const TensorD& y, unsigned seed = 99) {
  auto w = random_parameter(y.shape(), seed);
  return nn::sum(y * TensorD::constant(y.shape(), w.value()));
}

TEST(OpsFiniteDifference, Elementwise) {
  auto a = random_parameter({2, 3}, 1), b = random_parameter({2, 3}, 2);
  EXPECT_LT(max_fd_relative_error([](const Inputs& in) { return probe(in[0] + in[1]); }, {a, b}),
            kFdTolerance);
  EXPECT_LT(max_fd_relative_error([](const Inputs& in) { return probe(in[0] - in[1]); }, {a, b}),
            kFdTolerance);
  EXPECT_LT(max_fd_relative_error([](const Inputs& in) { return probe(in[0] * in[1]); }, {a, b}),
            kFdTolerance);
  EXPECT_LT(max_fd_relative_error([](const Inputs& in) { return nn::mean(nn::scale(in[0], 2.5)); }, {a}),
            kFdTolerance);
}

TEST(OpsFiniteDifference, Relu) {
  // Keep entries away from the kink.
  auto a = random_parameter({10}, 3, 0.05, 1.0);
  for (Eigen::Index i = 0; i < a.size(); i += 2) a.mutable_value()[i] *= -1;
  EXPECT_LT(max_fd_relative_error([](const Inputs& in) { return probe(nn::relu(in[0])); }, {a}),
            kFdTolerance);
}

TEST(OpsFiniteDifference, SoftmaxAndMatvec) {
  auto m = random_parameter({3, 4}, 4), v = random_parameter({4}, 5), u = random_parameter({3}, 6);
  EXPECT_LT(max_fd_relative_error([](const Inputs& in) { return probe(nn::softmax(in[0], 0.7)); }, {v}),
            kFdTolerance);
  EXPECT_LT(max_fd_relative_error([](const Inputs& in) { return probe(nn::matvec(in[0], in[1])); }, {m, v}),
            kFdTolerance);
  EXPECT_LT(max_fd_relative_error(
                [](const Inputs& in) { return probe(nn::matvec_transposed(in[0], in[1])); }, {m, u}),
            kFdTolerance);
}

TEST(OpsFiniteDifference, Conv2dSameAndStrided) {
  auto x = random_parameter({2, 3, 6, 6}, 7);
  auto w = random_parameter({4, 3, 3, 3}, 8);
  auto b = random_parameter({4}, 9);
  EXPECT_LT(max_fd_relative_error(
                [](const Inputs& in) { return probe(nn::conv2d(in[0], in[1], in[2], 1, 1)); }, {x, w, b}),
            kFdTolerance);
  EXPECT_LT(max_fd_relative_error(
                [](const Inputs& in) { return probe(nn::conv2d(in[0], in[1], in[2], 2, 1)); }, {x, w, b}),
            kFdTolerance);
  auto w5 = random_parameter({2, 3, 5, 5}, 10);
  EXPECT_LT(max_fd_relative_error(
                [](const Inputs& in) { return probe(nn::conv2d(in[0], in[1], TensorD(), 1, 2)); }, {x, w5}),
            kFdTolerance);
  auto w1 = random_parameter({5, 3, 1, 1}, 11);
  EXPECT_LT(max_fd_relative_error(
                [](const Inputs& in) { return probe(nn::conv2d(in[0], in[1], TensorD(), 1, 0)); }, {x, w1}),
            kFdTolerance);
}

TEST(OpsFiniteDifference, ConvTranspose) {
  auto x = random_parameter({2, 3, 3, 4}, 12);
  auto w = random_parameter({2, 3, 2, 2}, 13);
  auto b = random_parameter({2}, 14);
  EXPECT_LT(max_fd_relative_error(
                [](const Inputs& in) { return probe(nn::conv_transpose2x2(in[0], in[1], in[2])); }, {x, w, b}),
            kFdTolerance);
}

TEST(OpsFiniteDifference, SlicingConcatAndChannelScale) {
  auto w = random_parameter({4, 6, 5, 5}, 15);
  auto x = random_parameter({1, 3, 4, 4}, 16);
  EXPECT_LT(max_fd_relative_error(
                [](const Inputs& in) {
                  auto ws = nn::slice_conv_weight(in[0], 2, {{0, 1}, {3, 2}}, 3);
                  return probe(nn::conv2d(in[1], ws, TensorD(), 1, 1));
                },
                {w, x}),
            kFdTolerance);
  auto b = random_parameter({6}, 17);
  EXPECT_LT(max_fd_relative_error([](const Inputs& in) { return probe(nn::slice_leading(in[0], 4)); }, {b}),
            kFdTolerance);
  auto y = random_parameter({2, 2, 4, 4}, 18);
  auto z = random_parameter({2, 1, 4, 4}, 19);
  EXPECT_LT(max_fd_relative_error([](const Inputs& in) { return probe(nn::concat_channels(Inputs{in[0], in[1]})); },
                                  {y, z}),
            kFdTolerance);
  auto m = random_parameter({2}, 20);
  EXPECT_LT(max_fd_relative_error([](const Inputs& in) { return probe(nn::channel_scale(in[0], in[1])); }, {y, m}),
            kFdTolerance);
}

TEST(OpsFiniteDifference, InstanceNorm) {
  auto x = random_parameter({2, 2, 3, 3}, 21);
  EXPECT_LT(max_fd_relative_error([](const Inputs& in) { return probe(nn::instance_norm(in[0])); }, {x}),
            kFdTolerance);
}

TEST(OpsFiniteDifference, CrossEntropyWeighted) {
  auto logits = random_parameter({2, 3, 2, 2}, 22, -2, 2);
  nn::LabelMap labels(8);
  labels << 0, 1, 2, 1, -1, 0, 2, 2;
  TensorD::Array pw(8), cw(3);
  pw << 1, 0.5, 0, 1, 1, 0.25, 1, 0.75;
  cw << 0.2, 1.0, 0.6;
  EXPECT_LT(max_fd_relative_error(
                [&](const Inputs& in) { return nn::cross_entropy(in[0], labels, pw, cw); }, {logits}),
            kFdTolerance);
}

TEST(Ops, ConvBiasGradientIsOutputArea) {
  auto x = random_parameter({1, 2, 5, 5}, 23);
  auto w = random_parameter({3, 2, 3, 3}, 24);
  auto b = random_parameter({3}, 25);
  nn::backward(nn::sum(nn::conv2d(x, w, b, 1, 1)));
  EXPECT_TRUE(b.grad().isApprox(TensorD::Array::Constant(3, 25.0)));
  b.zero_grad();
  nn::backward(nn::sum(nn::conv2d(x, w, b, 2, 1)));  // 3 x 3 output
  EXPECT_TRUE(b.grad().isApprox(TensorD::Array::Constant(3, 9.0)));
}

TEST(Ops, ZeroUpstreamGradientGivesZeroParameterGradients) {
  auto x = random_parameter({1, 2, 4, 4}, 26);
  auto w = random_parameter({3, 2, 3, 3}, 27);
  nn::backward(nn::sum(nn::scale(nn::conv2d(x, w, TensorD(), 1, 1), 0.0)));
  EXPECT_EQ(w.grad().abs().maxCoeff(), 0.0);
  EXPECT_EQ(x.grad().abs().maxCoeff(), 0.0);
}

TEST(Ops, BackwardErrors) {
  auto c = TensorD::constant({1}, TensorD::Array::Constant(1, 2.0));
  EXPECT_THROW(nn::backward(c), Error);
  auto p = random_parameter({3}, 28);
  EXPECT_THROW(nn::backward(p), Error);  // a bare leaf has no recorded forward graph
  auto loss = nn::sum(p * p);
  nn::backward(loss);
  EXPECT_THROW(nn::backward(loss), Error);
  EXPECT_THROW(nn::backward(p * p), ShapeError);
}

TEST(Ops, KernelCenterCropMatchesStandaloneSmallConv) {
  auto w5 = random_parameter({2, 3, 5, 5}, 29);
  auto x = random_parameter({1, 3, 6, 6}, 30);
  auto via_slice = nn::conv2d(x, nn::slice_conv_weight(w5, 2, {{0, 3}}, 3), TensorD(), 1, 1);
  TensorD::Array w3(2 * 3 * 9);
  for (int o = 0; o < 2; ++o)
    for (int i = 0; i < 3; ++i)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx)
          w3[((o * 3 + i) * 3 + ky) * 3 + kx] = w5.value()[((o * 3 + i) * 5 + ky + 1) * 5 + kx + 1];
  auto standalone = nn::conv2d(x, TensorD::constant({2, 3, 3, 3}, w3), TensorD(), 1, 1);
  EXPECT_LT((via_slice.value() - standalone.value()).abs().maxCoeff(), 1e-12);
}

TEST(Ops, SoftmaxRejectsNonPositiveTemperature) {
  auto v = random_parameter({3}, 31);
  EXPECT_THROW(nn::softmax(v, 0.0), DomainError);
}

}  // namespace
}  // namespace udanas
