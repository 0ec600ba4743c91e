#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "udanas/checkpoint.hpp"
#include "udanas/supernet.hpp"
#include "supernet_oracle.hpp"

namespace udanas {
namespace {

using nn::Tensor;
using TensorD = Tensor<double>;
using WeightsD = nn::SupernetWeights<double>;
using testing::standalone_forward;

std::vector<SupernetSpec> specs_under_test() {
  return {SupernetSpec::toy(3, 2), SupernetSpec::desk_default(4, 3),
          SupernetSpec::unet({.depth = 2, .base_channels = 4, .in_channels = 1, .num_classes = 2,
                              .stem_convs = 2, .encoder_convs = 1, .bottleneck_convs = 1, .decoder_convs = 2})};
}

ArchAssignment random_arch(const SupernetSpec& spec, std::mt19937_64& rng) {
  Assignment a(std::vector<int>(static_cast<std::size_t>(spec.num_nodes())));
  for (int i = 0; i < spec.num_nodes(); ++i)
    a[static_cast<std::size_t>(i)] = static_cast<int>(rng() % choice_count(spec.nodes()[static_cast<std::size_t>(i)].kind));
  return decode(spec, a);
}

TensorD random_input(const SupernetSpec& spec, nn::Index n, nn::Index hw, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  TensorD::Array v(n * spec.in_channels() * hw * hw);
  for (auto& x : v) x = d(rng);
  return TensorD::constant({n, spec.in_channels(), hw, hw}, v);
}

// Randomize biases too so that channel slicing of biases is exercised.
void randomize_biases(const WeightsD& w, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.2, 0.2);
  for (const auto& p : w.parameters())
    if (p.tensor.rank() == 1)
      for (auto& b : p.tensor.mutable_value()) b = u(rng);
}

TEST(Supernet, OutputShapeContract) {
  std::mt19937_64 rng(1);
  for (const auto& spec : specs_under_test()) {
    WeightsD w(spec, 3);
    const auto x = random_input(spec, 2, 8, 4);
    const auto y = nn::forward(w, random_arch(spec, rng), x);
    EXPECT_EQ(y.shape(), (nn::Shape{2, spec.num_classes(), 8, 8}));
  }
}

TEST(Supernet, ZeroWeightsGiveZeroLogits) {
  const auto spec = SupernetSpec::desk_default();
  WeightsD w(spec, 1);
  for (const auto& p : w.parameters()) p.tensor.mutable_value().setZero();
  std::mt19937_64 rng(2);
  const auto y = nn::forward(w, random_arch(spec, rng), random_input(spec, 1, 8, 5));
  EXPECT_EQ(y.value().abs().maxCoeff(), 0.0);
}

TEST(Supernet, RejectsBadInputShape) {
  const auto spec = SupernetSpec::desk_default();
  WeightsD w(spec, 1);
  EXPECT_THROW(nn::forward(w, largest_arch(spec), TensorD::zeros({1, 3, 6, 8})), ShapeError);
  EXPECT_THROW(nn::forward(w, largest_arch(spec), TensorD::zeros({1, 2, 8, 8})), ShapeError);
}

TEST(Supernet, OneHotRelaxedForwardEqualsDiscrete) {
  std::mt19937_64 rng(3);
  for (const auto& spec : specs_under_test()) {
    for (bool norm : {false, true}) {
      WeightsD w(spec, 7, norm);
      randomize_biases(w, 8);
      const auto x = random_input(spec, 2, 8, 9);
      for (int t = 0; t < 5; ++t) {
        const auto arch = random_arch(spec, rng);
        const auto labels = encode(spec, arch);
        std::vector<TensorD> simplex;
        for (int i = 0; i < spec.num_nodes(); ++i) {
          TensorD::Array p = TensorD::Array::Zero(choice_count(spec.nodes()[static_cast<std::size_t>(i)].kind));
          p[labels[static_cast<std::size_t>(i)]] = 1.0;
          simplex.push_back(TensorD::constant({p.size()}, p));
        }
        const auto discrete = nn::forward(w, arch, x);
        const auto relaxed = nn::forward_relaxed(w, simplex, x);
        EXPECT_LT((discrete.value() - relaxed.value()).abs().maxCoeff(), 1e-6);
      }
    }
  }
}

TEST(Supernet, SlicedSubnetEqualsStandaloneCopy) {
  std::mt19937_64 rng(4);
  for (const auto& spec : specs_under_test()) {
    WeightsD w(spec, 11);
    randomize_biases(w, 12);
    const auto x = random_input(spec, 2, 8, 13);
    for (int t = 0; t < 10; ++t) {
      const auto arch = random_arch(spec, rng);
      const auto a = nn::forward(w, arch, x);
      const auto b = standalone_forward(w, arch, x);
      EXPECT_LT((a.value() - b.value()).abs().maxCoeff(), 1e-7);
    }
  }
}

TEST(Supernet, RelaxedGradientReachesSimplexAndWeights) {
  const auto spec = SupernetSpec::toy(3, 2);
  WeightsD w(spec, 5);
  std::vector<TensorD> simplex;
  for (const auto& n : spec.nodes()) {
    const int l = choice_count(n.kind);
    simplex.push_back(TensorD::parameter({l}, TensorD::Array::Constant(l, 1.0 / l)));
  }
  const auto y = nn::forward_relaxed(w, simplex, random_input(spec, 1, 4, 6));
  nn::backward(nn::mean(y * y));
  for (const auto& p : simplex) EXPECT_GT(p.grad().abs().maxCoeff(), 0.0);
  EXPECT_GT(w.weight(0).grad().abs().maxCoeff(), 0.0);
}

TEST(Supernet, BackwardIsRepeatable) {
  const auto spec = SupernetSpec::desk_default();
  std::mt19937_64 rng(5);
  const auto arch = random_arch(spec, rng);
  const auto x = random_input(spec, 2, 8, 14);
  auto grads = [&] {
    WeightsD w(spec, 21);
    nn::backward(nn::mean(nn::forward(w, arch, x)));
    std::vector<TensorD::Array> g;
    for (const auto& p : w.parameters()) g.push_back(p.tensor.grad());
    return g;
  };
  const auto a = grads(), b = grads();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE((a[i] == b[i]).all());
}

TEST(AdamW, SingleStepMatchesHandCalculation) {
  nn::AdamW<double> opt({.lr = 0.1, .weight_decay = 0.5});
  auto p = TensorD::parameter({3}, (TensorD::Array(3) << 1.0, -2.0, 0.5).finished());
  p.node()->grad_buffer() = (TensorD::Array(3) << 0.4, -0.01, 0.0).finished();
  opt.step({{"p", p}});
  // m_hat = g, v_hat = g^2, so the adaptive step is lr * g / (|g| + eps).
  const double eps = 1e-8;
  const double decay = 1.0 - 0.1 * 0.5;
  EXPECT_NEAR(p.value()[0], 1.0 * decay - 0.1 * 0.4 / (0.4 + eps), 1e-15);
  EXPECT_NEAR(p.value()[1], -2.0 * decay + 0.1 * 0.01 / (0.01 + eps), 1e-15);
  EXPECT_NEAR(p.value()[2], 0.5 * decay, 1e-15);
}

TEST(AdamW, ZeroDecayIsPureAdaptiveStepAndZeroGradIsNoOp) {
  nn::AdamW<double> opt({.lr = 0.01, .weight_decay = 0.0});
  auto p = TensorD::parameter({2}, (TensorD::Array(2) << 3.0, -1.0).finished());
  p.node()->grad_buffer() = TensorD::Array::Zero(2);
  opt.step({{"p", p}});
  EXPECT_EQ(p.value()[0], 3.0);
  EXPECT_EQ(p.value()[1], -1.0);
  p.node()->grad_buffer() = (TensorD::Array(2) << 2.0, -2.0).finished();
  opt.step({{"p", p}});
  // Second step: m = 0.1 * g (first step contributed zero), v = 0.001 * g^2.
  const double m_hat = 0.1 * 2.0 / (1 - 0.9 * 0.9), v_hat = 0.001 * 4.0 / (1 - 0.999 * 0.999);
  EXPECT_NEAR(p.value()[0], 3.0 - 0.01 * m_hat / (std::sqrt(v_hat) + 1e-8), 1e-14);
}

TEST(Sandwich, TwoPassesWithoutRandomSubnets) {
  const auto spec = SupernetSpec::toy(3, 2);
  WeightsD w(spec, 1);
  nn::AdamW<double> opt({.lr = 0.0, .weight_decay = 0.0});
  const auto x = random_input(spec, 1, 4, 2);
  int calls = 0, samples = 0;
  const auto stats = nn::sandwich_step<double>(
      w,
      [&](const ArchAssignment& a) {
        ++calls;
        return nn::mean(nn::forward(w, a, x));
      },
      0, [&] { ++samples; return largest_arch(spec); }, opt);
  EXPECT_EQ(calls, 2);
  EXPECT_EQ(samples, 0);
  EXPECT_EQ(stats.losses.size(), 2u);
}

TEST(Sandwich, SharedGradientsAccumulateAcrossPasses) {
  const auto spec = SupernetSpec::desk_default(3, 2);
  WeightsD w(spec, 2);
  const auto x = random_input(spec, 2, 8, 3);
  std::mt19937_64 rng(6);
  const auto extra = random_arch(spec, rng);
  auto loss = [&](const ArchAssignment& a) {
    auto y = nn::forward(w, a, x);
    return nn::mean(y * y);
  };

  // Per-pass gradients summed by hand.
  std::vector<TensorD::Array> expected;
  for (const auto& p : w.parameters()) expected.push_back(TensorD::Array::Zero(p.tensor.size()));
  for (const auto& arch : {largest_arch(spec), smallest_arch(spec), extra}) {
    w.zero_grad();
    nn::backward(loss(arch));
    for (std::size_t i = 0; i < expected.size(); ++i) expected[i] += w.parameters()[i].tensor.grad();
  }

  nn::AdamW<double> frozen({.lr = 0.0, .weight_decay = 0.0});
  nn::sandwich_step<double>(w, loss, 1, [&] { return extra; }, frozen);
  for (std::size_t i = 0; i < expected.size(); ++i) {
    EXPECT_LT((w.parameters()[i].tensor.grad() - expected[i]).abs().maxCoeff(), 1e-12)
        << w.parameters()[i].name;
  }
}

// Pixel class from a local pattern of the input: separable but not linearly.
struct ToyTask {
  TensorD x;
  nn::LabelMap y;
};

ToyTask make_toy_task(unsigned seed, nn::Index n, nn::Index hw) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  TensorD::Array v(n * 2 * hw * hw);
  for (auto& e : v) e = d(rng);
  nn::LabelMap y(n * hw * hw);
  for (nn::Index s = 0; s < n; ++s)
    for (nn::Index p = 0; p < hw * hw; ++p) {
      const double a = v[(s * 2 + 0) * hw * hw + p], b = v[(s * 2 + 1) * hw * hw + p];
      y[s * hw * hw + p] = (a > 0) != (b > 0) ? 0 : (std::abs(a) > std::abs(b) ? 1 : 2);
    }
  return {TensorD::constant({n, 2, hw, hw}, v), y};
}

TEST(Sandwich, WidestSubnetFitsAtLeastAsWellAfterTraining) {
  const auto spec = SupernetSpec::toy(3, 2);
  nn::SupernetWeights<float> w(spec, 3);
  const auto task = make_toy_task(7, 4, 8);
  const Tensor<float> x = Tensor<float>::constant(task.x.shape(), task.x.value().cast<float>());
  nn::AdamW<float> opt({.lr = 0.003, .weight_decay = 0.0});
  std::mt19937_64 rng(8);
  nn::SandwichStats last;
  for (int it = 0; it < 500; ++it) {
    last = nn::sandwich_step<float>(
        w, [&](const ArchAssignment& a) { return nn::cross_entropy(nn::forward(w, a, x), task.y); }, 1,
        [&] { return random_arch(spec, rng); }, opt);
  }
  EXPECT_LE(last.losses[0], last.losses[1]);
}

TEST(Sandwich, IdenticalSeedsGiveIdenticalTrajectories) {
  const auto spec = SupernetSpec::desk_default(3, 2);
  const auto task = make_toy_task(9, 2, 8);
  auto run = [&] {
    WeightsD w(spec, 4);
    nn::AdamW<double> opt({});
    std::mt19937_64 rng(10);
    for (int it = 0; it < 5; ++it) {
      nn::sandwich_step<double>(
          w, [&](const ArchAssignment& a) { return nn::cross_entropy(nn::forward(w, a, task.x), task.y); }, 2,
          [&] { return random_arch(spec, rng); }, opt);
    }
    std::vector<TensorD::Array> values;
    for (const auto& p : w.parameters()) values.push_back(p.tensor.value());
    return values;
  };
  const auto a = run(), b = run();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE((a[i] == b[i]).all());
}

TEST(Checkpoint, RoundTripIsExact) {
  const auto spec = SupernetSpec::desk_default();
  nn::SupernetWeights<float> a(spec, 1), b(spec, 2);
  const auto dir = std::filesystem::temp_directory_path() / "udanas_ckpt_test";
  std::filesystem::create_directories(dir);
  nn::save_checkpoint(dir / "w", a.parameters(), {{"note", "test"}});
  nn::load_checkpoint(dir / "w", b.parameters());
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_TRUE((a.parameters()[i].tensor.value() == b.parameters()[i].tensor.value()).all());
  }
  const auto index = nn::read_checkpoint_index(dir / "w");
  EXPECT_EQ(index["dtype"], "float32");
  EXPECT_EQ(index["meta"]["note"], "test");

  nn::SupernetWeights<float> other(SupernetSpec::toy(), 1);
  EXPECT_THROW(nn::load_checkpoint(dir / "w", other.parameters()), ShapeError);
  nn::SupernetWeights<double> wrong_type(spec, 1);
  EXPECT_THROW(nn::load_checkpoint(dir / "w", wrong_type.parameters()), ShapeError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace udanas
