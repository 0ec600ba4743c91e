#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include "udanas/selftrain.hpp"

namespace udanas {
namespace {

using TensorD = nn::Tensor<double>;
using TensorF = nn::Tensor<float>;

// Logits (1, C, H, W) from per-pixel class vectors.
TensorD logits_of(const std::vector<std::vector<double>>& pixels, int h, int w) {
  const auto c = static_cast<Eigen::Index>(pixels.front().size());
  const Eigen::Index plane = h * w;
  TensorD::Array v(c * plane);
  for (Eigen::Index p = 0; p < plane; ++p)
    for (Eigen::Index k = 0; k < c; ++k) v[k * plane + p] = pixels[static_cast<std::size_t>(p)][static_cast<std::size_t>(k)];
  return TensorD::constant({1, c, h, w}, v);
}

double logit_of(double p) { return std::log(p / (1 - p)); }

TEST(PseudoConfidence, QualityExample) {
  const auto z = logits_of({{logit_of(0.99), 0}, {logit_of(0.95), 0}, {0, 0}, {logit_of(0.97), 0}}, 2, 2);
  const auto pl = pseudo_confidence(z, 0.968);
  EXPECT_DOUBLE_EQ(pl.quality[0], 0.5);
  EXPECT_TRUE(pl.valid_mask.all());
  EXPECT_EQ(pl.labels[0], 0);
  EXPECT_DOUBLE_EQ(pseudo_confidence(z, 0.0).quality[0], 1.0);
}

TEST(PseudoConfidence, UniformLogitsHaveZeroQuality) {
  const auto z = TensorD::zeros({2, 4, 3, 3});
  const auto pl = pseudo_confidence(z, 0.968);
  EXPECT_EQ(pl.quality[0], 0.0);
  EXPECT_EQ(pl.quality[1], 0.0);
  EXPECT_TRUE((pl.labels == 0).all());
}

TEST(Energy, Examples) {
  EXPECT_NEAR(energy_score(logits_of({{0, 0, 0}}, 1, 1), 1.0)[0], -std::log(3.0), 1e-12);
  EXPECT_NEAR(energy_score(logits_of({{10, 0, 0}}, 1, 1), 1.0)[0], -10.000090796, 1e-8);
  for (double a : {-3.0, 0.5, 40.0})
    for (double t : {0.25, 1.0, 7.0})
      EXPECT_NEAR(energy_score(logits_of({{a, a}}, 1, 1), t)[0], -a - t * std::log(2.0), 1e-12);
  EXPECT_THROW(energy_score(logits_of({{0, 0}}, 1, 1), 0.0), DomainError);
  EXPECT_THROW(energy_score(logits_of({{0, 0}}, 1, 1), -1.0), DomainError);
}

TEST(PseudoEnergy, MaskFollowsCutoff) {
  const auto z = logits_of({{10, 0, 0}, {0, 0, 0}}, 1, 2);
  const auto pl = pseudo_energy(z, -8.0, 1.0);
  EXPECT_TRUE(pl.valid_mask[0]);
  EXPECT_FALSE(pl.valid_mask[1]);
  EXPECT_EQ(pl.quality[0], 1.0);
  const auto all = pseudo_energy(z, std::numeric_limits<double>::infinity(), 1.0);
  EXPECT_TRUE(all.valid_mask.all());
  EXPECT_EQ(all.labels[0], 0);
}

TEST(PseudoEnergy, RejectedPixelsCarryNoTargetLoss) {
  const auto zs = logits_of({{1, -1}}, 1, 1);
  LabelArray ys(1);
  ys << 0;
  const auto zt = logits_of({{0.3, 0.2}, {0.1, 0.4}}, 1, 2);
  const auto pl = pseudo_energy(zt, -8.0, 1.0);
  ASSERT_FALSE(pl.valid_mask.any());
  EXPECT_NEAR(combined_loss(zs, ys, zt, pl, 5.0).item(), std::log1p(std::exp(-2.0)), 1e-15);
}

// Independent evaluation in long double straight from the definitions.
struct Oracle {
  static long double max_softmax(const std::vector<long double>& z) {
    long double sum = 0, best = 0;
    for (auto v : z) sum += std::exp(v);
    for (auto v : z) best = std::max(best, std::exp(v) / sum);
    return best;
  }
  static long double energy(const std::vector<long double>& z, long double t) {
    long double sum = 0;
    for (auto v : z) sum += std::exp(v / t);
    return -t * std::log(sum);
  }
};

TEST(PseudoLabels, MatchDefinitionsOnRandomTensors) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-6, 6);
  for (int trial = 0; trial < 1000; ++trial) {
    const int c = 2 + static_cast<int>(rng() % 5), h = 1 + static_cast<int>(rng() % 4), w = 1 + static_cast<int>(rng() % 4);
    const double spread = 1.0 + static_cast<double>(rng() % 4);
    TensorD::Array v(c * h * w);
    for (auto& x : v) x = spread * u(rng);
    const TensorD z = TensorD::constant({1, c, h, w}, v);
    const double tau = 0.5 + 0.5 * std::uniform_real_distribution<double>(0, 1)(rng);
    const double t = 0.5 + 2.0 * std::uniform_real_distribution<double>(0, 1)(rng);
    const double tau_e = -12.0 * std::uniform_real_distribution<double>(0, 1)(rng);
    const auto conf = pseudo_confidence(z, tau);
    const auto en = pseudo_energy(z, tau_e, t);
    const auto e = energy_score(z, t);
    int passed = 0;
    for (int p = 0; p < h * w; ++p) {
      std::vector<long double> zp;
      for (int k = 0; k < c; ++k) zp.push_back(v[k * h * w + p]);
      passed += Oracle::max_softmax(zp) >= tau;
      const long double ref = Oracle::energy(zp, t);
      ASSERT_NEAR(e[p], static_cast<double>(ref), 1e-9);
      ASSERT_EQ(en.valid_mask[p], ref < tau_e);
    }
    ASSERT_EQ(conf.quality[0], static_cast<double>(passed) / (h * w));
  }
}

TEST(PseudoLabels, ThresholdMonotonicity) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n01(0, 3);
  for (int trial = 0; trial < 200; ++trial) {
    TensorD::Array v(4 * 16);
    for (auto& x : v) x = n01(rng);
    const TensorD z = TensorD::constant({1, 4, 4, 4}, v);
    double prev_q = 2;
    for (double tau : {0.3, 0.5, 0.7, 0.9, 0.968, 0.99}) {
      const double q = pseudo_confidence(z, tau).quality[0];
      EXPECT_LE(q, prev_q);
      prev_q = q;
    }
    MaskArray prev = MaskArray::Constant(16, false);
    for (double te : {-12.0, -8.0, -4.0, -2.0, 0.0}) {
      const auto m = pseudo_energy(z, te, 1.0).valid_mask;
      EXPECT_TRUE((!prev || m).all());
      prev = m;
    }
  }
}

// ---------------------------------------------------------------------------

ImageBatch patterned_batch(int n, int h, int w, float base, const std::vector<std::vector<int>>& classes) {
  ImageBatch b{n, 3, h, w, Eigen::ArrayXf(n * 3 * h * w), LabelArray(n * h * w)};
  for (Eigen::Index i = 0; i < b.images.size(); ++i) b.images[i] = base + 0.001f * static_cast<float>(i);
  for (int s = 0; s < n; ++s)
    for (int p = 0; p < h * w; ++p) {
      const auto& cls = classes[static_cast<std::size_t>(s)];
      b.labels[s * h * w + p] = cls[static_cast<std::size_t>(p) % cls.size()];
    }
  return b;
}

PseudoLabelBatch constant_pseudo(int n, int h, int w, int label, double quality) {
  PseudoLabelBatch pl;
  pl.n = n;
  pl.height = h;
  pl.width = w;
  pl.labels = LabelArray::Constant(n * h * w, label);
  pl.valid_mask = MaskArray::Constant(n * h * w, true);
  pl.quality = Eigen::ArrayXd::Constant(n, quality);
  return pl;
}

TEST(ClassMix, SingleClassSourceIsPasted) {
  const auto src = patterned_batch(1, 4, 4, 0.0f, {{2}});
  auto tgt = patterned_batch(1, 4, 4, 5.0f, {{0}});
  tgt.labels.resize(0);
  const auto mix = classmix(src, tgt, constant_pseudo(1, 4, 4, 1, 0.3), 1);
  EXPECT_EQ(mix.chosen_classes[0], std::vector<int>{2});
  EXPECT_TRUE((mix.batch.labels == 2).all());
  EXPECT_TRUE((mix.batch.images == src.images).all());
  EXPECT_TRUE((mix.weights == 1.0f).all());
}

TEST(ClassMix, PastedPixelsAreExactlyTheChosenClassMask) {
  const int n = 6, h = 5, w = 7, plane = h * w;
  const auto src = patterned_batch(n, h, w, 0.0f, {{0, 1, 2, 3}, {1, 4}, {0, 2, 2, 3, 4}, {3}, {0, 1, 2}, {4, 0}});
  auto tgt = patterned_batch(n, h, w, 5.0f, std::vector<std::vector<int>>(n, {0}));
  tgt.labels.resize(0);
  auto pl = constant_pseudo(n, h, w, 1, 0.25);
  pl.valid_mask[3] = false;
  const auto mix = classmix(src, tgt, pl, 42);
  for (int s = 0; s < n; ++s) {
    std::set<int> present;
    for (int p = 0; p < plane; ++p) present.insert(src.labels[s * plane + p]);
    const auto& chosen = mix.chosen_classes[static_cast<std::size_t>(s)];
    EXPECT_EQ(chosen.size(), (present.size() + 1) / 2);
    for (int p = 0; p < plane; ++p) {
      const int at = s * plane + p;
      const bool expect = std::count(chosen.begin(), chosen.end(), src.labels[at]) > 0;
      ASSERT_EQ(mix.pasted[at], expect);
      for (int c = 0; c < 3; ++c) {
        const int px = (s * 3 + c) * plane + p;
        ASSERT_EQ(mix.batch.images[px], expect ? src.images[px] : tgt.images[px]);
      }
      ASSERT_EQ(mix.batch.labels[at], expect ? src.labels[at] : 1);
      ASSERT_FLOAT_EQ(mix.weights[at], expect ? 1.0f : (at == 3 ? 0.0f : 0.25f));
    }
  }
  const auto again = classmix(src, tgt, pl, 42);
  EXPECT_TRUE((again.batch.images == mix.batch.images).all());
  EXPECT_EQ(again.chosen_classes, mix.chosen_classes);
}

TEST(ClassMix, ShapeMismatchThrows) {
  const auto src = patterned_batch(1, 4, 4, 0.0f, {{0}});
  const auto tgt = patterned_batch(1, 4, 2, 0.0f, {{0}});
  EXPECT_THROW(classmix(src, tgt, constant_pseudo(1, 4, 4, 0, 1.0), 0), ShapeError);
}

TEST(Augment, CropKeepsLabelsAlignedAndJitterKeepsLabels) {
  auto b = patterned_batch(3, 8, 8, 0.0f, {{0, 1, 2}, {3}, {1, 2}});
  // Encode the label into channel 0 so alignment is checkable after the crop.
  for (int s = 0; s < 3; ++s)
    for (int p = 0; p < 64; ++p) b.images[s * 3 * 64 + p] = static_cast<float>(b.labels[s * 64 + p]);
  const auto c = random_crop(b, 0.5, 3);
  for (int s = 0; s < 3; ++s)
    for (int p = 0; p < 64; ++p) ASSERT_EQ(c.images[s * 3 * 64 + p], static_cast<float>(c.labels[s * 64 + p]));
  const auto j = photometric_jitter(b, 0.2, 1.0, 4);
  EXPECT_TRUE((j.labels == b.labels).all());
  EXPECT_FALSE((j.images == b.images).all());
  EXPECT_TRUE((photometric_jitter(b, 0.0, 0.0, 4).images == b.images).all());
}

// ---------------------------------------------------------------------------

TEST(CombinedLoss, HandComputedSinglePixel) {
  const auto zs = logits_of({{1, -1}}, 1, 1);
  LabelArray ys(1);
  ys << 0;
  const double ce = std::log1p(std::exp(-2.0));
  const auto zt = logits_of({{0, 2}}, 1, 1);
  const auto pl = constant_pseudo(1, 1, 1, 1, 1.0);
  EXPECT_NEAR(combined_loss(zs, ys, zt, pl, 0.0).item(), ce, 1e-15);
  EXPECT_NEAR(combined_loss(zs, ys, zt, pl, 0.5).item(), 1.5 * ce, 1e-15);
  EXPECT_NEAR(combined_loss(zs, ys, zt, constant_pseudo(1, 1, 1, 1, 0.0), 10.0).item(), ce, 1e-15);
  const auto half = constant_pseudo(1, 1, 1, 1, 0.5);
  EXPECT_NEAR(combined_loss(zs, ys, zt, half, 1.0).item(), 1.5 * ce, 1e-15);
}

TEST(RecallCe, PerfectPredictionsGiveZeroLoss) {
  const auto z = logits_of({{3, 0}, {0, 3}, {3, 0}}, 1, 3);
  LabelArray y(3);
  y << 0, 1, 0;
  EXPECT_EQ(recall_ce(z, y).item(), 0.0);
}

TEST(RecallCe, AllWrongEqualsPlainCrossEntropy) {
  const auto z = logits_of({{0, 3}, {3, 0}, {0, 1}}, 1, 3);
  LabelArray y(3);
  y << 0, 1, 0;
  EXPECT_NEAR(recall_ce(z, y).item(), nn::cross_entropy(z, y).item(), 1e-15);
}

TEST(RecallCe, PoorlyRecalledClassWeighsMore) {
  // Class 0: 6 pixels, 5 correct. Class 1: 4 pixels, 1 correct.
  std::vector<std::vector<double>> px;
  LabelArray y(10);
  for (int i = 0; i < 6; ++i) {
    px.push_back(i < 5 ? std::vector<double>{2, 0} : std::vector<double>{0, 2});
    y[i] = 0;
  }
  for (int i = 0; i < 4; ++i) {
    px.push_back(i < 1 ? std::vector<double>{0, 2} : std::vector<double>{2, 0});
    y[6 + i] = 1;
  }
  const auto w = recall_weights(logits_of(px, 1, 10), y);
  EXPECT_DOUBLE_EQ(w[0], 1.0 / 6.0);
  EXPECT_DOUBLE_EQ(w[1], 0.75);
  EXPECT_GT(w[1], w[0]);
  LabelArray only0 = LabelArray::Zero(10);
  EXPECT_EQ(recall_weights(logits_of(px, 1, 10), only0)[1], 1.0);
}

// ---------------------------------------------------------------------------

SupernetSpec tiny_spec() { return SupernetSpec::toy(3); }

TEST(Ema, ExamplesAndContraction) {
  nn::SupernetWeights<float> student(tiny_spec(), 1);
  auto teacher = student.clone(false);
  for (const auto& p : teacher.parameters()) p.tensor.mutable_value().setConstant(1.0f);
  for (const auto& p : student.parameters()) p.tensor.mutable_value().setConstant(0.0f);
  ema_update(teacher, student, 0.9);
  for (const auto& p : teacher.parameters()) EXPECT_TRUE((p.tensor.value() == 0.9f).all());
  ema_update(teacher, student, 1.0);
  for (const auto& p : teacher.parameters()) EXPECT_TRUE((p.tensor.value() == 0.9f).all());
  ema_update(teacher, student, 0.0);
  for (const auto& p : teacher.parameters()) EXPECT_TRUE((p.tensor.value() == 0.0f).all());
  EXPECT_THROW(ema_update(teacher, student, 1.5), DomainError);

  nn::SupernetWeights<float> a(tiny_spec(), 2), b(tiny_spec(), 3);
  auto t = a.clone(false);
  ema_update(t, b, 0.7);
  for (std::size_t i = 0; i < t.parameters().size(); ++i) {
    const auto& before = a.parameters()[i].tensor.value();
    const auto& after = t.parameters()[i].tensor.value();
    const auto& s = b.parameters()[i].tensor.value();
    EXPECT_TRUE(((after - s).abs() <= 0.7f * (before - s).abs() + 1e-6f).all());
  }
}

TEST(Ema, ShapeMismatchThrows) {
  nn::SupernetWeights<float> a(SupernetSpec::toy(3), 1), b(SupernetSpec::toy(4), 1);
  EXPECT_THROW(ema_update(a, b, 0.5), ShapeError);
}

TEST(Ema, DecayRamp) {
  EXPECT_EQ(ema_decay_at(0, 0.999), 0.0);
  EXPECT_EQ(ema_decay_at(1, 0.999), 0.5);
  EXPECT_EQ(ema_decay_at(9, 0.999), 0.9);
  EXPECT_EQ(ema_decay_at(100000, 0.999), 0.999);
}

// ---------------------------------------------------------------------------

DomainPair small_data(std::uint64_t seed, ShiftParams shift = {.intensity = 0.1}) {
  SynthOptions o;
  o.seed = seed;
  o.classes = 3;
  o.n_source = 8;
  o.n_source_val = 4;
  o.n_target = 8;
  o.n_target_eval = 4;
  o.height = o.width = 8;
  o.shift = shift;
  return generate(o);
}

SelfTrainConfig small_config() {
  SelfTrainConfig c;
  c.iterations = 6;
  c.warmup_iterations = 3;
  c.batch_size = 2;
  c.seed = 5;
  c.ema_decay = 0.9;
  c.factor_lr = 0.5;
  return c;
}

TEST(SearchLoop, FactorsStayZeroThroughWarmup) {
  const auto spec = tiny_spec();
  const auto data = small_data(1);
  auto cfg = small_config();
  cfg.iterations = cfg.warmup_iterations;
  const auto warm = search_loop(spec, build_search_mrf(spec), data, cfg);
  for (const auto& f : warm.mrf.factors()) EXPECT_TRUE((f.values.array() == 0.0).all());
  for (const auto& e : warm.log) EXPECT_EQ(e["factor_l2"], 0.0);
  cfg.iterations = cfg.warmup_iterations + 1;
  const auto after = search_loop(spec, build_search_mrf(spec), data, cfg);
  EXPECT_GT(after.log.back()["factor_l2"].get<double>(), 0.0);
}

TEST(SearchLoop, WithoutTargetTermTargetDataIsIgnored) {
  const auto spec = tiny_spec();
  auto cfg = small_config();
  cfg.lambda_t = 0.0;
  cfg.ema_decay = 0.0;
  auto a = small_data(1);
  auto b = a;
  for (auto& img : b.target_train) img = 1.0f - img;
  const auto ra = search_loop(spec, build_search_mrf(spec), a, cfg);
  const auto rb = search_loop(spec, build_search_mrf(spec), b, cfg);
  for (std::size_t i = 0; i < ra.weights.parameters().size(); ++i)
    EXPECT_TRUE((ra.weights.parameters()[i].tensor.value() == rb.weights.parameters()[i].tensor.value()).all());
  EXPECT_EQ(to_json(ra.mrf), to_json(rb.mrf));

  // With the target term on, the same swap changes the trajectory.
  cfg.lambda_t = 1.0;
  cfg.tau = 0.2;
  const auto ta = search_loop(spec, build_search_mrf(spec), a, cfg);
  const auto tb = search_loop(spec, build_search_mrf(spec), b, cfg);
  EXPECT_FALSE((ta.weights.parameters()[0].tensor.value() == tb.weights.parameters()[0].tensor.value()).all());
}

TEST(SearchLoop, DeterministicAndLogsJsonLines) {
  const auto spec = tiny_spec();
  const auto data = small_data(2);
  const auto cfg = small_config();
  std::ostringstream sink;
  const auto a = search_loop(spec, build_search_mrf(spec), data, cfg, &sink);
  const auto b = search_loop(spec, build_search_mrf(spec), data, cfg);
  EXPECT_EQ(to_json(a.mrf), to_json(b.mrf));
  for (std::size_t i = 0; i < a.weights.parameters().size(); ++i)
    EXPECT_TRUE((a.weights.parameters()[i].tensor.value() == b.weights.parameters()[i].tensor.value()).all());
  std::istringstream lines(sink.str());
  std::string line;
  int count = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["iteration"], count);
    for (const char* key : {"loss_src", "loss_tgt", "quality_mean", "factor_l2", "ema_decay", "sampled_flops"})
      EXPECT_TRUE(j.contains(key)) << key;
    EXPECT_EQ(j["sampled_flops"].size(), static_cast<std::size_t>(cfg.sandwich_random));
    ++count;
  }
  EXPECT_EQ(count, cfg.iterations);
}

TEST(SearchLoop, EnergySchemeLogsValidFraction) {
  const auto spec = tiny_spec();
  auto cfg = small_config();
  cfg.scheme = PseudoScheme::energy;
  cfg.iterations = 2;
  const auto r = search_loop(spec, build_search_mrf(spec), small_data(3), cfg);
  EXPECT_TRUE(r.log.back().contains("valid_frac"));
}

TEST(SearchLoop, DivergenceAbortsWithNumericalError) {
  const auto spec = tiny_spec();
  auto cfg = small_config();
  cfg.lr = 1e30;
  cfg.iterations = 5;
  EXPECT_THROW(search_loop(spec, build_search_mrf(spec), small_data(4), cfg), NumericalError);
}

TEST(SearchLoop, RejectsInvalidConfig) {
  const auto spec = tiny_spec();
  auto cfg = small_config();
  cfg.tau = 1.0;
  EXPECT_THROW(search_loop(spec, build_search_mrf(spec), small_data(4), cfg), ConfigError);
  cfg = small_config();
  cfg.temperature = 0.0;
  EXPECT_THROW(search_loop(spec, build_search_mrf(spec), small_data(4), cfg), ConfigError);
  SynthOptions o;
  o.classes = 3;
  o.height = o.width = 5;
  o.n_source = 2;
  EXPECT_THROW(search_loop(spec, build_search_mrf(spec), generate(o), small_config()), ShapeError);
}

TEST(Retrain, ZeroIterationsGivesInitialMetrics) {
  const auto spec = tiny_spec();
  const auto data = small_data(5);
  auto cfg = small_config();
  cfg.iterations = 0;
  const auto arch = smallest_arch(spec);
  const auto r = retrain(spec, arch, data, cfg);
  const nn::SupernetWeights<float> init(spec, derive_seed(cfg.seed, "init/retrain"));
  const auto m = evaluate(init, arch, data);
  EXPECT_EQ(r.metrics.target.mean, m.target.mean);
  EXPECT_EQ(r.metrics.source_val_loss, m.source_val_loss);
  EXPECT_TRUE(r.log.empty());
}

TEST(Retrain, DeterministicGivenSeed) {
  const auto spec = tiny_spec();
  const auto data = small_data(6);
  const auto cfg = small_config();
  const auto arch = largest_arch(spec);
  const auto a = retrain(spec, arch, data, cfg);
  const auto b = retrain(spec, arch, data, cfg);
  EXPECT_EQ(a.metrics.target.mean, b.metrics.target.mean);
  EXPECT_EQ(a.metrics.source_val_loss, b.metrics.source_val_loss);
  for (std::size_t i = 0; i < a.weights.parameters().size(); ++i)
    EXPECT_TRUE((a.weights.parameters()[i].tensor.value() == b.weights.parameters()[i].tensor.value()).all());
}

TEST(Retrain, SourceOnlyNeverReadsTargetImages) {
  const auto spec = tiny_spec();
  auto cfg = small_config();
  cfg.mode = TrainMode::source_only;
  auto a = small_data(7);
  auto b = a;
  b.target_train.clear();
  const auto arch = largest_arch(spec);
  EXPECT_EQ(retrain(spec, arch, a, cfg).metrics.source_val_loss, retrain(spec, arch, b, cfg).metrics.source_val_loss);
  EXPECT_FALSE(retrain(spec, arch, a, cfg).log.front().contains("quality_mean"));
}

TEST(Retrain, LowersSourceLoss) {
  const auto spec = tiny_spec();
  SynthOptions o;
  o.seed = 9;
  o.classes = 3;
  o.n_source = 32;
  o.n_source_val = 16;
  o.n_target = 16;
  o.n_target_eval = 8;
  o.height = o.width = 16;
  const auto data = generate(o);
  auto cfg = small_config();
  cfg.iterations = 150;
  const auto arch = largest_arch(spec);
  const auto r = retrain(spec, arch, data, cfg);
  cfg.iterations = 0;
  const auto r0 = retrain(spec, arch, data, cfg);
  EXPECT_LT(r.metrics.source_val_loss, 0.5 * r0.metrics.source_val_loss);
  EXPECT_GT(r.metrics.source_val.mean, 0.6);
}

// A network trained on the source domain does no better on a target domain
// as the intensity offset grows (majority over seeds).
TEST(DataSynth, SourceOnlyTargetMiouDropsWithShift) {
  const auto spec = tiny_spec();
  int monotone = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SynthOptions o;
    o.seed = 50 + seed;
    o.classes = 3;
    o.n_source = 48;
    o.n_source_val = 0;
    o.n_target = 0;
    o.n_target_eval = 24;
    o.height = o.width = 16;
    auto cfg = small_config();
    cfg.seed = seed;
    cfg.iterations = 200;
    cfg.mode = TrainMode::source_only;
    const auto arch = largest_arch(spec);
    const auto trained = retrain(spec, arch, generate(o), cfg);
    std::vector<double> scores;
    for (double delta : {0.0, 0.2, 0.4}) {
      o.shift = {.intensity = delta};
      scores.push_back(evaluate(trained.weights, arch, generate(o)).target.mean);
    }
    monotone += scores[0] >= scores[1] && scores[1] >= scores[2];
  }
  EXPECT_GE(monotone, 3);
}

}  // namespace
}  // namespace udanas
