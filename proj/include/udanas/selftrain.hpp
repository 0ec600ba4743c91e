#pragma once

// Teacher-student self-training for unsupervised domain adaptation.
//
// The teacher is an exponential moving average of the student and labels the
// target batch; ClassMix pastes source classes onto the target images; the
// student minimises source cross-entropy plus the weighted pseudo-label loss.
// search_loop wraps this around the supernet and learns the MRF factors,
// retrain runs it on one fixed subnet.

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "udanas/arch_space.hpp"
#include "udanas/data_synth.hpp"
#include "udanas/mrf.hpp"
#include "udanas/supernet.hpp"

namespace udanas {

enum class PseudoScheme { confidence, energy };

std::string to_string(PseudoScheme s);
PseudoScheme pseudo_scheme_from_string(const std::string& s);

using MaskArray = Eigen::Array<bool, Eigen::Dynamic, 1>;

struct PseudoLabelBatch {
  int n = 0, height = 0, width = 0;
  LabelArray labels;       // (N, H, W) argmax of the teacher
  MaskArray valid_mask;    // (N, H, W)
  Eigen::ArrayXd quality;  // (N), in [0, 1]

  /// quality[image] where the mask is set, zero elsewhere.
  Eigen::ArrayXf pixel_weights() const;
};

namespace detail {

template <typename Scalar>
void check_logits(const nn::Tensor<Scalar>& logits) {
  if (logits.rank() != 4) throw ShapeError("pseudo-labelling expects (N, C, H, W) logits");
}

}  // namespace detail

/// Per-pixel argmax (lowest class on ties) and its softmax probability.
template <typename Scalar>
void argmax_and_confidence(const nn::Tensor<Scalar>& logits, LabelArray& labels, Eigen::ArrayXd& confidence) {
  detail::check_logits(logits);
  const auto n = logits.dim(0), c = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  labels.resize(n * plane);
  confidence.resize(n * plane);
  const Scalar* z = logits.data();
  for (Eigen::Index s = 0; s < n; ++s)
    for (Eigen::Index p = 0; p < plane; ++p) {
      Eigen::Index best = 0;
      double zmax = static_cast<double>(z[s * c * plane + p]);
      for (Eigen::Index ch = 1; ch < c; ++ch) {
        const double v = static_cast<double>(z[(s * c + ch) * plane + p]);
        if (v > zmax) {
          zmax = v;
          best = ch;
        }
      }
      double denom = 0;
      for (Eigen::Index ch = 0; ch < c; ++ch) denom += std::exp(static_cast<double>(z[(s * c + ch) * plane + p]) - zmax);
      labels[s * plane + p] = static_cast<int>(best);
      confidence[s * plane + p] = 1.0 / denom;
    }
}

/// Labels are the per-pixel argmax; quality of an image is the fraction of
/// its pixels whose maximum softmax probability reaches tau; mask all-true.
template <typename Scalar>
PseudoLabelBatch pseudo_confidence(const nn::Tensor<Scalar>& logits, double tau) {
  PseudoLabelBatch out;
  Eigen::ArrayXd conf;
  argmax_and_confidence(logits, out.labels, conf);
  out.n = static_cast<int>(logits.dim(0));
  out.height = static_cast<int>(logits.dim(2));
  out.width = static_cast<int>(logits.dim(3));
  const Eigen::Index plane = logits.dim(2) * logits.dim(3);
  out.valid_mask = MaskArray::Constant(out.labels.size(), true);
  out.quality.resize(out.n);
  for (int s = 0; s < out.n; ++s) {
    Eigen::Index passed = 0;
    for (Eigen::Index p = 0; p < plane; ++p) passed += conf[s * plane + p] >= tau;
    out.quality[s] = static_cast<double>(passed) / static_cast<double>(plane);
  }
  return out;
}

/// E = -T log sum_c exp(z_c / T) per pixel, (N, H, W), evaluated with a max shift.
template <typename Scalar>
Eigen::ArrayXd energy_score(const nn::Tensor<Scalar>& logits, double temperature) {
  detail::check_logits(logits);
  if (!(temperature > 0)) throw DomainError("energy temperature must be positive");
  const auto n = logits.dim(0), c = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  Eigen::ArrayXd out(n * plane);
  const Scalar* z = logits.data();
  for (Eigen::Index s = 0; s < n; ++s)
    for (Eigen::Index p = 0; p < plane; ++p) {
      double m = static_cast<double>(z[s * c * plane + p]) / temperature;
      for (Eigen::Index ch = 1; ch < c; ++ch) m = std::max(m, static_cast<double>(z[(s * c + ch) * plane + p]) / temperature);
      double sum = 0;
      for (Eigen::Index ch = 0; ch < c; ++ch)
        sum += std::exp(static_cast<double>(z[(s * c + ch) * plane + p]) / temperature - m);
      out[s * plane + p] = -temperature * (m + std::log(sum));
    }
  return out;
}

/// Labels are the per-pixel argmax; a pixel is valid when its energy is below
/// tau_e; quality is 1 for every image.
template <typename Scalar>
PseudoLabelBatch pseudo_energy(const nn::Tensor<Scalar>& logits, double tau_e, double temperature) {
  PseudoLabelBatch out;
  Eigen::ArrayXd conf;
  argmax_and_confidence(logits, out.labels, conf);
  out.n = static_cast<int>(logits.dim(0));
  out.height = static_cast<int>(logits.dim(2));
  out.width = static_cast<int>(logits.dim(3));
  out.valid_mask = energy_score(logits, temperature) < tau_e;
  out.quality = Eigen::ArrayXd::Ones(out.n);
  return out;
}

// ---------------------------------------------------------------------------
// Batches and mixing

/// Images stacked as (N, 3, H, W) with their labels (N, H, W).
struct ImageBatch {
  int n = 0, channels = 3, height = 0, width = 0;
  Eigen::ArrayXf images;
  LabelArray labels;  // empty for unlabeled batches

  nn::Tensor<float> tensor() const {
    return nn::Tensor<float>::constant({n, channels, height, width}, images);
  }
};

/// Target labels of a (mixed) batch with a loss weight per pixel.
struct WeightedLabels {
  LabelArray labels;
  Eigen::ArrayXf weights;
};

struct MixedBatch {
  ImageBatch batch;        // mixed images; labels are the mixed labels
  Eigen::ArrayXf weights;  // per-pixel loss weight
  MaskArray pasted;        // pixels copied from the source image
  std::vector<std::vector<int>> chosen_classes;

  WeightedLabels target() const { return {batch.labels, weights}; }
};

/// For each pair, ceil(K/2) of the K classes present in the source label map
/// are drawn uniformly; their pixels are copied from the source image and
/// label onto the target image and pseudo-label. Pasted pixels get weight 1,
/// the rest keep quality * mask of the target image.
MixedBatch classmix(const ImageBatch& source, const ImageBatch& target, const PseudoLabelBatch& pseudo,
                    std::uint64_t rng_seed);

/// Random crop of relative side in [min_scale, 1] resized back with nearest
/// neighbour sampling; labels follow the same map.
ImageBatch random_crop(const ImageBatch& batch, double min_scale, std::uint64_t rng_seed);

/// Per-image, per-channel affine jitter x * a + b followed, with probability
/// blur_prob, by a 3x3 Gaussian blur of random sigma. Labels are untouched.
ImageBatch photometric_jitter(const ImageBatch& batch, double strength, double blur_prob, std::uint64_t rng_seed);

// ---------------------------------------------------------------------------
// Losses

template <typename Scalar>
struct LossTerms {
  nn::Tensor<Scalar> total;
  double source = 0;
  double target = 0;
};

/// Per-class weights 1 - recall_c from the batch confusion counts of the
/// current predictions; classes absent from the labels get weight 1.
template <typename Scalar>
typename nn::Tensor<Scalar>::Array recall_weights(const nn::Tensor<Scalar>& logits, const LabelArray& labels) {
  LabelArray pred;
  Eigen::ArrayXd conf;
  argmax_and_confidence(logits, pred, conf);
  const auto c = logits.dim(1);
  Eigen::ArrayXd hit = Eigen::ArrayXd::Zero(c), count = Eigen::ArrayXd::Zero(c);
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) continue;
    count[labels[i]] += 1;
    hit[labels[i]] += pred[i] == labels[i];
  }
  typename nn::Tensor<Scalar>::Array w(c);
  for (Eigen::Index k = 0; k < c; ++k) w[k] = count[k] > 0 ? static_cast<Scalar>(1.0 - hit[k] / count[k]) : Scalar(1);
  return w;
}

/// Cross-entropy with recall_weights as class weights (treated as constants).
template <typename Scalar>
nn::Tensor<Scalar> recall_ce(const nn::Tensor<Scalar>& logits, const LabelArray& labels,
                             const typename nn::Tensor<Scalar>::Array& pixel_weights = {}) {
  return nn::cross_entropy(logits, labels, pixel_weights, recall_weights(logits, labels));
}

/// H(f(Xs), Ys) + lambda * H(f(Xt), Yt) with per-pixel target weights.
template <typename Scalar>
LossTerms<Scalar> combined_loss_terms(const nn::Tensor<Scalar>& logits_s, const LabelArray& y_s,
                                      const std::optional<nn::Tensor<Scalar>>& logits_t,
                                      const WeightedLabels& target, double lambda_t, bool use_recall) {
  LossTerms<Scalar> out;
  out.total = use_recall ? recall_ce(logits_s, y_s) : nn::cross_entropy(logits_s, y_s);
  out.source = static_cast<double>(out.total.item());
  if (logits_t && lambda_t != 0.0) {
    const typename nn::Tensor<Scalar>::Array w = target.weights.template cast<Scalar>();
    auto t = use_recall ? recall_ce(*logits_t, target.labels, w) : nn::cross_entropy(*logits_t, target.labels, w);
    out.target = static_cast<double>(t.item());
    out.total = out.total + static_cast<Scalar>(lambda_t) * t;
  }
  return out;
}

template <typename Scalar>
nn::Tensor<Scalar> combined_loss(const nn::Tensor<Scalar>& logits_s, const LabelArray& y_s,
                                 const nn::Tensor<Scalar>& logits_t, const PseudoLabelBatch& pl, double lambda_t) {
  return combined_loss_terms<Scalar>(logits_s, y_s, logits_t, {pl.labels, pl.pixel_weights()}, lambda_t, false).total;
}

// ---------------------------------------------------------------------------
// Teacher

struct TeacherState {
  nn::SupernetWeights<float> weights;  // constants, never seen by an optimizer
  double ema_decay = 0.999;
};

/// teacher <- decay * teacher + (1 - decay) * student over every tensor.
void ema_update(nn::SupernetWeights<float>& teacher, const nn::SupernetWeights<float>& student, double decay);

/// Decay used at iteration t: min(1 - 1 / (t + 1), decay), so the teacher
/// averages the whole trajectory until the ramp reaches the configured value.
double ema_decay_at(int iteration, double decay);

// ---------------------------------------------------------------------------
// Training loops

enum class TrainMode { self_training, source_only };

struct SelfTrainConfig {
  double tau = 0.968;
  double tau_e = -8.0;
  double temperature = 1.0;
  double lambda_t = 1.0;
  double ema_decay = 0.999;
  PseudoScheme scheme = PseudoScheme::confidence;
  int iterations = 40000;
  int warmup_iterations = 1500;
  int target_warmup = 0;  // source-only iterations before the target term is switched on
  std::uint64_t seed = 0;

  int batch_size = 8;
  double lr = 0.003;
  double weight_decay = 0.05;
  bool recall_ce = true;
  bool instance_norm = false;
  int sandwich_random = 2;  // sampled subnets per sandwich step besides largest and smallest
  double factor_lr = 0.05;
  double gumbel_temperature = 1.0;
  int gumbel_sweeps = 1;
  double crop_min_scale = 0.75;
  double jitter_strength = 0.2;
  double blur_prob = 0.5;
  TrainMode mode = TrainMode::self_training;

  /// Throws ConfigError when a field is out of range.
  void validate() const;
};

nlohmann::json to_json(const SelfTrainConfig& c);

struct SearchResult {
  PairwiseMrf mrf;
  nn::SupernetWeights<float> weights;
  std::vector<nlohmann::json> log;
};

/// Sandwich training of the shared weights on source + mixed target batches;
/// after the warmup the factor tables follow the gradient of a relaxed
/// Gumbel-Softmax sample's loss. One JSON object per iteration goes to
/// `log_sink` when given. Non-finite losses throw NumericalError.
SearchResult search_loop(const SupernetSpec& spec, PairwiseMrf mrf, const DomainPair& data, const SelfTrainConfig& cfg,
                         std::ostream* log_sink = nullptr);

struct EvalMetrics {
  MiouResult target;     // on target_eval
  double source_val_loss = 0;  // plain cross-entropy on source_val
  MiouResult source_val;
};

struct RetrainResult {
  nn::SupernetWeights<float> weights;
  EvalMetrics metrics;
  std::vector<nlohmann::json> log;
};

/// Trains one fixed subnet from a fresh initialisation, self-training or
/// source-only per cfg.mode, and evaluates the student.
RetrainResult retrain(const SupernetSpec& spec, const ArchAssignment& arch, const DomainPair& data,
                      const SelfTrainConfig& cfg, std::ostream* log_sink = nullptr);

/// Argmax predictions of `arch` over a labeled split, in batches.
EvalMetrics evaluate(const nn::SupernetWeights<float>& weights, const ArchAssignment& arch, const DomainPair& data,
                     int batch_size = 16);

/// Stacks images (and labels when present) of the given indices.
ImageBatch make_batch(const std::vector<LabeledImage>& split, const std::vector<int>& idx, int height, int width);
ImageBatch make_batch(const std::vector<ImageArray>& split, const std::vector<int>& idx, int height, int width);

}  // namespace udanas
