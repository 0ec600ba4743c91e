#include "udanas/selftrain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "udanas/rng.hpp"

namespace udanas {

std::string to_string(PseudoScheme s) { return s == PseudoScheme::confidence ? "confidence" : "energy"; }

PseudoScheme pseudo_scheme_from_string(const std::string& s) {
  if (s == "confidence") return PseudoScheme::confidence;
  if (s == "energy") return PseudoScheme::energy;
  throw ConfigError("unknown pseudo-label scheme '" + s + "' (expected confidence or energy)");
}

Eigen::ArrayXf PseudoLabelBatch::pixel_weights() const {
  const Eigen::Index plane = static_cast<Eigen::Index>(height) * width;
  Eigen::ArrayXf w(labels.size());
  for (int s = 0; s < n; ++s)
    for (Eigen::Index p = 0; p < plane; ++p)
      w[s * plane + p] = valid_mask[s * plane + p] ? static_cast<float>(quality[s]) : 0.0f;
  return w;
}

// ---------------------------------------------------------------------------

MixedBatch classmix(const ImageBatch& source, const ImageBatch& target, const PseudoLabelBatch& pseudo,
                    std::uint64_t rng_seed) {
  if (source.n != target.n || source.height != target.height || source.width != target.width ||
      source.channels != target.channels || pseudo.n != target.n || pseudo.height != target.height ||
      pseudo.width != target.width || source.labels.size() != pseudo.labels.size()) {
    throw ShapeError("classmix: source, target and pseudo-label batches differ in shape");
  }
  const Eigen::Index plane = static_cast<Eigen::Index>(source.height) * source.width;
  const int ch = source.channels;
  MixedBatch out;
  out.batch = target;
  out.batch.labels = pseudo.labels;
  out.weights = pseudo.pixel_weights();
  out.pasted = MaskArray::Constant(pseudo.labels.size(), false);
  Rng rng(derive_seed(rng_seed, "classmix"));
  for (int s = 0; s < source.n; ++s) {
    const auto lbl = source.labels.segment(s * plane, plane);
    std::vector<int> present;
    for (Eigen::Index p = 0; p < plane; ++p)
      if (std::find(present.begin(), present.end(), lbl[p]) == present.end()) present.push_back(lbl[p]);
    std::sort(present.begin(), present.end());
    const int k = static_cast<int>(present.size());
    const int take = (k + 1) / 2;
    // Partial Fisher-Yates: the first `take` entries are a uniform subset.
    for (int i = 0; i < take; ++i) std::swap(present[static_cast<std::size_t>(i)],
                                             present[static_cast<std::size_t>(i + uniform_index(rng, k - i))]);
    std::vector<int> chosen(present.begin(), present.begin() + take);
    std::sort(chosen.begin(), chosen.end());
    for (Eigen::Index p = 0; p < plane; ++p) {
      if (!std::binary_search(chosen.begin(), chosen.end(), lbl[p])) continue;
      const Eigen::Index at = s * plane + p;
      for (int c = 0; c < ch; ++c) out.batch.images[(s * ch + c) * plane + p] = source.images[(s * ch + c) * plane + p];
      out.batch.labels[at] = lbl[p];
      out.weights[at] = 1.0f;
      out.pasted[at] = true;
    }
    out.chosen_classes.push_back(std::move(chosen));
  }
  return out;
}

ImageBatch random_crop(const ImageBatch& batch, double min_scale, std::uint64_t rng_seed) {
  if (!(min_scale > 0 && min_scale <= 1)) throw DomainError("crop scale must lie in (0, 1]");
  ImageBatch out = batch;
  const int h = batch.height, w = batch.width, ch = batch.channels;
  const Eigen::Index plane = static_cast<Eigen::Index>(h) * w;
  const bool labeled = batch.labels.size() > 0;
  Rng rng(derive_seed(rng_seed, "crop"));
  for (int s = 0; s < batch.n; ++s) {
    const double scale = uniform(rng, min_scale, 1.0);
    const int ch_h = std::max(1, static_cast<int>(std::lround(scale * h)));
    const int ch_w = std::max(1, static_cast<int>(std::lround(scale * w)));
    const int y0 = uniform_index(rng, h - ch_h + 1), x0 = uniform_index(rng, w - ch_w + 1);
    for (int y = 0; y < h; ++y) {
      const int sy = y0 + y * ch_h / h;
      for (int x = 0; x < w; ++x) {
        const int sx = x0 + x * ch_w / w;
        for (int c = 0; c < ch; ++c)
          out.images[(s * ch + c) * plane + y * w + x] = batch.images[(s * ch + c) * plane + sy * w + sx];
        if (labeled) out.labels[s * plane + y * w + x] = batch.labels[s * plane + sy * w + sx];
      }
    }
  }
  return out;
}

ImageBatch photometric_jitter(const ImageBatch& batch, double strength, double blur_prob, std::uint64_t rng_seed) {
  ImageBatch out = batch;
  const int h = batch.height, w = batch.width, ch = batch.channels;
  const Eigen::Index plane = static_cast<Eigen::Index>(h) * w;
  Rng rng(derive_seed(rng_seed, "jitter"));
  for (int s = 0; s < batch.n; ++s) {
    for (int c = 0; c < ch; ++c) {
      const float a = static_cast<float>(1.0 + uniform(rng, -strength, strength));
      const float b = static_cast<float>(uniform(rng, -strength, strength));
      auto seg = out.images.segment((s * ch + c) * plane, plane);
      seg = seg * a + b;
    }
    if (uniform01(rng) >= blur_prob) continue;
    const double sigma = uniform(rng, 0.3, 1.0);
    const double e = std::exp(-1.0 / (2 * sigma * sigma));
    const float k0 = static_cast<float>(1.0 / (1.0 + 2 * e)), k1 = static_cast<float>(e / (1.0 + 2 * e));
    // Separable 3-tap blur with edge clamping.
    Eigen::ArrayXf tmp(plane);
    for (int c = 0; c < ch; ++c) {
      float* img = out.images.data() + (s * ch + c) * plane;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          tmp[y * w + x] = k0 * img[y * w + x] + k1 * (img[y * w + std::max(0, x - 1)] + img[y * w + std::min(w - 1, x + 1)]);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          img[y * w + x] = k0 * tmp[y * w + x] + k1 * (tmp[std::max(0, y - 1) * w + x] + tmp[std::min(h - 1, y + 1) * w + x]);
    }
  }
  return out;
}

ImageBatch make_batch(const std::vector<LabeledImage>& split, const std::vector<int>& idx, int height, int width) {
  const Eigen::Index plane = static_cast<Eigen::Index>(height) * width;
  ImageBatch b{static_cast<int>(idx.size()), 3, height, width, Eigen::ArrayXf(3 * plane * static_cast<Eigen::Index>(idx.size())),
               LabelArray(plane * static_cast<Eigen::Index>(idx.size()))};
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& item = split.at(static_cast<std::size_t>(idx[i]));
    b.images.segment(static_cast<Eigen::Index>(i) * 3 * plane, 3 * plane) = item.image;
    b.labels.segment(static_cast<Eigen::Index>(i) * plane, plane) = item.label;
  }
  return b;
}

ImageBatch make_batch(const std::vector<ImageArray>& split, const std::vector<int>& idx, int height, int width) {
  const Eigen::Index plane = static_cast<Eigen::Index>(height) * width;
  ImageBatch b{static_cast<int>(idx.size()), 3, height, width, Eigen::ArrayXf(3 * plane * static_cast<Eigen::Index>(idx.size())), {}};
  for (std::size_t i = 0; i < idx.size(); ++i)
    b.images.segment(static_cast<Eigen::Index>(i) * 3 * plane, 3 * plane) = split.at(static_cast<std::size_t>(idx[i]));
  return b;
}

// ---------------------------------------------------------------------------

void ema_update(nn::SupernetWeights<float>& teacher, const nn::SupernetWeights<float>& student, double decay) {
  if (!(decay >= 0 && decay <= 1)) throw DomainError("EMA decay must lie in [0, 1]");
  const auto& tp = teacher.parameters();
  const auto& sp = student.parameters();
  if (tp.size() != sp.size()) throw ShapeError("teacher and student hold different parameter lists");
  for (std::size_t i = 0; i < tp.size(); ++i) {
    if (tp[i].tensor.shape() != sp[i].tensor.shape()) throw ShapeError("EMA shape mismatch in " + tp[i].name);
  }
  const auto d = static_cast<float>(decay);
  for (std::size_t i = 0; i < tp.size(); ++i) {
    auto& t = tp[i].tensor.mutable_value();
    t = d * t + (1.0f - d) * sp[i].tensor.value();
  }
}

double ema_decay_at(int iteration, double decay) {
  return std::min(1.0 - 1.0 / (static_cast<double>(iteration) + 1.0), decay);
}

void SelfTrainConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  need(tau > 0 && tau < 1, "tau must lie in (0, 1)");
  need(std::isfinite(tau_e), "tau_e must be finite");
  need(temperature > 0, "temperature must be positive");
  need(std::isfinite(lambda_t) && lambda_t >= 0, "lambda_t must be a non-negative number");
  need(ema_decay >= 0 && ema_decay <= 1, "ema_decay must lie in [0, 1]");
  need(iterations >= 0, "iterations must be >= 0");
  need(warmup_iterations >= 0 && target_warmup >= 0, "warmup_iterations and target_warmup must be >= 0");
  need(batch_size >= 1, "batch_size must be >= 1");
  need(lr > 0 && weight_decay >= 0, "lr must be positive and weight_decay non-negative");
  need(sandwich_random >= 0, "sandwich_random must be >= 0");
  need(factor_lr >= 0, "factor_lr must be >= 0");
  need(gumbel_temperature > 0 && gumbel_sweeps >= 1, "gumbel_temperature must be positive and gumbel_sweeps >= 1");
  need(crop_min_scale > 0 && crop_min_scale <= 1, "crop_min_scale must lie in (0, 1]");
  need(jitter_strength >= 0 && blur_prob >= 0 && blur_prob <= 1, "jitter_strength/blur_prob out of range");
}

nlohmann::json to_json(const SelfTrainConfig& c) {
  return {{"tau", c.tau},
          {"tau_e", c.tau_e},
          {"temperature", c.temperature},
          {"lambda_t", c.lambda_t},
          {"ema_decay", c.ema_decay},
          {"scheme", to_string(c.scheme)},
          {"iterations", c.iterations},
          {"warmup_iterations", c.warmup_iterations},
          {"target_warmup", c.target_warmup},
          {"seed", c.seed},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"recall_ce", c.recall_ce},
          {"instance_norm", c.instance_norm},
          {"sandwich_random", c.sandwich_random},
          {"factor_lr", c.factor_lr},
          {"gumbel_temperature", c.gumbel_temperature},
          {"gumbel_sweeps", c.gumbel_sweeps},
          {"crop_min_scale", c.crop_min_scale},
          {"jitter_strength", c.jitter_strength},
          {"blur_prob", c.blur_prob},
          {"mode", c.mode == TrainMode::self_training ? "self_training" : "source_only"}};
}

// ---------------------------------------------------------------------------

namespace {

using TensorF = nn::Tensor<float>;

/// Endless shuffled pass over [0, size), reshuffled every epoch.
class Cycler {
 public:
  Cycler(int size, std::uint64_t seed) : size_(size), seed_(seed) {
    if (size < 1) throw Error("cannot draw batches from an empty split");
  }

  std::vector<int> next(int count) {
    std::vector<int> out;
    while (static_cast<int>(out.size()) < count) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(static_cast<std::size_t>(size_));
    std::iota(order_.begin(), order_.end(), 0);
    Rng rng(derive_seed(seed_, "epoch", epoch_++));
    for (int i = size_ - 1; i > 0; --i) std::swap(order_[static_cast<std::size_t>(i)],
                                                  order_[static_cast<std::size_t>(uniform_index(rng, i + 1))]);
    pos_ = 0;
  }

  int size_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<int> order_;
  std::size_t pos_ = 0;
};

/// The data side of one iteration: augmented source batch and, when
/// self-training, the mixed target batch labeled by the teacher.
struct IterationData {
  ImageBatch source;
  std::optional<MixedBatch> mixed;
  double pseudo_stat = 0;  // mean quality (confidence) or valid fraction (energy)
};

class DataFeed {
 public:
  DataFeed(const DomainPair& data, const SelfTrainConfig& cfg)
      : data_(data), cfg_(cfg), source_(static_cast<int>(data.source.size()), derive_seed(cfg.seed, "batches/source")) {
    if (cfg.mode == TrainMode::self_training && cfg.lambda_t != 0.0)
      target_.emplace(static_cast<int>(data.target_train.size()), derive_seed(cfg.seed, "batches/target"));
  }

  IterationData next(int t, const nn::SupernetWeights<float>* teacher, const ArchAssignment& teacher_arch) {
    const auto it = static_cast<std::uint64_t>(t);
    IterationData out;
    out.source = random_crop(make_batch(data_.source, source_.next(cfg_.batch_size), data_.height, data_.width),
                             cfg_.crop_min_scale, derive_seed(cfg_.seed, "aug/source", it));
    if (!target_ || !teacher || t < cfg_.target_warmup) return out;
    const auto tgt = random_crop(make_batch(data_.target_train, target_->next(cfg_.batch_size), data_.height, data_.width),
                                 cfg_.crop_min_scale, derive_seed(cfg_.seed, "aug/target", it));
    const auto logits = nn::forward(*teacher, teacher_arch, tgt.tensor());
    const auto pl = cfg_.scheme == PseudoScheme::confidence ? pseudo_confidence(logits, cfg_.tau)
                                                            : pseudo_energy(logits, cfg_.tau_e, cfg_.temperature);
    out.pseudo_stat = cfg_.scheme == PseudoScheme::confidence
                          ? pl.quality.mean()
                          : static_cast<double>(pl.valid_mask.count()) / static_cast<double>(pl.valid_mask.size());
    auto mix = classmix(out.source, tgt, pl, derive_seed(cfg_.seed, "mix", it));
    mix.batch = photometric_jitter(mix.batch, cfg_.jitter_strength, cfg_.blur_prob, derive_seed(cfg_.seed, "aug/mix", it));
    out.mixed = std::move(mix);
    return out;
  }

 private:
  const DomainPair& data_;
  const SelfTrainConfig& cfg_;
  Cycler source_;
  std::optional<Cycler> target_;
};

LossTerms<float> iteration_loss(const nn::SupernetWeights<float>& w, const ArchAssignment& arch,
                                const IterationData& d, const SelfTrainConfig& cfg) {
  const auto ls = nn::forward(w, arch, d.source.tensor());
  std::optional<TensorF> lt;
  if (d.mixed) lt = nn::forward(w, arch, d.mixed->batch.tensor());
  return combined_loss_terms<float>(ls, d.source.labels, lt, d.mixed ? d.mixed->target() : WeightedLabels{}, cfg.lambda_t,
                                    cfg.recall_ce);
}

void check_finite(double v, int t, const char* what) {
  if (!std::isfinite(v)) {
    throw NumericalError(std::string("non-finite ") + what + " at iteration " + std::to_string(t));
  }
}

double factor_l2(const PairwiseMrf& mrf) {
  double s = 0;
  for (const auto& f : mrf.factors()) s += f.values.squaredNorm();
  return std::sqrt(s);
}

void check_data(const SupernetSpec& spec, const DomainPair& data) {
  const int factor = 1 << spec.depth();
  if (data.height % factor != 0 || data.width % factor != 0) {
    throw ShapeError("image size " + std::to_string(data.height) + "x" + std::to_string(data.width) +
                     " is not divisible by " + std::to_string(factor));
  }
  if (data.num_classes != spec.num_classes()) throw ShapeError("dataset and spec disagree on the class count");
}

void emit(std::vector<nlohmann::json>& log, std::ostream* sink, nlohmann::json entry) {
  if (sink) *sink << entry.dump() << '\n';
  log.push_back(std::move(entry));
}

}  // namespace

SearchResult search_loop(const SupernetSpec& spec, PairwiseMrf mrf, const DomainPair& data, const SelfTrainConfig& cfg,
                         std::ostream* log_sink) {
  cfg.validate();
  check_data(spec, data);
  if (mrf.num_variables() != spec.num_nodes()) throw ShapeError("MRF does not match the search space");

  SearchResult out;
  nn::SupernetWeights<float> student(spec, derive_seed(cfg.seed, "init/supernet"), cfg.instance_norm);
  TeacherState teacher{student.clone(false), cfg.ema_decay};
  nn::AdamW<float> optimizer({.lr = cfg.lr, .weight_decay = cfg.weight_decay});
  DataFeed feed(data, cfg);
  const ArchAssignment teacher_arch = largest_arch(spec);
  const ImageSize hw{data.height, data.width};

  Assignment chain(std::vector<int>(static_cast<std::size_t>(mrf.num_variables()), 0));
  std::uint64_t draws = 0;

  for (int t = 0; t < cfg.iterations; ++t) {
    const auto it = static_cast<std::uint64_t>(t);
    const auto d = feed.next(t, &teacher.weights, teacher_arch);

    std::vector<LossTerms<float>> terms;
    std::vector<double> sampled_flops;
    auto loss_fn = [&](const ArchAssignment& arch) {
      auto lt = iteration_loss(student, arch, d, cfg);
      terms.push_back(lt);
      return lt.total;
    };
    auto sample = [&] {
      chain = gibbs_sample(mrf, chain, 1, derive_seed(cfg.seed, "gibbs", draws++));
      auto arch = decode(spec, chain);
      sampled_flops.push_back(static_cast<double>(resource_cost(spec, arch, hw).flops));
      return arch;
    };
    try {
      nn::sandwich_step<float>(student, loss_fn, cfg.sandwich_random, sample, optimizer);
    } catch (const NumericalError& e) {
      throw NumericalError(std::string(e.what()) + " at iteration " + std::to_string(t));
    }

    double relaxed_loss = std::nan("");
    if (t >= cfg.warmup_iterations && cfg.factor_lr > 0) {
      const auto relaxed =
          gumbel_relaxed_sample<float>(mrf, cfg.gumbel_temperature, cfg.gumbel_sweeps, derive_seed(cfg.seed, "gumbel", it));
      const auto frozen = student.clone(false);
      const auto ls = nn::forward_relaxed(frozen, relaxed.simplex, d.source.tensor());
      std::optional<TensorF> lt;
      if (d.mixed) lt = nn::forward_relaxed(frozen, relaxed.simplex, d.mixed->batch.tensor());
      auto loss = combined_loss_terms<float>(ls, d.source.labels, lt, d.mixed ? d.mixed->target() : WeightedLabels{},
                                             cfg.lambda_t, cfg.recall_ce);
      relaxed_loss = static_cast<double>(loss.total.item());
      check_finite(relaxed_loss, t, "relaxed loss");
      nn::backward(loss.total);
      update_factors(mrf, relaxed.factor_gradients(), cfg.factor_lr);
    }

    const double decay = ema_decay_at(t, teacher.ema_decay);
    ema_update(teacher.weights, student, decay);

    nlohmann::json entry{{"iteration", t},
                         {"loss_src", terms.front().source},
                         {"loss_tgt", terms.front().target},
                         {"factor_l2", factor_l2(mrf)},
                         {"ema_decay", decay}};
    entry[cfg.scheme == PseudoScheme::confidence ? "quality_mean" : "valid_frac"] = d.pseudo_stat;
    entry["sandwich_losses"] = [&] {
      std::vector<double> v;
      for (const auto& x : terms) v.push_back(static_cast<double>(x.total.item()));
      return v;
    }();
    entry["sampled_flops"] = sampled_flops;
    if (std::isfinite(relaxed_loss)) entry["relaxed_loss"] = relaxed_loss;
    emit(out.log, log_sink, std::move(entry));
  }
  out.mrf = std::move(mrf);
  out.weights = std::move(student);
  return out;
}

RetrainResult retrain(const SupernetSpec& spec, const ArchAssignment& arch, const DomainPair& data,
                      const SelfTrainConfig& cfg, std::ostream* log_sink) {
  cfg.validate();
  check_data(spec, data);
  if (static_cast<int>(arch.choices.size()) != spec.num_nodes()) throw ShapeError("architecture does not match the search space");

  RetrainResult out;
  nn::SupernetWeights<float> student(spec, derive_seed(cfg.seed, "init/retrain"), cfg.instance_norm);
  const bool self_training = cfg.mode == TrainMode::self_training;
  std::optional<TeacherState> teacher;
  if (self_training) teacher.emplace(TeacherState{student.clone(false), cfg.ema_decay});
  nn::AdamW<float> optimizer({.lr = cfg.lr, .weight_decay = cfg.weight_decay});
  DataFeed feed(data, cfg);

  for (int t = 0; t < cfg.iterations; ++t) {
    const auto d = feed.next(t, teacher ? &teacher->weights : nullptr, arch);
    student.zero_grad();
    auto terms = iteration_loss(student, arch, d, cfg);
    const double total = static_cast<double>(terms.total.item());
    check_finite(total, t, "training loss");
    nn::backward(terms.total);
    optimizer.step(student.parameters());

    nlohmann::json entry{{"iteration", t}, {"loss_src", terms.source}, {"loss_tgt", terms.target}};
    if (teacher) {
      const double decay = ema_decay_at(t, teacher->ema_decay);
      ema_update(teacher->weights, student, decay);
      entry["ema_decay"] = decay;
      entry[cfg.scheme == PseudoScheme::confidence ? "quality_mean" : "valid_frac"] = d.pseudo_stat;
    }
    emit(out.log, log_sink, std::move(entry));
  }
  out.metrics = evaluate(student, arch, data);
  out.weights = std::move(student);
  return out;
}

EvalMetrics evaluate(const nn::SupernetWeights<float>& weights, const ArchAssignment& arch, const DomainPair& data,
                     int batch_size) {
  EvalMetrics m;
  auto run = [&](const std::vector<LabeledImage>& split, bool with_loss) {
    ConfusionMatrix cm(data.num_classes);
    double loss = 0;
    for (std::size_t start = 0; start < split.size(); start += static_cast<std::size_t>(batch_size)) {
      std::vector<int> idx;
      for (std::size_t i = start; i < std::min(split.size(), start + static_cast<std::size_t>(batch_size)); ++i)
        idx.push_back(static_cast<int>(i));
      const auto b = make_batch(split, idx, data.height, data.width);
      const auto logits = nn::forward(weights, arch, b.tensor());
      if (with_loss) loss += static_cast<double>(nn::cross_entropy(logits, b.labels).item()) * static_cast<double>(idx.size());
      LabelArray pred;
      Eigen::ArrayXd conf;
      argmax_and_confidence(logits, pred, conf);
      cm.add(pred, b.labels);
    }
    if (with_loss && !split.empty()) m.source_val_loss = loss / static_cast<double>(split.size());
    return cm.miou();
  };
  m.target = run(data.target_eval, false);
  m.source_val = run(data.source_val, true);
  return m;
}

}  // namespace udanas
