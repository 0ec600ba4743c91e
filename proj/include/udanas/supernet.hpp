#pragma once

// Weight-sharing U-Net supernet over a SupernetSpec.
//
// Every node stores one weight at the widest output (ratio 1.5), the widest
// concatenated input and the largest kernel. A subnet reads the leading output
// channels, the leading channels of each concatenated input segment and the
// centered k x k window. Node outputs go through ReLU; the 1x1 head does not.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "udanas/arch_space.hpp"
#include "udanas/ops.hpp"
#include "udanas/rng.hpp"

namespace udanas::nn {

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar> tensor;
};

template <typename Scalar>
class SupernetWeights {
 public:
  using TensorS = Tensor<Scalar>;
  using Array = typename TensorS::Array;

  SupernetWeights() = default;

  /// He-normal weights (fan-in of a 3x3 kernel over the widest input), zero biases.
  SupernetWeights(SupernetSpec spec, std::uint64_t seed, bool instance_norm = false)
      : spec_(std::move(spec)), instance_norm_(instance_norm) {
    const auto& nodes = spec_.nodes();
    for (int i = 0; i < spec_.num_nodes(); ++i) {
      const auto& node = nodes[static_cast<std::size_t>(i)];
      const Index cout = spec_.max_channels(i);
      const Index cin = layout_width(node.inputs);
      const Index k = node.kind == NodeKind::normal ? 5 : (node.kind == NodeKind::downsample ? 3 : 2);
      const double fan_in = static_cast<double>(cin) * (node.kind == NodeKind::upsample ? 4.0 : 9.0);
      add_conv(node.name, cout, cin, k, fan_in, derive_seed(seed, "init", static_cast<std::uint64_t>(i)));
    }
    const Index head_in = layout_width(spec_.head_inputs());
    add_conv("head", spec_.num_classes(), head_in, 1, static_cast<double>(head_in),
             derive_seed(seed, "init", static_cast<std::uint64_t>(spec_.num_nodes())));
  }

  const SupernetSpec& spec() const { return spec_; }
  bool instance_norm() const { return instance_norm_; }

  /// Weight and bias of node i (i == num_nodes() is the head).
  const TensorS& weight(int i) const { return params_[static_cast<std::size_t>(2 * i)].tensor; }
  const TensorS& bias(int i) const { return params_[static_cast<std::size_t>(2 * i + 1)].tensor; }

  const std::vector<NamedTensor<Scalar>>& parameters() const { return params_; }

  /// Channel offset of each input of `inputs` inside the widest concatenation.
  std::vector<Index> layout_offsets(const std::vector<int>& inputs) const {
    std::vector<Index> out;
    Index off = 0;
    for (int in : inputs) {
      out.push_back(off);
      off += in == kImageInput ? spec_.in_channels() : spec_.max_channels(in);
    }
    return out;
  }

  Index layout_width(const std::vector<int>& inputs) const {
    Index w = 0;
    for (int in : inputs) w += in == kImageInput ? spec_.in_channels() : spec_.max_channels(in);
    return w;
  }

  /// Deep copy; the copy's tensors are trainable leaves or plain constants.
  SupernetWeights clone(bool trainable) const {
    SupernetWeights out;
    out.spec_ = spec_;
    out.instance_norm_ = instance_norm_;
    for (const auto& p : params_) {
      out.params_.push_back({p.name, trainable ? TensorS::parameter(p.tensor.shape(), p.tensor.value())
                                               : TensorS::constant(p.tensor.shape(), p.tensor.value())});
    }
    return out;
  }

  void zero_grad() const {
    for (const auto& p : params_) p.tensor.zero_grad();
  }

 private:
  void add_conv(const std::string& name, Index cout, Index cin, Index k, double fan_in, std::uint64_t seed) {
    Rng rng(seed);
    const double stddev = std::sqrt(2.0 / fan_in);
    Array w(cout * cin * k * k);
    for (auto& v : w) v = static_cast<Scalar>(stddev * standard_normal(rng));
    params_.push_back({name + ".weight", TensorS::parameter({cout, cin, k, k}, std::move(w))});
    params_.push_back({name + ".bias", TensorS::parameter({cout}, Array::Zero(cout))});
  }

  SupernetSpec spec_;
  bool instance_norm_ = false;
  std::vector<NamedTensor<Scalar>> params_;
};

namespace detail {

inline void check_input(const SupernetSpec& spec, const Shape& shape) {
  const Index factor = Index{1} << spec.depth();
  if (shape.size() != 4 || shape[1] != spec.in_channels() || shape[2] % factor != 0 || shape[3] % factor != 0 ||
      shape[2] == 0 || shape[3] == 0) {
    throw ShapeError("supernet input " + to_string(shape) + " must be (N, " + std::to_string(spec.in_channels()) +
                     ", H, W) with H and W divisible by " + std::to_string(factor));
  }
}

template <typename Scalar>
Tensor<Scalar> apply_node(const SupernetWeights<Scalar>& w, int i, const Tensor<Scalar>& input,
                          const Tensor<Scalar>& weight, const Tensor<Scalar>& bias) {
  const auto kind = w.spec().nodes()[static_cast<std::size_t>(i)].kind;
  Tensor<Scalar> y;
  if (kind == NodeKind::upsample)
    y = conv_transpose2x2(input, weight, bias);
  else if (kind == NodeKind::downsample)
    y = conv2d(input, weight, bias, 2, 1);
  else
    y = conv2d(input, weight, bias, 1, weight.dim(2) / 2);
  if (w.instance_norm()) y = instance_norm(y);
  return relu(y);
}

}  // namespace detail

/// Logits (N, num_classes, H, W) of the subnet `arch`.
template <typename Scalar>
Tensor<Scalar> forward(const SupernetWeights<Scalar>& w, const ArchAssignment& arch, const Tensor<Scalar>& x) {
  const auto& spec = w.spec();
  detail::check_input(spec, x.shape());
  const auto channels = node_channels(spec, arch);
  std::vector<Tensor<Scalar>> outputs;
  auto gather = [&](const std::vector<int>& inputs) {
    std::vector<Tensor<Scalar>> parts;
    ChannelSegments segments;
    const auto offsets = w.layout_offsets(inputs);
    for (std::size_t j = 0; j < inputs.size(); ++j) {
      const int in = inputs[j];
      parts.push_back(in == kImageInput ? x : outputs[static_cast<std::size_t>(in)]);
      segments.emplace_back(offsets[j], parts.back().dim(1));
    }
    return std::make_pair(concat_channels(parts), segments);
  };

  for (int i = 0; i < spec.num_nodes(); ++i) {
    const auto& node = spec.nodes()[static_cast<std::size_t>(i)];
    const auto [input, segments] = gather(node.inputs);
    const Index cout = channels[static_cast<std::size_t>(i)];
    const auto& choice = arch.choices[static_cast<std::size_t>(i)];
    outputs.push_back(detail::apply_node(w, i, input, slice_conv_weight(w.weight(i), cout, segments, choice.kernel),
                                         slice_leading(w.bias(i), cout)));
  }
  const int head = spec.num_nodes();
  const auto [input, segments] = gather(spec.head_inputs());
  return conv2d(input, slice_conv_weight(w.weight(head), spec.num_classes(), segments, 1), w.bias(head), 1, 0);
}

/// Soft evaluation under per-node probability vectors over each node's labels.
/// Every node output is kept at its widest channel count: candidate (k, r)
/// fills the leading channels of its width and zeros the rest, and the node
/// returns the probability-weighted sum of its candidates. A one-hot simplex
/// reproduces forward() on the corresponding subnet, zero-padded.
template <typename Scalar>
Tensor<Scalar> forward_relaxed(const SupernetWeights<Scalar>& w, const std::vector<Tensor<Scalar>>& simplex,
                               const Tensor<Scalar>& x) {
  const auto& spec = w.spec();
  detail::check_input(spec, x.shape());
  if (static_cast<int>(simplex.size()) != spec.num_nodes()) throw ShapeError("one simplex per search node required");
  std::vector<Tensor<Scalar>> outputs;
  auto gather = [&](const std::vector<int>& inputs) {
    std::vector<Tensor<Scalar>> parts;
    for (int in : inputs) parts.push_back(in == kImageInput ? x : outputs[static_cast<std::size_t>(in)]);
    return concat_channels(parts);
  };

  for (int i = 0; i < spec.num_nodes(); ++i) {
    const auto& node = spec.nodes()[static_cast<std::size_t>(i)];
    const int labels = choice_count(node.kind);
    const auto& p = simplex[static_cast<std::size_t>(i)];
    if (p.rank() != 1 || p.dim(0) != labels) throw ShapeError("simplex of node " + node.name + " has the wrong size");
    const Tensor<Scalar> input = gather(node.inputs);
    const Index cmax = spec.max_channels(i);
    const ChannelSegments full{{0, input.dim(1)}};

    std::vector<int> kernels;
    for (int l = 0; l < labels; ++l) {
      const int k = choice_of_label(node.kind, l).kernel;
      if (std::find(kernels.begin(), kernels.end(), k) == kernels.end()) kernels.push_back(k);
    }
    Tensor<Scalar> out;
    for (int k : kernels) {
      // mask[c] = sum of p_l over labels with kernel k whose width covers channel c.
      typename Tensor<Scalar>::Array a = Tensor<Scalar>::Array::Zero(cmax * labels);
      for (int l = 0; l < labels; ++l) {
        const auto c = choice_of_label(node.kind, l);
        if (c.kernel != k) continue;
        const int width = scaled_channels(c.width_quarters, spec.base_channels(), node.level);
        for (int ch = 0; ch < width; ++ch) a[ch * labels + l] = Scalar(1);
      }
      const auto mask = matvec(Tensor<Scalar>::constant({cmax, labels}, std::move(a)), p);
      const auto y = detail::apply_node(w, i, input, slice_conv_weight(w.weight(i), cmax, full, k), w.bias(i));
      const auto term = channel_scale(y, mask);
      out = out.defined() ? out + term : term;
    }
    outputs.push_back(out);
  }
  const int head = spec.num_nodes();
  return conv2d(gather(spec.head_inputs()), w.weight(head), w.bias(head), 1, 0);
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with decoupled weight decay: p <- p * (1 - lr * wd), then the
/// bias-corrected adaptive-moment step. Parameters without a gradient buffer
/// are skipped.
template <typename Scalar>
class AdamW {
 public:
  struct Options {
    double lr = 0.003;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  explicit AdamW(Options options) : options_(options) {}

  void step(const std::vector<NamedTensor<Scalar>>& params) {
    if (moments_.empty()) {
      for (const auto& p : params) moments_.push_back({Array::Zero(p.tensor.size()), Array::Zero(p.tensor.size())});
    }
    if (moments_.size() != params.size()) throw ShapeError("optimizer state does not match the parameter list");
    ++steps_;
    const double c1 = 1.0 - std::pow(options_.beta1, steps_);
    const double c2 = 1.0 - std::pow(options_.beta2, steps_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& t = params[i].tensor;
      if (!t.has_grad()) continue;
      auto& [m, v] = moments_[i];
      if (m.size() != t.size()) throw ShapeError("optimizer state does not match " + params[i].name);
      const Array g = t.grad();
      if (!g.allFinite()) throw NumericalError("non-finite gradient in " + params[i].name);
      Array& p = t.mutable_value();
      p *= static_cast<Scalar>(1.0 - options_.lr * options_.weight_decay);
      m = static_cast<Scalar>(options_.beta1) * m + static_cast<Scalar>(1.0 - options_.beta1) * g;
      v = static_cast<Scalar>(options_.beta2) * v + static_cast<Scalar>(1.0 - options_.beta2) * g.square();
      const Array m_hat = m / static_cast<Scalar>(c1);
      const Array v_hat = v / static_cast<Scalar>(c2);
      p -= static_cast<Scalar>(options_.lr) * m_hat / (v_hat.sqrt() + static_cast<Scalar>(options_.eps));
    }
  }

  int steps() const { return steps_; }
  Options& options() { return options_; }

 private:
  using Array = typename Tensor<Scalar>::Array;
  Options options_;
  int steps_ = 0;
  std::vector<std::pair<Array, Array>> moments_;
};

// ---------------------------------------------------------------------------
// Sandwich rule

struct SandwichStats {
  std::vector<double> losses;  // largest, smallest, then the sampled subnets
};

/// Accumulates gradients of `loss_fn` for the largest subnet, the smallest
/// subnet and `k_random` subnets from `sample`, then takes one optimizer step.
template <typename Scalar>
SandwichStats sandwich_step(const SupernetWeights<Scalar>& weights,
                            const std::function<Tensor<Scalar>(const ArchAssignment&)>& loss_fn, int k_random,
                            const std::function<ArchAssignment()>& sample, AdamW<Scalar>& optimizer) {
  if (k_random < 0) throw DomainError("k_random must be >= 0");
  SandwichStats stats;
  weights.zero_grad();
  std::vector<ArchAssignment> archs{largest_arch(weights.spec()), smallest_arch(weights.spec())};
  for (int i = 0; i < k_random; ++i) archs.push_back(sample());
  for (const auto& arch : archs) {
    auto loss = loss_fn(arch);
    const double value = static_cast<double>(loss.item());
    if (!std::isfinite(value)) throw NumericalError("non-finite training loss");
    backward(loss);
    stats.losses.push_back(value);
  }
  optimizer.step(weights.parameters());
  return stats;
}

}  // namespace udanas::nn
