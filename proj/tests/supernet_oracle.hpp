#pragma once

// Reference subnet evaluation that copies each layer's active weights out of
// the shared tensors by explicit index arithmetic.

#include <utility>
#include <vector>

#include "udanas/supernet.hpp"

namespace udanas::testing {

inline nn::Tensor<double> standalone_forward(const nn::SupernetWeights<double>& w, const ArchAssignment& arch, const nn::Tensor<double>& x) {
  const auto& spec = w.spec();
  const auto channels = node_channels(spec, arch);
  std::vector<nn::Tensor<double>> out;
  auto width_of = [&](int in) { return in == kImageInput ? spec.in_channels() : channels[static_cast<std::size_t>(in)]; };
  auto max_width_of = [&](int in) { return in == kImageInput ? spec.in_channels() : spec.max_channels(in); };
  auto copy_weight = [&](int layer, const std::vector<int>& inputs, int cout, int k) {
    const auto& stored = w.weight(layer);
    const nn::Index cin_max = stored.dim(1), kmax = stored.dim(2);
    int cin = 0;
    for (int in : inputs) cin += width_of(in);
    nn::Tensor<double>::Array v(cout * cin * k * k);
    nn::Index pos = 0;
    for (int o = 0; o < cout; ++o) {
      int base = 0;
      for (int in : inputs) {
        for (int c = 0; c < width_of(in); ++c)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const nn::Index src = ((o * cin_max + base + c) * kmax + ky + (kmax - k) / 2) * kmax + kx + (kmax - k) / 2;
              v[pos++] = stored.value()[src];
            }
        base += max_width_of(in);
      }
    }
    nn::Tensor<double>::Array b = w.bias(layer).value().head(cout);
    return std::make_pair(nn::Tensor<double>::constant({cout, cin, k, k}, v), nn::Tensor<double>::constant({cout}, b));
  };
  auto gather = [&](const std::vector<int>& inputs) {
    std::vector<nn::Tensor<double>> parts;
    for (int in : inputs) parts.push_back(in == kImageInput ? x : out[static_cast<std::size_t>(in)]);
    return nn::concat_channels(parts);
  };
  for (int i = 0; i < spec.num_nodes(); ++i) {
    const auto& node = spec.nodes()[static_cast<std::size_t>(i)];
    const auto& c = arch.choices[static_cast<std::size_t>(i)];
    const auto [wt, b] = copy_weight(i, node.inputs, channels[static_cast<std::size_t>(i)], c.kernel);
    const auto in = gather(node.inputs);
    nn::Tensor<double> y = node.kind == NodeKind::upsample     ? nn::conv_transpose2x2(in, wt, b)
                : node.kind == NodeKind::downsample ? nn::conv2d(in, wt, b, 2, 1)
                                                    : nn::conv2d(in, wt, b, 1, c.kernel / 2);
    out.push_back(nn::relu(y));
  }
  const int head = spec.num_nodes();
  const auto [wt, b] = copy_weight(head, spec.head_inputs(), spec.num_classes(), 1);
  return nn::conv2d(gather(spec.head_inputs()), wt, b, 1, 0);
}

}  // namespace udanas::testing
