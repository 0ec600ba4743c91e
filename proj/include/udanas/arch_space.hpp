#pragma once

// U-Net shaped search space: search nodes, their choice sets, the MRF over
// them, and MAC / parameter accounting.

#include <boost/multiprecision/cpp_int.hpp>
#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "udanas/map_inference.hpp"
#include "udanas/mrf.hpp"

namespace udanas {

enum class NodeKind { normal, downsample, upsample };

std::string to_string(NodeKind kind);
NodeKind node_kind_from_string(const std::string& s);

/// Width ratios in quarters: 0.5, 0.75, 1.0, 1.25, 1.5.
inline constexpr std::array<int, 5> kWidthQuarters{2, 3, 4, 5, 6};
inline constexpr std::array<int, 2> kNormalKernels{3, 5};
inline constexpr int kMaxWidthQuarters = 6;

struct OpChoice {
  NodeKind kind = NodeKind::normal;
  int kernel = 3;
  int width_quarters = 4;

  double width_ratio() const { return width_quarters / 4.0; }
  bool operator==(const OpChoice&) const = default;
};

/// Number of labels of a node kind (10 for normal, 5 otherwise).
int choice_count(NodeKind kind);
/// Normal labels are kernel-major: label = kernel_index * 5 + width_index.
OpChoice choice_of_label(NodeKind kind, int label);
int label_of_choice(const OpChoice& c);
std::string label_name(const OpChoice& c);

/// ceil(quarters/4 * base * 2^level).
int scaled_channels(int width_quarters, int base_channels, int level);

inline constexpr int kImageInput = -1;

struct SearchNode {
  std::string name;
  NodeKind kind = NodeKind::normal;
  int level = 0;            // resolution level of the node's output
  std::vector<int> inputs;  // node indices (kImageInput for the image), concatenated in order
};

struct UnetOptions {
  int depth = 2;
  int base_channels = 8;
  int in_channels = 3;
  int num_classes = 5;
  int stem_convs = 1;        // normal nodes at level 0 before the first downsample
  int encoder_convs = 0;     // normal nodes after each intermediate downsample
  int bottleneck_convs = 0;  // normal nodes after the deepest downsample
  int decoder_convs = 1;     // normal nodes after each upsample
};

class SupernetSpec {
 public:
  SupernetSpec() = default;
  SupernetSpec(int depth, int base_channels, int in_channels, int num_classes, std::vector<SearchNode> nodes,
               std::vector<int> head_inputs);

  static SupernetSpec unet(const UnetOptions& options);
  /// Desk-scale default: depth 2, base 8, 7 search nodes.
  static SupernetSpec desk_default(int num_classes = 5, int in_channels = 3);
  /// Depth-1 toy: stem, one downsample and one upsample.
  static SupernetSpec toy(int num_classes = 5, int in_channels = 3);

  int depth() const { return depth_; }
  int base_channels() const { return base_channels_; }
  int in_channels() const { return in_channels_; }
  int num_classes() const { return num_classes_; }
  const std::vector<SearchNode>& nodes() const { return nodes_; }
  int num_nodes() const { return static_cast<int>(nodes_.size()); }
  /// Inputs of the fixed 1x1 classification head.
  const std::vector<int>& head_inputs() const { return head_inputs_; }

  /// Pairs that receive a pairwise factor: consecutive nodes of the data path
  /// and encoder-decoder skip pairs whose consumer is a search node.
  const std::vector<std::pair<int, int>>& edges() const { return edges_; }

  /// Widest channel count a node can output (ratio 1.5).
  int max_channels(int node) const;

 private:
  void validate_and_link();

  int depth_ = 0;
  int base_channels_ = 0;
  int in_channels_ = 0;
  int num_classes_ = 0;
  std::vector<SearchNode> nodes_;
  std::vector<int> head_inputs_;
  std::vector<std::pair<int, int>> edges_;
};

struct ArchAssignment {
  std::vector<OpChoice> choices;  // one per search node
  bool operator==(const ArchAssignment&) const = default;
};

ArchAssignment decode(const SupernetSpec& spec, const Assignment& a);
Assignment encode(const SupernetSpec& spec, const ArchAssignment& arch);

/// The widest / narrowest subnets used by sandwich training.
ArchAssignment largest_arch(const SupernetSpec& spec);
ArchAssignment smallest_arch(const SupernetSpec& spec);

/// One variable per node (labels = the node's choice set), a unary on every
/// variable and a pairwise factor on every spec edge, all zero.
PairwiseMrf build_search_mrf(const SupernetSpec& spec);

boost::multiprecision::cpp_int count_configurations(const SupernetSpec& spec);

struct ResourceCost {
  std::uint64_t flops = 0;  // multiply-accumulates
  std::uint64_t params = 0;

  ResourceCost& operator+=(const ResourceCost& o) {
    flops += o.flops;
    params += o.params;
    return *this;
  }
  bool operator==(const ResourceCost&) const = default;
};

/// K x K convolution: K*K*Cin*Cout*Hout*Wout MACs, K*K*Cin*Cout + Cout params.
ResourceCost conv_cost(int kernel, int c_in, int c_out, int h_out, int w_out);
/// 2x2 stride-2 transposed convolution from an (h_in, w_in) input: every
/// input pixel meets every kernel tap once, 4*Cin*Cout*Hin*Win MACs.
ResourceCost conv_transpose_cost(int c_in, int c_out, int h_in, int w_in);

struct LayerCost {
  std::string name;  // node name or "head"
  ResourceCost cost;
};

using ImageSize = std::pair<int, int>;

/// Per-layer costs of the decoded network in execution order, head last.
std::vector<LayerCost> layer_costs(const SupernetSpec& spec, const ArchAssignment& arch, ImageSize hw);
ResourceCost resource_cost(const SupernetSpec& spec, const ArchAssignment& arch, ImageSize hw);

/// Channel count of every node output under `arch`.
std::vector<int> node_channels(const SupernetSpec& spec, const ArchAssignment& arch);

struct BudgetedArch {
  int rank = 0;  // position in the candidate list
  Assignment labels;
  ArchAssignment arch;
  ResourceCost cost;
};

/// Keeps candidates whose MACs do not exceed the budget, in their original order.
std::vector<BudgetedArch> budget_filter(const DiverseSolutionSet& candidates, const SupernetSpec& spec,
                                        double budget_flops, ImageSize hw);

/// Parses counts such as "2.5G", "800M", "1e9" (K, M, G, T suffixes are powers of 1000).
double parse_si(const std::string& text);
std::string format_si(double value);

nlohmann::json to_json(const SupernetSpec& spec);
SupernetSpec spec_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const ArchAssignment& arch, const SupernetSpec& spec);

}  // namespace udanas
