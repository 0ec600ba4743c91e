#include "udanas/arch_space.hpp"

#include <cmath>
#include <cstdio>

namespace udanas {

std::string to_string(NodeKind kind) {
  switch (kind) {
    case NodeKind::normal:
      return "normal";
    case NodeKind::downsample:
      return "downsample";
    case NodeKind::upsample:
      return "upsample";
  }
  return "?";
}

NodeKind node_kind_from_string(const std::string& s) {
  if (s == "normal") return NodeKind::normal;
  if (s == "downsample") return NodeKind::downsample;
  if (s == "upsample") return NodeKind::upsample;
  throw Error("unknown node kind '" + s + "'");
}

int choice_count(NodeKind kind) {
  return kind == NodeKind::normal ? static_cast<int>(kNormalKernels.size() * kWidthQuarters.size())
                                  : static_cast<int>(kWidthQuarters.size());
}

OpChoice choice_of_label(NodeKind kind, int label) {
  if (label < 0 || label >= choice_count(kind)) {
    throw InvalidAssignment("label " + std::to_string(label) + " out of range for a " + to_string(kind) + " node");
  }
  const int widths = static_cast<int>(kWidthQuarters.size());
  switch (kind) {
    case NodeKind::normal:
      return {kind, kNormalKernels[static_cast<std::size_t>(label / widths)],
              kWidthQuarters[static_cast<std::size_t>(label % widths)]};
    case NodeKind::downsample:
      return {kind, 3, kWidthQuarters[static_cast<std::size_t>(label)]};
    case NodeKind::upsample:
      return {kind, 2, kWidthQuarters[static_cast<std::size_t>(label)]};
  }
  return {};
}

int label_of_choice(const OpChoice& c) {
  int widx = -1;
  for (std::size_t i = 0; i < kWidthQuarters.size(); ++i)
    if (kWidthQuarters[i] == c.width_quarters) widx = static_cast<int>(i);
  if (widx < 0) throw InvalidAssignment("width ratio not in the choice set");
  switch (c.kind) {
    case NodeKind::normal:
      if (c.kernel == 3) return widx;
      if (c.kernel == 5) return static_cast<int>(kWidthQuarters.size()) + widx;
      break;
    case NodeKind::downsample:
      if (c.kernel == 3) return widx;
      break;
    case NodeKind::upsample:
      if (c.kernel == 2) return widx;
      break;
  }
  throw InvalidAssignment("kernel " + std::to_string(c.kernel) + " not allowed for a " + to_string(c.kind) +
                          " node");
}

std::string label_name(const OpChoice& c) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "k%d_w%.2f", c.kernel, c.width_ratio());
  return buf;
}

int scaled_channels(int width_quarters, int base_channels, int level) {
  const long long num = static_cast<long long>(width_quarters) * base_channels * (1LL << level);
  return static_cast<int>((num + 3) / 4);
}

// ---------------------------------------------------------------------------

SupernetSpec::SupernetSpec(int depth, int base_channels, int in_channels, int num_classes,
                           std::vector<SearchNode> nodes, std::vector<int> head_inputs)
    : depth_(depth),
      base_channels_(base_channels),
      in_channels_(in_channels),
      num_classes_(num_classes),
      nodes_(std::move(nodes)),
      head_inputs_(std::move(head_inputs)) {
  validate_and_link();
}

void SupernetSpec::validate_and_link() {
  if (depth_ < 0 || base_channels_ < 1 || in_channels_ < 1 || num_classes_ < 2) {
    throw Error("invalid supernet dimensions");
  }
  auto level_of = [&](int input) { return input == kImageInput ? 0 : nodes_[static_cast<std::size_t>(input)].level; };
  auto check_inputs = [&](const std::vector<int>& inputs, int limit, const std::string& who) {
    if (inputs.empty()) throw Error(who + " has no inputs");
    for (int in : inputs) {
      if (in != kImageInput && (in < 0 || in >= limit)) throw Error(who + " references a later or unknown node");
    }
    const int lv = level_of(inputs[0]);
    for (int in : inputs)
      if (level_of(in) != lv) throw Error(who + " concatenates inputs at different resolutions");
    return lv;
  };

  edges_.clear();
  for (int i = 0; i < num_nodes(); ++i) {
    const auto& node = nodes_[static_cast<std::size_t>(i)];
    const int in_level = check_inputs(node.inputs, i, "node " + node.name);
    const int expected = node.kind == NodeKind::normal       ? node.level
                         : node.kind == NodeKind::downsample ? node.level - 1
                                                             : node.level + 1;
    if (in_level != expected || node.level < 0 || node.level > depth_) {
      throw Error("node " + node.name + " has inconsistent resolution levels");
    }
    for (int in : node.inputs)
      if (in != kImageInput) edges_.emplace_back(in, i);
  }
  if (check_inputs(head_inputs_, num_nodes(), "head") != 0) throw Error("head must read full-resolution features");
}

SupernetSpec SupernetSpec::unet(const UnetOptions& o) {
  if (o.depth < 1 || o.stem_convs < 1 || o.encoder_convs < 0 || o.bottleneck_convs < 0 || o.decoder_convs < 0) {
    throw Error("invalid U-Net options");
  }
  std::vector<SearchNode> nodes;
  auto add = [&](std::string name, NodeKind kind, int level, std::vector<int> inputs) {
    nodes.push_back({std::move(name), kind, level, std::move(inputs)});
    return static_cast<int>(nodes.size()) - 1;
  };

  std::vector<int> skip(static_cast<std::size_t>(o.depth) + 1);
  std::vector<int> current{kImageInput};
  for (int i = 0; i < o.stem_convs; ++i) current = {add("enc0_" + std::to_string(i), NodeKind::normal, 0, current)};
  skip[0] = current[0];
  for (int l = 1; l <= o.depth; ++l) {
    current = {add("down" + std::to_string(l), NodeKind::downsample, l, current)};
    const int convs = l < o.depth ? o.encoder_convs : o.bottleneck_convs;
    for (int i = 0; i < convs; ++i) {
      current = {add("enc" + std::to_string(l) + "_" + std::to_string(i), NodeKind::normal, l, current)};
    }
    skip[static_cast<std::size_t>(l)] = current[0];
  }
  for (int l = o.depth; l >= 1; --l) {
    const int up = add("up" + std::to_string(l), NodeKind::upsample, l - 1, current);
    current = {up, skip[static_cast<std::size_t>(l - 1)]};
    for (int i = 0; i < o.decoder_convs; ++i) {
      current = {add("dec" + std::to_string(l - 1) + "_" + std::to_string(i), NodeKind::normal, l - 1, current)};
    }
  }
  return SupernetSpec(o.depth, o.base_channels, o.in_channels, o.num_classes, std::move(nodes), current);
}

SupernetSpec SupernetSpec::desk_default(int num_classes, int in_channels) {
  return unet({.depth = 2, .base_channels = 8, .in_channels = in_channels, .num_classes = num_classes});
}

SupernetSpec SupernetSpec::toy(int num_classes, int in_channels) {
  return unet({.depth = 1,
               .base_channels = 8,
               .in_channels = in_channels,
               .num_classes = num_classes,
               .stem_convs = 1,
               .decoder_convs = 0});
}

int SupernetSpec::max_channels(int node) const {
  return scaled_channels(kMaxWidthQuarters, base_channels_, nodes_.at(static_cast<std::size_t>(node)).level);
}

// ---------------------------------------------------------------------------

ArchAssignment decode(const SupernetSpec& spec, const Assignment& a) {
  if (static_cast<int>(a.size()) != spec.num_nodes()) {
    throw InvalidAssignment("assignment length does not match the number of search nodes");
  }
  ArchAssignment arch;
  for (int i = 0; i < spec.num_nodes(); ++i) {
    arch.choices.push_back(choice_of_label(spec.nodes()[static_cast<std::size_t>(i)].kind, a[static_cast<std::size_t>(i)]));
  }
  return arch;
}

Assignment encode(const SupernetSpec& spec, const ArchAssignment& arch) {
  if (static_cast<int>(arch.choices.size()) != spec.num_nodes()) {
    throw InvalidAssignment("architecture length does not match the number of search nodes");
  }
  Assignment a(std::vector<int>(arch.choices.size()));
  for (int i = 0; i < spec.num_nodes(); ++i) {
    const auto& c = arch.choices[static_cast<std::size_t>(i)];
    if (c.kind != spec.nodes()[static_cast<std::size_t>(i)].kind) throw InvalidAssignment("node kind mismatch");
    a[static_cast<std::size_t>(i)] = label_of_choice(c);
  }
  return a;
}

ArchAssignment largest_arch(const SupernetSpec& spec) {
  ArchAssignment arch;
  for (const auto& n : spec.nodes())
    arch.choices.push_back({n.kind, n.kind == NodeKind::normal ? 5 : (n.kind == NodeKind::downsample ? 3 : 2),
                            kWidthQuarters.back()});
  return arch;
}

ArchAssignment smallest_arch(const SupernetSpec& spec) {
  ArchAssignment arch;
  for (const auto& n : spec.nodes())
    arch.choices.push_back({n.kind, n.kind == NodeKind::upsample ? 2 : 3, kWidthQuarters.front()});
  return arch;
}

PairwiseMrf build_search_mrf(const SupernetSpec& spec) {
  PairwiseMrf mrf;
  for (const auto& node : spec.nodes()) {
    std::vector<std::string> names;
    for (int l = 0; l < choice_count(node.kind); ++l) names.push_back(label_name(choice_of_label(node.kind, l)));
    mrf.add_variable(choice_count(node.kind), std::move(names));
  }
  for (int i = 0; i < spec.num_nodes(); ++i) mrf.add_unary(i);
  for (auto [a, b] : spec.edges()) mrf.add_pairwise(a, b);
  return mrf;
}

boost::multiprecision::cpp_int count_configurations(const SupernetSpec& spec) {
  boost::multiprecision::cpp_int total = 1;
  for (const auto& node : spec.nodes()) total *= choice_count(node.kind);
  return total;
}

// ---------------------------------------------------------------------------

ResourceCost conv_cost(int kernel, int c_in, int c_out, int h_out, int w_out) {
  const std::uint64_t taps = static_cast<std::uint64_t>(kernel) * kernel * c_in * c_out;
  return {taps * static_cast<std::uint64_t>(h_out) * static_cast<std::uint64_t>(w_out), taps + static_cast<std::uint64_t>(c_out)};
}

ResourceCost conv_transpose_cost(int c_in, int c_out, int h_in, int w_in) {
  const std::uint64_t taps = 4ULL * static_cast<std::uint64_t>(c_in) * static_cast<std::uint64_t>(c_out);
  return {taps * static_cast<std::uint64_t>(h_in) * static_cast<std::uint64_t>(w_in), taps + static_cast<std::uint64_t>(c_out)};
}

std::vector<int> node_channels(const SupernetSpec& spec, const ArchAssignment& arch) {
  if (static_cast<int>(arch.choices.size()) != spec.num_nodes()) {
    throw InvalidAssignment("architecture length does not match the number of search nodes");
  }
  std::vector<int> out;
  for (int i = 0; i < spec.num_nodes(); ++i) {
    out.push_back(scaled_channels(arch.choices[static_cast<std::size_t>(i)].width_quarters, spec.base_channels(),
                                  spec.nodes()[static_cast<std::size_t>(i)].level));
  }
  return out;
}

std::vector<LayerCost> layer_costs(const SupernetSpec& spec, const ArchAssignment& arch, ImageSize hw) {
  const auto [h, w] = hw;
  const int factor = 1 << spec.depth();
  if (h <= 0 || w <= 0 || h % factor != 0 || w % factor != 0) {
    throw DomainError("input size " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by " +
                      std::to_string(factor));
  }
  const auto channels = node_channels(spec, arch);
  auto c_in = [&](const std::vector<int>& inputs) {
    int c = 0;
    for (int in : inputs) c += in == kImageInput ? spec.in_channels() : channels[static_cast<std::size_t>(in)];
    return c;
  };

  std::vector<LayerCost> out;
  for (int i = 0; i < spec.num_nodes(); ++i) {
    const auto& node = spec.nodes()[static_cast<std::size_t>(i)];
    const auto& c = arch.choices[static_cast<std::size_t>(i)];
    const int cin = c_in(node.inputs), cout = channels[static_cast<std::size_t>(i)];
    const int ho = h >> node.level, wo = w >> node.level;
    ResourceCost cost = node.kind == NodeKind::upsample ? conv_transpose_cost(cin, cout, ho / 2, wo / 2)
                                                        : conv_cost(c.kernel, cin, cout, ho, wo);
    out.push_back({node.name, cost});
  }
  out.push_back({"head", conv_cost(1, c_in(spec.head_inputs()), spec.num_classes(), h, w)});
  return out;
}

ResourceCost resource_cost(const SupernetSpec& spec, const ArchAssignment& arch, ImageSize hw) {
  ResourceCost total;
  for (const auto& layer : layer_costs(spec, arch, hw)) total += layer.cost;
  return total;
}

std::vector<BudgetedArch> budget_filter(const DiverseSolutionSet& candidates, const SupernetSpec& spec,
                                        double budget_flops, ImageSize hw) {
  std::vector<BudgetedArch> kept;
  for (std::size_t i = 0; i < candidates.solutions.size(); ++i) {
    const auto& labels = candidates.solutions[i].result.assignment;
    auto arch = decode(spec, labels);
    const auto cost = resource_cost(spec, arch, hw);
    if (static_cast<double>(cost.flops) <= budget_flops) {
      kept.push_back({static_cast<int>(i), labels, std::move(arch), cost});
    }
  }
  return kept;
}

double parse_si(const std::string& text) {
  std::size_t used = 0;
  double value = 0;
  try {
    value = std::stod(text, &used);
  } catch (const std::exception&) {
    throw ConfigError("cannot parse count '" + text + "'");
  }
  const std::string suffix = text.substr(used);
  double scale = 1;
  if (suffix == "K" || suffix == "k")
    scale = 1e3;
  else if (suffix == "M")
    scale = 1e6;
  else if (suffix == "G")
    scale = 1e9;
  else if (suffix == "T")
    scale = 1e12;
  else if (!suffix.empty())
    throw ConfigError("unknown suffix in count '" + text + "'");
  if (!std::isfinite(value) || value < 0) throw ConfigError("count must be finite and non-negative: '" + text + "'");
  return value * scale;
}

std::string format_si(double value) {
  static constexpr std::array<std::pair<double, const char*>, 4> units{
      {{1e12, "T"}, {1e9, "G"}, {1e6, "M"}, {1e3, "K"}}};
  char buf[64];
  for (auto [scale, suffix] : units) {
    if (value >= scale) {
      std::snprintf(buf, sizeof buf, "%.3g%s", value / scale, suffix);
      return buf;
    }
  }
  std::snprintf(buf, sizeof buf, "%.3g", value);
  return buf;
}

// ---------------------------------------------------------------------------

nlohmann::json to_json(const SupernetSpec& spec) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : spec.nodes()) {
    nodes.push_back({{"name", n.name}, {"kind", to_string(n.kind)}, {"level", n.level}, {"inputs", n.inputs}});
  }
  return {{"depth", spec.depth()},
          {"base_channels", spec.base_channels()},
          {"in_channels", spec.in_channels()},
          {"num_classes", spec.num_classes()},
          {"nodes", nodes},
          {"head_inputs", spec.head_inputs()}};
}

SupernetSpec spec_from_json(const nlohmann::json& doc) {
  try {
    std::vector<SearchNode> nodes;
    for (const auto& n : doc.at("nodes")) {
      nodes.push_back({n.at("name").get<std::string>(), node_kind_from_string(n.at("kind").get<std::string>()),
                       n.at("level").get<int>(), n.at("inputs").get<std::vector<int>>()});
    }
    return SupernetSpec(doc.at("depth").get<int>(), doc.at("base_channels").get<int>(),
                        doc.at("in_channels").get<int>(), doc.at("num_classes").get<int>(), std::move(nodes),
                        doc.at("head_inputs").get<std::vector<int>>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed supernet spec: ") + e.what());
  }
}

nlohmann::json to_json(const ArchAssignment& arch, const SupernetSpec& spec) {
  nlohmann::json out = nlohmann::json::array();
  for (int i = 0; i < spec.num_nodes(); ++i) {
    const auto& c = arch.choices.at(static_cast<std::size_t>(i));
    out.push_back({{"node", spec.nodes()[static_cast<std::size_t>(i)].name},
                   {"kind", to_string(c.kind)},
                   {"kernel", c.kernel},
                   {"width", c.width_ratio()}});
  }
  return out;
}

}  // namespace udanas
