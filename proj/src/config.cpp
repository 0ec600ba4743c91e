#include "udanas/config.hpp"

#include <toml.hpp>

#include <fstream>
#include <set>
#include <sstream>

#include "udanas/errors.hpp"

namespace udanas {

namespace {

nlohmann::json node_to_json(const toml::node& node) {
  if (const auto* t = node.as_table()) {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [k, v] : *t) out[std::string(k.str())] = node_to_json(v);
    return out;
  }
  if (const auto* a = node.as_array()) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& v : *a) out.push_back(node_to_json(v));
    return out;
  }
  if (const auto* v = node.as_string()) return v->get();
  if (const auto* v = node.as_integer()) return v->get();
  if (const auto* v = node.as_floating_point()) return v->get();
  if (const auto* v = node.as_boolean()) return v->get();
  throw ConfigError("dates and times are not valid configuration values");
}

/// Reads typed keys out of one JSON object and rejects the ones nobody asked for.
class Section {
 public:
  Section(const nlohmann::json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
    if (!doc_.is_object()) throw ConfigError("'" + path_ + "' must be a table");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!doc_.contains(key)) return;
    try {
      const auto& v = doc_.at(key);
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError("");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.get<std::int64_t>() < 0) throw ConfigError("");
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("");
      }
      out = v.get<T>();
    } catch (const std::exception&) {
      throw ConfigError("'" + name(key) + "' has the wrong type");
    }
  }

  /// Counts such as budget_flops accept numbers or SI strings ("2.5G").
  void read_si(const char* key, double& out) {
    seen_.insert(key);
    if (!doc_.contains(key)) return;
    const auto& v = doc_.at(key);
    if (v.is_number())
      out = v.get<double>();
    else if (v.is_string())
      out = parse_si(v.get<std::string>());
    else
      throw ConfigError("'" + name(key) + "' must be a number or a string such as \"2.5G\"");
  }

  bool has(const char* key) const { return doc_.contains(key); }
  Section child(const char* key) {
    seen_.insert(key);
    return Section(doc_.at(key), name(key));
  }

  void finish() const {
    for (const auto& [k, v] : doc_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown key '" + name(k) + "'");
    }
  }

 private:
  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const nlohmann::json& doc_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_selftrain(Section s, SelfTrainConfig& c) {
  s.read("tau", c.tau);
  s.read("tau_e", c.tau_e);
  s.read("temperature", c.temperature);
  s.read("lambda_t", c.lambda_t);
  s.read("ema_decay", c.ema_decay);
  std::string scheme = to_string(c.scheme);
  s.read("scheme", scheme);
  c.scheme = pseudo_scheme_from_string(scheme);
  s.read("iterations", c.iterations);
  s.read("warmup_iterations", c.warmup_iterations);
  s.read("target_warmup", c.target_warmup);
  s.read("batch_size", c.batch_size);
  s.read("lr", c.lr);
  s.read("weight_decay", c.weight_decay);
  s.read("recall_ce", c.recall_ce);
  s.read("instance_norm", c.instance_norm);
  s.read("sandwich_random", c.sandwich_random);
  s.read("factor_lr", c.factor_lr);
  s.read("gumbel_temperature", c.gumbel_temperature);
  s.read("gumbel_sweeps", c.gumbel_sweeps);
  s.read("crop_min_scale", c.crop_min_scale);
  s.read("jitter_strength", c.jitter_strength);
  s.read("blur_prob", c.blur_prob);
  std::string mode = c.mode == TrainMode::self_training ? "self_training" : "source_only";
  s.read("mode", mode);
  if (mode == "self_training")
    c.mode = TrainMode::self_training;
  else if (mode == "source_only")
    c.mode = TrainMode::source_only;
  else
    throw ConfigError("unknown training mode '" + mode + "' (expected self_training or source_only)");
  s.finish();
}

}  // namespace

nlohmann::json toml_to_json(const std::string& text, const std::string& source_name) {
  try {
    return node_to_json(toml::parse(text, source_name));
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << source_name << ": " << e.description() << " (line " << e.source().begin.line << ")";
    throw ConfigError(os.str());
  }
}

void RunConfig::set_seed(std::uint64_t s) {
  seed = s;
  data.seed = s;
  search.seed = s;
  retrain.seed = s;
}

void RunConfig::validate() const {
  search.validate();
  retrain.validate();
  if (space.depth < 1 || space.base_channels < 1 || space.num_classes < 2 || space.in_channels != 3) {
    throw ConfigError("space needs depth >= 1, base_channels >= 1, num_classes >= 2 and in_channels = 3");
  }
  if (data.classes != space.num_classes) throw ConfigError("data.classes must equal space.num_classes");
  const int factor = 1 << space.depth;
  if (data.height < factor || data.width < factor || data.height % factor || data.width % factor) {
    throw ConfigError("data.height and data.width must be positive multiples of " + std::to_string(factor));
  }
  if (data.n_source < 1) throw ConfigError("data.n_source must be >= 1");
  if (retrain.mode == TrainMode::self_training && retrain.lambda_t != 0 && data.n_target < 1) {
    throw ConfigError("self-training needs data.n_target >= 1");
  }
  if (infer.m < 1 || infer.top_k < 1) throw ConfigError("infer.m and infer.top_k must be >= 1");
  if (!(infer.diversity_weight >= 0)) throw ConfigError("infer.diversity_weight must be >= 0");
  if (infer.budget_hw.first < 1 || infer.budget_hw.second < 1) throw ConfigError("budget resolution must be positive");
}

RunConfig default_config(const std::string& profile) {
  RunConfig c;
  c.profile = profile;
  c.space = UnetOptions{};
  c.search.iterations = 40000;
  c.search.warmup_iterations = 1500;
  c.retrain = c.search;
  c.retrain.iterations = 140000;
  if (profile == "full") return c;
  if (profile != "toy") throw ConfigError("unknown profile '" + profile + "' (expected full or toy)");

  c.space = {.depth = 1, .base_channels = 8, .stem_convs = 1, .decoder_convs = 0};
  c.data.height = c.data.width = 32;
  c.data.shift = {.intensity = 0.3, .hue_degrees = 10.0};
  c.infer.exact = true;
  for (auto* s : {&c.search, &c.retrain}) {
    s->iterations = 2000;
    s->warmup_iterations = 75;
    s->target_warmup = 1000;
    s->ema_decay = 0.99;
    s->recall_ce = true;
    s->jitter_strength = 0.0;
    s->blur_prob = 0.0;
  }
  return c;
}

RunConfig config_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("configuration must be a table");
  std::string profile = "full";
  if (doc.contains("profile")) {
    if (!doc["profile"].is_string()) throw ConfigError("'profile' must be a string");
    profile = doc["profile"].get<std::string>();
  }
  RunConfig c = default_config(profile);
  Section root(doc, "");
  root.read("profile", profile);
  std::uint64_t seed = 0;
  root.read("seed", seed);
  c.set_seed(seed);

  if (root.has("space")) {
    auto s = root.child("space");
    std::string preset;
    s.read("preset", preset);
    if (preset == "toy")
      c.space = {.depth = 1, .base_channels = 8, .stem_convs = 1, .decoder_convs = 0};
    else if (preset == "desk")
      c.space = UnetOptions{};
    else if (!preset.empty())
      throw ConfigError("unknown space.preset '" + preset + "' (expected toy or desk)");
    s.read("depth", c.space.depth);
    s.read("base_channels", c.space.base_channels);
    s.read("num_classes", c.space.num_classes);
    s.read("stem_convs", c.space.stem_convs);
    s.read("encoder_convs", c.space.encoder_convs);
    s.read("bottleneck_convs", c.space.bottleneck_convs);
    s.read("decoder_convs", c.space.decoder_convs);
    s.finish();
  }
  c.data.classes = c.space.num_classes;

  if (root.has("data")) {
    auto s = root.child("data");
    s.read("classes", c.data.classes);
    s.read("height", c.data.height);
    s.read("width", c.data.width);
    s.read("n_source", c.data.n_source);
    s.read("n_source_val", c.data.n_source_val);
    s.read("n_target", c.data.n_target);
    s.read("n_target_eval", c.data.n_target_eval);
    if (s.has("shift")) {
      auto sh = s.child("shift");
      sh.read("intensity", c.data.shift.intensity);
      sh.read("hue_degrees", c.data.shift.hue_degrees);
      sh.read("texture_shift", c.data.shift.texture_shift);
      sh.read("size_shift", c.data.shift.size_shift);
      sh.read("noise", c.data.shift.noise);
      sh.finish();
    }
    s.finish();
  }

  // [selftrain] applies to both phases; [search] and [retrain] override it.
  if (root.has("selftrain")) {
    read_selftrain(root.child("selftrain"), c.search);
    read_selftrain(Section(doc.at("selftrain"), "selftrain"), c.retrain);
    if (doc.at("selftrain").contains("iterations") || doc.at("selftrain").contains("mode")) {
      throw ConfigError("set iterations and mode under [search] or [retrain], not [selftrain]");
    }
  }
  if (root.has("search")) read_selftrain(root.child("search"), c.search);
  if (root.has("retrain")) read_selftrain(root.child("retrain"), c.retrain);
  c.search.seed = c.retrain.seed = c.seed;

  if (root.has("infer")) {
    auto s = root.child("infer");
    s.read("m", c.infer.m);
    s.read("diversity_weight", c.infer.diversity_weight);
    s.read("exact", c.infer.exact);
    s.read("max_iters", c.infer.loopy.max_iters);
    s.read("damping", c.infer.loopy.damping);
    s.read("tolerance", c.infer.loopy.tolerance);
    s.read_si("budget_flops", c.infer.budget_flops);
    s.read("budget_height", c.infer.budget_hw.first);
    s.read("budget_width", c.infer.budget_hw.second);
    s.read("top_k", c.infer.top_k);
    s.finish();
  }
  root.finish();
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  nlohmann::json doc;
  if (path.extension() == ".json") {
    try {
      doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
  } else {
    doc = toml_to_json(text, path.string());
  }
  return config_from_json(doc);
}

nlohmann::json to_json(const RunConfig& c) {
  auto phase = [](const SelfTrainConfig& s) {
    auto j = to_json(s);
    j.erase("seed");
    return j;
  };
  return {{"profile", c.profile},
          {"seed", c.seed},
          {"space",
           {{"depth", c.space.depth},
            {"base_channels", c.space.base_channels},
            {"num_classes", c.space.num_classes},
            {"stem_convs", c.space.stem_convs},
            {"encoder_convs", c.space.encoder_convs},
            {"bottleneck_convs", c.space.bottleneck_convs},
            {"decoder_convs", c.space.decoder_convs}}},
          {"data",
           {{"classes", c.data.classes},
            {"height", c.data.height},
            {"width", c.data.width},
            {"n_source", c.data.n_source},
            {"n_source_val", c.data.n_source_val},
            {"n_target", c.data.n_target},
            {"n_target_eval", c.data.n_target_eval},
            {"shift", to_json(c.data.shift)}}},
          {"search", phase(c.search)},
          {"retrain", phase(c.retrain)},
          {"infer",
           {{"m", c.infer.m},
            {"diversity_weight", c.infer.diversity_weight},
            {"exact", c.infer.exact},
            {"max_iters", c.infer.loopy.max_iters},
            {"damping", c.infer.loopy.damping},
            {"tolerance", c.infer.loopy.tolerance},
            {"budget_flops", c.infer.budget_flops},
            {"budget_height", c.infer.budget_hw.first},
            {"budget_width", c.infer.budget_hw.second},
            {"top_k", c.infer.top_k}}}};
}

}  // namespace udanas
