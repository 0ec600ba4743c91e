#include "udanas/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "udanas/checkpoint.hpp"
#include "udanas/digest.hpp"
#include "udanas/errors.hpp"

namespace udanas {

namespace {

void write_json(const fs::path& path, const nlohmann::json& doc) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed " + path.string() + ": " + e.what());
  }
}

fs::path ensure_dir(const fs::path& dir) {
  fs::create_directories(dir);
  return dir;
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

nlohmann::json miou_json(const MiouResult& r) {
  nlohmann::json per = nlohmann::json::array();
  for (double v : r.per_class) per.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v));
  return {{"mean", r.mean}, {"per_class", per}};
}

/// The MRF must have been built for this spec: same variables, same cardinalities.
void check_mrf_matches(const PairwiseMrf& mrf, const SupernetSpec& spec) {
  const auto expected = build_search_mrf(spec);
  bool ok = mrf.num_variables() == expected.num_variables() && mrf.num_factors() == expected.num_factors();
  for (int v = 0; ok && v < mrf.num_variables(); ++v) ok = mrf.cardinality(v) == expected.cardinality(v);
  for (int f = 0; ok && f < mrf.num_factors(); ++f) ok = mrf.factors()[f].scope == expected.factors()[f].scope;
  if (!ok) throw ConfigError("the MRF was not built for the configured search space");
}

nlohmann::json subnet_json(const SubnetEntry& s, const SupernetSpec& spec) {
  return {{"rank", s.rank},
          {"labels", s.labels.labels},
          {"arch", to_json(s.arch, spec)},
          {"flops", s.cost.flops},
          {"params", s.cost.params},
          {"score", s.score},
          {"hamming_to_previous", s.hamming_to_previous}};
}

}  // namespace

LoadedConfig load_run_config(const fs::path& path) {
  LoadedConfig lc;
  lc.config = load_config(path);
  lc.source = path.string();
  lc.source_digest = sha256_file(path);
  return lc;
}

LoadedConfig default_run_config(const std::string& profile) {
  LoadedConfig lc;
  lc.config = default_config(profile);
  lc.source = "<defaults:" + profile + ">";
  lc.source_digest = config_digest(lc.config);
  return lc;
}

std::string config_digest(const RunConfig& c) { return sha256_hex(to_json(c).dump()); }

std::string factor_digest(const PairwiseMrf& mrf) {
  Sha256 h;
  for (const auto& f : mrf.factors()) {
    for (int s : f.scope) h.update(&s, sizeof s);
    h.update(f.values.data(), static_cast<std::size_t>(f.values.size()) * sizeof(double));
  }
  return h.hex();
}

// ---------------------------------------------------------------------------

SearchArtifacts cmd_search(const LoadedConfig& lc, const fs::path& out_dir) {
  const auto& cfg = lc.config;
  cfg.validate();
  const auto spec = cfg.spec();
  const auto dir = ensure_dir(out_dir / "search");
  const auto data = generate(cfg.data);

  SearchArtifacts art;
  art.log_path = dir / "log.jsonl";
  std::ofstream log(art.log_path, std::ios::trunc);
  if (!log) throw Error("cannot write " + art.log_path.string());
  auto result = search_loop(spec, build_search_mrf(spec), data, cfg.search, &log);

  art.factor_digest = factor_digest(result.mrf);
  art.mrf_path = dir / "mrf.json";
  write_json(art.mrf_path, {{"spec", to_json(spec)},
                            {"mrf", to_json(result.mrf)},
                            {"factor_digest", art.factor_digest},
                            {"scheme", to_string(cfg.search.scheme)},
                            {"config_digest", lc.source_digest}});
  art.checkpoint_stem = dir / "supernet";
  nn::save_checkpoint(art.checkpoint_stem, result.weights.parameters(), {{"spec", to_json(spec)}});
  write_manifest(out_dir);
  return art;
}

// ---------------------------------------------------------------------------

InferOutput cmd_infer(const LoadedConfig& lc, const fs::path& mrf_path, const fs::path& out_dir) {
  const auto& cfg = lc.config;
  cfg.validate();
  const auto spec = cfg.spec();
  const auto doc = read_json(mrf_path);
  PairwiseMrf mrf;
  try {
    mrf = mrf_from_json(doc.at("mrf"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed " + mrf_path.string() + ": " + e.what());
  }
  check_mrf_matches(mrf, spec);

  const auto& inf = cfg.infer;
  const auto set = diverse_m_best(mrf, inf.m, inf.diversity_weight, inf.exact, inf.loopy);
  const double budget = inf.budget_flops > 0 ? inf.budget_flops : std::numeric_limits<double>::infinity();
  InferOutput out;
  out.candidates = static_cast<int>(set.solutions.size());
  nlohmann::json list = nlohmann::json::array();
  for (auto& b : budget_filter(set, spec, budget, inf.budget_hw)) {
    const auto& sol = set.solutions[static_cast<std::size_t>(b.rank)];
    SubnetEntry e{b.rank, b.labels, b.arch, b.cost, sol.result.score, sol.hamming_to_previous};
    list.push_back(subnet_json(e, spec));
    out.subnets.push_back(std::move(e));
  }
  const auto dir = ensure_dir(out_dir / "infer");
  out.path = dir / "subnets.json";
  write_json(out.path, {{"spec", to_json(spec)},
                        {"m", inf.m},
                        {"diversity_weight", inf.diversity_weight},
                        {"exact", inf.exact},
                        {"budget_flops", inf.budget_flops},
                        {"budget_hw", {inf.budget_hw.first, inf.budget_hw.second}},
                        {"candidates", out.candidates},
                        {"subnets", list}});
  write_manifest(out_dir);
  return out;
}

std::vector<SubnetEntry> read_subnets(const fs::path& path, const SupernetSpec& spec) {
  const auto doc = read_json(path);
  std::vector<SubnetEntry> out;
  try {
    if (to_json(spec_from_json(doc.at("spec"))) != to_json(spec)) {
      throw ConfigError(path.string() + " was produced for another search space");
    }
    for (const auto& s : doc.at("subnets")) {
      SubnetEntry e;
      e.rank = s.at("rank").get<int>();
      e.labels = Assignment(s.at("labels").get<std::vector<int>>());
      e.arch = decode(spec, e.labels);
      e.cost.flops = s.at("flops").get<std::uint64_t>();
      e.cost.params = s.at("params").get<std::uint64_t>();
      e.score = s.at("score").get<double>();
      e.hamming_to_previous = s.at("hamming_to_previous").get<int>();
      out.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed " + path.string() + ": " + e.what());
  } catch (const InvalidAssignment& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return out;
}

// ---------------------------------------------------------------------------

nlohmann::json to_json(const RunReport& r) {
  const auto spec = config_from_json(r.config).spec();
  nlohmann::json subnets = nlohmann::json::array();
  for (std::size_t i = 0; i < r.subnets.size(); ++i) {
    const auto& s = r.subnets[i];
    auto j = subnet_json(s.subnet, spec);
    j["position"] = i;
    j["selected"] = s.selected;
    j["target_miou"] = miou_json(s.metrics.target);
    j["source_val_miou"] = miou_json(s.metrics.source_val);
    j["source_val_loss"] = s.metrics.source_val_loss;
    j["checkpoint"] = s.checkpoint;
    subnets.push_back(std::move(j));
  }
  return {{"config", r.config},
          {"config_source", r.config_source},
          {"config_digest", r.config_digest},
          {"effective_config_digest", r.effective_config_digest},
          {"seed", r.seed},
          {"budget_flops", r.budget_flops},
          {"budget_hw", {r.budget_hw.first, r.budget_hw.second}},
          {"subnets", subnets},
          {"timing", {{"wall_clock_seconds", r.wall_clock_seconds}, {"created_at", r.created_at}}}};
}

nlohmann::json comparable_report(const nlohmann::json& report) {
  auto out = report;
  out.erase("timing");
  return out;
}

RunReport cmd_retrain(const LoadedConfig& lc, const fs::path& subnets_path, const fs::path& out_dir) {
  const auto start = std::chrono::steady_clock::now();
  const auto& cfg = lc.config;
  cfg.validate();
  const auto spec = cfg.spec();
  const auto subnets = read_subnets(subnets_path, spec);
  const auto data = generate(cfg.data);
  const auto dir = ensure_dir(out_dir / "retrain");

  RunReport report;
  report.config = to_json(cfg);
  report.config_source = lc.source;
  report.config_digest = lc.source_digest;
  report.effective_config_digest = config_digest(cfg);
  report.seed = cfg.seed;
  report.budget_flops = cfg.infer.budget_flops;
  report.budget_hw = cfg.infer.budget_hw;

  for (const auto& s : subnets) {
    const std::string stem = "subnet_" + std::to_string(s.rank);
    std::ofstream log(dir / (stem + ".jsonl"), std::ios::trunc);
    auto result = retrain(spec, s.arch, data, cfg.retrain, &log);
    SubnetReport sr;
    sr.subnet = s;
    // Costs are recomputed rather than trusted from the subnet list.
    sr.subnet.cost = resource_cost(spec, s.arch, cfg.infer.budget_hw);
    sr.metrics = result.metrics;
    sr.checkpoint = (fs::path("retrain") / stem).string();
    nn::save_checkpoint(dir / stem, result.weights.parameters(),
                        {{"spec", to_json(spec)}, {"labels", s.labels.labels}, {"instance_norm", cfg.retrain.instance_norm}});
    report.subnets.push_back(std::move(sr));
  }
  // Ties keep discovery order.
  std::stable_sort(report.subnets.begin(), report.subnets.end(), [](const auto& a, const auto& b) {
    return a.metrics.target.mean > b.metrics.target.mean;
  });
  for (std::size_t i = 0; i < report.subnets.size(); ++i) {
    report.subnets[i].selected = static_cast<int>(i) < cfg.infer.top_k;
  }

  report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  report.created_at = utc_now();
  write_json(out_dir / "report.json", to_json(report));

  std::ofstream csv(out_dir / "report.csv", std::ios::trunc);
  csv << "position,rank,selected,target_miou,source_val_miou,source_val_loss,flops,params,labels\n";
  for (std::size_t i = 0; i < report.subnets.size(); ++i) {
    const auto& s = report.subnets[i];
    std::string labels;
    for (std::size_t k = 0; k < s.subnet.labels.size(); ++k) {
      labels += (k ? " " : "") + std::to_string(s.subnet.labels[k]);
    }
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%d,%d,%.6f,%.6f,%.6f,%llu,%llu,", i, s.subnet.rank, s.selected ? 1 : 0,
                  s.metrics.target.mean, s.metrics.source_val.mean, s.metrics.source_val_loss,
                  static_cast<unsigned long long>(s.subnet.cost.flops),
                  static_cast<unsigned long long>(s.subnet.cost.params));
    csv << buf << labels << '\n';
  }
  csv.close();
  write_manifest(out_dir);
  return report;
}

// ---------------------------------------------------------------------------

EvalOutput cmd_eval(const LoadedConfig& lc, const fs::path& checkpoint_stem, const fs::path& out_dir, bool svg) {
  const auto& cfg = lc.config;
  cfg.validate();
  const auto spec = cfg.spec();
  nlohmann::json meta;
  try {
    meta = nn::read_checkpoint_index(checkpoint_stem).at("meta");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("checkpoint " + checkpoint_stem.string() + " has no metadata");
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (!meta.contains("spec") || !meta.contains("labels")) {
    throw ConfigError("checkpoint " + checkpoint_stem.string() + " is not a retrained subnet");
  }
  if (meta.at("spec") != to_json(spec)) {
    throw ConfigError("checkpoint " + checkpoint_stem.string() + " was trained for another search space");
  }
  ArchAssignment arch;
  try {
    arch = decode(spec, Assignment(meta.at("labels").get<std::vector<int>>()));
  } catch (const Error& e) {
    throw ConfigError(std::string("checkpoint labels: ") + e.what());
  }
  nn::SupernetWeights<float> weights(spec, 0, meta.value("instance_norm", false));
  try {
    nn::load_checkpoint(checkpoint_stem, weights.parameters());
  } catch (const ShapeError& e) {
    throw ConfigError(e.what());
  }
  const auto data = generate(cfg.data);
  const auto metrics = evaluate(weights, arch, data);

  const auto dir = ensure_dir(out_dir / "eval");
  const auto name = checkpoint_stem.filename().string();
  EvalOutput out;
  out.target = metrics.target;
  out.csv_path = dir / (name + ".csv");
  std::ofstream(out.csv_path, std::ios::trunc) << miou_csv(metrics.target);
  if (svg) {
    out.svg_path = dir / (name + ".svg");
    std::ofstream(out.svg_path, std::ios::trunc) << svg_bar_chart(metrics.target);
  }
  write_manifest(out_dir);
  return out;
}

std::string svg_bar_chart(const MiouResult& r) {
  const int n = static_cast<int>(r.per_class.size());
  const int bar = 60, gap = 20, height = 200, left = 40, top = 20;
  const int width = left + n * (bar + gap) + gap;
  std::ostringstream os;
  os << std::fixed << std::setprecision(1);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height + top + 40
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top + height << "\" x2=\"" << width << "\" y2=\"" << top + height
     << "\" stroke=\"black\"/>\n";
  for (int c = 0; c < n; ++c) {
    const double v = r.per_class[static_cast<std::size_t>(c)];
    const double x = left + gap + c * (bar + gap);
    const double h = std::isnan(v) ? 0.0 : v * height;
    os << "<rect x=\"" << x << "\" y=\"" << top + height - h << "\" width=\"" << bar << "\" height=\"" << h
       << "\" fill=\"steelblue\"/>\n";
    os << "<text x=\"" << x + bar / 2.0 << "\" y=\"" << top + height + 15 << "\" text-anchor=\"middle\">"
       << class_name(c) << "</text>\n";
    os << "<text x=\"" << x + bar / 2.0 << "\" y=\"" << top + height - h - 4 << "\" text-anchor=\"middle\">"
       << (std::isnan(v) ? std::string("n/a") : std::to_string(v).substr(0, 5)) << "</text>\n";
  }
  os << "<text x=\"" << left << "\" y=\"" << top + height + 35 << "\">mIoU " << std::setprecision(4) << r.mean
     << "</text>\n</svg>\n";
  return os.str();
}

// ---------------------------------------------------------------------------

std::string cmd_report(const fs::path& out_dir) {
  const auto doc = read_json(out_dir / "report.json");
  std::ostringstream os;
  try {
    os << "seed " << doc.at("seed").get<std::uint64_t>() << ", config " << doc.at("config_source").get<std::string>()
       << " (sha256 " << doc.at("config_digest").get<std::string>().substr(0, 12) << ")\n";
    os << "budget " << format_si(doc.at("budget_flops").get<double>()) << " MACs at "
       << doc.at("budget_hw")[0].get<int>() << "x" << doc.at("budget_hw")[1].get<int>() << "\n";
    os << std::left << std::setw(5) << "pos" << std::setw(6) << "rank" << std::setw(5) << "sel" << std::setw(12)
       << "target" << std::setw(12) << "src_val" << std::setw(10) << "MACs" << std::setw(10) << "params"
       << "labels\n";
    os << std::fixed << std::setprecision(4);
    for (const auto& s : doc.at("subnets")) {
      std::string labels;
      for (const auto& l : s.at("labels")) labels += (labels.empty() ? "" : " ") + std::to_string(l.get<int>());
      os << std::setw(5) << s.at("position").get<int>() << std::setw(6) << s.at("rank").get<int>() << std::setw(5)
         << (s.at("selected").get<bool>() ? "*" : "") << std::setw(12) << s.at("target_miou").at("mean").get<double>()
         << std::setw(12) << s.at("source_val_miou").at("mean").get<double>() << std::setw(10)
         << format_si(static_cast<double>(s.at("flops").get<std::uint64_t>())) << std::setw(10)
         << format_si(static_cast<double>(s.at("params").get<std::uint64_t>())) << labels << "\n";
    }
    os << std::setprecision(1) << "wall clock " << doc.at("timing").at("wall_clock_seconds").get<double>() << " s\n";
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed report.json: ") + e.what());
  }
  return os.str();
}

RunReport run_pipeline(const LoadedConfig& lc, const fs::path& out_dir) {
  const auto search = cmd_search(lc, out_dir);
  const auto infer = cmd_infer(lc, search.mrf_path, out_dir);
  auto report = cmd_retrain(lc, infer.path, out_dir);
  if (!report.subnets.empty()) cmd_eval(lc, out_dir / report.subnets.front().checkpoint, out_dir, true);
  return report;
}

void write_manifest(const fs::path& out_dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(out_dir)) {
    if (e.is_regular_file() && e.path().filename() != "manifest.json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  nlohmann::json list = nlohmann::json::array();
  for (const auto& f : files) {
    list.push_back({{"path", fs::relative(f, out_dir).generic_string()},
                    {"bytes", fs::file_size(f)},
                    {"sha256", sha256_file(f)}});
  }
  write_json(out_dir / "manifest.json", {{"files", list}});
}

}  // namespace udanas
