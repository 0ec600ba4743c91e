// udanas: search, infer, retrain, eval and report from the command line.
//
// Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>

#include "udanas/errors.hpp"
#include "udanas/pipeline.hpp"

namespace {

using namespace udanas;

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string budget;
  std::optional<int> m;
  std::string scheme;
  std::string out_dir = "out";
};

void add_common(CLI::App* cmd, Overrides& o, bool needs_config) {
  auto* c = cmd->add_option("--config", o.config, "TOML or JSON run configuration");
  if (needs_config) c->required();
  cmd->add_option("--seed", o.seed, "root seed for data, search and retraining");
  cmd->add_option("--budget-flops", o.budget, "MAC budget such as 2.5G; 0 disables the filter");
  cmd->add_option("--m", o.m, "number of diverse subnets")->check(CLI::PositiveNumber);
  cmd->add_option("--scheme", o.scheme, "pseudo-labelling scheme")->check(CLI::IsMember({"confidence", "energy"}));
  cmd->add_option("--out-dir", o.out_dir, "output directory");
}

LoadedConfig resolve(const Overrides& o) {
  auto lc = load_run_config(o.config);
  auto& c = lc.config;
  if (o.seed) c.set_seed(*o.seed);
  if (!o.budget.empty()) c.infer.budget_flops = parse_si(o.budget);
  if (o.m) c.infer.m = *o.m;
  if (!o.scheme.empty()) c.search.scheme = c.retrain.scheme = pseudo_scheme_from_string(o.scheme);
  c.validate();
  return lc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Domain-adaptive architecture search on pairwise MRFs"};
  app.require_subcommand(1);
  Overrides o;
  std::string mrf_path, subnets_path, checkpoint;
  bool svg = false;

  auto* search = app.add_subcommand("search", "train the supernet and learn the MRF factors");
  add_common(search, o, true);
  auto* infer = app.add_subcommand("infer", "diverse M-best subnets under the FLOP budget");
  add_common(infer, o, true);
  infer->add_option("--mrf", mrf_path, "learned MRF (default <out-dir>/search/mrf.json)");
  auto* retrain_cmd = app.add_subcommand("retrain", "retrain every inferred subnet and rank them");
  add_common(retrain_cmd, o, true);
  retrain_cmd->add_option("--subnets", subnets_path, "subnet list (default <out-dir>/infer/subnets.json)");
  auto* eval = app.add_subcommand("eval", "per-class IoU of a retrained checkpoint on target data");
  add_common(eval, o, true);
  eval->add_option("--checkpoint", checkpoint, "checkpoint stem (default: best subnet of report.json)");
  eval->add_flag("--svg", svg, "also write a bar chart");
  auto* report = app.add_subcommand("report", "print the ranked subnets of report.json");
  report->add_option("--out-dir", o.out_dir, "output directory");
  auto* run = app.add_subcommand("run", "search, infer, retrain and eval in one go");
  add_common(run, o, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const fs::path out = o.out_dir;
    if (report->parsed()) {
      std::cout << cmd_report(out);
      return 0;
    }
    const auto lc = resolve(o);
    if (search->parsed()) {
      const auto art = cmd_search(lc, out);
      std::cout << "mrf " << art.mrf_path.string() << "\nfactor digest " << art.factor_digest << "\n";
    } else if (infer->parsed()) {
      const auto res = cmd_infer(lc, mrf_path.empty() ? out / "search" / "mrf.json" : fs::path(mrf_path), out);
      if (res.subnets.empty()) {
        std::cerr << "warning: none of the " << res.candidates << " candidates fits the budget\n";
      }
      std::cout << res.subnets.size() << " subnets written to " << res.path.string() << "\n";
    } else if (retrain_cmd->parsed()) {
      cmd_retrain(lc, subnets_path.empty() ? out / "infer" / "subnets.json" : fs::path(subnets_path), out);
      std::cout << cmd_report(out);
    } else if (eval->parsed()) {
      fs::path stem = checkpoint;
      if (stem.empty()) {
        std::ifstream in(out / "report.json");
        if (!in) throw ConfigError("no --checkpoint given and no report.json in " + out.string());
        const auto doc = nlohmann::json::parse(in);
        if (doc.at("subnets").empty()) throw ConfigError("report.json lists no subnets");
        stem = out / doc.at("subnets").at(0).at("checkpoint").get<std::string>();
      }
      const auto res = cmd_eval(lc, stem, out, svg);
      std::cout << miou_csv(res.target) << "written to " << res.csv_path.string() << "\n";
    } else if (run->parsed()) {
      run_pipeline(lc, out);
      std::cout << cmd_report(out);
    }
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
