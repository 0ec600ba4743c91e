#pragma once

// End-to-end commands: search, infer, retrain, eval, report. Every command
// writes under an output directory and refreshes its manifest.json.

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

#include "udanas/config.hpp"

namespace udanas {

namespace fs = std::filesystem;

/// A configuration plus the digest of the document it came from.
struct LoadedConfig {
  RunConfig config;
  std::string source;         // path, or "<defaults:profile>"
  std::string source_digest;  // SHA-256 of the file bytes, or of the canonical JSON for defaults
};

LoadedConfig load_run_config(const fs::path& path);
LoadedConfig default_run_config(const std::string& profile);

/// SHA-256 of the canonical JSON dump of the effective configuration.
std::string config_digest(const RunConfig& c);

/// SHA-256 over the factor tables in variable / edge order.
std::string factor_digest(const PairwiseMrf& mrf);

struct SearchArtifacts {
  fs::path mrf_path;         // learned factors + spec
  fs::path log_path;         // one JSON object per iteration
  fs::path checkpoint_stem;  // supernet weights
  std::string factor_digest;
};

SearchArtifacts cmd_search(const LoadedConfig& lc, const fs::path& out_dir);

struct SubnetEntry {
  int rank = 0;  // order of discovery by diverse M-best
  Assignment labels;
  ArchAssignment arch;
  ResourceCost cost;
  double score = 0;
  int hamming_to_previous = 0;
};

struct InferOutput {
  fs::path path;
  std::vector<SubnetEntry> subnets;  // empty when the budget rejects every candidate
  int candidates = 0;
};

/// Diverse M-best over the learned factors, then the FLOP budget filter.
InferOutput cmd_infer(const LoadedConfig& lc, const fs::path& mrf_path, const fs::path& out_dir);

std::vector<SubnetEntry> read_subnets(const fs::path& path, const SupernetSpec& spec);

struct SubnetReport {
  SubnetEntry subnet;
  EvalMetrics metrics;
  std::string checkpoint;  // stem relative to the output directory
  bool selected = false;
};

struct RunReport {
  nlohmann::json config;
  std::string config_source;
  std::string config_digest;  // of the on-disk document
  std::string effective_config_digest;
  std::uint64_t seed = 0;
  double budget_flops = 0;
  ImageSize budget_hw{0, 0};
  std::vector<SubnetReport> subnets;  // descending target mIoU
  double wall_clock_seconds = 0;
  std::string created_at;
};

/// Everything except the "timing" block is deterministic for a fixed seed.
nlohmann::json to_json(const RunReport& r);
/// The report with its timing block removed.
nlohmann::json comparable_report(const nlohmann::json& report);

/// Retrains every listed subnet, ranks by target mIoU, marks the top_k.
RunReport cmd_retrain(const LoadedConfig& lc, const fs::path& subnets_path, const fs::path& out_dir);

struct EvalOutput {
  fs::path csv_path;
  fs::path svg_path;  // empty unless requested
  MiouResult target;
};

/// Loads a retrained checkpoint and scores it on target_eval. A checkpoint
/// built for another search space throws ConfigError.
EvalOutput cmd_eval(const LoadedConfig& lc, const fs::path& checkpoint_stem, const fs::path& out_dir, bool svg);

/// Human-readable table of report.json.
std::string cmd_report(const fs::path& out_dir);

/// search -> infer -> retrain -> eval of the best subnet; returns the report.
RunReport run_pipeline(const LoadedConfig& lc, const fs::path& out_dir);

std::string svg_bar_chart(const MiouResult& r);

/// Rewrites out_dir/manifest.json with the size and SHA-256 of every file.
void write_manifest(const fs::path& out_dir);

}  // namespace udanas
