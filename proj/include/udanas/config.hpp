#pragma once

// Run configuration: search space, synthetic data, self-training settings for
// the search and retraining phases, and subnet inference. Read from TOML or
// JSON; unknown keys are rejected.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>

#include "udanas/arch_space.hpp"
#include "udanas/data_synth.hpp"
#include "udanas/map_inference.hpp"
#include "udanas/selftrain.hpp"

namespace udanas {

struct InferConfig {
  int m = 4;
  double diversity_weight = 1.0;
  bool exact = false;  // exhaustive rounds instead of loopy max-sum
  LoopyOptions loopy;
  double budget_flops = 2.5e9;  // <= 0 disables the filter
  ImageSize budget_hw{256, 256};
  int top_k = 2;  // subnets kept after retraining
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string profile = "full";
  UnetOptions space;
  SynthOptions data;
  SelfTrainConfig search;
  SelfTrainConfig retrain;
  InferConfig infer;

  /// Seeds of data, search and retraining all follow `seed`.
  void set_seed(std::uint64_t s);
  SupernetSpec spec() const { return SupernetSpec::unet(space); }
  /// Throws ConfigError on any out-of-range field.
  void validate() const;
};

/// Defaults of a named profile: "full" keeps the full-scale hyperparameters,
/// "toy" shrinks the space, images and schedules for single-core runs.
RunConfig default_config(const std::string& profile);

/// Applies a document over the defaults of its "profile" key (default "full").
RunConfig config_from_json(const nlohmann::json& doc);

/// Reads .toml or .json; ConfigError when missing or malformed.
RunConfig load_config(const std::filesystem::path& path);

nlohmann::json to_json(const RunConfig& c);

/// Parses TOML text into the equivalent JSON document.
nlohmann::json toml_to_json(const std::string& text, const std::string& source_name = "config");

}  // namespace udanas
