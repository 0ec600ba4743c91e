#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "udanas/config.hpp"

namespace udanas {
namespace {

std::filesystem::path write_temp(const std::string& name, const std::string& text) {
  const auto path = std::filesystem::temp_directory_path() / name;
  std::ofstream(path) << text;
  return path;
}

TEST(Config, FullScaleDefaults) {
  const auto c = default_config("full");
  for (const auto* s : {&c.search, &c.retrain}) {
    EXPECT_EQ(s->lr, 0.003);
    EXPECT_EQ(s->weight_decay, 0.05);
    EXPECT_EQ(s->tau, 0.968);
    EXPECT_EQ(s->tau_e, -8.0);
    EXPECT_EQ(s->temperature, 1.0);
    EXPECT_EQ(s->warmup_iterations, 1500);
    EXPECT_EQ(s->lambda_t, 1.0);
  }
  EXPECT_EQ(c.search.iterations, 40000);
  EXPECT_EQ(c.retrain.iterations, 140000);
  EXPECT_EQ(c.infer.m, 4);
  EXPECT_EQ(c.infer.budget_flops, 2.5e9);
  EXPECT_EQ(c.infer.budget_hw, (ImageSize{256, 256}));
  EXPECT_EQ(c.infer.top_k, 2);
}

TEST(Config, ToyProfileShrinksSchedules) {
  const auto c = default_config("toy");
  EXPECT_EQ(c.search.iterations, 2000);
  EXPECT_EQ(c.retrain.iterations, 2000);
  EXPECT_EQ(c.search.tau, 0.968);
  EXPECT_TRUE(c.infer.exact);
  EXPECT_FALSE(default_config("full").infer.exact);
  EXPECT_EQ(c.spec().num_nodes(), SupernetSpec::toy().num_nodes());
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, TomlOverridesAndSeedPropagation) {
  const auto path = write_temp("udanas_cfg.toml", R"(
profile = "toy"
seed = 11

[data]
height = 16
width = 16
[data.shift]
intensity = 0.3

[selftrain]
tau = 0.9
scheme = "energy"

[search]
iterations = 10
tau_e = -6.5

[infer]
m = 3
budget_flops = "800M"
)");
  const auto c = load_config(path);
  EXPECT_EQ(c.seed, 11u);
  EXPECT_EQ(c.data.seed, 11u);
  EXPECT_EQ(c.search.seed, 11u);
  EXPECT_EQ(c.retrain.seed, 11u);
  EXPECT_EQ(c.data.height, 16);
  EXPECT_EQ(c.data.shift.intensity, 0.3);
  EXPECT_EQ(c.data.shift.hue_degrees, 10.0);
  EXPECT_EQ(c.search.tau, 0.9);
  EXPECT_EQ(c.retrain.tau, 0.9);
  EXPECT_EQ(c.search.scheme, PseudoScheme::energy);
  EXPECT_EQ(c.search.tau_e, -6.5);
  EXPECT_EQ(c.retrain.tau_e, -8.0);
  EXPECT_EQ(c.search.iterations, 10);
  EXPECT_EQ(c.retrain.iterations, 2000);
  EXPECT_EQ(c.infer.m, 3);
  EXPECT_EQ(c.infer.budget_flops, 8e8);
}

TEST(Config, JsonIsAccepted) {
  const auto path = write_temp("udanas_cfg.json", R"({"profile": "toy", "search": {"tau": 0.95}})");
  EXPECT_EQ(load_config(path).search.tau, 0.95);
}

TEST(Config, RoundTripsThroughJson) {
  auto c = default_config("toy");
  c.set_seed(3);
  c.search.tau = 0.9;
  c.infer.m = 6;
  const auto j = to_json(c);
  const auto back = config_from_json(j);
  EXPECT_EQ(to_json(back), j);
}

TEST(Config, Errors) {
  EXPECT_THROW(load_config("/nonexistent/udanas.toml"), ConfigError);
  EXPECT_THROW(load_config(write_temp("bad1.toml", "profile = \"toy\"\n[search]\ntau = 1.5\n")), ConfigError);
  EXPECT_THROW(load_config(write_temp("bad2.toml", "[search]\ntemperature = 0.0\n")), ConfigError);
  EXPECT_THROW(load_config(write_temp("bad3.toml", "[search]\ntua = 0.9\n")), ConfigError);
  EXPECT_THROW(load_config(write_temp("bad4.toml", "profile = \"huge\"\n")), ConfigError);
  EXPECT_THROW(load_config(write_temp("bad5.toml", "[search\n")), ConfigError);
  EXPECT_THROW(load_config(write_temp("bad6.toml", "[search]\niterations = \"many\"\n")), ConfigError);
  EXPECT_THROW(load_config(write_temp("bad7.toml", "profile = \"toy\"\n[data]\nheight = 31\n")), ConfigError);
  EXPECT_THROW(load_config(write_temp("bad8.toml", "[search]\nscheme = \"entropy\"\n")), ConfigError);
  EXPECT_THROW(load_config(write_temp("bad9.toml", "[infer]\nbudget_flops = \"lots\"\n")), ConfigError);
  EXPECT_THROW(load_config(write_temp("bad10.json", "{not json")), ConfigError);
}

}  // namespace
}  // namespace udanas
