#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nif/training.hpp"

namespace nif::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

// Environment variable naming the default output directory.
inline constexpr const char* kOutDirEnv = "NIFDIFF_OUT_DIR";

struct GenerateConfig {
  std::string prompt;
  int64_t height = 64;
  int64_t width = 64;
  uint64_t seed = 0;
  int steps = 25;
  double cfg_scale = 4.0;
  bool use_ema = false;
};

struct BenchConfig {
  std::vector<double> scales{1.0, 2.0, 4.0};  // multiples of the latent size
  std::vector<std::pair<int64_t, int64_t>> sizes;  // explicit sizes win
  int repeats = 5;
  int warmup = 1;
};

struct PathsConfig {
  std::string stage1_checkpoint;  // empty: <out>/stage1/stage1.ckpt
  std::string stats;              // empty: <out>/stage1/stats.json
  std::string stage2_checkpoint;  // empty: <out>/stage2/stage2.ckpt
};

struct RunConfig {
  DatasetConfig data;
  Stage1Config stage1;
  TrainConfig stage1_train;
  Stage2Config stage2;
  TrainConfig stage2_train;
  GenerateConfig generate;
  BenchConfig bench;
  PathsConfig paths;
};

nlohmann::json to_json(const RunConfig& c);
RunConfig from_json(const nlohmann::json& j);

// Every field with its default value.
nlohmann::json default_config();

// Overlays `overlay` onto `base`; keys absent from `base` are rejected.
nlohmann::json merge_config(const nlohmann::json& base, const nlohmann::json& overlay);

// Applies "a.b.c=value"; the value is parsed as JSON, falling back to a
// plain string. The key must already exist.
void apply_override(nlohmann::json& cfg, const std::string& assignment);

// Parses "HxW".
std::pair<int64_t, int64_t> parse_size(const std::string& text);

// Entry point shared by the executable and tests. Returns an exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace nif::cli
