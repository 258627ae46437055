#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "bevfuse/eval.hpp"

namespace bevfuse {

struct DataConfig {
  std::uint64_t seed = 2024;  // sample i uses derive_seed(seed, i)
  int train_samples = 256;
  int eval_samples = 64;
  std::uint64_t eval_seed = 9001;
};

// Everything one experiment run depends on. Stored as JSON; keys left out
// keep their defaults and unknown keys are rejected.
struct ExperimentConfig {
  WorldConfig world;
  SensorConfig sensors;
  DataConfig data;
  TrainConfig train;  // owns grid, fusion and detector settings
  EvalConfig eval;

  void validate() const;
};

ExperimentConfig parse_experiment_config(std::string_view json_text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
// Canonical JSON with every field spelled out.
std::string experiment_config_to_json(const ExperimentConfig& config);

// Hash of the generator settings (world and sensors) stamped into datasets.
std::uint64_t data_hash(const ExperimentConfig& config);
// Hash of the settings that fix a checkpoint's parameter layout.
std::uint64_t model_hash(const ExperimentConfig& config);

Dataset generate_dataset(const ExperimentConfig& config, std::size_t num_samples, std::uint64_t seed);

}  // namespace bevfuse
