#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bevfuse/corruption.hpp"
#include "bevfuse/detector.hpp"

namespace bevfuse {

enum class Regime { LC, L, C, AnchorLidar, AnchorCamera };

std::string_view regime_name(Regime r);  // "lc", "l", "c", "anchor_lidar", "anchor_camera"
Regime parse_regime(std::string_view name);
// Anchored passes see both grids.
Availability availability_of(Regime r);

// Baseline: the concat comparison model trained on LC only.
enum class TrainMode { ThreeRegime, Pmd, Baseline };

std::string_view train_mode_name(TrainMode m);  // "three_regime", "pmd", "baseline"
TrainMode parse_train_mode(std::string_view name);

struct ScheduleEntry {
  std::size_t sample_index = 0;
  Regime regime = Regime::LC;

  bool operator==(const ScheduleEntry&) const = default;
};

// Every sample once per regime of `mode` (LC, L, C / both anchors / LC),
// then a seeded uniform shuffle of the whole list.
std::vector<ScheduleEntry> expand_epoch(std::size_t dataset_size, TrainMode mode, std::uint64_t shuffle_seed);

enum class OptimizerKind { Sgd, Adam };

struct TrainConfig {
  TrainMode mode = TrainMode::ThreeRegime;
  FusionConfig fusion;
  GridConfig grid;
  DetectorConfig detector;
  std::optional<int> epochs;  // unset: 3, 4 for PMD, 9 for the baseline
  int batch_size = 8;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  std::uint64_t shuffle_seed = 1;
  std::uint64_t init_seed = 7;
  // Each item is, with probability 1/2, replaced by a random corrupted copy.
  bool corruption_augment = false;
  LidarConfig lidar;  // needed to re-render temporal corruptions
  float camera_foreground_threshold = CameraConfig{}.foreground_threshold;

  int resolved_epochs() const;
  ModelSpec model_spec() const;
  void validate() const;
};

// Content hash of everything that fixes parameter names and shapes.
std::uint64_t model_config_hash(const ModelSpec& spec, const GridConfig& grid, const DetectorConfig& detector);

struct OptimizerState {
  std::int64_t t = 0;
  std::map<std::string, std::vector<float>, std::less<>> m;
  std::map<std::string, std::vector<float>, std::less<>> v;
};

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// One update from the gradients stored on the parameters.
void optimizer_update(ParamStore& params, OptimizerState& state, const OptimizerConfig& config);

struct BatchItem {
  const Sample* sample = nullptr;
  Regime regime = Regime::LC;
};

struct StepResult {
  double loss = 0.0;  // batch mean
  std::map<Regime, std::pair<double, int>> per_regime;  // loss sum, items
};

// Batch-mean loss, backward, one optimizer update. `total_steps` is the PMD
// decay horizon. Only the sensor grids the
// regime makes available are projected. Throws DivergenceError on a
// non-finite loss or gradient.
StepResult train_step(std::span<const BatchItem> batch, ParamStore& params, OptimizerState& opt_state,
                      std::int64_t step, std::int64_t total_steps, const TrainConfig& config);

struct TrainingReport {
  TrainMode mode = TrainMode::ThreeRegime;
  int epochs = 0;
  std::int64_t total_steps = 0;
  std::vector<double> step_losses;
  std::vector<double> step_alphas;  // PMD only
  std::map<Regime, double> regime_mean_loss;
  double wall_seconds = 0.0;
};

std::string format_training_report(const TrainingReport& report, const TrainConfig& config);

// Trains from scratch on an in-memory dataset; deterministic given inputs.
TrainingReport train_model(const Dataset& data, const TrainConfig& config, ParamStore& params);

std::filesystem::path training_report_path(const std::filesystem::path& checkpoint);

// Reads the dataset, trains, and writes the checkpoint, its manifest and
// "<checkpoint>.train_report.txt". The report file omits wall time so that
// identical runs produce identical files.
TrainingReport run_training(const std::filesystem::path& dataset_path, const TrainConfig& config,
                            const std::filesystem::path& out_checkpoint);

}  // namespace bevfuse
