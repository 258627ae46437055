#include "bevfuse/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "bevfuse/hash.hpp"
#include "bevfuse/ops.hpp"
#include "bevfuse/rng.hpp"

namespace bevfuse {

namespace {

constexpr std::uint64_t kAugmentStream = 0xA06;
constexpr std::uint64_t kEpochStream = 0xE90C;

std::string fmt_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::vector<Regime> regimes_of(TrainMode mode) {
  switch (mode) {
    case TrainMode::ThreeRegime: return {Regime::LC, Regime::L, Regime::C};
    case TrainMode::Pmd: return {Regime::AnchorLidar, Regime::AnchorCamera};
    case TrainMode::Baseline: return {Regime::LC};
  }
  return {};
}

Sample augment(const Sample& s, Rng& rng, const TrainConfig& config) {
  if (uniform01(rng) >= 0.5) return s;
  static constexpr CorruptionFamily families[] = {CorruptionFamily::BeamReduce, CorruptionFamily::Fog,
                                                  CorruptionFamily::MotionBlur, CorruptionFamily::SpatialMisalign,
                                                  CorruptionFamily::TemporalMisalign};
  CorruptionSpec spec;
  spec.family = families[uniform_index(rng, 5)];
  spec.severity = 1 + static_cast<int>(uniform_index(rng, 3));
  spec.rng_seed = rng();
  return corrupt_sample(s, spec, config.lidar);
}

}  // namespace

std::string_view regime_name(Regime r) {
  switch (r) {
    case Regime::LC: return "lc";
    case Regime::L: return "l";
    case Regime::C: return "c";
    case Regime::AnchorLidar: return "anchor_lidar";
    case Regime::AnchorCamera: return "anchor_camera";
  }
  return "?";
}

Regime parse_regime(std::string_view name) {
  for (auto r : {Regime::LC, Regime::L, Regime::C, Regime::AnchorLidar, Regime::AnchorCamera}) {
    if (regime_name(r) == name) return r;
  }
  throw ConfigError("unknown regime '" + std::string(name) + "' (expected lc, l, c, anchor_lidar, anchor_camera)");
}

Availability availability_of(Regime r) {
  switch (r) {
    case Regime::L: return {true, false};
    case Regime::C: return {false, true};
    default: return {true, true};
  }
}

std::string_view train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::ThreeRegime: return "three_regime";
    case TrainMode::Pmd: return "pmd";
    case TrainMode::Baseline: return "baseline";
  }
  return "?";
}

TrainMode parse_train_mode(std::string_view name) {
  for (auto m : {TrainMode::ThreeRegime, TrainMode::Pmd, TrainMode::Baseline}) {
    if (train_mode_name(m) == name) return m;
  }
  throw ConfigError("unknown training mode '" + std::string(name) + "' (expected three_regime, pmd, baseline)");
}

std::vector<ScheduleEntry> expand_epoch(std::size_t dataset_size, TrainMode mode, std::uint64_t shuffle_seed) {
  if (dataset_size == 0) throw ConfigError("cannot expand an epoch over an empty dataset");
  const auto regimes = regimes_of(mode);
  std::vector<ScheduleEntry> out;
  out.reserve(dataset_size * regimes.size());
  for (std::size_t i = 0; i < dataset_size; ++i) {
    for (auto r : regimes) out.push_back({i, r});
  }
  Rng rng(shuffle_seed);
  shuffle(out.begin(), out.end(), rng);
  return out;
}

int TrainConfig::resolved_epochs() const {
  if (epochs) return *epochs;
  switch (mode) {
    case TrainMode::Pmd: return 4;
    case TrainMode::Baseline: return 9;
    default: return 3;
  }
}

ModelSpec TrainConfig::model_spec() const {
  ModelSpec spec;
  spec.fusion = fusion;
  spec.concat_baseline = mode == TrainMode::Baseline;
  return spec;
}

void TrainConfig::validate() const {
  if (epochs && *epochs < 1) throw ConfigError("epochs must be >= 1, got " + std::to_string(*epochs));
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be finite and >= 0");
  if ((mode == TrainMode::Pmd) != (fusion.kind == FusionKind::Pmd) && mode != TrainMode::Baseline) {
    throw ConfigError("pmd training mode requires the pmd fusion kind and vice versa");
  }
  grid.validate();
  fusion.validate(static_cast<std::size_t>(grid.channels));
  detector.validate();
}

std::uint64_t model_config_hash(const ModelSpec& spec, const GridConfig& grid, const DetectorConfig& detector) {
  std::ostringstream os;
  os << "model;concat=" << spec.concat_baseline;
  if (!spec.concat_baseline) {
    os << ";fusion=" << fusion_kind_name(spec.fusion.kind) << ";w=" << fmt_double(spec.fusion.w)
       << ";heads=" << spec.fusion.heads << ";anchor=" << modality_name(spec.fusion.pmd_anchor);
  }
  os << ";grid=" << grid.height << "x" << grid.width << "x" << grid.channels << "@" << fmt_double(grid.cell_size_m)
     << ";encoder=" << detector.encoder_width << ";classes=" << detector.num_classes;
  return fnv1a64(os.str());
}

void optimizer_update(ParamStore& params, OptimizerState& state, const OptimizerConfig& config) {
  ++state.t;
  const double lr = config.learning_rate;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.t));
  for (auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    auto value = p.mutable_data();
    const auto grad = p.grad();
    if (config.kind == OptimizerKind::Sgd) {
      for (std::size_t i = 0; i < value.size(); ++i) value[i] = static_cast<float>(value[i] - lr * grad[i]);
      continue;
    }
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.size() != value.size()) m.assign(value.size(), 0.0f);
    if (v.size() != value.size()) v.assign(value.size(), 0.0f);
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      m[i] = static_cast<float>(config.beta1 * m[i] + (1.0 - config.beta1) * g);
      v[i] = static_cast<float>(config.beta2 * v[i] + (1.0 - config.beta2) * g * g);
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      value[i] = static_cast<float>(value[i] - lr * mhat / (std::sqrt(vhat) + config.epsilon));
    }
  }
  ++params.step_count;
}

StepResult train_step(std::span<const BatchItem> batch, ParamStore& params, OptimizerState& opt_state,
                      std::int64_t step, std::int64_t total_steps, const TrainConfig& config) {
  if (batch.empty()) throw ConfigError("train_step needs a nonempty batch");
  const ModelSpec spec = config.model_spec();
  params.zero_grad();
  StepResult result;
  const float inv_batch = 1.0f / static_cast<float>(batch.size());

  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& item = batch[i];
    const Sample* sample = item.sample;
    Sample augmented;
    if (config.corruption_augment) {
      Rng rng(derive_seed(derive_seed(config.shuffle_seed ^ kAugmentStream, static_cast<std::uint64_t>(step)), i));
      augmented = augment(*sample, rng, config);
      sample = &augmented;
    }
    const Availability avail = availability_of(item.regime);
    std::optional<BevGrid> f_lid, f_cam;
    if (avail.lidar) f_lid = lidar_to_bev(sample->lidar, config.grid);
    if (avail.camera) f_cam = camera_to_bev(sample->camera, config.grid, config.camera_foreground_threshold);

    FusionStep fstep{step, total_steps, true,
                     item.regime == Regime::AnchorCamera ? Modality::Camera : Modality::Lidar};
    Tape<float> tape;
    const auto pred = forward_model(spec, avail, f_lid ? &*f_lid : nullptr, f_cam ? &*f_cam : nullptr, fstep, params);
    double item_loss = 0.0;
    BasicDetectionLoss<float> loss;
    try {
      loss = detection_loss(pred, build_targets(sample->scene, config.grid), config.detector);
      item_loss = loss.total.item();
    } catch (const NumericError& e) {
      throw DivergenceError("step " + std::to_string(step) + ": non-finite loss for sample seed " +
                            std::to_string(sample->scene.seed) + " in regime " + std::string(regime_name(item.regime)) +
                            " (" + e.what() + ")");
    }
    tape.backward(scale(loss.total, inv_batch));
    result.loss += item_loss / static_cast<double>(batch.size());
    auto& acc = result.per_regime[item.regime];
    acc.first += item_loss;
    acc.second += 1;
  }

  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (float g : p.grad()) {
      if (!std::isfinite(g)) {
        throw DivergenceError("step " + std::to_string(step) + ": non-finite gradient in " + name);
      }
    }
  }
  optimizer_update(params, opt_state, {config.optimizer, config.learning_rate});
  return result;
}

TrainingReport train_model(const Dataset& data, const TrainConfig& config, ParamStore& params) {
  config.validate();
  if (data.samples.empty()) throw ConfigError("training dataset is empty");
  const auto start = std::chrono::steady_clock::now();
  const ModelSpec spec = config.model_spec();
  params = ParamStore{};
  init_model_params(params, spec, config.grid, config.detector, config.init_seed);

  TrainingReport report;
  report.mode = config.mode;
  report.epochs = config.resolved_epochs();
  const std::size_t per_epoch = data.samples.size() * regimes_of(config.mode).size();
  const auto batch = static_cast<std::size_t>(config.batch_size);
  const std::size_t steps_per_epoch = (per_epoch + batch - 1) / batch;
  report.total_steps = static_cast<std::int64_t>(steps_per_epoch) * report.epochs;
  // The decay horizon is the last step index, so the final update runs at alpha = 0.
  const std::int64_t horizon = std::max<std::int64_t>(1, report.total_steps - 1);

  OptimizerState opt;
  std::map<Regime, std::pair<double, int>> totals;
  std::int64_t step = 0;
  std::vector<BatchItem> items;
  for (int epoch = 0; epoch < report.epochs; ++epoch) {
    const auto schedule = expand_epoch(data.samples.size(), config.mode,
                                       derive_seed(config.shuffle_seed ^ kEpochStream, static_cast<std::uint64_t>(epoch)));
    for (std::size_t b = 0; b < schedule.size(); b += batch) {
      items.clear();
      for (std::size_t k = b; k < std::min(schedule.size(), b + batch); ++k) {
        items.push_back({&data.samples[schedule[k].sample_index], schedule[k].regime});
      }
      const auto r = train_step(items, params, opt, step, horizon, config);
      report.step_losses.push_back(r.loss);
      if (config.mode == TrainMode::Pmd) report.step_alphas.push_back(alpha_schedule(std::min(step, horizon), horizon));
      for (const auto& [regime, acc] : r.per_regime) {
        totals[regime].first += acc.first;
        totals[regime].second += acc.second;
      }
      ++step;
    }
  }
  for (const auto& [regime, acc] : totals) report.regime_mean_loss[regime] = acc.first / acc.second;
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

std::string format_training_report(const TrainingReport& report, const TrainConfig& config) {
  std::ostringstream os;
  os << "mode " << train_mode_name(report.mode) << "\n";
  if (report.mode == TrainMode::Baseline) {
    os << "fusion concat\n";
  } else {
    os << "fusion " << fusion_kind_name(config.fusion.kind) << "\n";
    if (config.fusion.kind == FusionKind::Average) os << "w " << config.fusion.w << "\n";
  }
  os << "epochs " << report.epochs << "\n"
     << "batch_size " << config.batch_size << "\n"
     << "learning_rate " << config.learning_rate << "\n"
     << "optimizer " << (config.optimizer == OptimizerKind::Adam ? "adam" : "sgd") << "\n"
     << "corruption_augment " << (config.corruption_augment ? "true" : "false") << "\n"
     << "total_steps " << report.total_steps << "\n";
  for (const auto& [regime, loss] : report.regime_mean_loss) {
    os << "regime_loss " << regime_name(regime) << " " << fmt_double(loss) << "\n";
  }
  for (std::size_t i = 0; i < report.step_losses.size(); ++i) {
    os << "step " << i << " loss " << fmt_double(report.step_losses[i]);
    if (i < report.step_alphas.size()) os << " alpha " << fmt_double(report.step_alphas[i]);
    os << "\n";
  }
  return os.str();
}

std::filesystem::path training_report_path(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  p += ".train_report.txt";
  return p;
}

TrainingReport run_training(const std::filesystem::path& dataset_path, const TrainConfig& config,
                            const std::filesystem::path& out_checkpoint) {
  const Dataset data = dataset_read(dataset_path);
  ParamStore params;
  auto report = train_model(data, config, params);
  CheckpointManifest m;
  m.data_hash = data.config_hash;
  m.model_hash = model_config_hash(config.model_spec(), config.grid, config.detector);
  m.step_count = params.step_count;
  m.fusion = config.mode == TrainMode::Baseline ? "concat" : std::string(fusion_kind_name(config.fusion.kind));
  m.mode = train_mode_name(config.mode);
  m.epochs = report.epochs;
  save_checkpoint(out_checkpoint, params, m);
  write_file_atomic(training_report_path(out_checkpoint), format_training_report(report, config));
  return report;
}

}  // namespace bevfuse
