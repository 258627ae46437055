#include "bevfuse/config.hpp"

#include <charconv>
#include <cstdlib>
#include <set>

#include "bevfuse/hash.hpp"
#include "bevfuse/rng.hpp"
#include "json.hpp"

namespace bevfuse {

namespace {

using Json = nlohmann::ordered_json;

void expect_keys(const Json& j, std::string_view section, std::initializer_list<std::string_view> allowed) {
  if (!j.is_object()) throw ConfigError("config section '" + std::string(section) + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown config key '" + std::string(section) + "." + key + "'");
  }
}

template <typename T>
void read(const Json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

// Shortest decimal that reads back as the same float.
double fl(float f) {
  char buf[32];
  const auto end = std::to_chars(buf, buf + sizeof buf - 1, f).ptr;
  *end = '\0';
  return std::strtod(buf, nullptr);
}

std::string families_str(CorruptionFamily f) { return std::string(corruption_family_name(f)); }

Modality parse_anchor(const std::string& s) {
  if (s == "lidar") return Modality::Lidar;
  if (s == "camera") return Modality::Camera;
  throw ConfigError("fusion.pmd_anchor must be 'lidar' or 'camera', got '" + s + "'");
}

Json world_json(const WorldConfig& w) {
  return {{"extent_m", fl(w.extent_m)},
          {"min_boxes", w.min_boxes},
          {"max_boxes", w.max_boxes},
          {"max_iou", fl(w.max_iou)},
          {"ego_clearance_m", fl(w.ego_clearance_m)},
          {"min_center_distance_m", fl(w.min_center_distance_m)},
          {"retry_budget", w.retry_budget}};
}

Json sensors_json(const SensorConfig& s) {
  return {{"lidar",
           {{"num_beams", s.lidar.num_beams},
            {"rays_per_beam", s.lidar.rays_per_beam},
            {"clutter_probability", fl(s.lidar.clutter_probability)},
            {"roof_spacing_m", fl(s.lidar.roof_spacing_m)}}},
          {"camera",
           {{"num_views", s.camera.num_views},
            {"rows", s.camera.rows},
            {"cols", s.camera.cols},
            {"depth_jitter_m", fl(s.camera.depth_jitter_m)},
            {"background", fl(s.camera.background)},
            {"noise_sigma", fl(s.camera.noise_sigma)},
            {"foreground_threshold", fl(s.camera.foreground_threshold)}}}};
}

}  // namespace

void ExperimentConfig::validate() const {
  world.validate();
  sensors.lidar.validate();
  sensors.camera.validate();
  train.validate();
  eval.validate();
  if (data.train_samples < 1 || data.eval_samples < 1) throw ConfigError("data sample counts must be >= 1");
}

ExperimentConfig parse_experiment_config(std::string_view json_text) {
  ExperimentConfig c;
  try {
    const Json root = Json::parse(json_text);
    expect_keys(root, "", {"world", "sensors", "data", "grid", "fusion", "detector", "train", "eval"});
    if (root.contains("world")) {
      const auto& j = root["world"];
      expect_keys(j, "world", {"extent_m", "min_boxes", "max_boxes", "max_iou", "ego_clearance_m",
                               "min_center_distance_m", "retry_budget"});
      read(j, "extent_m", c.world.extent_m);
      read(j, "min_boxes", c.world.min_boxes);
      read(j, "max_boxes", c.world.max_boxes);
      read(j, "max_iou", c.world.max_iou);
      read(j, "ego_clearance_m", c.world.ego_clearance_m);
      read(j, "min_center_distance_m", c.world.min_center_distance_m);
      read(j, "retry_budget", c.world.retry_budget);
    }
    if (root.contains("sensors")) {
      const auto& j = root["sensors"];
      expect_keys(j, "sensors", {"lidar", "camera"});
      if (j.contains("lidar")) {
        const auto& l = j["lidar"];
        expect_keys(l, "sensors.lidar", {"num_beams", "rays_per_beam", "clutter_probability", "roof_spacing_m"});
        read(l, "num_beams", c.sensors.lidar.num_beams);
        read(l, "rays_per_beam", c.sensors.lidar.rays_per_beam);
        read(l, "clutter_probability", c.sensors.lidar.clutter_probability);
        read(l, "roof_spacing_m", c.sensors.lidar.roof_spacing_m);
      }
      if (j.contains("camera")) {
        const auto& k = j["camera"];
        expect_keys(k, "sensors.camera", {"num_views", "rows", "cols", "depth_jitter_m", "background",
                                          "noise_sigma", "foreground_threshold"});
        read(k, "num_views", c.sensors.camera.num_views);
        read(k, "rows", c.sensors.camera.rows);
        read(k, "cols", c.sensors.camera.cols);
        read(k, "depth_jitter_m", c.sensors.camera.depth_jitter_m);
        read(k, "background", c.sensors.camera.background);
        read(k, "noise_sigma", c.sensors.camera.noise_sigma);
        read(k, "foreground_threshold", c.sensors.camera.foreground_threshold);
      }
    }
    if (root.contains("data")) {
      const auto& j = root["data"];
      expect_keys(j, "data", {"seed", "train_samples", "eval_samples", "eval_seed"});
      read(j, "seed", c.data.seed);
      read(j, "train_samples", c.data.train_samples);
      read(j, "eval_samples", c.data.eval_samples);
      read(j, "eval_seed", c.data.eval_seed);
    }
    if (root.contains("grid")) {
      const auto& j = root["grid"];
      expect_keys(j, "grid", {"height", "width", "cell_size_m", "channels"});
      read(j, "height", c.train.grid.height);
      read(j, "width", c.train.grid.width);
      read(j, "cell_size_m", c.train.grid.cell_size_m);
      read(j, "channels", c.train.grid.channels);
    }
    if (root.contains("fusion")) {
      const auto& j = root["fusion"];
      expect_keys(j, "fusion", {"kind", "w", "heads", "theta_init", "pmd_anchor"});
      if (j.contains("kind")) c.train.fusion.kind = parse_fusion_kind(j["kind"].get<std::string>());
      read(j, "w", c.train.fusion.w);
      read(j, "heads", c.train.fusion.heads);
      read(j, "theta_init", c.train.fusion.theta_init);
      if (j.contains("pmd_anchor")) c.train.fusion.pmd_anchor = parse_anchor(j["pmd_anchor"].get<std::string>());
    }
    if (root.contains("detector")) {
      const auto& j = root["detector"];
      expect_keys(j, "detector", {"encoder_width", "objectness_prior", "objectness_weight", "regression_weight",
                                  "class_weight", "score_threshold", "nms_radius_m"});
      read(j, "encoder_width", c.train.detector.encoder_width);
      read(j, "objectness_prior", c.train.detector.objectness_prior);
      read(j, "objectness_weight", c.train.detector.objectness_weight);
      read(j, "regression_weight", c.train.detector.regression_weight);
      read(j, "class_weight", c.train.detector.class_weight);
      read(j, "score_threshold", c.train.detector.score_threshold);
      read(j, "nms_radius_m", c.train.detector.nms_radius_m);
    }
    // PMD fusion implies PMD training unless the mode is given.
    if (c.train.fusion.kind == FusionKind::Pmd) c.train.mode = TrainMode::Pmd;
    if (root.contains("train")) {
      const auto& j = root["train"];
      expect_keys(j, "train", {"mode", "epochs", "batch_size", "learning_rate", "optimizer", "shuffle_seed",
                               "init_seed", "corruption_augment"});
      if (j.contains("mode")) c.train.mode = parse_train_mode(j["mode"].get<std::string>());
      if (j.contains("epochs") && !j["epochs"].is_null()) c.train.epochs = j["epochs"].get<int>();
      read(j, "batch_size", c.train.batch_size);
      read(j, "learning_rate", c.train.learning_rate);
      if (j.contains("optimizer")) {
        const auto o = j["optimizer"].get<std::string>();
        if (o == "adam") {
          c.train.optimizer = OptimizerKind::Adam;
        } else if (o == "sgd") {
          c.train.optimizer = OptimizerKind::Sgd;
        } else {
          throw ConfigError("train.optimizer must be 'adam' or 'sgd', got '" + o + "'");
        }
      }
      read(j, "shuffle_seed", c.train.shuffle_seed);
      read(j, "init_seed", c.train.init_seed);
      read(j, "corruption_augment", c.train.corruption_augment);
    }
    if (root.contains("eval")) {
      const auto& j = root["eval"];
      expect_keys(j, "eval", {"distance_thresholds_m", "score_threshold", "families", "severities", "regimes",
                              "corruption_seed"});
      read(j, "distance_thresholds_m", c.eval.distance_thresholds_m);
      read(j, "score_threshold", c.eval.score_threshold);
      if (j.contains("families")) {
        c.eval.families.clear();
        for (const auto& f : j["families"]) c.eval.families.push_back(parse_corruption_family(f.get<std::string>()));
      }
      read(j, "severities", c.eval.severities);
      if (j.contains("regimes")) {
        c.eval.regimes.clear();
        for (const auto& r : j["regimes"]) c.eval.regimes.push_back(parse_regime(r.get<std::string>()));
      }
      read(j, "corruption_seed", c.eval.corruption_seed);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed experiment config: ") + e.what());
  }
  c.train.lidar = c.sensors.lidar;
  c.train.camera_foreground_threshold = c.sensors.camera.foreground_threshold;
  c.eval.lidar = c.sensors.lidar;
  c.eval.camera_foreground_threshold = c.sensors.camera.foreground_threshold;
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  return parse_experiment_config(read_file(path));
}

std::string experiment_config_to_json(const ExperimentConfig& c) {
  Json root;
  root["world"] = world_json(c.world);
  root["sensors"] = sensors_json(c.sensors);
  root["data"] = {{"seed", c.data.seed},
                  {"train_samples", c.data.train_samples},
                  {"eval_samples", c.data.eval_samples},
                  {"eval_seed", c.data.eval_seed}};
  const auto& g = c.train.grid;
  root["grid"] = {{"height", g.height}, {"width", g.width}, {"cell_size_m", fl(g.cell_size_m)}, {"channels", g.channels}};
  const auto& f = c.train.fusion;
  root["fusion"] = {{"kind", fusion_kind_name(f.kind)},
                    {"w", f.w},
                    {"heads", f.heads},
                    {"theta_init", f.theta_init},
                    {"pmd_anchor", f.pmd_anchor == Modality::Camera ? "camera" : "lidar"}};
  const auto& d = c.train.detector;
  root["detector"] = {{"encoder_width", d.encoder_width},
                      {"objectness_prior", fl(d.objectness_prior)},
                      {"objectness_weight", d.objectness_weight},
                      {"regression_weight", d.regression_weight},
                      {"class_weight", d.class_weight},
                      {"score_threshold", fl(d.score_threshold)},
                      {"nms_radius_m", fl(d.nms_radius_m)}};
  const auto& t = c.train;
  root["train"] = {{"mode", train_mode_name(t.mode)},
                   {"epochs", t.epochs ? Json(*t.epochs) : Json(nullptr)},
                   {"batch_size", t.batch_size},
                   {"learning_rate", t.learning_rate},
                   {"optimizer", t.optimizer == OptimizerKind::Adam ? "adam" : "sgd"},
                   {"shuffle_seed", t.shuffle_seed},
                   {"init_seed", t.init_seed},
                   {"corruption_augment", t.corruption_augment}};
  Json families = Json::array(), regimes = Json::array();
  for (auto fam : c.eval.families) families.push_back(families_str(fam));
  for (auto r : c.eval.regimes) regimes.push_back(regime_name(r));
  root["eval"] = {{"distance_thresholds_m", c.eval.distance_thresholds_m},
                  {"score_threshold", fl(c.eval.score_threshold)},
                  {"families", families},
                  {"severities", c.eval.severities},
                  {"regimes", regimes},
                  {"corruption_seed", c.eval.corruption_seed}};
  return root.dump(2) + "\n";
}

std::uint64_t data_hash(const ExperimentConfig& c) {
  Json j{{"world", world_json(c.world)}, {"sensors", sensors_json(c.sensors)}};
  return fnv1a64("data;" + j.dump());
}

std::uint64_t model_hash(const ExperimentConfig& c) {
  return model_config_hash(c.train.model_spec(), c.train.grid, c.train.detector);
}

Dataset generate_dataset(const ExperimentConfig& config, std::size_t num_samples, std::uint64_t seed) {
  if (num_samples == 0) throw ConfigError("num_samples must be >= 1");
  Dataset d;
  d.config_hash = data_hash(config);
  d.samples.reserve(num_samples);
  for (std::size_t i = 0; i < num_samples; ++i) {
    d.samples.push_back(generate_sample(derive_seed(seed, i), config.world, config.sensors));
  }
  return d;
}

}  // namespace bevfuse
