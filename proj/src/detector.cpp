#include "bevfuse/detector.hpp"

#include <algorithm>
#include <cmath>

#include "bevfuse/init.hpp"
#include "bevfuse/ops.hpp"
#include "json.hpp"

namespace bevfuse {

namespace {

constexpr const char* kHeads[] = {"objectness", "offsets", "sizes", "yaw", "class"};

template <typename T>
BasicTensor<T> as_tensor(const std::vector<float>& v, Shape shape) {
  return BasicTensor<T>(std::move(shape), std::vector<T>(v.begin(), v.end()));
}

template <typename T>
BasicTensor<T> conv_block(const BasicTensor<T>& x, const BasicParamStore<T>& params, const std::string& name,
                          std::size_t padding) {
  return conv2d(x, params.get(name + ".weight"), params.get(name + ".bias"), padding);
}

}  // namespace

void DetectorConfig::validate() const {
  if (encoder_width < 1) throw ConfigError("detector.encoder_width must be positive");
  if (num_classes < 1 || num_classes > kNumClasses) throw ConfigError("detector.num_classes must be in [1, 3]");
  if (objectness_weight < 0 || regression_weight < 0 || class_weight < 0) {
    throw ConfigError("detector loss weights must be non-negative");
  }
  if (!(score_threshold > 0 && score_threshold < 1)) throw RangeError("score threshold must be in (0, 1)");
  if (nms_radius_m < 0) throw RangeError("NMS radius must be non-negative");
}

std::size_t TargetMap::num_positive() const {
  return static_cast<std::size_t>(std::count(positive.begin(), positive.end(), std::uint8_t{1}));
}

void init_detector_params(ParamStore& params, std::size_t in_channels, const DetectorConfig& config, Rng& rng) {
  config.validate();
  const auto width = static_cast<std::size_t>(config.encoder_width);
  std::size_t in = in_channels;
  for (int layer = 1; layer <= 3; ++layer) {
    const std::string name = "encoder.conv" + std::to_string(layer);
    params.add(name + ".weight", Shape{width, in, 3, 3}, he_normal(width * in * 9, in * 9, rng));
    params.add(name + ".bias", Shape{width}, std::vector<float>(width, 0.0f));
    in = width;
  }
  const std::size_t outs[] = {1, 2, 2, 2, static_cast<std::size_t>(config.num_classes)};
  for (std::size_t h = 0; h < 5; ++h) {
    const std::string name = std::string("head.") + kHeads[h];
    params.add(name + ".weight", Shape{outs[h], width, 1, 1}, xavier_uniform(outs[h] * width, width, outs[h], rng));
    params.add(name + ".bias", Shape{outs[h]},
               std::vector<float>(outs[h], h == 0 ? config.objectness_prior : 0.0f));
  }
}

template <typename T>
BasicTensor<T> encode(const BasicBevGrid<T>& f_in, const BasicParamStore<T>& params) {
  const auto& w1 = params.get("encoder.conv1.weight");
  if (f_in.tensor.rank() != 3 || f_in.channels() != w1.dim(1)) {
    throw DimensionError("encoder expects " + std::to_string(w1.dim(1)) + " input channels, got grid " +
                         shape_str(f_in.tensor.shape()));
  }
  auto x = relu(conv_block(f_in.tensor, params, "encoder.conv1", 1));
  x = relu(conv_block(x, params, "encoder.conv2", 1));
  return relu(conv_block(x, params, "encoder.conv3", 1));
}

template <typename T>
BasicPredictionMap<T> head(const BasicTensor<T>& features, const BasicParamStore<T>& params) {
  BasicPredictionMap<T> out;
  out.objectness = conv_block(features, params, "head.objectness", 0);
  out.offsets = conv_block(features, params, "head.offsets", 0);
  out.sizes = conv_block(features, params, "head.sizes", 0);
  out.yaw = conv_block(features, params, "head.yaw", 0);
  out.class_logits = conv_block(features, params, "head.class", 0);
  return out;
}

TargetMap build_targets(const Scene& scene, const GridConfig& grid) {
  grid.validate();
  TargetMap t;
  t.height = static_cast<std::size_t>(grid.height);
  t.width = static_cast<std::size_t>(grid.width);
  const std::size_t plane = t.height * t.width;
  t.positive.assign(plane, 0);
  t.objectness.assign(plane, 0.0f);
  t.offsets.assign(2 * plane, 0.0f);
  t.sizes.assign(2 * plane, 0.0f);
  t.yaw.assign(2 * plane, 0.0f);
  t.labels.assign(plane, 0);
  std::vector<double> owner_area(plane, 0.0);

  for (const auto& b : scene.boxes) {
    int r, c;
    if (!cell_of(grid, b.center_xy.x, b.center_xy.y, r, c)) continue;
    const std::size_t i = static_cast<std::size_t>(r) * t.width + static_cast<std::size_t>(c);
    const double area = static_cast<double>(b.size_lw.x) * b.size_lw.y;
    if (t.positive[i] && owner_area[i] >= area) continue;
    owner_area[i] = area;
    t.positive[i] = 1;
    t.objectness[i] = 1.0f;
    const double fx = (static_cast<double>(b.center_xy.x) + grid.half_extent_x()) / grid.cell_size_m - c;
    const double fy = (static_cast<double>(b.center_xy.y) + grid.half_extent_y()) / grid.cell_size_m - r;
    t.offsets[i] = static_cast<float>(std::clamp(fx, 0.0, std::nextafter(1.0, 0.0)));
    t.offsets[plane + i] = static_cast<float>(std::clamp(fy, 0.0, std::nextafter(1.0, 0.0)));
    t.sizes[i] = std::log(b.size_lw.x);
    t.sizes[plane + i] = std::log(b.size_lw.y);
    t.yaw[i] = std::sin(b.yaw);
    t.yaw[plane + i] = std::cos(b.yaw);
    t.labels[i] = b.class_id;
  }
  return t;
}

template <typename T>
BasicDetectionLoss<T> detection_loss(const BasicPredictionMap<T>& pred, const TargetMap& target,
                                     const DetectorConfig& config) {
  const std::size_t h = target.height, w = target.width;
  if (pred.objectness.shape() != Shape{1, h, w}) {
    throw DimensionError("prediction grid " + shape_str(pred.objectness.shape()) + " does not match targets [1, " +
                         std::to_string(h) + ", " + std::to_string(w) + "]");
  }
  const auto obj = bce_with_logits_sum(pred.objectness, as_tensor<T>(target.objectness, {1, h, w}));
  const std::span<const std::uint8_t> mask(target.positive);
  const auto reg = add(add(masked_l1_sum(pred.offsets, as_tensor<T>(target.offsets, {2, h, w}), mask),
                           masked_l1_sum(pred.sizes, as_tensor<T>(target.sizes, {2, h, w}), mask)),
                       masked_l1_sum(pred.yaw, as_tensor<T>(target.yaw, {2, h, w}), mask));
  const auto cls = masked_cross_entropy_sum(pred.class_logits, std::span<const std::int32_t>(target.labels), mask);

  BasicDetectionLoss<T> out;
  out.total = add(add(scale(obj, static_cast<T>(config.objectness_weight)),
                      scale(reg, static_cast<T>(config.regression_weight))),
                  scale(cls, static_cast<T>(config.class_weight)));
  out.objectness = static_cast<double>(obj.item());
  out.regression = static_cast<double>(reg.item());
  out.classification = static_cast<double>(cls.item());
  if (!std::isfinite(static_cast<double>(out.total.item()))) {
    throw NumericError("non-finite detection loss (objectness " + std::to_string(out.objectness) + ", regression " +
                       std::to_string(out.regression) + ", class " + std::to_string(out.classification) + ")");
  }
  return out;
}

ObjectBox decode_cell(const GridConfig& grid, int row, int col, const float offset[2], const float log_size[2],
                      const float sin_cos[2], std::int32_t class_id) {
  ObjectBox b;
  b.center_xy = {static_cast<float>(-grid.half_extent_x() + (col + static_cast<double>(offset[0])) * grid.cell_size_m),
                 static_cast<float>(-grid.half_extent_y() + (row + static_cast<double>(offset[1])) * grid.cell_size_m)};
  b.size_lw = {std::exp(std::clamp(log_size[0], -10.0f, 10.0f)), std::exp(std::clamp(log_size[1], -10.0f, 10.0f))};
  b.yaw = std::atan2(sin_cos[0], sin_cos[1]);
  b.class_id = class_id;
  return b;
}

std::vector<Detection> decode(const PredictionMap& pred, const GridConfig& grid, float score_threshold,
                              float nms_radius_m) {
  if (!(score_threshold > 0 && score_threshold < 1)) throw RangeError("score threshold must be in (0, 1)");
  const std::size_t h = pred.objectness.dim(1), w = pred.objectness.dim(2), plane = h * w;
  const std::size_t classes = pred.class_logits.dim(0);
  const auto obj = pred.objectness.data();
  const auto off = pred.offsets.data();
  const auto size = pred.sizes.data();
  const auto yaw = pred.yaw.data();
  const auto cls = pred.class_logits.data();

  std::vector<Detection> candidates;
  for (std::size_t i = 0; i < plane; ++i) {
    const auto score = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(obj[i]))));
    if (score < score_threshold) continue;
    std::int32_t best = 0;
    for (std::size_t k = 1; k < classes; ++k) {
      if (cls[k * plane + i] > cls[static_cast<std::size_t>(best) * plane + i]) best = static_cast<std::int32_t>(k);
    }
    const float o[2] = {off[i], off[plane + i]};
    const float s[2] = {size[i], size[plane + i]};
    const float y[2] = {yaw[i], yaw[plane + i]};
    Detection d;
    d.row = static_cast<int>(i / w);
    d.col = static_cast<int>(i % w);
    d.score = score;
    d.box = decode_cell(grid, d.row, d.col, o, s, y, best);
    candidates.push_back(d);
  }
  std::sort(candidates.begin(), candidates.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.row != b.row) return a.row < b.row;
    return a.col < b.col;
  });
  std::vector<Detection> kept;
  for (const auto& c : candidates) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return std::hypot(k.box.center_xy.x - c.box.center_xy.x, k.box.center_xy.y - c.box.center_xy.y) <= nms_radius_m;
    });
    if (!suppressed) kept.push_back(c);
  }
  return kept;
}

void init_model_params(ParamStore& params, const ModelSpec& spec, const GridConfig& grid,
                       const DetectorConfig& config, std::uint64_t seed) {
  grid.validate();
  Rng rng(seed);
  const auto channels = static_cast<std::size_t>(grid.channels);
  if (spec.concat_baseline) {
    init_concat_params(params, channels, rng);
  } else {
    init_fusion_params(params, spec.fusion, channels, rng);
  }
  init_detector_params(params, channels, config, rng);
}

template <typename T>
BasicBevGrid<T> fuse_inputs(const ModelSpec& spec, const Availability& avail, const BasicBevGrid<T>* f_lid,
                            const BasicBevGrid<T>* f_cam, const FusionStep& step, const BasicParamStore<T>& params) {
  if (!spec.concat_baseline) return dispatch(avail, spec.fusion, f_lid, f_cam, step, &params);
  avail.validate();
  if (avail.lidar && !f_lid) throw AvailabilityError("lidar marked available but no lidar grid given");
  if (avail.camera && !f_cam) throw AvailabilityError("camera marked available but no camera grid given");
  if (avail.both()) return fuse_concat(*f_lid, *f_cam, params);
  const auto& present = avail.lidar ? *f_lid : *f_cam;
  const BasicBevGrid<T> blank{BasicTensor<T>(present.tensor.shape()),
                              avail.lidar ? Modality::Camera : Modality::Lidar, present.cell_size_m, present.frame_id};
  return avail.lidar ? fuse_concat(present, blank, params) : fuse_concat(blank, present, params);
}

template <typename T>
BasicPredictionMap<T> forward_model(const ModelSpec& spec, const Availability& avail, const BasicBevGrid<T>* f_lid,
                                    const BasicBevGrid<T>* f_cam, const FusionStep& step,
                                    const BasicParamStore<T>& params) {
  return head(encode(fuse_inputs(spec, avail, f_lid, f_cam, step, params), params), params);
}

std::filesystem::path manifest_path(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  p += ".manifest.json";
  return p;
}

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params, const CheckpointManifest& m) {
  save_params(params, path);
  nlohmann::ordered_json j;
  j["data_hash"] = m.data_hash;
  j["model_hash"] = m.model_hash;
  j["step_count"] = m.step_count;
  j["fusion"] = m.fusion;
  j["mode"] = m.mode;
  j["epochs"] = m.epochs;
  write_file_atomic(manifest_path(path), j.dump(2) + "\n");
}

CheckpointManifest load_manifest(const std::filesystem::path& checkpoint) {
  const auto path = manifest_path(checkpoint);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
    CheckpointManifest m;
    m.data_hash = j.at("data_hash").get<std::uint64_t>();
    m.model_hash = j.at("model_hash").get<std::uint64_t>();
    m.step_count = j.at("step_count").get<std::uint64_t>();
    m.fusion = j.at("fusion").get<std::string>();
    m.mode = j.at("mode").get<std::string>();
    m.epochs = j.at("epochs").get<int>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint manifest " + path.string() + ": " + e.what());
  }
}

ParamStore load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_model_hash,
                           CheckpointManifest* manifest) {
  const auto m = load_manifest(path);
  if (m.model_hash != expected_model_hash) {
    throw HashMismatchError("checkpoint " + path.string() + " was trained under model config hash " +
                            std::to_string(m.model_hash) + ", current config hashes to " +
                            std::to_string(expected_model_hash));
  }
  auto params = load_params(path);
  params.step_count = m.step_count;
  if (manifest) *manifest = m;
  return params;
}

#define BEVFUSE_INSTANTIATE_DETECTOR(T)                                                                         \
  template BasicTensor<T> encode(const BasicBevGrid<T>&, const BasicParamStore<T>&);                           \
  template BasicPredictionMap<T> head(const BasicTensor<T>&, const BasicParamStore<T>&);                        \
  template BasicDetectionLoss<T> detection_loss(const BasicPredictionMap<T>&, const TargetMap&,                 \
                                                const DetectorConfig&);                                        \
  template BasicBevGrid<T> fuse_inputs(const ModelSpec&, const Availability&, const BasicBevGrid<T>*,           \
                                       const BasicBevGrid<T>*, const FusionStep&, const BasicParamStore<T>&);   \
  template BasicPredictionMap<T> forward_model(const ModelSpec&, const Availability&, const BasicBevGrid<T>*,   \
                                               const BasicBevGrid<T>*, const FusionStep&,                       \
                                               const BasicParamStore<T>&);

BEVFUSE_INSTANTIATE_DETECTOR(float)
BEVFUSE_INSTANTIATE_DETECTOR(double)

#undef BEVFUSE_INSTANTIATE_DETECTOR

}  // namespace bevfuse
