#include <cmath>
#include <filesystem>

#include "bevfuse/detector.hpp"
#include "bevfuse/grad_check.hpp"
#include "bevfuse/ops.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace bevfuse;
using bevfuse::testing::bit_equal;
using bevfuse::testing::random_tensor;

namespace {

GridConfig small_grid() {
  GridConfig g;
  g.height = 8;
  g.width = 8;
  g.channels = 32;
  return g;
}

ParamStore model_params(const ModelSpec& spec, const GridConfig& g, std::uint64_t seed = 1) {
  ParamStore p;
  init_model_params(p, spec, g, DetectorConfig{}, seed);
  return p;
}

ObjectBox make_box(float x, float y, float l, float w, float yaw, int cls) {
  ObjectBox b;
  b.center_xy = {x, y};
  b.size_lw = {l, w};
  b.yaw = yaw;
  b.class_id = cls;
  return b;
}

// A prediction map that states the targets with saturated confidence.
PredictionMap perfect_prediction(const TargetMap& t, int num_classes, float cap = 20.0f) {
  const std::size_t h = t.height, w = t.width, plane = h * w;
  std::vector<float> obj(plane), cls(static_cast<std::size_t>(num_classes) * plane, -cap);
  for (std::size_t i = 0; i < plane; ++i) {
    obj[i] = t.positive[i] ? cap : -cap;
    if (t.positive[i]) cls[static_cast<std::size_t>(t.labels[i]) * plane + i] = cap;
  }
  PredictionMap p;
  p.objectness = Tensor(Shape{1, h, w}, obj);
  p.offsets = Tensor(Shape{2, h, w}, t.offsets);
  p.sizes = Tensor(Shape{2, h, w}, t.sizes);
  p.yaw = Tensor(Shape{2, h, w}, t.yaw);
  p.class_logits = Tensor(Shape{static_cast<std::size_t>(num_classes), h, w}, cls);
  return p;
}

}  // namespace

TEST_CASE("encode") {
  const auto g = small_grid();
  const ModelSpec spec;
  const auto params = model_params(spec, g);
  const BevGrid zero{Tensor(Shape{32, 8, 8}), Modality::Lidar, 0.5f, 0};
  const auto out = encode(zero, params);
  CHECK(out.shape() == Shape{64, 8, 8});
  for (float v : out.data()) CHECK(v == 0.0f);

  const auto x = random_tensor(Shape{32, 8, 8}, 3, 0.0, 1.0);
  const BevGrid as_lidar{x, Modality::Lidar, 0.5f, 0};
  const BevGrid as_camera{x, Modality::Camera, 0.5f, 0};
  CHECK(bit_equal(encode(as_lidar, params), encode(as_camera, params)));

  const BevGrid wrong{Tensor(Shape{16, 8, 8}), Modality::Lidar, 0.5f, 0};
  CHECK_THROWS_AS(encode(wrong, params), DimensionError);
}

TEST_CASE("head") {
  const auto g = small_grid();
  auto params = model_params(ModelSpec{}, g);
  const auto pred = head(random_tensor(Shape{64, 5, 7}, 4), params);
  CHECK(pred.objectness.shape() == Shape{1, 5, 7});
  CHECK(pred.offsets.shape() == Shape{2, 5, 7});
  CHECK(pred.sizes.shape() == Shape{2, 5, 7});
  CHECK(pred.yaw.shape() == Shape{2, 5, 7});
  CHECK(pred.class_logits.shape() == Shape{3, 5, 7});

  for (auto& v : params.get("head.objectness.weight").mutable_data()) v = 0.0f;
  for (auto& v : params.get("head.objectness.bias").mutable_data()) v = 0.0f;
  const auto zeroed = head(random_tensor(Shape{64, 2, 2}, 5), params);
  const auto scores = sigmoid(zeroed.objectness);
  for (float v : scores.data()) CHECK(v == 0.5f);
}

TEST_CASE("build_targets") {
  const GridConfig g;
  CHECK(build_targets(Scene{}, g).num_positive() == 0);

  Scene s;
  // Cell (row 34, col 36) spans x in [2, 2.5), y in [1, 1.5); its center is (2.25, 1.25).
  s.boxes.push_back(make_box(2.25f, 1.25f, 4.0f, 2.0f, 0.3f, 2));
  auto t = build_targets(s, g);
  REQUIRE(t.num_positive() == 1);
  const std::size_t plane = 64 * 64, i = 34 * 64 + 36;
  CHECK(t.positive[i] == 1);
  CHECK(t.offsets[i] == 0.5f);
  CHECK(t.offsets[plane + i] == 0.5f);
  CHECK(t.sizes[i] == doctest::Approx(std::log(4.0f)));
  CHECK(t.labels[i] == 2);
  CHECK(t.yaw[i] * t.yaw[i] + t.yaw[plane + i] * t.yaw[plane + i] == doctest::Approx(1.0f));

  // Two boxes in one cell keep the larger.
  s.boxes.push_back(make_box(2.3f, 1.2f, 0.7f, 0.7f, 0.0f, 1));
  t = build_targets(s, g);
  CHECK(t.num_positive() == 1);
  CHECK(t.labels[i] == 2);
  std::swap(s.boxes[0], s.boxes[1]);
  CHECK(build_targets(s, g).labels[i] == 2);

  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto scene = sample_scene(seed, WorldConfig{});
    const auto tt = build_targets(scene, g);
    CHECK(tt.num_positive() == scene.boxes.size());
    for (std::size_t k = 0; k < plane; ++k) {
      if (!tt.positive[k]) continue;
      CHECK(tt.offsets[k] >= 0.0f);
      CHECK(tt.offsets[k] < 1.0f);
      CHECK(tt.offsets[plane + k] >= 0.0f);
      CHECK(tt.offsets[plane + k] < 1.0f);
    }
  }
}

TEST_CASE("targets decode back to the scene") {
  const GridConfig g;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto scene = sample_scene(seed, WorldConfig{});
    const auto dets = decode(perfect_prediction(build_targets(scene, g), 3), g, 0.5f, 1.0f);
    REQUIRE(dets.size() == scene.boxes.size());
    for (const auto& b : scene.boxes) {
      const auto it = std::min_element(dets.begin(), dets.end(), [&](const Detection& a, const Detection& c) {
        return std::hypot(a.box.center_xy.x - b.center_xy.x, a.box.center_xy.y - b.center_xy.y) <
               std::hypot(c.box.center_xy.x - b.center_xy.x, c.box.center_xy.y - b.center_xy.y);
      });
      CHECK(std::hypot(it->box.center_xy.x - b.center_xy.x, it->box.center_xy.y - b.center_xy.y) <=
            g.cell_size_m / 2);
      CHECK(it->box.class_id == b.class_id);
      CHECK(it->box.size_lw.x == doctest::Approx(b.size_lw.x).epsilon(1e-5));
      CHECK(std::abs(std::remainder(it->box.yaw - b.yaw, 2 * std::numbers::pi)) < 1e-5);
    }
  }
}

TEST_CASE("detection_loss") {
  const GridConfig g;
  const DetectorConfig cfg;
  const auto scene = sample_scene(3, WorldConfig{});
  const auto t = build_targets(scene, g);
  const auto perfect = perfect_prediction(t, 3);
  const auto l = detection_loss(perfect, t, cfg);
  const double cells = 64.0 * 64.0;
  // log(1 + e^-20) ~ 2.06e-9 per cell.
  CHECK(l.total.item() < 1e-6 + 2.1e-9 * cells);
  CHECK(l.regression == 0.0);

  const auto empty = build_targets(Scene{}, g);
  const auto none = perfect_prediction(empty, 3);
  const auto le = detection_loss(none, empty, cfg);
  CHECK(le.regression == 0.0);
  CHECK(le.classification == 0.0);

  const auto random_pred = head(random_tensor(Shape{64, 64, 64}, 8), model_params(ModelSpec{}, g));
  const auto lr = detection_loss(random_pred, t, cfg);
  CHECK(lr.total.item() >= 0.0f);
  CHECK(lr.total.item() == doctest::Approx(lr.objectness + 2 * lr.regression + lr.classification).epsilon(1e-5));

  PredictionMap bad = perfect;
  bad.objectness = Tensor(Shape{1, 8, 8});
  CHECK_THROWS_AS(detection_loss(bad, t, cfg), DimensionError);
}

TEST_CASE("decode") {
  const auto g = small_grid();
  const std::size_t plane = 64;
  PredictionMap p;
  p.objectness = Tensor::full(Shape{1, 8, 8}, -10.0f);
  p.offsets = Tensor::full(Shape{2, 8, 8}, 0.5f);
  p.sizes = Tensor(Shape{2, 8, 8});
  p.yaw = Tensor(Shape{2, 8, 8}, std::vector<float>(2 * plane, 0.0f));
  p.class_logits = Tensor(Shape{3, 8, 8});
  CHECK(decode(p, g, 0.05f, 1.0f).empty());

  // Isolated confident cell at row 2, col 5 with class 1 and yaw 0.
  auto obj = p.objectness.mutable_data();
  obj[2 * 8 + 5] = 5.0f;
  p.yaw.mutable_data()[plane + 2 * 8 + 5] = 1.0f;
  p.class_logits.mutable_data()[plane + 2 * 8 + 5] = 3.0f;
  auto dets = decode(p, g, 0.05f, 1.0f);
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].box.center_xy.x == doctest::Approx(-2.0 + 5.5 * 0.5));
  CHECK(dets[0].box.center_xy.y == doctest::Approx(-2.0 + 2.5 * 0.5));
  CHECK(dets[0].box.size_lw.x == doctest::Approx(1.0));
  CHECK(dets[0].box.yaw == doctest::Approx(0.0));
  CHECK(dets[0].box.class_id == 1);
  CHECK(dets[0].score == doctest::Approx(1.0 / (1.0 + std::exp(-5.0))));

  // A neighbor 0.1 m away with lower score is suppressed at radius 0.5.
  obj[2 * 8 + 6] = 4.0f;
  p.offsets.mutable_data()[2 * 8 + 6] = 0.5f - 0.8f;  // 0.4 m left of its cell center
  dets = decode(p, g, 0.05f, 0.5f);
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].col == 5);
  CHECK_THROWS_AS(decode(p, g, 1.5f, 0.5f), RangeError);
}

TEST_CASE("single-branch weights are shared across regimes") {
  const auto g = small_grid();
  const ModelSpec spec;
  const auto params = model_params(spec, g);
  const auto before = serialize_params(params);
  const BevGrid lid{random_tensor(Shape{32, 8, 8}, 10, 0.0, 1.0), Modality::Lidar, 0.5f, 0};
  const BevGrid cam{random_tensor(Shape{32, 8, 8}, 11, 0.0, 1.0), Modality::Camera, 0.5f, 0};
  forward_model<float>(spec, {true, true}, &lid, &cam, {}, params);
  forward_model<float>(spec, {true, false}, &lid, nullptr, {}, params);
  forward_model<float>(spec, {false, true}, nullptr, &cam, {}, params);
  CHECK(serialize_params(params) == before);
  // No per-modality parameters exist.
  for (const auto& [name, t] : params) {
    CHECK(name.find("lidar") == std::string::npos);
    CHECK(name.find("camera") == std::string::npos);
  }
  const BevGrid cam_same{lid.tensor, Modality::Camera, 0.5f, 0};
  CHECK(bit_equal(forward_model<float>(spec, {true, false}, &lid, nullptr, {}, params).objectness,
                  forward_model<float>(spec, {false, true}, nullptr, &cam_same, {}, params).objectness));
}

TEST_CASE("concat baseline zero-fills the missing modality") {
  const auto g = small_grid();
  ModelSpec spec;
  spec.concat_baseline = true;
  const auto params = model_params(spec, g);
  CHECK(params.contains("fusion.concat.weight"));
  const BevGrid lid{random_tensor(Shape{32, 8, 8}, 12, 0.0, 1.0), Modality::Lidar, 0.5f, 0};
  const BevGrid zero{Tensor(Shape{32, 8, 8}), Modality::Camera, 0.5f, 0};
  CHECK(bit_equal(fuse_inputs<float>(spec, {true, false}, &lid, nullptr, {}, params).tensor,
                  fuse_inputs<float>(spec, {true, true}, &lid, &zero, {}, params).tensor));
}

TEST_CASE("full pipelines pass the finite-difference oracle") {
  auto g = small_grid();
  g.channels = 8;
  Scene scene;
  scene.boxes.push_back(make_box(0.6f, -0.3f, 1.0f, 0.8f, 0.5f, 1));
  const auto target = build_targets(scene, g);
  const DetectorConfig cfg;

  std::vector<std::pair<std::string, ModelSpec>> specs;
  for (auto kind : {FusionKind::Average, FusionKind::MaxPool, FusionKind::CrossAttention, FusionKind::Pmd}) {
    ModelSpec s;
    s.fusion.kind = kind;
    specs.push_back({std::string(fusion_kind_name(kind)), s});
  }
  ModelSpec baseline;
  baseline.concat_baseline = true;
  specs.push_back({"concat", baseline});

  for (const auto& [name, spec] : specs) {
    CAPTURE(name);
    const auto params = cast_params<double>(model_params(spec, g, 20));
    std::vector<std::string> names;
    std::vector<TensorD> inputs{random_tensor<double>(Shape{8, 8, 8}, 21, 0.0, 1.0),
                                random_tensor<double>(Shape{8, 8, 8}, 22, 0.0, 1.0)};
    for (const auto& [n, t] : params) {
      names.push_back(n);
      inputs.push_back(t);
    }
    const FusionStep step{.step = 2, .total_steps = 5, .training = true, .anchor = Modality::Camera};
    GraphFn<double> graph = [&](std::span<const TensorD> in) {
      ParamStoreD p;
      for (std::size_t k = 0; k < names.size(); ++k) p.add(names[k], in[k + 2]);
      const BevGridD lid{in[0], Modality::Lidar, 0.5f, 0};
      const BevGridD cam{in[1], Modality::Camera, 0.5f, 0};
      return detection_loss(forward_model<double>(spec, {true, true}, &lid, &cam, step, p), target, cfg).total;
    };
    const auto r = grad_check<double>(graph, inputs);
    CAPTURE(r.worst_input);
    CAPTURE(r.worst_analytic);
    CAPTURE(r.worst_numeric);
    CAPTURE(r.kink_crossings_skipped);
    CHECK(r.max_relative_error < 1e-3);
    // Probes that straddle a ReLU switch somewhere in the encoder are left out.
    CHECK(r.coordinates_checked >= 1600);
  }
}

TEST_CASE("checkpoint manifest") {
  const auto g = small_grid();
  const auto params = model_params(ModelSpec{}, g);
  const auto path = std::filesystem::temp_directory_path() / "bevfuse_test_ckpt.bfl";
  CheckpointManifest m{.data_hash = 11, .model_hash = 22, .step_count = 33, .fusion = "avg", .mode = "three_regime",
                       .epochs = 3};
  save_checkpoint(path, params, m);
  CheckpointManifest back;
  const auto loaded = load_checkpoint(path, 22, &back);
  CHECK(serialize_params(loaded) == serialize_params(params));
  CHECK(loaded.step_count == 33);
  CHECK(back.data_hash == 11);
  CHECK(back.mode == "three_regime");
  CHECK_THROWS_AS(load_checkpoint(path, 23), HashMismatchError);
  std::filesystem::remove(path);
  std::filesystem::remove(manifest_path(path));
  CHECK_THROWS_AS(load_checkpoint(path, 22), IoError);
}
