#include "bevfuse/grad_suite.hpp"

#include "bevfuse/detector.hpp"
#include "bevfuse/ops.hpp"
#include "bevfuse/rng.hpp"

namespace bevfuse {

namespace {

class Inputs {
 public:
  explicit Inputs(std::uint64_t seed) : rng_(seed) {}

  TensorD uniform_tensor(Shape shape, double lo = -1.0, double hi = 1.0) {
    AlignedVector<double> v(shape_numel(shape));
    for (auto& x : v) x = uniform(rng_, lo, hi);
    return TensorD(std::move(shape), std::move(v));
  }

  // `base` moved by at least `gap` per element, away from a kink at equality.
  TensorD offset_from(const TensorD& base, double gap) {
    auto out = base.clone();
    for (auto& x : out.mutable_data()) x += (uniform01(rng_) < 0.5 ? -1 : 1) * uniform(rng_, gap, 1.0);
    return out;
  }

  std::uint64_t next() { return rng_(); }

 private:
  Rng rng_;
};

BevGridD as_grid(const TensorD& t, Modality m) { return {t, m, 0.5f, 0}; }

}  // namespace

std::vector<GradSuiteEntry> run_grad_suite(const GradSuiteOptions& options) {
  GradCheckOptions gc;
  gc.epsilon = options.epsilon;
  Inputs in(options.seed);
  std::vector<GradSuiteEntry> out;
  auto check = [&](std::string name, const GraphFn<double>& graph, std::vector<TensorD> inputs) {
    out.push_back({std::move(name), grad_check<double>(graph, std::move(inputs), gc)});
  };
  using Span = std::span<const TensorD>;
  const Shape s{3, 4};

  check("op.add", [](Span x) { return add(x[0], x[1]); }, {in.uniform_tensor(s), in.uniform_tensor(s)});
  check("op.sub", [](Span x) { return sub(x[0], x[1]); }, {in.uniform_tensor(s), in.uniform_tensor(s)});
  check("op.mul", [](Span x) { return mul(x[0], x[1]); }, {in.uniform_tensor(s), in.uniform_tensor(s)});
  check("op.scale", [](Span x) { return scale(x[0], 1.7); }, {in.uniform_tensor(s)});
  check("op.mul_scalar", [](Span x) { return mul_scalar(x[0], x[1]); },
        {in.uniform_tensor(s), in.uniform_tensor(Shape{1})});
  check("op.relu", [](Span x) { return relu(x[0]); }, {in.offset_from(TensorD::zeros(s), 0.1)});
  check("op.sigmoid", [](Span x) { return sigmoid(x[0]); }, {in.uniform_tensor(s, -4, 4)});
  {
    const auto a = in.uniform_tensor(s);
    check("op.max_pair", [](Span x) { return max_pair(x[0], x[1]); }, {a, in.offset_from(a, 0.1)});
  }
  check("op.sum", [](Span x) { return sum(x[0]); }, {in.uniform_tensor(s)});
  check("op.mean", [](Span x) { return mean(x[0]); }, {in.uniform_tensor(s)});
  check("op.conv2d_3x3", [](Span x) { return conv2d(x[0], x[1], x[2], 1); },
        {in.uniform_tensor(Shape{2, 8, 8}), in.uniform_tensor(Shape{3, 2, 3, 3}), in.uniform_tensor(Shape{3})});
  check("op.conv2d_1x1", [](Span x) { return conv2d(x[0], x[1], x[2], 0); },
        {in.uniform_tensor(Shape{3, 8, 8}), in.uniform_tensor(Shape{2, 3, 1, 1}), in.uniform_tensor(Shape{2})});
  check("op.linear_tokens", [](Span x) { return linear_tokens(x[0], x[1], x[2]); },
        {in.uniform_tensor(Shape{6, 4}), in.uniform_tensor(Shape{4, 3}), in.uniform_tensor(Shape{3})});
  check("op.matmul", [](Span x) { return matmul(x[0], x[1]); },
        {in.uniform_tensor(Shape{3, 4}), in.uniform_tensor(Shape{4, 2})});
  check("op.matmul_nt", [](Span x) { return matmul_nt(x[0], x[1]); },
        {in.uniform_tensor(Shape{3, 4}), in.uniform_tensor(Shape{5, 4})});
  check("op.softmax_rows", [](Span x) { return softmax_rows(x[0]); }, {in.uniform_tensor(Shape{4, 5}, -3, 3)});
  check("op.to_tokens", [](Span x) { return to_tokens(x[0]); }, {in.uniform_tensor(Shape{3, 2, 4})});
  check("op.from_tokens", [](Span x) { return from_tokens(x[0], 2, 3); }, {in.uniform_tensor(Shape{6, 4})});
  check("op.slice_cols", [](Span x) { return slice_cols(x[0], 1, 2); }, {in.uniform_tensor(Shape{3, 5})});
  check("op.concat_cols",
        [](Span x) {
          std::vector<TensorD> parts{x[0], x[1]};
          return concat_cols<double>(parts);
        },
        {in.uniform_tensor(Shape{3, 2}), in.uniform_tensor(Shape{3, 3})});
  check("op.concat_channels", [](Span x) { return concat_channels(x[0], x[1]); },
        {in.uniform_tensor(Shape{2, 3, 3}), in.uniform_tensor(Shape{1, 3, 3})});
  {
    const auto targets = in.uniform_tensor(Shape{2, 3, 3}, 0, 1);
    check("op.bce_with_logits_sum", [targets](Span x) { return bce_with_logits_sum(x[0], targets); },
          {in.uniform_tensor(Shape{2, 3, 3}, -4, 4)});
  }
  {
    const auto target = in.uniform_tensor(Shape{2, 3, 3});
    const std::vector<std::uint8_t> mask{1, 0, 1, 0, 1, 1, 0, 0, 1};
    check("op.masked_l1_sum", [target, mask](Span x) { return masked_l1_sum(x[0], target, mask); },
          {in.offset_from(target, 0.1)});
  }
  {
    const std::vector<std::int32_t> labels{0, 2, 1, 1, 0, 2, 2, 1, 0};
    const std::vector<std::uint8_t> mask{1, 1, 0, 1, 0, 1, 1, 0, 1};
    check("op.masked_cross_entropy_sum",
          [labels, mask](Span x) { return masked_cross_entropy_sum(x[0], labels, mask); },
          {in.uniform_tensor(Shape{3, 3, 3}, -3, 3)});
  }

  const std::size_t ch = 8;
  const Shape grid_shape{ch, 8, 8};
  const auto lid = in.uniform_tensor(grid_shape);
  const auto cam = in.offset_from(lid, 0.05);
  check("fusion.avg",
        [](Span x) { return fuse_average(as_grid(x[0], Modality::Lidar), as_grid(x[1], Modality::Camera)).tensor; },
        {lid, cam});
  check("fusion.maxpool",
        [](Span x) { return fuse_maxpool(as_grid(x[0], Modality::Lidar), as_grid(x[1], Modality::Camera)).tensor; },
        {lid, cam});
  check("fusion.pmd",
        [](Span x) { return fuse_pmd(as_grid(x[0], Modality::Lidar), as_grid(x[1], Modality::Camera), 0.4).tensor; },
        {lid, cam});
  {
    ParamStore fp;
    Rng rng(in.next());
    FusionConfig fc;
    fc.kind = FusionKind::CrossAttention;
    init_fusion_params(fp, fc, ch, rng);
    auto params = cast_params<double>(fp);
    params.get("fusion.xattn.theta").mutable_data()[0] = 0.3;
    std::vector<TensorD> inputs{lid, cam};
    for (auto& [name, t] : params) inputs.push_back(t);
    check("fusion.xattn",
          [params](Span x) {
            return fuse_cross_attention(as_grid(x[0], Modality::Lidar), as_grid(x[1], Modality::Camera), params, 4)
                .tensor;
          },
          inputs);
  }

  if (!options.end_to_end) return out;

  GridConfig grid;
  grid.height = 8;
  grid.width = 8;
  grid.channels = static_cast<int>(ch);
  Scene scene;
  ObjectBox box;
  box.center_xy = {0.6f, -0.3f};
  box.size_lw = {1.0f, 0.8f};
  box.yaw = 0.5f;
  box.class_id = 1;
  scene.boxes.push_back(box);
  const auto target = build_targets(scene, grid);
  const DetectorConfig det;
  std::vector<std::pair<std::string, ModelSpec>> specs;
  for (auto kind : {FusionKind::Average, FusionKind::MaxPool, FusionKind::CrossAttention, FusionKind::Pmd}) {
    ModelSpec m;
    m.fusion.kind = kind;
    specs.push_back({"model." + std::string(fusion_kind_name(kind)), m});
  }
  ModelSpec concat;
  concat.concat_baseline = true;
  specs.push_back({"model.concat", concat});

  const auto lid01 = in.uniform_tensor(grid_shape, 0, 1);
  const auto cam01 = in.uniform_tensor(grid_shape, 0, 1);
  for (const auto& [name, spec] : specs) {
    ParamStore fp;
    init_model_params(fp, spec, grid, det, in.next());
    const auto params = cast_params<double>(fp);
    std::vector<std::string> names;
    std::vector<TensorD> inputs{lid01.clone(), cam01.clone()};
    for (const auto& [n, t] : params) {
      names.push_back(n);
      inputs.push_back(t);
    }
    const FusionStep step{2, 5, true, Modality::Camera};
    const ModelSpec model = spec;
    check(name,
          [names, model, step, target, det](Span x) {
            ParamStoreD p;
            for (std::size_t k = 0; k < names.size(); ++k) p.add(names[k], x[k + 2]);
            const BevGridD l = as_grid(x[0], Modality::Lidar);
            const BevGridD c = as_grid(x[1], Modality::Camera);
            return detection_loss(forward_model<double>(model, {true, true}, &l, &c, step, p), target, det).total;
          },
          inputs);
  }
  return out;
}

}  // namespace bevfuse
