#include "bevfuse/fusion.hpp"

#include <cmath>
#include <vector>

#include "bevfuse/init.hpp"
#include "bevfuse/ops.hpp"

namespace bevfuse {

std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::Camera: return "camera";
    case Modality::Lidar: return "lidar";
    case Modality::Fused: return "fused";
  }
  return "?";
}

void Availability::validate() const {
  if (!lidar && !camera) throw AvailabilityError("at least one of lidar/camera must be available");
}

std::string_view fusion_kind_name(FusionKind kind) {
  switch (kind) {
    case FusionKind::Average: return "avg";
    case FusionKind::MaxPool: return "maxpool";
    case FusionKind::CrossAttention: return "xattn";
    case FusionKind::Pmd: return "pmd";
  }
  return "?";
}

FusionKind parse_fusion_kind(std::string_view name) {
  if (name == "avg") return FusionKind::Average;
  if (name == "maxpool") return FusionKind::MaxPool;
  if (name == "xattn") return FusionKind::CrossAttention;
  if (name == "pmd") return FusionKind::Pmd;
  throw ConfigError("unknown fusion kind '" + std::string(name) + "' (expected avg, maxpool, xattn, pmd)");
}

void FusionConfig::validate(std::size_t channels) const {
  if (kind == FusionKind::Average && !(w >= 0.0 && w <= 1.0)) {
    throw RangeError("average fusion weight w=" + std::to_string(w) + " outside [0,1]");
  }
  if (kind == FusionKind::CrossAttention) {
    if (heads <= 0) throw ConfigError("cross-attention needs a positive head count");
    if (channels % static_cast<std::size_t>(heads) != 0) {
      throw DimensionError("channel width " + std::to_string(channels) + " not divisible by " +
                           std::to_string(heads) + " heads");
    }
  }
  if (kind == FusionKind::Pmd && pmd_anchor == Modality::Fused) {
    throw ConfigError("PMD anchor must be lidar or camera");
  }
}

namespace {

template <typename T>
void require_compatible(const BasicBevGrid<T>& a, const BasicBevGrid<T>& b, const char* op) {
  if (!a.tensor.defined() || !b.tensor.defined()) throw DimensionError(std::string(op) + ": undefined grid");
  if (a.tensor.rank() != 3 || a.tensor.shape() != b.tensor.shape()) {
    throw DimensionError(std::string(op) + ": grid shapes differ, " + shape_str(a.tensor.shape()) + " vs " +
                         shape_str(b.tensor.shape()));
  }
  if (a.cell_size_m != b.cell_size_m) {
    throw DimensionError(std::string(op) + ": cell sizes differ (" + std::to_string(a.cell_size_m) + " vs " +
                         std::to_string(b.cell_size_m) + ")");
  }
}

template <typename T>
BasicBevGrid<T> fused(BasicTensor<T> t, const BasicBevGrid<T>& like) {
  return {std::move(t), Modality::Fused, like.cell_size_m, like.frame_id};
}

}  // namespace

template <typename T>
BasicBevGrid<T> fuse_average(const BasicBevGrid<T>& f_lid, const BasicBevGrid<T>& f_cam, double w) {
  require_compatible(f_lid, f_cam, "fuse_average");
  if (!(w >= 0.0 && w <= 1.0)) throw RangeError("fuse_average: w=" + std::to_string(w) + " outside [0,1]");
  return fused(add(scale(f_cam.tensor, static_cast<T>(w)), scale(f_lid.tensor, static_cast<T>(1.0 - w))), f_lid);
}

template <typename T>
BasicBevGrid<T> fuse_maxpool(const BasicBevGrid<T>& f_lid, const BasicBevGrid<T>& f_cam) {
  require_compatible(f_lid, f_cam, "fuse_maxpool");
  return fused(max_pair(f_lid.tensor, f_cam.tensor), f_lid);
}

template <typename T>
BasicBevGrid<T> fuse_cross_attention(const BasicBevGrid<T>& f_lid, const BasicBevGrid<T>& f_cam,
                                     const BasicParamStore<T>& params, int heads) {
  require_compatible(f_lid, f_cam, "fuse_cross_attention");
  const std::size_t c = f_lid.channels(), h = f_lid.height(), w = f_lid.width();
  if (heads <= 0 || c % static_cast<std::size_t>(heads) != 0) {
    throw DimensionError("fuse_cross_attention: " + std::to_string(c) + " channels not divisible by " +
                         std::to_string(heads) + " heads");
  }
  const std::size_t head_dim = c / static_cast<std::size_t>(heads);

  const auto lid_tokens = to_tokens(f_lid.tensor);
  const auto cam_tokens = to_tokens(f_cam.tensor);
  const auto q = linear_tokens(lid_tokens, params.get("fusion.xattn.wq.weight"), params.get("fusion.xattn.wq.bias"));
  const auto k = linear_tokens(cam_tokens, params.get("fusion.xattn.wk.weight"), params.get("fusion.xattn.wk.bias"));
  const auto v = linear_tokens(cam_tokens, params.get("fusion.xattn.wv.weight"), params.get("fusion.xattn.wv.bias"));

  const T inv_sqrt_d = static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim)));
  std::vector<BasicTensor<T>> head_out;
  head_out.reserve(static_cast<std::size_t>(heads));
  for (std::size_t i = 0; i < static_cast<std::size_t>(heads); ++i) {
    const auto qh = slice_cols(q, i * head_dim, head_dim);
    const auto kh = slice_cols(k, i * head_dim, head_dim);
    const auto vh = slice_cols(v, i * head_dim, head_dim);
    const auto attn = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt_d));
    head_out.push_back(matmul(attn, vh));
  }
  const auto merged = concat_cols<T>(head_out);
  const auto projected =
      linear_tokens(merged, params.get("fusion.xattn.wo.weight"), params.get("fusion.xattn.wo.bias"));
  const auto gate = sigmoid(params.get("fusion.xattn.theta"));
  const auto update = from_tokens(mul_scalar(projected, gate), h, w);
  return fused(add(f_lid.tensor, update), f_lid);
}

double alpha_schedule(std::int64_t step, std::int64_t total_steps) {
  if (total_steps < 1) throw RangeError("alpha_schedule: total_steps must be >= 1");
  if (step < 0 || step > total_steps) {
    throw RangeError("alpha_schedule: step " + std::to_string(step) + " outside [0, " +
                     std::to_string(total_steps) + "]");
  }
  return 1.0 - static_cast<double>(step) / static_cast<double>(total_steps);
}

template <typename T>
BasicBevGrid<T> fuse_pmd(const BasicBevGrid<T>& anchor, const BasicBevGrid<T>& other, double alpha) {
  require_compatible(anchor, other, "fuse_pmd");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw RangeError("fuse_pmd: alpha=" + std::to_string(alpha) + " outside [0,1]");
  // At alpha = 0 the other modality contributes nothing, including to gradients.
  if (alpha == 0.0) return fused(anchor.tensor, anchor);
  return fused(add(anchor.tensor, scale(other.tensor, static_cast<T>(alpha))), anchor);
}

template <typename T>
BasicBevGrid<T> fuse_concat(const BasicBevGrid<T>& f_lid, const BasicBevGrid<T>& f_cam,
                            const BasicParamStore<T>& params) {
  require_compatible(f_lid, f_cam, "fuse_concat");
  const auto stacked = concat_channels(f_lid.tensor, f_cam.tensor);
  return fused(conv2d(stacked, params.get("fusion.concat.weight"), params.get("fusion.concat.bias"), 0), f_lid);
}

template <typename T>
BasicBevGrid<T> dispatch(const Availability& avail, const FusionConfig& config, const BasicBevGrid<T>* f_lid,
                         const BasicBevGrid<T>* f_cam, const FusionStep& step, const BasicParamStore<T>* params) {
  avail.validate();
  if (avail.lidar && !f_lid) throw AvailabilityError("lidar marked available but no lidar grid given");
  if (avail.camera && !f_cam) throw AvailabilityError("camera marked available but no camera grid given");
  if (!avail.both()) return avail.lidar ? *f_lid : *f_cam;

  switch (config.kind) {
    case FusionKind::Average:
      return fuse_average(*f_lid, *f_cam, config.w);
    case FusionKind::MaxPool:
      return fuse_maxpool(*f_lid, *f_cam);
    case FusionKind::CrossAttention:
      if (!params) throw ConfigError("cross-attention fusion needs parameters");
      return fuse_cross_attention(*f_lid, *f_cam, *params, config.heads);
    case FusionKind::Pmd: {
      const Modality anchor = step.training ? step.anchor : config.pmd_anchor;
      const double alpha = step.training ? alpha_schedule(step.step, step.total_steps) : 0.0;
      return anchor == Modality::Camera ? fuse_pmd(*f_cam, *f_lid, alpha) : fuse_pmd(*f_lid, *f_cam, alpha);
    }
  }
  throw ConfigError("unhandled fusion kind");
}

void init_fusion_params(ParamStore& params, const FusionConfig& config, std::size_t channels, Rng& rng) {
  config.validate(channels);
  if (config.kind != FusionKind::CrossAttention) return;
  for (const char* name : {"wq", "wk", "wv", "wo"}) {
    const std::string base = std::string("fusion.xattn.") + name;
    params.add(base + ".weight", Shape{channels, channels}, xavier_uniform(channels * channels, channels, channels, rng));
    params.add(base + ".bias", Shape{channels}, std::vector<float>(channels, 0.0f));
  }
  params.add("fusion.xattn.theta", Shape{1}, {static_cast<float>(config.theta_init)});
}

void init_concat_params(ParamStore& params, std::size_t channels, Rng& rng) {
  params.add("fusion.concat.weight", Shape{channels, 2 * channels, 1, 1},
             xavier_uniform(2 * channels * channels, 2 * channels, channels, rng));
  params.add("fusion.concat.bias", Shape{channels}, std::vector<float>(channels, 0.0f));
}

#define BEVFUSE_INSTANTIATE_FUSION(T)                                                                          \
  template BasicBevGrid<T> fuse_average(const BasicBevGrid<T>&, const BasicBevGrid<T>&, double);               \
  template BasicBevGrid<T> fuse_maxpool(const BasicBevGrid<T>&, const BasicBevGrid<T>&);                       \
  template BasicBevGrid<T> fuse_cross_attention(const BasicBevGrid<T>&, const BasicBevGrid<T>&,                \
                                                const BasicParamStore<T>&, int);                               \
  template BasicBevGrid<T> fuse_pmd(const BasicBevGrid<T>&, const BasicBevGrid<T>&, double);                   \
  template BasicBevGrid<T> fuse_concat(const BasicBevGrid<T>&, const BasicBevGrid<T>&,                         \
                                       const BasicParamStore<T>&);                                             \
  template BasicBevGrid<T> dispatch(const Availability&, const FusionConfig&, const BasicBevGrid<T>*,          \
                                    const BasicBevGrid<T>*, const FusionStep&, const BasicParamStore<T>*);

BEVFUSE_INSTANTIATE_FUSION(float)
BEVFUSE_INSTANTIATE_FUSION(double)

#undef BEVFUSE_INSTANTIATE_FUSION

}  // namespace bevfuse
