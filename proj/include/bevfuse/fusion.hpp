#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "bevfuse/param_store.hpp"
#include "bevfuse/rng.hpp"
#include "bevfuse/tensor.hpp"

namespace bevfuse {

enum class Modality { Camera, Lidar, Fused };

std::string_view modality_name(Modality m);

// A C x H x W bird's-eye-view feature grid.
template <typename T>
struct BasicBevGrid {
  BasicTensor<T> tensor;
  Modality modality = Modality::Fused;
  float cell_size_m = 0.5f;
  std::int64_t frame_id = 0;

  std::size_t channels() const { return tensor.dim(0); }
  std::size_t height() const { return tensor.dim(1); }
  std::size_t width() const { return tensor.dim(2); }
};

using BevGrid = BasicBevGrid<float>;
using BevGridD = BasicBevGrid<double>;

template <typename To, typename From>
BasicBevGrid<To> grid_cast(const BasicBevGrid<From>& g) {
  return {tensor_cast<To>(g.tensor), g.modality, g.cell_size_m, g.frame_id};
}

class AvailabilityError : public Error {
 public:
  using Error::Error;
};

struct Availability {
  bool lidar = true;
  bool camera = true;

  bool both() const { return lidar && camera; }
  // Throws AvailabilityError when neither sensor is available.
  void validate() const;
};

enum class FusionKind { Average, MaxPool, CrossAttention, Pmd };

std::string_view fusion_kind_name(FusionKind kind);  // "avg", "maxpool", "xattn", "pmd"
FusionKind parse_fusion_kind(std::string_view name);

struct FusionConfig {
  FusionKind kind = FusionKind::Average;
  double w = 0.5;           // Average: camera weight
  int heads = 4;            // CrossAttention
  double theta_init = 0.0;  // CrossAttention: gate logit at initialisation
  Modality pmd_anchor = Modality::Lidar;  // Pmd: anchor used outside training

  void validate(std::size_t channels) const;
};

// Where in training a fusion call happens. Outside training PMD runs with
// alpha = 0, i.e. the anchor alone.
struct FusionStep {
  std::int64_t step = 0;
  std::int64_t total_steps = 1;
  bool training = false;
  Modality anchor = Modality::Lidar;
};

// w * f_cam + (1 - w) * f_lid
template <typename T>
BasicBevGrid<T> fuse_average(const BasicBevGrid<T>& f_lid, const BasicBevGrid<T>& f_cam, double w = 0.5);

template <typename T>
BasicBevGrid<T> fuse_maxpool(const BasicBevGrid<T>& f_lid, const BasicBevGrid<T>& f_cam);

// f_lid + sigmoid(theta) * W_o * MHA(W_q f_lid, W_k f_cam, W_v f_cam) over
// H*W tokens. Parameters are read from `params` under "fusion.xattn.*".
template <typename T>
BasicBevGrid<T> fuse_cross_attention(const BasicBevGrid<T>& f_lid, const BasicBevGrid<T>& f_cam,
                                     const BasicParamStore<T>& params, int heads);

// Linear decay 1 -> 0 over [0, total_steps].
double alpha_schedule(std::int64_t step, std::int64_t total_steps);

// anchor + alpha * other
template <typename T>
BasicBevGrid<T> fuse_pmd(const BasicBevGrid<T>& anchor, const BasicBevGrid<T>& other, double alpha);

// Concatenate-then-1x1-conv fusion of the two-branch comparison model.
template <typename T>
BasicBevGrid<T> fuse_concat(const BasicBevGrid<T>& f_lid, const BasicBevGrid<T>& f_cam,
                            const BasicParamStore<T>& params);

// Availability-conditional fusion: the configured operator when both grids
// are available, otherwise the available grid returned unchanged. Absent
// grids are passed as nullptr.
template <typename T>
BasicBevGrid<T> dispatch(const Availability& avail, const FusionConfig& config, const BasicBevGrid<T>* f_lid,
                         const BasicBevGrid<T>* f_cam, const FusionStep& step, const BasicParamStore<T>* params);

// Adds the operator's trainable tensors (cross-attention only) to `params`.
void init_fusion_params(ParamStore& params, const FusionConfig& config, std::size_t channels, Rng& rng);
void init_concat_params(ParamStore& params, std::size_t channels, Rng& rng);

}  // namespace bevfuse
