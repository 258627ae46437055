#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bevfuse/fusion.hpp"
#include "bevfuse/param_store.hpp"
#include "bevfuse/world.hpp"

namespace bevfuse {

struct DetectorConfig {
  int encoder_width = 64;
  int num_classes = kNumClasses;
  float objectness_prior = -4.6f;  // initial objectness bias, sigmoid ~ 0.01
  double objectness_weight = 1.0;
  double regression_weight = 2.0;
  double class_weight = 1.0;
  float score_threshold = 0.05f;
  float nms_radius_m = 1.0f;

  void validate() const;
};

template <typename T>
struct BasicPredictionMap {
  BasicTensor<T> objectness;    // [1,H,W] logits
  BasicTensor<T> offsets;       // [2,H,W] center within the cell, in cells
  BasicTensor<T> sizes;         // [2,H,W] log meters (length, width)
  BasicTensor<T> yaw;           // [2,H,W] (sin, cos)
  BasicTensor<T> class_logits;  // [num_classes,H,W]
};

using PredictionMap = BasicPredictionMap<float>;

// Center-cell assignment of a scene's boxes. Channel-major buffers laid out
// like the matching prediction tensors.
struct TargetMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> positive;  // H*W
  std::vector<float> objectness;       // H*W, 0 or 1
  std::vector<float> offsets;          // 2*H*W
  std::vector<float> sizes;            // 2*H*W
  std::vector<float> yaw;              // 2*H*W
  std::vector<std::int32_t> labels;    // H*W, valid where positive

  std::size_t num_positive() const;
};

struct Detection {
  ObjectBox box;
  float score = 0.0f;
  int row = 0;
  int col = 0;
};

// Adds encoder and head tensors ("encoder.*", "head.*") for `in_channels` inputs.
void init_detector_params(ParamStore& params, std::size_t in_channels, const DetectorConfig& config, Rng& rng);

// Three 3x3 conv + ReLU blocks over whichever grid arrives.
template <typename T>
BasicTensor<T> encode(const BasicBevGrid<T>& f_in, const BasicParamStore<T>& params);

template <typename T>
BasicPredictionMap<T> head(const BasicTensor<T>& features, const BasicParamStore<T>& params);

TargetMap build_targets(const Scene& scene, const GridConfig& grid);

template <typename T>
struct BasicDetectionLoss {
  BasicTensor<T> total;  // scalar, differentiable
  double objectness = 0.0;
  double regression = 0.0;
  double classification = 0.0;
};

// Weighted sum of objectness BCE over all cells and L1 regression plus
// class cross-entropy over positive cells. Throws NumericError if non-finite.
template <typename T>
BasicDetectionLoss<T> detection_loss(const BasicPredictionMap<T>& pred, const TargetMap& target,
                                     const DetectorConfig& config);

// Inverse of the target encoding for a single cell.
ObjectBox decode_cell(const GridConfig& grid, int row, int col, const float offset[2], const float log_size[2],
                      const float sin_cos[2], std::int32_t class_id);

// Cells scoring >= score_threshold become boxes; greedy center-distance
// suppression in (score desc, row, col) order.
std::vector<Detection> decode(const PredictionMap& pred, const GridConfig& grid, float score_threshold,
                              float nms_radius_m);

// How a model turns the two sensor grids into the encoder input.
struct ModelSpec {
  FusionConfig fusion;
  // Two-branch comparison model: concat + 1x1 conv, absent grids zero-filled.
  bool concat_baseline = false;
};

void init_model_params(ParamStore& params, const ModelSpec& spec, const GridConfig& grid,
                       const DetectorConfig& config, std::uint64_t seed);

template <typename T>
BasicBevGrid<T> fuse_inputs(const ModelSpec& spec, const Availability& avail, const BasicBevGrid<T>* f_lid,
                            const BasicBevGrid<T>* f_cam, const FusionStep& step, const BasicParamStore<T>& params);

template <typename T>
BasicPredictionMap<T> forward_model(const ModelSpec& spec, const Availability& avail, const BasicBevGrid<T>* f_lid,
                                    const BasicBevGrid<T>* f_cam, const FusionStep& step,
                                    const BasicParamStore<T>& params);

struct CheckpointManifest {
  std::uint64_t data_hash = 0;
  std::uint64_t model_hash = 0;
  std::uint64_t step_count = 0;
  std::string fusion;  // fusion kind name or "concat"
  std::string mode;    // "three_regime", "pmd" or "baseline"
  int epochs = 0;
};

std::filesystem::path manifest_path(const std::filesystem::path& checkpoint);
void save_checkpoint(const std::filesystem::path& path, const ParamStore& params, const CheckpointManifest& manifest);
CheckpointManifest load_manifest(const std::filesystem::path& checkpoint);
// Throws HashMismatchError when the manifest's model hash differs.
ParamStore load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_model_hash,
                           CheckpointManifest* manifest = nullptr);

}  // namespace bevfuse
