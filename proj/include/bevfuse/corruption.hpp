#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "bevfuse/world.hpp"

namespace bevfuse {

enum class CorruptionFamily { BeamReduce, Fog, MotionBlur, SpatialMisalign, TemporalMisalign, Clean };

std::string_view corruption_family_name(CorruptionFamily f);  // "beams", "fog", ...
CorruptionFamily parse_corruption_family(std::string_view name);
bool targets_lidar(CorruptionFamily f);

struct CorruptionSpec {
  CorruptionFamily family = CorruptionFamily::Clean;
  int severity = 1;  // 1..3, ignored for Clean
  std::uint64_t rng_seed = 0;

  void validate() const;
  std::string str() const;  // "<family>:<severity>"
};

// "<family>:<severity>" or "clean".
CorruptionSpec parse_corruption_spec(std::string_view text, std::uint64_t rng_seed = 0);

// Severity tables. Severity 0 is the unperturbed probe.
int beam_stride(int severity);
struct FogLevel {
  double contrast;
  double noise_sigma;
};
FogLevel fog_level(int severity);
int blur_length(int severity);
struct MisalignLevel {
  double rotation_deg;
  double translation_m;
};
MisalignLevel misalign_level(int severity);
double temporal_shift_s(int severity);

LidarSweep apply_beam_reduce(const LidarSweep& sweep, int severity, std::uint64_t seed);
CameraStream apply_fog(const CameraStream& stream, int severity, std::uint64_t seed);
CameraStream apply_motion_blur(const CameraStream& stream, int severity, std::uint64_t seed);
LidarSweep apply_spatial_misalign(const LidarSweep& sweep, int severity, std::uint64_t seed);
// Re-renders the sweep from `scene` advanced in time.
LidarSweep apply_temporal_misalign(const LidarSweep& sweep, const Scene& scene, int severity, std::uint64_t seed,
                                   const LidarConfig& config);

// Explicit-parameter forms of the ops above.
CameraStream fog_with(const CameraStream& stream, double contrast, double noise_sigma, std::uint64_t seed);
CameraStream box_blur_rows(const CameraStream& stream, int length);
// Rotation about the sensor origin followed by translation; points leaving
// the extent are dropped.
LidarSweep rigid_transform(const LidarSweep& sweep, double rotation_rad, double tx, double ty);

// Corrupts the targeted modality of `sample`; the other one is copied as-is.
// The per-sample stream is derived from spec.rng_seed and the scene seed.
Sample corrupt_sample(const Sample& sample, const CorruptionSpec& spec, const LidarConfig& lidar_config);

}  // namespace bevfuse
