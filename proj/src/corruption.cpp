#include "bevfuse/corruption.hpp"

#include <cmath>
#include <numbers>

#include "bevfuse/rng.hpp"

namespace bevfuse {

namespace {

void check_severity(int severity) {
  if (severity < 0 || severity > 3) throw RangeError("severity " + std::to_string(severity) + " outside [0, 3]");
}

constexpr std::uint64_t kSampleStream = 0xC0FF;

}  // namespace

std::string_view corruption_family_name(CorruptionFamily f) {
  switch (f) {
    case CorruptionFamily::BeamReduce: return "beams";
    case CorruptionFamily::Fog: return "fog";
    case CorruptionFamily::MotionBlur: return "motionblur";
    case CorruptionFamily::SpatialMisalign: return "spatial";
    case CorruptionFamily::TemporalMisalign: return "temporal";
    case CorruptionFamily::Clean: return "clean";
  }
  return "?";
}

CorruptionFamily parse_corruption_family(std::string_view name) {
  for (auto f : {CorruptionFamily::BeamReduce, CorruptionFamily::Fog, CorruptionFamily::MotionBlur,
                 CorruptionFamily::SpatialMisalign, CorruptionFamily::TemporalMisalign, CorruptionFamily::Clean}) {
    if (corruption_family_name(f) == name) return f;
  }
  throw ConfigError("unknown corruption family '" + std::string(name) +
                    "' (expected beams, fog, motionblur, spatial, temporal, clean)");
}

bool targets_lidar(CorruptionFamily f) {
  return f == CorruptionFamily::BeamReduce || f == CorruptionFamily::SpatialMisalign ||
         f == CorruptionFamily::TemporalMisalign;
}

void CorruptionSpec::validate() const {
  if (family != CorruptionFamily::Clean && (severity < 1 || severity > 3)) {
    throw RangeError("corruption severity must be 1, 2 or 3, got " + std::to_string(severity));
  }
}

std::string CorruptionSpec::str() const {
  if (family == CorruptionFamily::Clean) return "clean";
  return std::string(corruption_family_name(family)) + ":" + std::to_string(severity);
}

CorruptionSpec parse_corruption_spec(std::string_view text, std::uint64_t rng_seed) {
  CorruptionSpec spec;
  spec.rng_seed = rng_seed;
  const auto colon = text.find(':');
  spec.family = parse_corruption_family(text.substr(0, colon));
  if (colon == std::string_view::npos) {
    if (spec.family != CorruptionFamily::Clean) throw ConfigError("corruption '" + std::string(text) + "' needs a severity");
    return spec;
  }
  const auto sev = text.substr(colon + 1);
  if (sev.size() != 1 || sev[0] < '1' || sev[0] > '3') {
    throw RangeError("corruption severity must be 1, 2 or 3 in '" + std::string(text) + "'");
  }
  spec.severity = sev[0] - '0';
  return spec;
}

int beam_stride(int severity) {
  check_severity(severity);
  return 1 << severity;
}

FogLevel fog_level(int severity) {
  check_severity(severity);
  static constexpr FogLevel table[] = {{1.0, 0.0}, {0.7, 0.02}, {0.45, 0.05}, {0.2, 0.1}};
  return table[severity];
}

int blur_length(int severity) {
  check_severity(severity);
  static constexpr int table[] = {1, 3, 7, 13};
  return table[severity];
}

MisalignLevel misalign_level(int severity) {
  check_severity(severity);
  static constexpr MisalignLevel table[] = {{0.0, 0.0}, {1.0, 0.25}, {3.0, 0.5}, {6.0, 1.0}};
  return table[severity];
}

double temporal_shift_s(int severity) {
  check_severity(severity);
  static constexpr double table[] = {0.0, 0.1, 0.25, 0.5};
  return table[severity];
}

LidarSweep apply_beam_reduce(const LidarSweep& sweep, int severity, std::uint64_t) {
  const int stride = beam_stride(severity);
  LidarSweep out;
  out.num_beams = sweep.num_beams;
  out.extent_m = sweep.extent_m;
  for (const auto& p : sweep.points) {
    if (p.beam_index % stride == 0) out.points.push_back(p);
  }
  return out;
}

CameraStream fog_with(const CameraStream& stream, double contrast, double noise_sigma, std::uint64_t seed) {
  Rng rng(seed);
  CameraStream out = stream;
  for (auto& view : out.views) {
    double haze = 0.0;
    for (float p : view.pixels) haze += p;
    if (!view.pixels.empty()) haze /= static_cast<double>(view.pixels.size());
    for (auto& p : view.pixels) {
      const double fogged = contrast * p + (1.0 - contrast) * haze;
      p = static_cast<float>(noise_sigma > 0 ? fogged + normal(rng, 0.0, noise_sigma) : fogged);
    }
  }
  return out;
}

CameraStream apply_fog(const CameraStream& stream, int severity, std::uint64_t seed) {
  const auto level = fog_level(severity);
  return fog_with(stream, level.contrast, level.noise_sigma, seed);
}

CameraStream box_blur_rows(const CameraStream& stream, int length) {
  if (length < 1 || length % 2 == 0) throw RangeError("blur length must be odd and positive");
  CameraStream out = stream;
  const auto cols = static_cast<std::ptrdiff_t>(stream.cols);
  const std::ptrdiff_t half = length / 2;
  // Half-sample symmetric extension: ... b a | a b c | c b ...
  auto reflect = [cols](std::ptrdiff_t i) {
    std::ptrdiff_t m = i % (2 * cols);
    if (m < 0) m += 2 * cols;
    return m < cols ? m : 2 * cols - 1 - m;
  };
  for (std::size_t k = 0; k < stream.views.size(); ++k) {
    const auto& src = stream.views[k].pixels;
    auto& dst = out.views[k].pixels;
    for (std::ptrdiff_t v = 0; v < stream.rows; ++v) {
      const float* row = src.data() + v * cols;
      for (std::ptrdiff_t u = 0; u < cols; ++u) {
        double acc = 0.0;
        for (std::ptrdiff_t j = -half; j <= half; ++j) acc += row[reflect(u + j)];
        dst[static_cast<std::size_t>(v * cols + u)] = static_cast<float>(acc / length);
      }
    }
  }
  return out;
}

CameraStream apply_motion_blur(const CameraStream& stream, int severity, std::uint64_t) {
  return box_blur_rows(stream, blur_length(severity));
}

LidarSweep rigid_transform(const LidarSweep& sweep, double rotation_rad, double tx, double ty) {
  const double c = std::cos(rotation_rad), s = std::sin(rotation_rad);
  LidarSweep out;
  out.num_beams = sweep.num_beams;
  out.extent_m = sweep.extent_m;
  for (const auto& p : sweep.points) {
    const auto x = static_cast<float>(c * p.x - s * p.y + tx);
    const auto y = static_cast<float>(s * p.x + c * p.y + ty);
    if (std::abs(x) < sweep.extent_m && std::abs(y) < sweep.extent_m) out.points.push_back({x, y, p.intensity, p.beam_index});
  }
  return out;
}

LidarSweep apply_spatial_misalign(const LidarSweep& sweep, int severity, std::uint64_t seed) {
  const auto level = misalign_level(severity);
  Rng rng(seed);
  const double sign = uniform01(rng) < 0.5 ? -1.0 : 1.0;
  const double direction = 2.0 * std::numbers::pi * uniform01(rng);
  return rigid_transform(sweep, sign * level.rotation_deg * std::numbers::pi / 180.0,
                         level.translation_m * std::cos(direction), level.translation_m * std::sin(direction));
}

LidarSweep apply_temporal_misalign(const LidarSweep& sweep, const Scene& scene, int severity, std::uint64_t,
                                   const LidarConfig& config) {
  if (sweep.num_beams != config.num_beams) {
    throw ConfigError("temporal misalignment: sweep has " + std::to_string(sweep.num_beams) +
                      " beams but the sensor config has " + std::to_string(config.num_beams));
  }
  return render_lidar(advance_scene(scene, static_cast<float>(temporal_shift_s(severity))), config);
}

Sample corrupt_sample(const Sample& sample, const CorruptionSpec& spec, const LidarConfig& lidar_config) {
  spec.validate();
  const std::uint64_t seed = derive_seed(spec.rng_seed ^ splitmix64(kSampleStream), sample.scene.seed);
  Sample out = sample;
  switch (spec.family) {
    case CorruptionFamily::Clean:
      break;
    case CorruptionFamily::BeamReduce:
      out.lidar = apply_beam_reduce(sample.lidar, spec.severity, seed);
      break;
    case CorruptionFamily::Fog:
      out.camera = apply_fog(sample.camera, spec.severity, seed);
      break;
    case CorruptionFamily::MotionBlur:
      out.camera = apply_motion_blur(sample.camera, spec.severity, seed);
      break;
    case CorruptionFamily::SpatialMisalign:
      out.lidar = apply_spatial_misalign(sample.lidar, spec.severity, seed);
      break;
    case CorruptionFamily::TemporalMisalign:
      out.lidar = apply_temporal_misalign(sample.lidar, sample.scene, spec.severity, seed, lidar_config);
      break;
  }
  return out;
}

}  // namespace bevfuse
