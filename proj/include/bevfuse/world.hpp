#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "bevfuse/fusion.hpp"

namespace bevfuse {

inline constexpr int kNumClasses = 3;  // car, pedestrian, truck

struct Vec2 {
  float x = 0.0f;
  float y = 0.0f;

  bool operator==(const Vec2&) const = default;
};

struct ObjectBox {
  Vec2 center_xy;    // meters, ego frame
  Vec2 size_lw;      // length along yaw, width across
  float yaw = 0.0f;  // radians in (-pi, pi]
  std::int32_t class_id = 0;
  Vec2 velocity_xy;  // m/s

  bool operator==(const ObjectBox&) const = default;
};

struct Scene {
  std::vector<ObjectBox> boxes;
  std::uint64_t seed = 0;
  float extent_m = 16.0f;  // half-width of the square BEV region

  bool operator==(const Scene&) const = default;
};

struct LidarPoint {
  float x = 0.0f;
  float y = 0.0f;
  float intensity = 0.0f;
  std::int32_t beam_index = 0;

  bool operator==(const LidarPoint&) const = default;
};

struct LidarSweep {
  std::vector<LidarPoint> points;
  std::int32_t num_beams = 32;
  float extent_m = 16.0f;

  bool operator==(const LidarSweep&) const = default;
};

// Polar view: column u spans azimuth yaw + fov/2 (u = 0) down to yaw - fov/2;
// row v = 0 is the farthest range bin, row rows-1 the nearest.
struct CameraView {
  float yaw = 0.0f;
  float fov = 0.0f;
  std::vector<float> pixels;  // rows * cols, row-major

  bool operator==(const CameraView&) const = default;
};

struct CameraStream {
  std::vector<CameraView> views;
  std::int32_t rows = 64;
  std::int32_t cols = 96;
  float max_range_m = 0.0f;

  bool operator==(const CameraStream&) const = default;
  float range_bin_m() const { return max_range_m / static_cast<float>(rows); }
};

struct ClassShape {
  float length_min, length_max;
  float width_min, width_max;
  float max_speed;     // m/s along the heading
  float reflectivity;  // LiDAR return strength
};

struct WorldConfig {
  float extent_m = 16.0f;
  int min_boxes = 1;
  int max_boxes = 8;
  int num_classes = kNumClasses;
  std::array<ClassShape, kNumClasses> classes{{
      {3.8f, 4.8f, 1.7f, 2.0f, 8.0f, 0.8f},  // car
      {0.6f, 0.9f, 0.6f, 0.9f, 1.5f, 0.5f},  // pedestrian
      {6.0f, 8.0f, 2.3f, 2.7f, 6.0f, 0.95f},  // truck
  }};
  float max_iou = 0.0f;     // overlap cap between any two boxes
  float ego_clearance_m = 1.0f;
  float min_center_distance_m = 1.5f;
  int retry_budget = 2000;  // placement attempts per scene

  void validate() const;
};

struct LidarConfig {
  int num_beams = 32;
  int rays_per_beam = 16;  // total azimuth rays = num_beams * rays_per_beam
  float clutter_probability = 0.3f;
  float roof_spacing_m = 0.25f;

  void validate() const;
};

struct CameraConfig {
  int num_views = 6;  // each view covers 360 / num_views degrees
  int rows = 64;
  int cols = 96;
  float depth_jitter_m = 1.0f;
  float background = 0.25f;
  float noise_sigma = 0.01f;
  float foreground_threshold = 0.1f;

  void validate() const;
};

struct GridConfig {
  int height = 64;
  int width = 64;
  float cell_size_m = 0.5f;
  int channels = 32;  // multiple of 4

  void validate() const;
  float half_extent_x() const { return 0.5f * cell_size_m * static_cast<float>(width); }
  float half_extent_y() const { return 0.5f * cell_size_m * static_cast<float>(height); }
};

struct SensorConfig {
  LidarConfig lidar;
  CameraConfig camera;
};

// Cell index of a BEV point; false when the point falls outside the grid.
bool cell_of(const GridConfig& grid, float x, float y, int& row, int& col);

std::array<Vec2, 4> box_corners(const ObjectBox& box);
float box_iou(const ObjectBox& a, const ObjectBox& b);
// Ray/box crossing along direction (dx, dy) from the origin; false if missed.
bool ray_box_interval(const ObjectBox& box, float dx, float dy, float& t_enter, float& t_exit);

Scene sample_scene(std::uint64_t rng_seed, const WorldConfig& config);
// Boxes moved by velocity * dt; seed and extent unchanged.
Scene advance_scene(const Scene& scene, float dt);

LidarSweep render_lidar(const Scene& scene, const LidarConfig& config);
CameraStream render_camera(const Scene& scene, const CameraConfig& config);

BevGrid lidar_to_bev(const LidarSweep& sweep, const GridConfig& grid);
BevGrid camera_to_bev(const CameraStream& stream, const GridConfig& grid,
                      float foreground_threshold = CameraConfig{}.foreground_threshold);

// Invocation counters, for checking which sensor paths a caller exercised.
struct RenderCounters {
  std::atomic<std::uint64_t> lidar_renders{0};
  std::atomic<std::uint64_t> camera_renders{0};
  std::atomic<std::uint64_t> lidar_projections{0};
  std::atomic<std::uint64_t> camera_projections{0};

  void reset();
};
RenderCounters& render_counters();

struct Sample {
  Scene scene;
  LidarSweep lidar;
  CameraStream camera;

  bool operator==(const Sample&) const = default;
};

Sample generate_sample(std::uint64_t seed, const WorldConfig& world, const SensorConfig& sensors);

struct Dataset {
  std::uint64_t config_hash = 0;
  std::vector<Sample> samples;
};

inline constexpr std::uint32_t kDatasetVersion = 1;

std::string serialize_dataset(const Dataset& data);
Dataset deserialize_dataset(std::string_view bytes);
void dataset_write(const std::filesystem::path& path, const Dataset& data);
Dataset dataset_read(const std::filesystem::path& path);

}  // namespace bevfuse
