#include "bevfuse/world.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "bevfuse/binary_io.hpp"
#include "bevfuse/param_store.hpp"
#include "bevfuse/rng.hpp"

namespace bevfuse {

namespace {

constexpr double kPi = std::numbers::pi;

constexpr std::uint64_t kLidarStream = 0x11DA;
constexpr std::uint64_t kCameraStream = 0xCA3E;

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

double cross(Vec2 o, Vec2 a, Vec2 b) {
  return (static_cast<double>(a.x) - o.x) * (static_cast<double>(b.y) - o.y) -
         (static_cast<double>(a.y) - o.y) * (static_cast<double>(b.x) - o.x);
}

double polygon_area(const std::vector<Vec2>& poly) {
  double a = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const auto& p = poly[i];
    const auto& q = poly[(i + 1) % poly.size()];
    a += static_cast<double>(p.x) * q.y - static_cast<double>(q.x) * p.y;
  }
  return 0.5 * std::abs(a);
}

// Sutherland-Hodgman against a counter-clockwise convex clip polygon.
std::vector<Vec2> clip_convex(std::vector<Vec2> subject, const std::array<Vec2, 4>& clip) {
  for (std::size_t e = 0; e < clip.size() && !subject.empty(); ++e) {
    const Vec2 a = clip[e];
    const Vec2 b = clip[(e + 1) % clip.size()];
    std::vector<Vec2> out;
    for (std::size_t i = 0; i < subject.size(); ++i) {
      const Vec2 p = subject[i];
      const Vec2 q = subject[(i + 1) % subject.size()];
      const double cp = cross(a, b, p);
      const double cq = cross(a, b, q);
      if (cp >= 0) out.push_back(p);
      if ((cp >= 0) != (cq >= 0)) {
        const double t = cp / (cp - cq);
        out.push_back({static_cast<float>(p.x + t * (q.x - p.x)), static_cast<float>(p.y + t * (q.y - p.y))});
      }
    }
    subject = std::move(out);
  }
  return subject;
}

float texture_value(std::int32_t class_id, int row) {
  switch (class_id) {
    case 0: return 0.85f;
    case 1: return row % 2 == 0 ? 0.8f : 0.5f;
    default: return (row / 2) % 2 == 0 ? 0.95f : 0.6f;
  }
}

// Each raw feature becomes channels/4 soft thermometer channels over [0, full_scale].
struct Lifter {
  std::size_t per_feature;
  std::array<float, 4> full_scale;

  void lift(const std::array<double, 4>& f, float* grid, std::size_t cell, std::size_t plane) const {
    for (std::size_t k = 0; k < 4; ++k) {
      const double level = f[k] / full_scale[k] * static_cast<double>(per_feature);
      for (std::size_t j = 0; j < per_feature; ++j) {
        grid[(k * per_feature + j) * plane + cell] =
            static_cast<float>(std::clamp(level - static_cast<double>(j), 0.0, 1.0));
      }
    }
  }
};

double median(std::vector<float> v) {
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  const float upper = *mid;
  const float lower = *std::max_element(v.begin(), mid);
  return 0.5 * (static_cast<double>(lower) + upper);
}

}  // namespace

void WorldConfig::validate() const {
  require(extent_m > 0, "world.extent_m must be positive");
  require(min_boxes >= 0 && min_boxes <= max_boxes, "world box-count range must satisfy 0 <= min <= max");
  require(num_classes >= 1 && num_classes <= kNumClasses, "world.num_classes must be in [1, 3]");
  for (const auto& c : classes) {
    require(c.length_min > 0 && c.length_min <= c.length_max && c.width_min > 0 && c.width_min <= c.width_max,
            "class size ranges must be positive and ordered");
    require(c.max_speed >= 0, "class speeds must be non-negative");
  }
  require(max_iou >= 0 && max_iou < 1, "world.max_iou must be in [0, 1)");
  require(retry_budget > 0, "world.retry_budget must be positive");
}

void LidarConfig::validate() const {
  require(num_beams >= 1 && rays_per_beam >= 1, "lidar beams and rays per beam must be >= 1");
  require(clutter_probability >= 0 && clutter_probability <= 1, "lidar.clutter_probability must be in [0, 1]");
  require(roof_spacing_m > 0, "lidar.roof_spacing_m must be positive");
}

void CameraConfig::validate() const {
  require(num_views >= 1, "camera.num_views must be >= 1");
  require(rows >= 1 && cols >= 1, "camera image must have at least one row and column");
  require(depth_jitter_m >= 0 && noise_sigma >= 0, "camera noise levels must be non-negative");
}

void GridConfig::validate() const {
  require(height >= 1 && width >= 1, "grid must have at least one cell");
  require(cell_size_m > 0, "grid.cell_size_m must be positive");
  require(channels >= 4 && channels % 4 == 0, "grid.channels must be a positive multiple of 4");
}

bool cell_of(const GridConfig& grid, float x, float y, int& row, int& col) {
  const double c = std::floor((static_cast<double>(x) + grid.half_extent_x()) / grid.cell_size_m);
  const double r = std::floor((static_cast<double>(y) + grid.half_extent_y()) / grid.cell_size_m);
  if (c < 0 || r < 0 || c >= grid.width || r >= grid.height) return false;
  row = static_cast<int>(r);
  col = static_cast<int>(c);
  return true;
}

std::array<Vec2, 4> box_corners(const ObjectBox& box) {
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  const double hl = 0.5 * box.size_lw.x, hw = 0.5 * box.size_lw.y;
  auto at = [&](double a, double b) {
    return Vec2{static_cast<float>(box.center_xy.x + a * hl * c - b * hw * s),
                static_cast<float>(box.center_xy.y + a * hl * s + b * hw * c)};
  };
  return {at(1, 1), at(-1, 1), at(-1, -1), at(1, -1)};
}

float box_iou(const ObjectBox& a, const ObjectBox& b) {
  const auto ca = box_corners(a);
  const auto cb = box_corners(b);
  const double inter = polygon_area(clip_convex({ca.begin(), ca.end()}, cb));
  const double area_a = static_cast<double>(a.size_lw.x) * a.size_lw.y;
  const double area_b = static_cast<double>(b.size_lw.x) * b.size_lw.y;
  const double uni = area_a + area_b - inter;
  return uni > 0 ? static_cast<float>(inter / uni) : 0.0f;
}

bool ray_box_interval(const ObjectBox& box, float dx, float dy, float& t_enter, float& t_exit) {
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  // Ray origin and direction in the box frame.
  const double ox = -(c * box.center_xy.x + s * box.center_xy.y);
  const double oy = -(-s * box.center_xy.x + c * box.center_xy.y);
  const double lx = c * dx + s * dy;
  const double ly = -s * dx + c * dy;
  double lo = 0.0, hi = std::numeric_limits<double>::infinity();
  const double half[2] = {0.5 * box.size_lw.x, 0.5 * box.size_lw.y};
  const double o[2] = {ox, oy};
  const double d[2] = {lx, ly};
  for (int i = 0; i < 2; ++i) {
    if (std::abs(d[i]) < 1e-12) {
      if (std::abs(o[i]) > half[i]) return false;
      continue;
    }
    double t1 = (-half[i] - o[i]) / d[i];
    double t2 = (half[i] - o[i]) / d[i];
    if (t1 > t2) std::swap(t1, t2);
    lo = std::max(lo, t1);
    hi = std::min(hi, t2);
  }
  if (hi < lo) return false;
  t_enter = static_cast<float>(lo);
  t_exit = static_cast<float>(hi);
  return true;
}

Scene sample_scene(std::uint64_t rng_seed, const WorldConfig& config) {
  config.validate();
  Rng rng(rng_seed);
  Scene scene;
  scene.seed = rng_seed;
  scene.extent_m = config.extent_m;
  const auto span = static_cast<std::uint64_t>(config.max_boxes - config.min_boxes + 1);
  const int count = config.min_boxes + static_cast<int>(uniform_index(rng, span));
  const double margin = std::max(0.0, static_cast<double>(config.extent_m) - 1.0);

  int attempts = 0;
  while (static_cast<int>(scene.boxes.size()) < count) {
    if (++attempts > config.retry_budget) {
      throw GenerationError("could not place " + std::to_string(count) + " boxes within " +
                            std::to_string(config.retry_budget) + " attempts (seed " + std::to_string(rng_seed) +
                            ")");
    }
    ObjectBox b;
    b.class_id = static_cast<std::int32_t>(uniform_index(rng, static_cast<std::uint64_t>(config.num_classes)));
    const auto& shape = config.classes[static_cast<std::size_t>(b.class_id)];
    b.size_lw = {static_cast<float>(uniform(rng, shape.length_min, shape.length_max)),
                 static_cast<float>(uniform(rng, shape.width_min, shape.width_max))};
    b.yaw = static_cast<float>(kPi - 2.0 * kPi * uniform01(rng));
    b.center_xy = {static_cast<float>(uniform(rng, -margin, margin)), static_cast<float>(uniform(rng, -margin, margin))};
    const double speed = uniform(rng, 0.0, shape.max_speed);
    b.velocity_xy = {static_cast<float>(speed * std::cos(b.yaw)), static_cast<float>(speed * std::sin(b.yaw))};

    const double half_diag = 0.5 * std::hypot(b.size_lw.x, b.size_lw.y);
    if (std::hypot(b.center_xy.x, b.center_xy.y) <= half_diag + config.ego_clearance_m) continue;
    const bool clash = std::any_of(scene.boxes.begin(), scene.boxes.end(), [&](const ObjectBox& o) {
      return box_iou(o, b) > config.max_iou ||
             std::hypot(o.center_xy.x - b.center_xy.x, o.center_xy.y - b.center_xy.y) < config.min_center_distance_m;
    });
    if (clash) continue;
    scene.boxes.push_back(b);
  }
  return scene;
}

Scene advance_scene(const Scene& scene, float dt) {
  Scene out = scene;
  for (auto& b : out.boxes) {
    b.center_xy.x += b.velocity_xy.x * dt;
    b.center_xy.y += b.velocity_xy.y * dt;
  }
  return out;
}

LidarSweep render_lidar(const Scene& scene, const LidarConfig& config) {
  config.validate();
  ++render_counters().lidar_renders;
  Rng rng(derive_seed(scene.seed, kLidarStream));
  const WorldConfig defaults;
  LidarSweep sweep;
  sweep.num_beams = config.num_beams;
  sweep.extent_m = scene.extent_m;
  const int rays = config.num_beams * config.rays_per_beam;
  const float extent = scene.extent_m;
  const double max_range = static_cast<double>(extent) * std::numbers::sqrt2;

  auto emit = [&](double t, float dx, float dy, float intensity, int beam) {
    const auto x = static_cast<float>(t * dx);
    const auto y = static_cast<float>(t * dy);
    if (std::abs(x) < extent && std::abs(y) < extent) sweep.points.push_back({x, y, intensity, beam});
  };

  for (int r = 0; r < rays; ++r) {
    const double angle = 2.0 * kPi * r / rays;
    const auto dx = static_cast<float>(std::cos(angle));
    const auto dy = static_cast<float>(std::sin(angle));
    const int beam = r % config.num_beams;
    for (const auto& box : scene.boxes) {
      float t0, t1;
      if (!ray_box_interval(box, dx, dy, t0, t1)) continue;
      const float refl = defaults.classes[static_cast<std::size_t>(box.class_id)].reflectivity;
      emit(t0, dx, dy, refl, beam);
      for (double t = t0 + config.roof_spacing_m; t < t1; t += config.roof_spacing_m) {
        emit(t, dx, dy, 0.8f * refl, beam);
      }
      if (t1 > t0) emit(t1, dx, dy, refl, beam);
    }
    // Three draws per ray whether or not clutter fires, so the clutter pattern
    // depends only on the seed.
    const double u = uniform01(rng);
    const double range = uniform(rng, 0.5, max_range);
    const double intensity = uniform(rng, 0.02, 0.15);
    if (u < config.clutter_probability) emit(range, dx, dy, static_cast<float>(intensity), beam);
  }
  return sweep;
}

CameraStream render_camera(const Scene& scene, const CameraConfig& config) {
  config.validate();
  ++render_counters().camera_renders;
  Rng rng(derive_seed(scene.seed, kCameraStream));
  CameraStream stream;
  stream.rows = config.rows;
  stream.cols = config.cols;
  stream.max_range_m = static_cast<float>(static_cast<double>(scene.extent_m) * std::numbers::sqrt2);
  const double bin = stream.range_bin_m();

  std::vector<double> jitter(scene.boxes.size());
  for (auto& j : jitter) j = normal(rng, 0.0, config.depth_jitter_m);

  const double fov = 2.0 * kPi / config.num_views;
  for (int k = 0; k < config.num_views; ++k) {
    CameraView view;
    view.yaw = static_cast<float>(fov * k);
    view.fov = static_cast<float>(fov);
    view.pixels.assign(static_cast<std::size_t>(config.rows) * config.cols, config.background);
    for (int u = 0; u < config.cols; ++u) {
      const double phi = view.yaw + 0.5 * fov - (u + 0.5) / config.cols * fov;
      const auto dx = static_cast<float>(std::cos(phi));
      const auto dy = static_cast<float>(std::sin(phi));
      int nearest = -1;
      float near_t0 = 0, near_t1 = 0;
      for (std::size_t b = 0; b < scene.boxes.size(); ++b) {
        float t0, t1;
        if (ray_box_interval(scene.boxes[b], dx, dy, t0, t1) && (nearest < 0 || t0 < near_t0)) {
          nearest = static_cast<int>(b);
          near_t0 = t0;
          near_t1 = t1;
        }
      }
      if (nearest < 0) continue;
      const double lo = near_t0 + jitter[static_cast<std::size_t>(nearest)];
      const double hi = near_t1 + jitter[static_cast<std::size_t>(nearest)];
      const auto cls = scene.boxes[static_cast<std::size_t>(nearest)].class_id;
      for (int v = 0; v < config.rows; ++v) {
        const double bin_lo = (config.rows - 1 - v) * bin;
        if (bin_lo + bin < lo || bin_lo > hi) continue;
        view.pixels[static_cast<std::size_t>(v) * config.cols + u] = texture_value(cls, v);
      }
    }
    for (auto& p : view.pixels) p = static_cast<float>(p + normal(rng, 0.0, config.noise_sigma));
    stream.views.push_back(std::move(view));
  }
  return stream;
}

BevGrid lidar_to_bev(const LidarSweep& sweep, const GridConfig& grid) {
  grid.validate();
  ++render_counters().lidar_projections;
  const auto h = static_cast<std::size_t>(grid.height), w = static_cast<std::size_t>(grid.width);
  const std::size_t plane = h * w;
  std::vector<double> count(plane, 0.0), high(plane, 0.0), sum(plane, 0.0), peak(plane, 0.0);
  for (const auto& p : sweep.points) {
    int r, c;
    if (!cell_of(grid, p.x, p.y, r, c)) continue;
    const std::size_t i = static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c);
    count[i] += 1.0;
    sum[i] += p.intensity;
    peak[i] = std::max(peak[i], static_cast<double>(p.intensity));
    if (p.intensity > 0.3f) high[i] += 1.0;
  }
  Tensor t(Shape{static_cast<std::size_t>(grid.channels), h, w});
  auto* out = t.mutable_data().data();
  const Lifter lifter{static_cast<std::size_t>(grid.channels) / 4, {8.0f, 1.0f, 1.0f, 4.0f}};
  for (std::size_t i = 0; i < plane; ++i) {
    if (count[i] == 0.0) continue;
    lifter.lift({count[i], peak[i], sum[i] / count[i], high[i]}, out, i, plane);
  }
  return {std::move(t), Modality::Lidar, grid.cell_size_m, 0};
}

BevGrid camera_to_bev(const CameraStream& stream, const GridConfig& grid, float foreground_threshold) {
  grid.validate();
  ++render_counters().camera_projections;
  const auto h = static_cast<std::size_t>(grid.height), w = static_cast<std::size_t>(grid.width);
  const std::size_t plane = h * w;
  const auto rows = static_cast<std::size_t>(stream.rows), cols = static_cast<std::size_t>(stream.cols);
  const double bin = stream.range_bin_m();
  std::vector<double> count(plane, 0.0), sum(plane, 0.0), peak(plane, 0.0), grad(plane, 0.0);
  for (const auto& view : stream.views) {
    if (view.pixels.size() != rows * cols) {
      throw DimensionError("camera view has " + std::to_string(view.pixels.size()) + " pixels, expected " +
                           std::to_string(rows * cols));
    }
    for (std::size_t v = 0; v < rows; ++v) {
      const float* row = view.pixels.data() + v * cols;
      const double background = median({row, row + cols});
      const double depth = (static_cast<double>(rows - 1 - v) + 0.5) * bin;
      for (std::size_t u = 0; u < cols; ++u) {
        const double value = row[u];
        if (value - background <= foreground_threshold) continue;
        const double phi = view.yaw + 0.5 * view.fov - (static_cast<double>(u) + 0.5) / cols * view.fov;
        int r, c;
        if (!cell_of(grid, static_cast<float>(depth * std::cos(phi)), static_cast<float>(depth * std::sin(phi)), r, c)) {
          continue;
        }
        const std::size_t i = static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c);
        count[i] += 1.0;
        sum[i] += value;
        peak[i] = std::max(peak[i], value);
        if (v + 1 < rows) grad[i] += std::abs(value - static_cast<double>(row[u + cols]));
      }
    }
  }
  Tensor t(Shape{static_cast<std::size_t>(grid.channels), h, w});
  auto* out = t.mutable_data().data();
  const Lifter lifter{static_cast<std::size_t>(grid.channels) / 4, {16.0f, 1.0f, 1.0f, 0.5f}};
  for (std::size_t i = 0; i < plane; ++i) {
    if (count[i] == 0.0) continue;
    lifter.lift({count[i], sum[i] / count[i], peak[i], grad[i] / count[i]}, out, i, plane);
  }
  return {std::move(t), Modality::Camera, grid.cell_size_m, 0};
}

void RenderCounters::reset() {
  lidar_renders = 0;
  camera_renders = 0;
  lidar_projections = 0;
  camera_projections = 0;
}

RenderCounters& render_counters() {
  static RenderCounters counters;
  return counters;
}

Sample generate_sample(std::uint64_t seed, const WorldConfig& world, const SensorConfig& sensors) {
  Sample s;
  s.scene = sample_scene(seed, world);
  s.lidar = render_lidar(s.scene, sensors.lidar);
  s.camera = render_camera(s.scene, sensors.camera);
  return s;
}

namespace {

constexpr std::string_view kDatasetMagic = "BFD1";

void put_vec2(binio::Writer& w, Vec2 v) {
  w.put(v.x);
  w.put(v.y);
}

Vec2 get_vec2(binio::Reader& r, const char* what) {
  Vec2 v;
  v.x = r.get<float>(what);
  v.y = r.get<float>(what);
  return v;
}

}  // namespace

std::string serialize_dataset(const Dataset& data) {
  binio::Writer w;
  w.put_bytes(kDatasetMagic);
  w.put<std::uint32_t>(kDatasetVersion);
  w.put<std::uint64_t>(data.config_hash);
  w.put<std::uint64_t>(data.samples.size());
  for (const auto& s : data.samples) {
    w.put<std::uint64_t>(s.scene.seed);
    w.put<float>(s.scene.extent_m);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.scene.boxes.size()));
    for (const auto& b : s.scene.boxes) {
      put_vec2(w, b.center_xy);
      put_vec2(w, b.size_lw);
      w.put(b.yaw);
      w.put(b.class_id);
      put_vec2(w, b.velocity_xy);
    }
    w.put<std::int32_t>(s.lidar.num_beams);
    w.put<float>(s.lidar.extent_m);
    w.put<std::uint64_t>(s.lidar.points.size());
    for (const auto& p : s.lidar.points) {
      w.put(p.x);
      w.put(p.y);
      w.put(p.intensity);
      w.put(p.beam_index);
    }
    w.put<std::int32_t>(s.camera.rows);
    w.put<std::int32_t>(s.camera.cols);
    w.put<float>(s.camera.max_range_m);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.camera.views.size()));
    for (const auto& v : s.camera.views) {
      w.put(v.yaw);
      w.put(v.fov);
      w.put<std::uint64_t>(v.pixels.size());
      w.put_array(v.pixels.data(), v.pixels.size());
    }
  }
  return std::move(w.str());
}

Dataset deserialize_dataset(std::string_view bytes) {
  binio::Reader r(bytes);
  if (r.get_bytes(kDatasetMagic.size(), "magic") != kDatasetMagic) throw IoError("not a BFD1 dataset (bad magic)", 0);
  const auto version_at = static_cast<std::int64_t>(r.offset());
  const auto version = r.get<std::uint32_t>("version");
  if (version != kDatasetVersion) {
    throw IoError("unsupported dataset version " + std::to_string(version), version_at);
  }
  Dataset data;
  data.config_hash = r.get<std::uint64_t>("config hash");
  const auto count = r.get<std::uint64_t>("sample count");
  for (std::uint64_t i = 0; i < count; ++i) {
    Sample s;
    s.scene.seed = r.get<std::uint64_t>("scene seed");
    s.scene.extent_m = r.get<float>("scene extent");
    const auto nbox = r.get<std::uint32_t>("box count");
    for (std::uint32_t b = 0; b < nbox; ++b) {
      ObjectBox box;
      box.center_xy = get_vec2(r, "box center");
      box.size_lw = get_vec2(r, "box size");
      box.yaw = r.get<float>("box yaw");
      box.class_id = r.get<std::int32_t>("box class");
      box.velocity_xy = get_vec2(r, "box velocity");
      s.scene.boxes.push_back(box);
    }
    s.lidar.num_beams = r.get<std::int32_t>("beam count");
    s.lidar.extent_m = r.get<float>("lidar extent");
    const auto npoints = r.get<std::uint64_t>("point count");
    if (npoints > (bytes.size() - r.offset()) / 16) {
      throw IoError("truncated input while reading lidar points", static_cast<std::int64_t>(r.offset()));
    }
    s.lidar.points.resize(npoints);
    for (auto& p : s.lidar.points) {
      p.x = r.get<float>("point");
      p.y = r.get<float>("point");
      p.intensity = r.get<float>("point");
      p.beam_index = r.get<std::int32_t>("point");
    }
    s.camera.rows = r.get<std::int32_t>("camera rows");
    s.camera.cols = r.get<std::int32_t>("camera cols");
    s.camera.max_range_m = r.get<float>("camera range");
    const auto nviews = r.get<std::uint32_t>("view count");
    for (std::uint32_t v = 0; v < nviews; ++v) {
      CameraView view;
      view.yaw = r.get<float>("view yaw");
      view.fov = r.get<float>("view fov");
      const auto npix = r.get<std::uint64_t>("pixel count");
      if (npix > (bytes.size() - r.offset()) / sizeof(float)) {
        throw IoError("truncated input while reading view pixels", static_cast<std::int64_t>(r.offset()));
      }
      view.pixels.resize(npix);
      r.get_array(view.pixels.data(), npix, "view pixels");
      s.camera.views.push_back(std::move(view));
    }
    data.samples.push_back(std::move(s));
  }
  if (!r.at_end()) throw IoError("trailing bytes after dataset", static_cast<std::int64_t>(r.offset()));
  return data;
}

void dataset_write(const std::filesystem::path& path, const Dataset& data) {
  write_file_atomic(path, serialize_dataset(data));
}

Dataset dataset_read(const std::filesystem::path& path) { return deserialize_dataset(read_file(path)); }

}  // namespace bevfuse
