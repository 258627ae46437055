#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "bevfuse/error.hpp"
#include "bevfuse/eval.hpp"
#include "doctest.h"

using namespace bevfuse;
namespace fs = std::filesystem;

namespace {

ObjectBox box_at(float x, float y, int cls = 0) {
  ObjectBox b;
  b.center_xy = {x, y};
  b.size_lw = {4.0f, 2.0f};
  b.class_id = cls;
  return b;
}

Detection det_at(float x, float y, float score, int cls = 0) {
  Detection d;
  d.box = box_at(x, y, cls);
  d.score = score;
  return d;
}

double center_distance(const ObjectBox& a, const ObjectBox& b) {
  return std::hypot(double(a.center_xy.x) - b.center_xy.x, double(a.center_xy.y) - b.center_xy.y);
}

// Lexicographically smallest per-prediction distance vector (score order,
// unmatched = +inf) over every one-to-one partial assignment.
std::vector<int> brute_force_assignment(const std::vector<Detection>& preds, const std::vector<ObjectBox>& gts,
                                        double threshold) {
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return preds[a].score > preds[b].score; });

  std::vector<int> assign(preds.size(), -1), best;
  std::vector<double> best_key;
  std::vector<bool> used(gts.size(), false);
  const double inf = std::numeric_limits<double>::infinity();

  auto key_of = [&] {
    std::vector<double> k;
    for (auto p : order) k.push_back(assign[p] < 0 ? inf : center_distance(preds[p].box, gts[assign[p]]));
    return k;
  };
  auto recurse = [&](auto&& self, std::size_t i) -> void {
    if (i == order.size()) {
      auto k = key_of();
      if (best.empty() || k < best_key) {
        best_key = k;
        best = assign;
      }
      return;
    }
    const auto p = order[i];
    assign[p] = -1;
    self(self, i + 1);
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].class_id != preds[p].box.class_id) continue;
      if (center_distance(preds[p].box, gts[g]) > threshold) continue;
      used[g] = true;
      assign[p] = static_cast<int>(g);
      self(self, i + 1);
      used[g] = false;
      assign[p] = -1;
    }
  };
  recurse(recurse, 0);
  return best;
}

std::vector<bool> matched_flags(const std::vector<MatchResult>& m, std::size_t n) {
  std::vector<bool> out(n, false);
  for (const auto& r : m) out[r.pred_index] = r.matched;
  return out;
}

std::vector<MatchResult> ranked(std::initializer_list<bool> hits) {
  std::vector<MatchResult> out;
  float score = 1.0f;
  for (bool h : hits) {
    out.push_back({out.size(), score, h});
    score -= 0.1f;
  }
  return out;
}

std::map<CellKey, double> reference_cells() {
  const double v[15] = {0.6338, 0.4818, 0.3052, 0.6476, 0.5978, 0.3453, 0.6687, 0.5865,
                        0.4991, 0.5836, 0.4937, 0.4243, 0.6276, 0.5394, 0.4676};
  const CorruptionFamily fams[5] = {CorruptionFamily::BeamReduce, CorruptionFamily::Fog, CorruptionFamily::MotionBlur,
                                    CorruptionFamily::SpatialMisalign, CorruptionFamily::TemporalMisalign};
  std::map<CellKey, double> cells;
  for (int f = 0; f < 5; ++f)
    for (int s = 1; s <= 3; ++s) cells[{fams[f], s}] = v[f * 3 + s - 1];
  return cells;
}

struct TinyModel {
  ModelSpec spec;
  GridConfig grid;
  DetectorConfig detector;
  ParamStore params;
  Dataset data;
};

const TinyModel& tiny_model() {
  static const TinyModel m = [] {
    TinyModel t;
    TrainConfig c;
    c.grid.height = 16;
    c.grid.width = 16;
    c.grid.cell_size_m = 2.0f;
    c.grid.channels = 8;
    c.detector.encoder_width = 8;
    c.batch_size = 4;
    c.epochs = 4;
    c.learning_rate = 3e-3;
    Dataset train;
    for (std::uint64_t i = 0; i < 8; ++i) train.samples.push_back(generate_sample(500 + i, WorldConfig{}, SensorConfig{}));
    t.spec = c.model_spec();
    t.grid = c.grid;
    t.detector = c.detector;
    train_model(train, c, t.params);
    for (std::uint64_t i = 0; i < 4; ++i) t.data.samples.push_back(generate_sample(900 + i, WorldConfig{}, SensorConfig{}));
    return t;
  }();
  return m;
}

EvalConfig small_eval() {
  EvalConfig e;
  e.families = {CorruptionFamily::BeamReduce, CorruptionFamily::Fog};
  return e;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("match_detections: coincident predictions all match") {
  const std::vector<ObjectBox> gts{box_at(0, 0), box_at(10, 0), box_at(0, 10, 1)};
  const std::vector<Detection> preds{det_at(0, 0, 0.9f), det_at(10, 0, 0.8f), det_at(0, 10, 0.7f, 1)};
  const auto m = match_detections(preds, gts, 0.5);
  REQUIRE(m.size() == 3);
  for (const auto& r : m) CHECK(r.matched);
}

TEST_CASE("match_detections: one-to-one, higher score wins") {
  const std::vector<ObjectBox> gts{box_at(0, 0)};
  const std::vector<Detection> preds{det_at(0.1f, 0, 0.3f), det_at(0.2f, 0, 0.9f)};
  const auto flags = matched_flags(match_detections(preds, gts, 1.0), 2);
  CHECK_FALSE(flags[0]);
  CHECK(flags[1]);
}

TEST_CASE("match_detections: never across classes or beyond the threshold") {
  const std::vector<ObjectBox> gts{box_at(0, 0, 0), box_at(5, 0, 1)};
  const std::vector<Detection> preds{det_at(0, 0, 0.9f, 1), det_at(5.6f, 0, 0.8f, 1), det_at(0.4f, 0, 0.7f, 0)};
  const auto flags = matched_flags(match_detections(preds, gts, 0.5), 3);
  CHECK_FALSE(flags[0]);
  CHECK_FALSE(flags[1]);
  CHECK(flags[2]);
}

TEST_CASE("match_detections: handcrafted case agrees with brute force") {
  const std::vector<ObjectBox> gts{box_at(0, 0), box_at(1.5f, 0), box_at(20, 20, 1)};
  // The top prediction sits between two gts and takes the nearer one, which
  // leaves the third-ranked prediction unmatched at 1 m.
  const std::vector<Detection> preds{det_at(0.9f, 0, 0.95f), det_at(20.5f, 20, 0.9f, 1), det_at(1.8f, 0, 0.6f),
                                     det_at(0.1f, 0.1f, 0.6f)};
  for (double thr : {0.5, 1.0, 2.0, 4.0}) {
    CAPTURE(thr);
    const auto m = match_detections(preds, gts, thr);
    const auto oracle = brute_force_assignment(preds, gts, thr);
    const auto flags = matched_flags(m, preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i) CHECK(flags[i] == (oracle[i] >= 0));
  }
  const auto flags = matched_flags(match_detections(preds, gts, 2.0), 4);
  CHECK(flags == std::vector<bool>{true, true, true, false});
  const auto tight = matched_flags(match_detections(preds, gts, 1.0), 4);
  CHECK(tight == std::vector<bool>{true, true, false, true});
}

TEST_CASE("match_detections: random scenes agree with brute force") {
  Rng rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<ObjectBox> gts;
    std::vector<Detection> preds;
    const int ng = 1 + static_cast<int>(uniform01(rng) * 4);
    const int np = 1 + static_cast<int>(uniform01(rng) * 5);
    for (int i = 0; i < ng; ++i)
      gts.push_back(box_at(float(uniform(rng, 0, 4)), float(uniform(rng, 0, 4)), uniform01(rng) < 0.5 ? 0 : 1));
    for (int i = 0; i < np; ++i)
      preds.push_back(det_at(float(uniform(rng, 0, 4)), float(uniform(rng, 0, 4)), float(std::round(uniform01(rng) * 4) / 4),
                             uniform01(rng) < 0.5 ? 0 : 1));
    const double thr = uniform(rng, 0.5, 3.0);
    const auto oracle = brute_force_assignment(preds, gts, thr);
    const auto flags = matched_flags(match_detections(preds, gts, thr), preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i) CHECK(flags[i] == (oracle[i] >= 0));
  }
}

TEST_CASE("average_precision examples") {
  // Interpolated precision 1, 0.75, 0.75 over recall steps of 0.25.
  CHECK(average_precision(ranked({true, false, true, true, false}), 4) == doctest::Approx(0.625).epsilon(1e-12));
  CHECK(average_precision(ranked({true, true, true}), 3) == doctest::Approx(1.0));
  CHECK(average_precision({}, 3) == 0.0);
  CHECK(average_precision({}, 0) == 1.0);
  CHECK(average_precision(ranked({false, false}), 0) == 0.0);
  CHECK(average_precision(ranked({false, true}), 1) == doctest::Approx(0.5));
}

TEST_CASE("average_precision: input order of distinct scores is irrelevant, ties follow input order") {
  auto m = ranked({true, false, true, true, false, false, true});
  const double ref = average_precision(m, 5);
  std::reverse(m.begin(), m.end());
  CHECK(average_precision(m, 5) == ref);
  std::rotate(m.begin(), m.begin() + 3, m.end());
  CHECK(average_precision(m, 5) == ref);

  std::vector<MatchResult> tied{{0, 0.5f, true}, {1, 0.5f, false}, {2, 0.5f, true}};
  const double a = average_precision(tied, 2);
  CHECK(average_precision(tied, 2) == a);
  CHECK(a == doctest::Approx(2.0 / 3.0 * 0.5 + 0.5 * 1.0));
}

TEST_CASE("map_score examples") {
  CHECK(map_score({{1, 1}, {1, 1}}) == 1.0);
  CHECK(map_score({{0, 0, 0}}) == 0.0);
  CHECK(map_score({{0.2, 0.4}}) == doctest::Approx(0.3));
  CHECK(map_score({{0.2}, {0.4}}) == doctest::Approx(0.3));
  CHECK_THROWS(map_score({}));
}

TEST_CASE("compute_mra examples") {
  auto cells = reference_cells();
  CHECK(std::abs(compute_mra(0.7033, cells) - 0.7490) <= 0.0005);

  for (auto& [k, v] : cells) v = 0.42;
  CHECK(compute_mra(0.42, cells) == doctest::Approx(1.0).epsilon(1e-12));

  cells.begin()->second = 0.21;
  std::next(cells.begin())->second = 0.21;
  std::next(cells.begin(), 2)->second = 0.21;
  CHECK(compute_mra(0.42, cells) == doctest::Approx(0.9).epsilon(1e-12));
}

TEST_CASE("compute_mra: homogeneous in the metric scale") {
  const auto cells = reference_cells();
  const double ref = compute_mra(0.7033, cells);
  for (double k : {0.25, 3.0, 1e3}) {
    auto scaled = cells;
    for (auto& [key, v] : scaled) v *= k;
    CHECK(compute_mra(0.7033 * k, scaled) == doctest::Approx(ref).epsilon(1e-12));
  }
}

TEST_CASE("compute_mra errors") {
  auto cells = reference_cells();
  CHECK_THROWS_AS(compute_mra(0.0, cells), RangeError);
  CHECK_THROWS_AS(compute_mra(-1.0, cells), RangeError);
  CHECK_THROWS_AS(compute_mra(0.7, {}), ConfigError);
  cells.erase({CorruptionFamily::Fog, 2});
  CHECK_THROWS_AS(compute_mra(0.7, cells), ConfigError);
  cells[{CorruptionFamily::Fog, 2}] = 0.5;
  cells[{CorruptionFamily::Fog, 4}] = 0.5;
  CHECK_THROWS_AS(compute_mra(0.7, cells), ConfigError);
}

TEST_CASE("evaluate: clean-only config has no cells and no mRA") {
  const auto& m = tiny_model();
  EvalConfig e;
  e.families.clear();
  const auto reports = evaluate(m.params, m.spec, m.grid, m.detector, m.data, e);
  REQUIRE(reports.size() == 3);
  for (const auto& r : reports) {
    CHECK(r.cells.empty());
    CHECK_FALSE(r.mra.has_value());
  }
}

TEST_CASE("evaluate: deterministic and internally consistent") {
  const auto& m = tiny_model();
  const auto e = small_eval();
  const auto a = evaluate(m.params, m.spec, m.grid, m.detector, m.data, e);
  const auto b = evaluate(m.params, m.spec, m.grid, m.detector, m.data, e);
  CHECK(report_to_json(a) == report_to_json(b));
  REQUIRE(a.size() == 3);
  bool any_mra = false;
  for (const auto& r : a) {
    CHECK(r.cells.size() == 6);
    CHECK(r.clean_value >= 0.0);
    CHECK(r.clean_value <= 1.0);
    if (r.mra) {
      any_mra = true;
      CHECK(std::abs(compute_mra(r.clean_value, r.cells) - *r.mra) <= 1e-9);
    }
  }
  CHECK(any_mra);
  // LiDAR-only never sees the camera, so fog cells repeat the clean value.
  const auto& l = a[1];
  CHECK(l.regime == Regime::L);
  for (int s = 1; s <= 3; ++s) CHECK(l.cells.at({CorruptionFamily::Fog, s}) == l.clean_value);
}

TEST_CASE("evaluate: LiDAR-only never projects the camera") {
  const auto& m = tiny_model();
  auto e = small_eval();
  e.regimes = {Regime::L};
  render_counters().reset();
  evaluate(m.params, m.spec, m.grid, m.detector, m.data, e);
  CHECK(render_counters().camera_projections == 0);
  CHECK(render_counters().camera_renders == 0);
  CHECK(render_counters().lidar_projections > 0);
}

TEST_CASE("report emission") {
  const auto dir = fs::temp_directory_path() / "bevfuse_eval_reports";
  fs::remove_all(dir);
  fs::create_directories(dir);

  MetricReport r;
  r.regime = Regime::L;
  r.clean_value = 0.7033;
  r.cells = reference_cells();
  r.cells[{CorruptionFamily::Fog, 1}] = 0.1 + 0.2;
  r.mra = compute_mra(r.clean_value, r.cells);
  MetricReport c;
  c.regime = Regime::C;
  c.clean_value = 1.0 / 3.0;
  const std::vector<MetricReport> reports{r, c};

  const auto json = report_to_json(reports);
  const auto parsed = report_from_json(json);
  CHECK(report_to_json(parsed) == json);
  REQUIRE(parsed.size() == 2);
  CHECK(parsed[0].cells.at({CorruptionFamily::Fog, 1}) == 0.1 + 0.2);
  CHECK(parsed[0].mra == r.mra);
  CHECK(parsed[1].clean_value == 1.0 / 3.0);
  CHECK_FALSE(parsed[1].mra.has_value());

  const auto csv = report_to_csv(reports);
  CHECK(csv.rfind("family,severity,mAP_l,mAP_c\n", 0) == 0);
  CHECK(csv.find("\nclean,0,0.703300,0.333333\n") != std::string::npos);

  emit_report(reports, dir / "r.json", ReportFormat::Json);
  emit_report(reports, dir / "r.csv", ReportFormat::Csv);
  CHECK(slurp(dir / "r.json") == json);
  CHECK(slurp(dir / "r.csv") == csv);

  emit_report({}, dir / "empty.json", ReportFormat::Json);
  emit_report({}, dir / "empty.csv", ReportFormat::Csv);
  CHECK(report_from_json(slurp(dir / "empty.json")).empty());
  CHECK(slurp(dir / "empty.csv") == "family,severity\n");
}
