#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bevfuse/trainer.hpp"

namespace bevfuse {

struct EvalConfig {
  std::vector<double> distance_thresholds_m{0.5, 1.0, 2.0, 4.0};
  float score_threshold = 0.05f;
  std::vector<CorruptionFamily> families{CorruptionFamily::BeamReduce, CorruptionFamily::Fog,
                                         CorruptionFamily::MotionBlur, CorruptionFamily::SpatialMisalign,
                                         CorruptionFamily::TemporalMisalign};
  std::vector<int> severities{1, 2, 3};
  std::vector<Regime> regimes{Regime::LC, Regime::L, Regime::C};
  std::uint64_t corruption_seed = 11;
  LidarConfig lidar;  // re-renders temporal corruptions
  float camera_foreground_threshold = CameraConfig{}.foreground_threshold;

  void validate() const;
};

struct MatchResult {
  std::size_t pred_index = 0;
  float score = 0.0f;
  bool matched = false;
};

// Greedy in (score desc, input order): each prediction takes the nearest
// unmatched same-class ground truth whose center lies within threshold_m.
std::vector<MatchResult> match_detections(const std::vector<Detection>& preds, const std::vector<ObjectBox>& gts,
                                          double threshold_m);

// Area under the monotone-interpolated precision/recall curve of the pooled
// matches (sorted by score, stable). 1 when there is nothing to find and
// nothing was predicted.
double average_precision(std::vector<MatchResult> matches, std::size_t num_gt);

// Mean over classes, then over distance thresholds; ap[class][threshold].
double map_score(const std::vector<std::vector<double>>& ap);

using CellKey = std::pair<CorruptionFamily, int>;

// Mean over families and severities of cell / clean. Every family present
// must have severities 1, 2 and 3.
double compute_mra(double clean_value, const std::map<CellKey, double>& cells);

struct MetricReport {
  Regime regime = Regime::LC;
  std::string metric_name = "mAP";
  double clean_value = 0.0;
  std::map<CellKey, double> cells;
  std::optional<double> mra;  // absent without corruption cells or with a zero clean value
};

// mAP of a model on a list of samples, all run under one availability.
double detection_map(const ParamStore& params, const ModelSpec& spec, const GridConfig& grid,
                     const DetectorConfig& detector, const std::vector<Sample>& samples, Regime regime,
                     const EvalConfig& config);

// One report per configured regime, each with a clean value and every
// (family, severity) cell. Cells whose family targets a sensor the regime
// never sees reuse the clean value.
std::vector<MetricReport> evaluate(const ParamStore& params, const ModelSpec& spec, const GridConfig& grid,
                                   const DetectorConfig& detector, const Dataset& data, const EvalConfig& config);

enum class ReportFormat { Csv, Json };

std::string report_to_csv(const std::vector<MetricReport>& reports);
std::string report_to_json(const std::vector<MetricReport>& reports);
std::vector<MetricReport> report_from_json(std::string_view text);
// Atomic write.
void emit_report(const std::vector<MetricReport>& reports, const std::filesystem::path& path, ReportFormat format);

// Text table of the corruption x severity matrix, one column per report.
std::string report_to_markdown(const std::vector<MetricReport>& reports);

}  // namespace bevfuse
