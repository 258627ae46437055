#include "bevfuse/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

#include "json.hpp"

namespace bevfuse {

namespace {

std::string fixed6(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

std::string fixed4(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", x);
  return buf;
}

std::vector<CellKey> union_keys(const std::vector<MetricReport>& reports) {
  std::set<CellKey> keys;
  for (const auto& r : reports) {
    for (const auto& [k, v] : r.cells) keys.insert(k);
  }
  return {keys.begin(), keys.end()};
}

Sample corrupted(const Sample& s, CorruptionFamily family, int severity, const EvalConfig& config) {
  return corrupt_sample(s, {family, severity, config.corruption_seed}, config.lidar);
}

}  // namespace

void EvalConfig::validate() const {
  if (distance_thresholds_m.empty()) throw ConfigError("at least one distance threshold is required");
  for (std::size_t i = 0; i < distance_thresholds_m.size(); ++i) {
    if (!(distance_thresholds_m[i] > 0)) throw ConfigError("distance thresholds must be positive");
    if (i > 0 && !(distance_thresholds_m[i] > distance_thresholds_m[i - 1])) {
      throw ConfigError("distance thresholds must be strictly increasing");
    }
  }
  if (!(score_threshold > 0 && score_threshold < 1)) throw RangeError("score threshold must be in (0, 1)");
  for (int s : severities) {
    if (s < 1 || s > 3) throw RangeError("severity " + std::to_string(s) + " outside [1, 3]");
  }
  for (auto f : families) {
    if (f == CorruptionFamily::Clean) throw ConfigError("clean is always evaluated; list only corruption families");
  }
  if (regimes.empty()) throw ConfigError("at least one regime is required");
}

std::vector<MatchResult> match_detections(const std::vector<Detection>& preds, const std::vector<ObjectBox>& gts,
                                          double threshold_m) {
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return preds[a].score > preds[b].score; });
  std::vector<bool> taken(gts.size(), false);
  std::vector<MatchResult> out;
  out.reserve(preds.size());
  for (std::size_t i : order) {
    const auto& p = preds[i].box;
    std::optional<std::size_t> best;
    double best_d = 0.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g] || gts[g].class_id != p.class_id) continue;
      const double d = std::hypot(static_cast<double>(p.center_xy.x) - gts[g].center_xy.x,
                                  static_cast<double>(p.center_xy.y) - gts[g].center_xy.y);
      if (d <= threshold_m && (!best || d < best_d)) {
        best = g;
        best_d = d;
      }
    }
    if (best) taken[*best] = true;
    out.push_back({i, preds[i].score, best.has_value()});
  }
  return out;
}

double average_precision(std::vector<MatchResult> matches, std::size_t num_gt) {
  if (num_gt == 0) return matches.empty() ? 1.0 : 0.0;
  std::stable_sort(matches.begin(), matches.end(),
                   [](const MatchResult& a, const MatchResult& b) { return a.score > b.score; });
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < matches.size(); ++i) {
    if (matches[i].matched) ++tp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < matches.size(); ++i) {
    if (recall[i] > prev_recall) {
      ap += (recall[i] - prev_recall) * precision[i];
      prev_recall = recall[i];
    }
  }
  return ap;
}

double map_score(const std::vector<std::vector<double>>& ap) {
  if (ap.empty() || ap.front().empty()) throw ConfigError("map_score needs at least one (class, threshold) cell");
  const std::size_t thresholds = ap.front().size();
  double total = 0.0;
  for (std::size_t t = 0; t < thresholds; ++t) {
    double per_threshold = 0.0;
    for (const auto& row : ap) {
      if (row.size() != thresholds) throw DimensionError("ragged AP table");
      per_threshold += row[t];
    }
    total += per_threshold / static_cast<double>(ap.size());
  }
  return total / static_cast<double>(thresholds);
}

double compute_mra(double clean_value, const std::map<CellKey, double>& cells) {
  if (!(clean_value > 0)) throw RangeError("clean metric must be positive to compute mRA");
  if (cells.empty()) throw ConfigError("mRA needs at least one corruption family");
  std::set<CorruptionFamily> families;
  for (const auto& [k, v] : cells) families.insert(k.first);
  double sum = 0.0;
  for (auto f : families) {
    for (int s = 1; s <= 3; ++s) {
      const auto it = cells.find({f, s});
      if (it == cells.end()) {
        throw ConfigError("mRA: missing cell " + std::string(corruption_family_name(f)) + ":" + std::to_string(s));
      }
      sum += it->second / clean_value;
    }
  }
  if (cells.size() != 3 * families.size()) throw ConfigError("mRA: severities must be exactly 1, 2 and 3");
  return sum / (3.0 * static_cast<double>(families.size()));
}

double detection_map(const ParamStore& params, const ModelSpec& spec, const GridConfig& grid,
                     const DetectorConfig& detector, const std::vector<Sample>& samples, Regime regime,
                     const EvalConfig& config) {
  const std::size_t classes = static_cast<std::size_t>(detector.num_classes);
  const std::size_t thresholds = config.distance_thresholds_m.size();
  std::vector<std::vector<MatchResult>> pooled(classes * thresholds);
  std::vector<std::size_t> num_gt(classes, 0);
  const Availability avail = availability_of(regime);
  const FusionStep step{};

  for (const auto& s : samples) {
    std::optional<BevGrid> f_lid, f_cam;
    if (avail.lidar) f_lid = lidar_to_bev(s.lidar, grid);
    if (avail.camera) f_cam = camera_to_bev(s.camera, grid, config.camera_foreground_threshold);
    const auto pred = forward_model(spec, avail, f_lid ? &*f_lid : nullptr, f_cam ? &*f_cam : nullptr, step, params);
    const auto dets = decode(pred, grid, config.score_threshold, detector.nms_radius_m);
    for (const auto& b : s.scene.boxes) ++num_gt.at(static_cast<std::size_t>(b.class_id));
    for (std::size_t t = 0; t < thresholds; ++t) {
      for (const auto& m : match_detections(dets, s.scene.boxes, config.distance_thresholds_m[t])) {
        const auto c = static_cast<std::size_t>(dets[m.pred_index].box.class_id);
        pooled[c * thresholds + t].push_back(m);
      }
    }
  }

  std::vector<std::vector<double>> ap(classes, std::vector<double>(thresholds));
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t t = 0; t < thresholds; ++t) ap[c][t] = average_precision(pooled[c * thresholds + t], num_gt[c]);
  }
  return map_score(ap);
}

std::vector<MetricReport> evaluate(const ParamStore& params, const ModelSpec& spec, const GridConfig& grid,
                                   const DetectorConfig& detector, const Dataset& data, const EvalConfig& config) {
  config.validate();
  if (data.samples.empty()) throw ConfigError("evaluation dataset is empty");
  std::vector<MetricReport> reports;
  for (auto regime : config.regimes) {
    MetricReport r;
    r.regime = regime;
    r.clean_value = detection_map(params, spec, grid, detector, data.samples, regime, config);
    const Availability avail = availability_of(regime);
    for (auto family : config.families) {
      const bool seen = targets_lidar(family) ? avail.lidar : avail.camera;
      for (int sev : config.severities) {
        if (!seen) {
          r.cells[{family, sev}] = r.clean_value;
          continue;
        }
        std::vector<Sample> corrupted_samples;
        corrupted_samples.reserve(data.samples.size());
        for (const auto& s : data.samples) corrupted_samples.push_back(corrupted(s, family, sev, config));
        r.cells[{family, sev}] = detection_map(params, spec, grid, detector, corrupted_samples, regime, config);
      }
    }
    if (!r.cells.empty() && r.clean_value > 0) {
      try {
        r.mra = compute_mra(r.clean_value, r.cells);
      } catch (const ConfigError&) {
        // partial severity sweeps have no mRA
      }
    }
    reports.push_back(std::move(r));
  }
  return reports;
}

std::string report_to_csv(const std::vector<MetricReport>& reports) {
  std::ostringstream os;
  os << "family,severity";
  for (const auto& r : reports) os << "," << r.metric_name << "_" << regime_name(r.regime);
  os << "\n";
  if (reports.empty()) return os.str();
  os << "clean,0";
  for (const auto& r : reports) os << "," << fixed6(r.clean_value);
  os << "\n";
  for (const auto& key : union_keys(reports)) {
    os << corruption_family_name(key.first) << "," << key.second;
    for (const auto& r : reports) {
      const auto it = r.cells.find(key);
      os << ",";
      if (it != r.cells.end()) os << fixed6(it->second);
    }
    os << "\n";
  }
  os << "mRA,";
  for (const auto& r : reports) {
    os << ",";
    if (r.mra) os << fixed6(*r.mra);
  }
  os << "\n";
  return os.str();
}

std::string report_to_json(const std::vector<MetricReport>& reports) {
  nlohmann::ordered_json doc;
  doc["reports"] = nlohmann::ordered_json::array();
  for (const auto& r : reports) {
    nlohmann::ordered_json j;
    j["regime"] = regime_name(r.regime);
    j["metric"] = r.metric_name;
    j["clean"] = r.clean_value;
    j["cells"] = nlohmann::ordered_json::array();
    for (const auto& [key, value] : r.cells) {
      j["cells"].push_back({{"family", corruption_family_name(key.first)}, {"severity", key.second}, {"value", value}});
    }
    j["mra"] = r.mra ? nlohmann::ordered_json(*r.mra) : nlohmann::ordered_json(nullptr);
    doc["reports"].push_back(std::move(j));
  }
  return doc.dump(2) + "\n";
}

std::vector<MetricReport> report_from_json(std::string_view text) {
  std::vector<MetricReport> out;
  try {
    const auto doc = nlohmann::json::parse(text);
    for (const auto& j : doc.at("reports")) {
      MetricReport r;
      r.regime = parse_regime(j.at("regime").get<std::string>());
      r.metric_name = j.at("metric").get<std::string>();
      r.clean_value = j.at("clean").get<double>();
      for (const auto& c : j.at("cells")) {
        r.cells[{parse_corruption_family(c.at("family").get<std::string>()), c.at("severity").get<int>()}] =
            c.at("value").get<double>();
      }
      if (!j.at("mra").is_null()) r.mra = j.at("mra").get<double>();
      out.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed report: ") + e.what());
  }
  return out;
}

void emit_report(const std::vector<MetricReport>& reports, const std::filesystem::path& path, ReportFormat format) {
  write_file_atomic(path, format == ReportFormat::Csv ? report_to_csv(reports) : report_to_json(reports));
}

std::string report_to_markdown(const std::vector<MetricReport>& reports) {
  std::ostringstream os;
  os << "| corruption | severity |";
  for (const auto& r : reports) os << " " << r.metric_name << " (" << regime_name(r.regime) << ") |";
  os << "\n|---|---|";
  for (std::size_t i = 0; i < reports.size(); ++i) os << "---|";
  os << "\n| clean | - |";
  for (const auto& r : reports) os << " " << fixed4(r.clean_value) << " |";
  os << "\n";
  for (const auto& key : union_keys(reports)) {
    os << "| " << corruption_family_name(key.first) << " | " << key.second << " |";
    for (const auto& r : reports) {
      const auto it = r.cells.find(key);
      os << " " << (it == r.cells.end() ? std::string("-") : fixed4(it->second)) << " |";
    }
    os << "\n";
  }
  os << "| mRA | - |";
  for (const auto& r : reports) os << " " << (r.mra ? fixed4(*r.mra) : std::string("-")) << " |";
  os << "\n";
  return os.str();
}

}  // namespace bevfuse
