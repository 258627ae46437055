#include "cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "bevfuse/config.hpp"
#include "bevfuse/grad_suite.hpp"

namespace bevfuse::cli {

namespace {

namespace fs = std::filesystem;

std::string hex(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

Dataset read_dataset_checked(const fs::path& path, std::uint64_t expected_hash) {
  if (!fs::exists(path)) throw IoError("dataset not found: " + path.string());
  auto d = dataset_read(path);
  if (d.config_hash != expected_hash) {
    throw HashMismatchError("dataset " + path.string() + " was generated under config hash " + hex(d.config_hash) +
                            ", current config has " + hex(expected_hash));
  }
  return d;
}

struct Options {
  std::string config;
  std::string dataset;
  std::string checkpoint;
  std::string out;
  std::string regimes;
  std::string spec;
  std::string format = "both";
  std::string mode;
  std::string inject_fault;
  std::optional<std::uint64_t> seed_override;
  std::size_t num_samples = 0;
  std::size_t count = 4;
  bool markdown = false;
  std::vector<std::string> inputs;
};

int cmd_gen_data(const Options& o, std::ostream& out) {
  const auto config = load_experiment_config(o.config);
  if (o.num_samples < 1) throw ConfigError("--num-samples must be >= 1");
  const std::uint64_t seed = o.seed_override.value_or(config.data.seed);
  const auto data = generate_dataset(config, o.num_samples, seed);
  dataset_write(o.out, data);
  std::size_t boxes = 0;
  for (const auto& s : data.samples) boxes += s.scene.boxes.size();
  out << "samples=" << data.samples.size() << " boxes=" << boxes << " seed=" << seed
      << " data_hash=" << hex(data.config_hash) << " out=" << o.out << "\n";
  return kOk;
}

int cmd_train(const Options& o, std::ostream& out) {
  auto config = load_experiment_config(o.config);
  if (!o.mode.empty()) config.train.mode = parse_train_mode(o.mode);
  if (o.seed_override) {
    config.train.shuffle_seed = *o.seed_override;
    config.train.init_seed = derive_seed(*o.seed_override, 1);
  }
  config.train.validate();
  read_dataset_checked(o.dataset, data_hash(config));
  const auto report = run_training(o.dataset, config.train, o.out);
  out << "mode=" << train_mode_name(report.mode) << " epochs=" << report.epochs << " steps=" << report.total_steps
      << " final_loss=" << num(report.step_losses.back()) << " wall_s=" << num(report.wall_seconds) << "\n";
  for (const auto& [regime, loss] : report.regime_mean_loss) {
    out << "regime=" << regime_name(regime) << " mean_loss=" << num(loss) << "\n";
  }
  out << "checkpoint=" << o.out << "\n";
  return kOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  auto config = load_experiment_config(o.config);
  if (!fs::exists(o.checkpoint)) throw IoError("checkpoint not found: " + o.checkpoint);
  const auto manifest = load_manifest(o.checkpoint);
  config.train.mode = parse_train_mode(manifest.mode);
  const ModelSpec spec = config.train.model_spec();
  const auto params = load_checkpoint(o.checkpoint, model_config_hash(spec, config.train.grid, config.train.detector));
  const auto data = read_dataset_checked(o.dataset, data_hash(config));

  EvalConfig ec = config.eval;
  if (!o.regimes.empty()) {
    ec.regimes.clear();
    for (const auto& r : split_commas(o.regimes)) ec.regimes.push_back(parse_regime(r));
  }
  if (!o.spec.empty()) {
    const auto cell = parse_corruption_spec(o.spec);
    ec.families.clear();
    ec.severities.clear();
    if (cell.family != CorruptionFamily::Clean) {
      ec.families.push_back(cell.family);
      ec.severities.push_back(cell.severity);
    }
  }
  if (o.format != "csv" && o.format != "json" && o.format != "both") {
    throw ConfigError("--format must be csv, json or both");
  }
  const auto reports = evaluate(params, spec, config.train.grid, config.train.detector, data, ec);

  const fs::path dir = o.out;
  fs::create_directories(dir);
  const std::string run_id = fs::path(o.checkpoint).filename().string();
  for (const auto& r : reports) {
    const std::string stem = run_id + "." + std::string(regime_name(r.regime)) + ".report";
    if (o.format != "json") emit_report({r}, dir / (stem + ".csv"), ReportFormat::Csv);
    if (o.format != "csv") emit_report({r}, dir / (stem + ".json"), ReportFormat::Json);
    out << "regime=" << regime_name(r.regime) << " clean_" << r.metric_name << "=" << num(r.clean_value)
        << " mRA=" << (r.mra ? num(*r.mra) : std::string("nan")) << "\n";
  }
  const auto& first = reports.front();
  out << "mRA=" << (first.mra ? num(*first.mra) : std::string("nan")) << "\n";
  return kOk;
}

int cmd_grad_check(const Options& o, std::ostream& out) {
  if (!o.config.empty()) load_experiment_config(o.config);
  if (!o.inject_fault.empty()) {
    const auto colon = o.inject_fault.find(':');
    const double factor = colon == std::string::npos ? 1.05 : std::stod(o.inject_fault.substr(colon + 1));
    debug::set_backward_fault(o.inject_fault.substr(0, colon), factor);
  }
  const auto results = run_grad_suite();
  debug::clear_backward_fault();
  constexpr double kTolerance = 1e-3;
  const GradSuiteEntry* worst = nullptr;
  for (const auto& e : results) {
    const bool pass = e.result.max_relative_error < kTolerance && e.result.coordinates_checked > 0;
    char line[256];
    std::snprintf(line, sizeof line, "%-28s max_rel_err=%.3e checked=%zu skipped=%zu %s\n", e.name.c_str(),
                  e.result.max_relative_error, e.result.coordinates_checked, e.result.kink_crossings_skipped,
                  pass ? "PASS" : "FAIL");
    out << line;
    if (!worst || e.result.max_relative_error > worst->result.max_relative_error) worst = &e;
  }
  const bool ok = worst && worst->result.max_relative_error < kTolerance;
  out << (ok ? "grad-check passed" : "grad-check FAILED") << ", worst " << worst->name << " max_rel_err="
      << worst->result.max_relative_error << "\n";
  return ok ? kOk : kGradCheck;
}

struct SweepStats {
  double var = 0.0, cx = 0.0, cy = 0.0;
};

SweepStats lidar_stats(const LidarSweep& s) {
  SweepStats st;
  if (s.points.empty()) return st;
  double m = 0.0;
  for (const auto& p : s.points) {
    m += p.intensity;
    st.cx += p.x;
    st.cy += p.y;
  }
  const double n = static_cast<double>(s.points.size());
  m /= n;
  st.cx /= n;
  st.cy /= n;
  for (const auto& p : s.points) st.var += (p.intensity - m) * (p.intensity - m);
  st.var /= n;
  return st;
}

double pixel_variance(const CameraStream& c) {
  double m = 0.0, q = 0.0;
  std::size_t n = 0;
  for (const auto& v : c.views) {
    for (float p : v.pixels) m += p, ++n;
  }
  if (n == 0) return 0.0;
  m /= static_cast<double>(n);
  for (const auto& v : c.views) {
    for (float p : v.pixels) q += (p - m) * (p - m);
  }
  return q / static_cast<double>(n);
}

double mean_abs_change(const CameraStream& a, const CameraStream& b) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < a.views.size(); ++k) {
    for (std::size_t i = 0; i < a.views[k].pixels.size(); ++i) {
      total += std::abs(static_cast<double>(a.views[k].pixels[i]) - b.views[k].pixels[i]);
      ++n;
    }
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

int cmd_corrupt_preview(const Options& o, std::ostream& out) {
  const auto config = load_experiment_config(o.config);
  const auto spec = parse_corruption_spec(o.spec, config.eval.corruption_seed);
  const auto data = read_dataset_checked(o.dataset, data_hash(config));
  Dataset preview;
  preview.config_hash = data.config_hash;
  std::ostringstream summary;
  summary << "spec " << spec.str() << "\n";
  const std::size_t n = std::min(o.count, data.samples.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& clean = data.samples[i];
    auto bad = corrupt_sample(clean, spec, config.sensors.lidar);
    const auto a = lidar_stats(clean.lidar), b = lidar_stats(bad.lidar);
    const auto before = clean.lidar.points.size(), after = bad.lidar.points.size();
    const double dropped = before > after ? static_cast<double>(before - after) : 0.0;
    summary << "sample " << i << " seed=" << clean.scene.seed << " lidar_points=" << before << "->" << after
            << " dropped_fraction=" << num(before ? dropped / static_cast<double>(before) : 0.0)
            << " lidar_intensity_var_change=" << num(b.var - a.var)
            << " lidar_centroid_shift_m=" << num(std::hypot(b.cx - a.cx, b.cy - a.cy))
            << " camera_pixel_var_change=" << num(pixel_variance(bad.camera) - pixel_variance(clean.camera))
            << " camera_mean_abs_change=" << num(mean_abs_change(clean.camera, bad.camera)) << "\n";
    preview.samples.push_back(std::move(bad));
  }
  dataset_write(o.out, preview);
  write_file_atomic(o.out + ".summary.txt", summary.str());
  out << summary.str();
  return kOk;
}

int cmd_report(const Options& o, std::ostream& out) {
  if (!o.markdown) throw ConfigError("report: only --markdown output is supported");
  std::vector<MetricReport> all;
  for (const auto& path : o.inputs) {
    if (!fs::exists(path)) throw IoError("report not found: " + path);
    for (auto& r : report_from_json(read_file(path))) all.push_back(std::move(r));
  }
  out << report_to_markdown(all);
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Single-branch BEV fusion experiments"};
  app.require_subcommand(1);
  Options o;
  std::optional<std::uint64_t> seed;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("--config", o.config, "Experiment config (JSON)")->required();
  gen->add_option("--out", o.out, "Output dataset path")->required();
  gen->add_option("--num-samples", o.num_samples, "Number of samples")->required();
  gen->add_option("--seed-override", seed, "Replace the config's data seed");

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", o.config)->required();
  train->add_option("--dataset", o.dataset)->required();
  train->add_option("--out", o.out, "Output checkpoint path")->required();
  train->add_option("--mode", o.mode, "three_regime, pmd or baseline");
  train->add_option("--seed-override", seed, "Replace the shuffle and init seeds");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint under corruptions");
  eval->add_option("--config", o.config)->required();
  eval->add_option("--checkpoint", o.checkpoint)->required();
  eval->add_option("--dataset", o.dataset)->required();
  eval->add_option("--out", o.out, "Report directory")->required();
  eval->add_option("--regimes", o.regimes, "Comma list of lc, l, c");
  eval->add_option("--spec", o.spec, "Single corruption cell family:severity");
  eval->add_option("--format", o.format, "csv, json or both");

  auto* grad = app.add_subcommand("grad-check", "Finite-difference gradient checks");
  grad->add_option("--config", o.config);
  grad->add_option("--inject-fault", o.inject_fault, "op[:factor] scales that op's backward");

  auto* preview = app.add_subcommand("corrupt-preview", "Write corrupted copies of the first samples");
  preview->add_option("--config", o.config)->required();
  preview->add_option("--dataset", o.dataset)->required();
  preview->add_option("--spec", o.spec, "family:severity")->required();
  preview->add_option("--out", o.out)->required();
  preview->add_option("--count", o.count, "Samples to preview");

  auto* report = app.add_subcommand("report", "Render JSON reports");
  report->add_flag("--markdown", o.markdown, "Markdown table output");
  report->add_option("inputs", o.inputs, "Report JSON files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  }
  o.seed_override = seed;

  try {
    if (*gen) return cmd_gen_data(o, out);
    if (*train) return cmd_train(o, out);
    if (*eval) return cmd_eval(o, out);
    if (*grad) return cmd_grad_check(o, out);
    if (*preview) return cmd_corrupt_preview(o, out);
    if (*report) return cmd_report(o, out);
  } catch (const HashMismatchError& e) {
    err << "error: " << e.what() << "\n";
    return kArtifact;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kArtifact;
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << "\n";
    return kDivergence;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const RangeError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}

}  // namespace bevfuse::cli
