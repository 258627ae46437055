// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "bevfuse/config.hpp"
#include "bevfuse/corruption.hpp"
#include "bevfuse/eval.hpp"
#include "bevfuse/fusion.hpp"
#include "bevfuse/grad_suite.hpp"
#include "bevfuse/ops.hpp"
#include "bevfuse/runtime.hpp"
#include "cli.hpp"

using namespace bevfuse;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += "failed: " + what;
    }
  }
  void note(const std::string& what) {
    if (!detail.empty()) detail += "; ";
    detail += what;
  }
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

template <typename T>
bool bit_equal(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(T)) == 0;
}

BevGrid random_grid(std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed, Modality m) {
  Rng rng(seed);
  std::vector<float> v(c * h * w);
  for (auto& x : v) x = static_cast<float>(uniform(rng, -1.0, 1.0));
  return {Tensor(Shape{c, h, w}, std::move(v)), m, 0.5f, 0};
}

ParamStore xattn_params(std::size_t channels, std::uint64_t seed) {
  ParamStore p;
  Rng rng(seed);
  FusionConfig cfg;
  cfg.kind = FusionKind::CrossAttention;
  init_fusion_params(p, cfg, channels, rng);
  return p;
}

const FusionKind kKinds[] = {FusionKind::Average, FusionKind::MaxPool, FusionKind::CrossAttention, FusionKind::Pmd};

Outcome mra_reproduction() {
  const CorruptionFamily fams[5] = {CorruptionFamily::BeamReduce, CorruptionFamily::Fog, CorruptionFamily::MotionBlur,
                                    CorruptionFamily::SpatialMisalign, CorruptionFamily::TemporalMisalign};
  const double nds[15] = {0.6338, 0.4818, 0.3052, 0.6476, 0.5978, 0.3453, 0.6687, 0.5865,
                          0.4991, 0.5836, 0.4937, 0.4243, 0.6276, 0.5394, 0.4676};
  std::map<CellKey, double> cells;
  for (int f = 0; f < 5; ++f)
    for (int s = 1; s <= 3; ++s) cells[{fams[f], s}] = nds[f * 3 + s - 1];
  const double mra = compute_mra(0.7033, cells);
  Outcome o;
  o.note("mRA=" + fmt(mra, 6) + " target 0.7490 +- 0.0005");
  o.require(std::abs(mra - 0.7490) <= 0.0005, "mRA outside tolerance");
  return o;
}

Outcome identity_dispatch() {
  Outcome o;
  const auto params = xattn_params(8, 18);
  int checks = 0;
  for (auto kind : kKinds) {
    FusionConfig cfg;
    cfg.kind = kind;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const auto l = random_grid(8, 16, 16, 1000 + seed, Modality::Lidar);
      const auto c = random_grid(8, 16, 16, 5000 + seed, Modality::Camera);
      const FusionStep step{.step = static_cast<std::int64_t>(seed % 9), .total_steps = 9, .training = seed % 2 == 0};
      const bool ok_l = bit_equal(dispatch<float>({true, false}, cfg, &l, &c, step, &params).tensor, l.tensor);
      const bool ok_c = bit_equal(dispatch<float>({false, true}, cfg, &l, &c, step, &params).tensor, c.tensor);
      o.require(ok_l, std::string(fusion_kind_name(kind)) + " lidar-only seed " + std::to_string(seed));
      o.require(ok_c, std::string(fusion_kind_name(kind)) + " camera-only seed " + std::to_string(seed));
      checks += 2;
    }
  }
  o.note(std::to_string(checks) + " single-modality dispatches bit-identical");
  return o;
}

Outcome fusion_algebra() {
  Outcome o;
  int checks = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto a = random_grid(8, 12, 12, 100 + seed, Modality::Lidar);
    const auto b = random_grid(8, 12, 12, 200 + seed, Modality::Camera);

    o.require(bit_equal(fuse_average(a, b, 0.5).tensor, fuse_average(b, a, 0.5).tensor), "average symmetry");
    o.require(bit_equal(fuse_maxpool(a, a).tensor, a.tensor), "maxpool idempotence");
    o.require(bit_equal(fuse_maxpool(a, b).tensor, fuse_maxpool(b, a).tensor), "maxpool commutativity");

    auto zeroed = xattn_params(8, 300 + seed);
    for (const char* n :
         {"fusion.xattn.wv.weight", "fusion.xattn.wv.bias", "fusion.xattn.wo.weight", "fusion.xattn.wo.bias"}) {
      for (auto& v : zeroed.get(n).mutable_data()) v = 0.0f;
    }
    o.require(zeroed.get("fusion.xattn.theta").item() == 0.0f, "theta initialised to 0");
    o.require(sigmoid(zeroed.get("fusion.xattn.theta")).item() == 0.5f, "gate 0.5 at theta 0");
    o.require(bit_equal(fuse_cross_attention(a, b, zeroed, 4).tensor, a.tensor), "cross-attention residual identity");

    o.require(bit_equal(fuse_pmd(a, b, 0.0).tensor, a.tensor), "pmd alpha 0 is the anchor");
    const auto full = fuse_pmd(a, b, 1.0).tensor;
    const auto sum = add(a.tensor, b.tensor);
    double worst = 0.0;
    for (std::size_t i = 0; i < full.numel(); ++i) worst = std::max(worst, double(std::abs(full.data()[i] - sum.data()[i])));
    o.require(worst <= 1e-6, "pmd alpha 1 is the sum");
    checks += 8;
  }
  o.require(alpha_schedule(0, 100) == 1.0 && alpha_schedule(100, 100) == 0.0, "alpha schedule endpoints");
  o.note(std::to_string(checks) + " algebraic identities on 20 seeded grid pairs");
  return o;
}

Outcome gradient_oracle() {
  Outcome o;
  const auto results = run_grad_suite();
  double worst = 0.0;
  std::string worst_name;
  for (const auto& e : results) {
    o.require(e.result.max_relative_error < 1e-3, e.name + " max_rel_err " + std::to_string(e.result.max_relative_error));
    o.require(e.result.coordinates_checked > 0, e.name + " checked nothing");
    if (e.result.max_relative_error >= worst) {
      worst = e.result.max_relative_error;
      worst_name = e.name;
    }
  }
  o.note(std::to_string(results.size()) + " graphs, worst " + worst_name + " " + std::to_string(worst) +
         " (limit 1e-3, eps 1e-3)");
  return o;
}

TrainConfig tiny_train(TrainMode mode) {
  TrainConfig c;
  c.mode = mode;
  if (mode == TrainMode::Pmd) c.fusion.kind = FusionKind::Pmd;
  c.grid.height = 16;
  c.grid.width = 16;
  c.grid.cell_size_m = 2.0f;
  c.grid.channels = 8;
  c.detector.encoder_width = 8;
  c.batch_size = 4;
  return c;
}

Outcome schedule_cardinality() {
  Outcome o;
  for (std::size_t n : {1u, 7u, 64u, 256u}) {
    for (auto mode : {TrainMode::ThreeRegime, TrainMode::Pmd}) {
      const auto entries = expand_epoch(n, mode, 42 + n);
      const std::size_t k = mode == TrainMode::Pmd ? 2 : 3;
      o.require(entries.size() == k * n, "cardinality " + std::string(train_mode_name(mode)));
      std::vector<std::multiset<Regime>> per(n);
      for (const auto& e : entries) per[e.sample_index].insert(e.regime);
      const auto expect = mode == TrainMode::Pmd ? std::multiset<Regime>{Regime::AnchorLidar, Regime::AnchorCamera}
                                                 : std::multiset<Regime>{Regime::LC, Regime::L, Regime::C};
      for (const auto& m : per) o.require(m == expect, "per-sample multiset " + std::string(train_mode_name(mode)));
    }
  }

  Dataset d;
  for (std::uint64_t i = 0; i < 6; ++i) d.samples.push_back(generate_sample(700 + i, WorldConfig{}, SensorConfig{}));
  auto cfg = tiny_train(TrainMode::Pmd);
  cfg.epochs = 1;
  ParamStore params;
  const auto report = train_model(d, cfg, params);
  o.require(!report.step_alphas.empty(), "pmd run records alphas");
  if (!report.step_alphas.empty()) {
    o.require(report.step_alphas.front() == 1.0, "first alpha is 1");
    o.require(report.step_alphas.back() == 0.0, "final alpha is 0");
    for (std::size_t i = 1; i < report.step_alphas.size(); ++i)
      o.require(report.step_alphas[i] < report.step_alphas[i - 1], "alpha strictly decreasing");
    o.note("pmd steps=" + std::to_string(report.total_steps) + " final alpha=" + fmt(report.step_alphas.back(), 1));
  }
  o.note("3N / 2N entries for N in {1, 7, 64, 256}");
  return o;
}

// The 256/64 experiment shared by the robustness and monotonicity criteria.
struct Experiment {
  ExperimentConfig config = parse_experiment_config("{}");
  Dataset train, eval;
  ParamStore single_branch, baseline;
  TrainConfig single_cfg, baseline_cfg;
  bool trained_single = false, trained_baseline = false;

  Experiment() {
    train = generate_dataset(config, static_cast<std::size_t>(config.data.train_samples), config.data.seed);
    eval = generate_dataset(config, static_cast<std::size_t>(config.data.eval_samples), config.data.eval_seed);
    single_cfg = config.train;
    baseline_cfg = config.train;
    baseline_cfg.mode = TrainMode::Baseline;
  }
  const ParamStore& single() {
    if (!trained_single) {
      const auto r = train_model(train, single_cfg, single_branch);
      std::printf("  single-branch avg: %d epochs, %lld steps, %.1f s\n", r.epochs,
                  static_cast<long long>(r.total_steps), r.wall_seconds);
      trained_single = true;
    }
    return single_branch;
  }
  const ParamStore& base() {
    if (!trained_baseline) {
      const auto r = train_model(train, baseline_cfg, baseline);
      std::printf("  concat baseline: %d epochs, %lld steps, %.1f s\n", r.epochs, static_cast<long long>(r.total_steps),
                  r.wall_seconds);
      trained_baseline = true;
    }
    return baseline;
  }
  double map_of(const ParamStore& p, const TrainConfig& c, Regime regime) {
    return detection_map(p, c.model_spec(), c.grid, c.detector, eval.samples, regime, config.eval);
  }
};

Experiment& experiment() {
  static Experiment e;
  return e;
}

Outcome robustness_ordering() {
  auto& e = experiment();
  const double sb_lc = e.map_of(e.single(), e.single_cfg, Regime::LC);
  const double sb_l = e.map_of(e.single(), e.single_cfg, Regime::L);
  const double base_lc = e.map_of(e.base(), e.baseline_cfg, Regime::LC);
  const double base_l = e.map_of(e.base(), e.baseline_cfg, Regime::L);
  Outcome o;
  o.note("single-branch LC=" + fmt(sb_lc) + " L=" + fmt(sb_l) + "; baseline LC=" + fmt(base_lc) + " L=" + fmt(base_l));
  o.note("L ratio " + fmt(base_l > 0 ? sb_l / base_l : 0.0, 3) + " (need >= 1.2)");
  o.note("LC relative gap " + fmt(base_lc > 0 ? std::abs(sb_lc - base_lc) / base_lc : 1.0, 3) + " (need <= 0.15)");
  o.require(sb_l >= 1.2 * base_l, "LiDAR-only gain below 20%");
  o.require(std::abs(sb_lc - base_lc) <= 0.15 * base_lc, "LC mAP not within 15% of baseline");
  return o;
}

Outcome corruption_monotonicity() {
  auto& e = experiment();
  auto eval_cfg = e.config.eval;
  eval_cfg.regimes = {Regime::LC};
  const auto reports =
      evaluate(e.single(), e.single_cfg.model_spec(), e.single_cfg.grid, e.single_cfg.detector, e.eval, eval_cfg);
  const auto& r = reports.front();
  Outcome o;
  int inversions = 0;
  double worst = 0.0;
  std::ostringstream cells;
  for (auto family : eval_cfg.families) {
    cells << corruption_family_name(family);
    for (int s = 1; s <= 3; ++s) cells << (s == 1 ? " " : "/") << fmt(r.cells.at({family, s}));
    cells << " ";
    for (int s = 1; s < 3; ++s) {
      const double rise = r.cells.at({family, s + 1}) - r.cells.at({family, s});
      if (rise > 0) {
        ++inversions;
        worst = std::max(worst, rise);
      }
    }
  }
  o.note("clean " + fmt(r.clean_value) + "; " + cells.str() + "; inversions=" + std::to_string(inversions) +
         " worst=" + fmt(worst));
  o.require(inversions <= 1, "more than one severity inversion");
  o.require(worst <= 0.01, "inversion above 0.01");
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "bevfuse-cli");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  return cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
}

Outcome determinism() {
  Outcome o;
  const auto root = fs::temp_directory_path() / "bevfuse_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  const auto config = (root / "tiny.json").string();
  std::ofstream(config) << R"({"grid": {"height": 16, "width": 16, "cell_size_m": 2.0, "channels": 8},
  "detector": {"encoder_width": 8}, "train": {"epochs": 1, "batch_size": 4}})";

  for (const char* run : {"a", "b"}) {
    const auto dir = root / run;
    fs::create_directories(dir);
    const auto data = (dir / "data.bfd").string();
    const auto ckpt = (dir / "model.ckpt").string();
    o.require(invoke({"gen-data", "--config", config, "--out", data, "--num-samples", "8"}) == 0, "gen-data");
    o.require(invoke({"train", "--config", config, "--dataset", data, "--out", ckpt}) == 0, "train");
    o.require(invoke({"eval", "--config", config, "--checkpoint", ckpt, "--dataset", data, "--out",
                      (dir / "reports").string()}) == 0,
              "eval");
  }
  std::size_t files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(root / "a")) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), root / "a");
    const auto other = root / "b" / rel;
    o.require(fs::exists(other) && slurp(entry.path()) == slurp(other), "bytes differ: " + rel.string());
    ++files;
  }
  o.require(files >= 10, "expected dataset, checkpoint, manifest, training report and six eval reports");
  o.note(std::to_string(files) + " artifacts byte-identical across two runs");
  return o;
}

Outcome corruption_targeting() {
  Outcome o;
  o.require(beam_stride(1) == 2 && beam_stride(2) == 4 && beam_stride(3) == 8, "beam strides 2/4/8");
  o.require(fog_level(1).contrast == 0.7 && fog_level(2).contrast == 0.45 && fog_level(3).contrast == 0.2,
            "fog contrast 0.7/0.45/0.2");
  o.require(blur_length(1) == 3 && blur_length(2) == 7 && blur_length(3) == 13, "blur kernels 3/7/13");
  o.require(misalign_level(1).rotation_deg == 1.0 && misalign_level(2).rotation_deg == 3.0 &&
                misalign_level(3).rotation_deg == 6.0,
            "misalignment rotation 1/3/6 deg");
  o.require(temporal_shift_s(1) == 0.1 && temporal_shift_s(2) == 0.25 && temporal_shift_s(3) == 0.5,
            "temporal shift 0.1/0.25/0.5 s");

  const LidarConfig lidar;
  int samples = 0;
  for (std::uint64_t seed : {21u, 22u, 23u, 24u}) {
    const auto s = generate_sample(seed, WorldConfig{}, SensorConfig{});
    ++samples;
    o.require(corrupt_sample(s, {CorruptionFamily::Clean, 1, 3}, lidar) == s, "clean is the identity");
    for (auto family : {CorruptionFamily::BeamReduce, CorruptionFamily::Fog, CorruptionFamily::MotionBlur,
                        CorruptionFamily::SpatialMisalign, CorruptionFamily::TemporalMisalign}) {
      for (int sev = 1; sev <= 3; ++sev) {
        const CorruptionSpec spec{family, sev, 3};
        const auto out = corrupt_sample(s, spec, lidar);
        if (targets_lidar(family)) {
          o.require(out.camera == s.camera, spec.str() + " touched the camera");
        } else {
          o.require(out.lidar == s.lidar, spec.str() + " touched the lidar");
          o.require(!(out.camera == s.camera), spec.str() + " left the camera unchanged");
        }
      }
    }
    for (int sev = 1; sev <= 3; ++sev) {
      std::set<int> beams;
      for (const auto& p : apply_beam_reduce(s.lidar, sev, 0).points) {
        beams.insert(p.beam_index);
        o.require(p.beam_index % beam_stride(sev) == 0, "kept beam off the stride");
      }
      o.require(beams.size() <= static_cast<std::size_t>(32 / beam_stride(sev)), "beam count above 32/stride");
    }
  }
  o.note("parameter tables exact; targeting holds on " + std::to_string(samples) + " golden samples x 15 cells");
  return o;
}

}  // namespace

int main() {
  keep_heap_resident();
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"mRA arithmetic reproduction", mra_reproduction},
      {"identity dispatch", identity_dispatch},
      {"fusion operator algebra", fusion_algebra},
      {"gradient oracle", gradient_oracle},
      {"schedule cardinality", schedule_cardinality},
      {"missing-modality robustness ordering", robustness_ordering},
      {"corruption monotonicity", corruption_monotonicity},
      {"determinism", determinism},
      {"corruption targeting and severity tables", corruption_targeting},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.note(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("criterion %zu %s: %s (%.1f s) %s\n", i + 1, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(), secs,
                o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failed;
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
