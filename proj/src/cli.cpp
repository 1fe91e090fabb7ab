#include "dvs/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "dvs/eval.hpp"
#include "dvs/io.hpp"
#include "dvs/mapper.hpp"
#include "dvs/mesh.hpp"
#include "dvs/oracle.hpp"
#include "dvs/synth.hpp"
#include "dvs/tracking.hpp"

namespace dvs {
namespace {

// usage mistakes get exit code 2; runtime failures surface as Error (exit 1)
struct UsageError {
  std::string message;
};

[[noreturn]] void usage_fail(const std::string& message) {
  throw UsageError{message};
}

const char* kUsage = R"(usage: dvs <command> [args]

commands:
  run [dataset_dir] [options]
      track a sequence (synthetic room when no directory is given), then
      export trajectory.txt plus, when mapping is on, mesh.ply, field.ckpt,
      and metrics.txt into the output directory
      --mode mono|stereo|rgbd   sensor mode (default rgbd)
      --no-lc                   disable loop-closure edges
      --no-full-ba              disable global bundle adjustment
      --skip-rate N             ingest every Nth frame (1, 2, 4, or 8)
      --oracle synthetic|file   flow source; dataset runs require file
      --flow-file PATH          recorded flow for --oracle file
      --record-flow PATH        record every flow query for later replay
      --seed N                  run seed
      --config PATH             key = value file; flags override it
      --out DIR                 output directory (default out)
      --live                    threaded schedule instead of replay
  synth <out_dir> [--config PATH] [--seed N]
      write the synthetic sequence as a dataset directory (rgb/, depth/,
      rgb.txt, depth.txt, groundtruth.txt, gt_mesh.ply)
  eval-ate <est.txt> <ref.txt> [--mode mono|stereo|rgbd]
      trajectory error after alignment (mono aligns with scale)
  eval-recon <est.ply> <ref.ply> [--traj PATH] [--config PATH]
      mesh accuracy/completion metrics; --traj culls the reference to the
      observed region and adds rendered-depth error
  render-depth <mesh.ply> <traj.txt> <out_dir> [--config PATH]
      ray-cast 16-bit depth maps along a trajectory
)";

struct Args {
  std::vector<std::string> positional;
  std::map<std::string, std::string> values;
  std::set<std::string> switches;

  bool has(const std::string& flag) const {
    return switches.count(flag) || values.count(flag);
  }
  std::string value_or(const std::string& flag, const std::string& fallback) const {
    const auto it = values.find(flag);
    return it == values.end() ? fallback : it->second;
  }
};

Args parse_args(const std::vector<std::string>& argv,
                const std::set<std::string>& value_flags,
                const std::set<std::string>& switch_flags,
                size_t max_positional) {
  Args out;
  for (size_t i = 0; i < argv.size(); ++i) {
    const std::string& a = argv[i];
    if (a.rfind("--", 0) == 0) {
      if (switch_flags.count(a)) {
        out.switches.insert(a);
      } else if (value_flags.count(a)) {
        if (i + 1 >= argv.size()) usage_fail(a + " needs a value");
        out.values[a] = argv[++i];
      } else {
        usage_fail("unknown flag " + a);
      }
    } else {
      out.positional.push_back(a);
    }
  }
  if (out.positional.size() > max_positional)
    usage_fail("unexpected argument " + out.positional[max_positional]);
  return out;
}

// defaults, then the config file, then individual flags
RunConfig config_from_args(const Args& args) {
  RunConfig cfg;
  const auto mode = args.values.find("--mode");
  if (mode != args.values.end()) {
    set_config_key(cfg, "mode", mode->second);
    cfg.tracker = TrackerConfig::defaults(cfg.tracker.mode);
  }
  const auto file = args.values.find("--config");
  if (file != args.values.end()) cfg = load_config(file->second, cfg);
  if (mode != args.values.end()) set_config_key(cfg, "mode", mode->second);
  const auto skip = args.values.find("--skip-rate");
  if (skip != args.values.end()) set_config_key(cfg, "skip_rate", skip->second);
  const auto seed = args.values.find("--seed");
  if (seed != args.values.end()) set_config_key(cfg, "seed", seed->second);
  if (args.switches.count("--no-lc")) cfg.tracker.enable_loop_closure = false;
  if (args.switches.count("--no-full-ba")) cfg.tracker.enable_full_ba = false;
  return cfg;
}

SyntheticSequence make_synthetic_sequence(const RunConfig& cfg) {
  PathSpec path;
  path.n_frames = cfg.n_frames;
  path.orbit_radius = cfg.orbit_radius;
  return SyntheticSequence(SceneSpec::default_room(), path, cfg.camera());
}

// tees every query into a flow file so a later run can replay it
class RecordingOracle : public FlowOracle {
 public:
  RecordingOracle(FlowOracle& inner, const std::string& path, int rows,
                  int cols)
      : inner_(inner), writer_(path, rows, cols) {}

  void query(const Keyframe& src, const FrameHandle& dst, Grid2D<Vec2>& flow,
             Grid2D<Vec2>& confidence) override {
    inner_.query(src, dst, flow, confidence);
    writer_.add(src.source_frame, dst.frame_index, flow, confidence);
  }

  void close() { writer_.close(); }

 private:
  FlowOracle& inner_;
  FlowFileWriter writer_;
};

void write_metrics(const std::vector<std::pair<std::string, double>>& metrics,
                   const std::string& path) {
  FILE* file = std::fopen(path.c_str(), "w");
  if (!file) fail(ErrorCode::IoFailure, "cannot write " + path);
  for (const auto& [key, value] : metrics) {
    std::fprintf(file, "%s = %.9g\n", key.c_str(), value);
    std::printf("%s = %.9g\n", key.c_str(), value);
  }
  std::fclose(file);
}

int cmd_run(const std::vector<std::string>& argv) {
  const Args args = parse_args(
      argv,
      {"--mode", "--skip-rate", "--oracle", "--flow-file", "--record-flow",
       "--seed", "--config", "--out"},
      {"--no-lc", "--no-full-ba", "--live"}, 1);

  RunConfig cfg = config_from_args(args);
  cfg.mapping.validate();
  cfg.field.validate();
  const bool mapping_on = cfg.map_every > 0;
  if (mapping_on) cfg.tracker.keep_images = true;  // the mapper reads colors

  const std::string out_dir = args.value_or("--out", "out");
  std::filesystem::create_directories(out_dir);

  const Intrinsics camera = cfg.camera();
  Tracker tracker(camera, cfg.tracker);
  const Intrinsics kt = tracker.tracking_camera();

  const bool dataset = !args.positional.empty();
  const std::string oracle_kind =
      args.value_or("--oracle", dataset ? "file" : "synthetic");

  std::unique_ptr<SyntheticSequence> synth;
  TumSequence tum;
  FrameProvider frames;
  Trajectory gt;
  if (dataset) {
    if (oracle_kind != "file")
      fail(ErrorCode::BadConfig,
           "dataset runs need --oracle file with a recorded flow file");
    tum = load_tum(args.positional[0]);
    frames = dataset_frame_provider(tum, camera, kt);
    gt = tum.gt;
  } else {
    synth = std::make_unique<SyntheticSequence>(make_synthetic_sequence(cfg));
    frames = synthetic_frame_provider(*synth, kt);
    for (int i = 0; i < synth->size(); ++i)
      gt.push_back({synth->timestamp(i), synth->gt_pose(i)});
  }

  std::unique_ptr<FlowOracle> oracle;
  if (oracle_kind == "file") {
    const auto it = args.values.find("--flow-file");
    if (it == args.values.end())
      fail(ErrorCode::BadConfig, "--oracle file needs --flow-file");
    oracle = std::make_unique<FileFlowOracle>(it->second);
  } else if (oracle_kind == "synthetic") {
    OracleNoise noise;
    noise.sigma_px = cfg.noise_sigma_px;
    noise.outlier_frac = cfg.noise_outlier_frac;
    noise.drift_px = cfg.noise_drift_px;
    oracle = std::make_unique<SyntheticFlowOracle>(*synth, kt, noise, cfg.seed);
  } else {
    usage_fail("--oracle must be synthetic or file");
  }

  std::unique_ptr<RecordingOracle> recorder;
  FlowOracle* active = oracle.get();
  if (args.values.count("--record-flow")) {
    recorder = std::make_unique<RecordingOracle>(
        *oracle, args.values.at("--record-flow"), kt.height, kt.width);
    active = recorder.get();
  }

  std::unique_ptr<Mapper> mapper;
  const auto ensure_mapper = [&](const Snapshot& snap) {
    if (mapper) return;
    Vec3 lo, hi;
    if (synth)
      synth->bounds(lo, hi);
    else
      snapshot_bounds(snap, cfg.bounds_pad, lo, hi);
    Field field(cfg.field, lo, hi, cfg.seed);
    mapper = std::make_unique<Mapper>(std::move(field), cfg.mapping,
                                      cfg.seed + 1);
  };

  int keyframe_snapshots = 0;
  Snapshot final_snap;
  ReplayHooks hooks;
  if (mapping_on)
    hooks.on_snapshot = [&](const Snapshot& snap) {
      ++keyframe_snapshots;
      if (keyframe_snapshots % cfg.map_every != 0) return;
      ensure_mapper(snap);
      mapper->map_snapshot(snap);
    };
  hooks.on_final_snapshot = [&](const Snapshot& snap) {
    final_snap = snap;
    if (!mapping_on) return;
    ensure_mapper(snap);
    for (int i = 0; i < cfg.final_rounds; ++i) mapper->map_snapshot(snap);
  };

  const ReplayResult result = args.switches.count("--live")
                                  ? run_live(frames, *active, tracker, hooks)
                                  : run_replay(frames, *active, tracker, hooks);
  if (recorder) recorder->close();

  Trajectory est;
  for (size_t i = 0; i < result.kf_poses.size(); ++i)
    est.push_back({result.kf_timestamps[i], result.kf_poses[i]});
  export_trajectory(est, out_dir + "/trajectory.txt");

  TriangleMesh mesh;
  if (mapper) {
    mapper->field().save_checkpoint(out_dir + "/field.ckpt");
    try {
      mesh = mapper->extract(final_snap);
      save_ply(mesh, out_dir + "/mesh.ply");
    } catch (const Error& e) {
      if (e.code() != ErrorCode::EmptyMesh) throw;
      std::fprintf(stderr, "dvs: no surface extracted: %s\n", e.what());
    }
  }

  const int offered = tracker.frames_offered();
  const int ingested =
      (offered + cfg.tracker.skip_rate - 1) / cfg.tracker.skip_rate;
  std::printf("ingested %d of %d frames, %d keyframes, %d global adjustments\n",
              ingested, offered, static_cast<int>(est.size()),
              result.backend_runs);

  std::vector<std::pair<std::string, double>> metrics;
  if (!gt.empty()) {
    const AlignMode align_mode =
        cfg.tracker.mode == Mode::Mono ? AlignMode::kSim3 : AlignMode::kSE3;
    metrics.emplace_back("ate_rmse_m", ate_rmse(est, gt, align_mode));
  }
  if (!mesh.triangles.empty() && synth) {
    const TriangleMesh ref =
        cull_to_observed(synth->gt_mesh(), gt, camera);
    const ReconReport report = recon_metrics(mesh, ref);
    metrics.emplace_back("accuracy_cm", report.accuracy_cm);
    metrics.emplace_back("completion_cm", report.completion_cm);
    metrics.emplace_back("completion_ratio_pct", report.completion_ratio_pct);
    metrics.emplace_back("f_score_pct", report.f_score_pct);
    metrics.emplace_back("depth_l1_cm", depth_l1(mesh, ref, gt, camera, 8));
  }
  metrics.emplace_back("n_keyframes", static_cast<double>(est.size()));
  metrics.emplace_back("frames_ingested", static_cast<double>(ingested));
  metrics.emplace_back("backend_runs",
                       static_cast<double>(result.backend_runs));
  write_metrics(metrics, out_dir + "/metrics.txt");
  return 0;
}

int cmd_synth(const std::vector<std::string>& argv) {
  const Args args = parse_args(argv, {"--config", "--seed"}, {}, 1);
  if (args.positional.empty()) usage_fail("synth needs an output directory");
  const std::string dir = args.positional[0];

  RunConfig cfg = config_from_args(args);
  const SyntheticSequence seq = make_synthetic_sequence(cfg);

  std::filesystem::create_directories(dir + "/rgb");
  std::filesystem::create_directories(dir + "/depth");
  FILE* rgb_index = std::fopen((dir + "/rgb.txt").c_str(), "w");
  FILE* depth_index = std::fopen((dir + "/depth.txt").c_str(), "w");
  if (!rgb_index || !depth_index)
    fail(ErrorCode::IoFailure, "cannot write index files in " + dir);
  std::fprintf(rgb_index, "# timestamp filename\n");
  std::fprintf(depth_index, "# timestamp filename\n");

  Trajectory gt;
  for (int i = 0; i < seq.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%04d.png", i);
    save_png_rgb(seq.render_rgb(i), dir + "/rgb/" + name);
    save_png_depth(seq.render_depth(i), dir + "/depth/" + name);
    std::fprintf(rgb_index, "%.9g rgb/%s\n", seq.timestamp(i), name);
    std::fprintf(depth_index, "%.9g depth/%s\n", seq.timestamp(i), name);
    gt.push_back({seq.timestamp(i), seq.gt_pose(i)});
  }
  std::fclose(rgb_index);
  std::fclose(depth_index);
  export_trajectory(gt, dir + "/groundtruth.txt");
  save_ply(seq.gt_mesh(), dir + "/gt_mesh.ply");
  std::printf("wrote %d frames to %s\n", seq.size(), dir.c_str());
  return 0;
}

int cmd_eval_ate(const std::vector<std::string>& argv) {
  const Args args = parse_args(argv, {"--mode"}, {}, 2);
  if (args.positional.size() != 2)
    usage_fail("eval-ate needs <est.txt> <ref.txt>");
  const std::string mode = args.value_or("--mode", "rgbd");
  if (mode != "mono" && mode != "stereo" && mode != "rgbd")
    usage_fail("--mode must be mono, stereo, or rgbd");
  const Trajectory est = load_trajectory(args.positional[0]);
  const Trajectory ref = load_trajectory(args.positional[1]);
  const AlignMode align_mode =
      mode == "mono" ? AlignMode::kSim3 : AlignMode::kSE3;
  std::printf("ate_rmse_m = %.9g\n", ate_rmse(est, ref, align_mode));
  return 0;
}

int cmd_eval_recon(const std::vector<std::string>& argv) {
  const Args args = parse_args(argv, {"--traj", "--config"}, {}, 2);
  if (args.positional.size() != 2)
    usage_fail("eval-recon needs <est.ply> <ref.ply>");

  RunConfig cfg = config_from_args(args);
  const TriangleMesh est = load_ply(args.positional[0]);
  TriangleMesh ref = load_ply(args.positional[1]);

  Trajectory traj;
  if (args.values.count("--traj")) {
    traj = load_trajectory(args.values.at("--traj"));
    ref = cull_to_observed(ref, traj, cfg.camera());
  }

  const ReconReport report = recon_metrics(est, ref);
  std::printf("accuracy_cm = %.9g\n", report.accuracy_cm);
  std::printf("completion_cm = %.9g\n", report.completion_cm);
  std::printf("completion_ratio_pct = %.9g\n", report.completion_ratio_pct);
  std::printf("f_score_pct = %.9g\n", report.f_score_pct);
  if (!traj.empty())
    std::printf("depth_l1_cm = %.9g\n",
                depth_l1(est, ref, traj, cfg.camera(), 8));
  return 0;
}

int cmd_render_depth(const std::vector<std::string>& argv) {
  const Args args = parse_args(argv, {"--config"}, {}, 3);
  if (args.positional.size() != 3)
    usage_fail("render-depth needs <mesh.ply> <traj.txt> <out_dir>");

  RunConfig cfg = config_from_args(args);
  const MeshRaycaster caster(load_ply(args.positional[0]));
  const Trajectory traj = load_trajectory(args.positional[1]);
  const std::string dir = args.positional[2];
  std::filesystem::create_directories(dir);

  for (size_t i = 0; i < traj.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%04zu.png", i);
    save_png_depth(render_depth(caster, traj[i].world_from_cam, cfg.camera()),
                   dir + "/" + name);
  }
  std::printf("rendered %d depth maps to %s\n", static_cast<int>(traj.size()),
              dir.c_str());
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  try {
    if (args.empty()) usage_fail("missing command");
    const std::string cmd = args[0];
    const std::vector<std::string> rest(args.begin() + 1, args.end());
    if (cmd == "run") return cmd_run(rest);
    if (cmd == "synth") return cmd_synth(rest);
    if (cmd == "eval-ate") return cmd_eval_ate(rest);
    if (cmd == "eval-recon") return cmd_eval_recon(rest);
    if (cmd == "render-depth") return cmd_render_depth(rest);
    if (cmd == "help" || cmd == "--help") {
      std::fputs(kUsage, stdout);
      return 0;
    }
    usage_fail("unknown command " + cmd);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "dvs: %s\n%s", e.message.c_str(), kUsage);
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "dvs: %s\n", e.what());
    return 1;
  }
}

}  // namespace dvs
