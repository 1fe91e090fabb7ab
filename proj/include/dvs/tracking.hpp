#pragma once

#include <functional>
#include <optional>

#include "dvs/oracle.hpp"

namespace dvs {

// ---- configuration ----

enum class Mode { Mono, Stereo, Rgbd };

struct TrackerConfig {
  Mode mode = Mode::Mono;
  double tau_flow = 2.5;   // mean-flow keyframe admission threshold (px)
  int n_local = 50;        // local optimization window
  int r_local = 1;         // suppression radius, front-end edges
  int r_global = 5;        // suppression radius, back-end edges
  double tau_co = 25.0;    // co-visibility flow threshold (px)
  int s_edge = 8;          // edge budget multiplier
  int frontend_iters = 4;
  int backend_iters = 8;
  int skip_rate = 1;       // process every k-th input frame, k in {1,2,4,8}
  bool enable_loop_closure = true;
  bool enable_full_ba = true;
  int covis_stride = 1;    // pixel stride for co-visibility estimates
  double track_scale = 0.125;  // tracking resolution relative to input
  bool keep_images = false;    // materialize rgb/depth for the mapper

  static TrackerConfig defaults(Mode mode) {
    TrackerConfig cfg;
    cfg.mode = mode;
    cfg.n_local = (mode == Mode::Mono) ? 50 : 25;
    return cfg;
  }

  void validate() const;  // throws BadConfig
  int loop_radius() const { return n_local / 2; }
  int gauge_frozen_count() const { return mode == Mode::Mono ? 2 : 1; }
};

// ---- input frames ----

struct FrameInput {
  int frame_index = -1;
  double timestamp = 0.0;
  // lazy payloads; only touched when a keyframe is created and the config
  // asks for them, so dropped frames cost nothing
  std::function<std::shared_ptr<const ImageF>()> load_image;
  std::function<std::shared_ptr<const DepthMap>()> load_depth;      // full res
  std::function<Grid2D<double>()> load_prior_inv_depth;             // tracking res
};

// ---- snapshots ----

struct SnapshotKeyframe {
  int id = -1;
  int source_frame = -1;
  double timestamp = 0.0;
  SE3 world_from_cam;
  InverseDepthMap inv_depth;
  Grid2D<double> prior_inv_depth;
  std::shared_ptr<const ImageF> image;
  std::shared_ptr<const DepthMap> depth_obs;
  int version = 0;
};

struct Snapshot {
  int serial = 0;  // monotone per tracker
  Intrinsics camera;
  Intrinsics tracking_camera;
  std::vector<SnapshotKeyframe> keyframes;

  uint64_t content_hash() const;
};

// ---- back-end result ----

struct KeyframeCorrection {
  int id = -1;
  SE3 snapshot_pose;   // pose the back-end started from
  SE3 corrected_pose;
  InverseDepthMap corrected_inv_depth;
  int version_at_snapshot = 0;
};

struct BackendResult {
  int snapshot_serial = -1;
  std::vector<KeyframeCorrection> corrections;
};

// ---- tracker ----

struct IngestResult {
  bool skipped = false;
  bool keyframe_created = false;
  int keyframe_id = -1;
  double mean_flow = 0.0;
};

class Tracker {
 public:
  Tracker(const Intrinsics& camera, const TrackerConfig& cfg);

  // keyframe admission; dropped frames never reach the oracle
  IngestResult ingest_frame(const FrameInput& frame, FlowOracle& oracle);

  // local-window optimization around the newest keyframe: covisibility, edge
  // selection, loop detection, measurements, damped Gauss-Newton
  void frontend_step(FlowOracle& oracle);

  Snapshot take_snapshot();

  // global bundle adjustment against an immutable snapshot; pure function,
  // safe to run while the tracker advances
  BackendResult backend_full_ba(const Snapshot& snapshot, FlowOracle& oracle) const;

  // fold a back-end result into current state; keyframes modified since the
  // snapshot inherit the world-frame delta of their nearest older corrected
  // anchor; throws StaleSnapshot if a newer merge already completed
  void merge_backend_result(const BackendResult& result);

  const std::vector<Keyframe>& keyframes() const { return keyframes_; }
  const std::vector<Edge>& last_graph() const { return last_graph_; }
  const std::vector<Edge>& loop_edges() const { return loop_edges_; }
  const Intrinsics& tracking_camera() const { return tracking_camera_; }
  const TrackerConfig& config() const { return cfg_; }
  int frames_offered() const { return frames_offered_; }

 private:
  void create_keyframe(const FrameInput& frame);

  TrackerConfig cfg_;
  Intrinsics camera_;
  Intrinsics tracking_camera_;
  std::vector<Keyframe> keyframes_;
  std::vector<Edge> loop_edges_;
  std::vector<Edge> last_graph_;
  LoopDetectState loop_state_;
  int frames_offered_ = 0;
  int snapshot_serial_ = 0;
  int merged_serial_ = -1;
};

// ---- replay pipeline ----
//
// Deterministic single-threaded schedule: front-end steps run inline, the
// back-end runs synchronously at its trigger points, snapshots are handed to
// the optional consumer right where a live system would publish them.

struct FrameProvider {
  int n_frames = 0;
  std::function<FrameInput(int)> frame;
};

struct ReplayHooks {
  // called after each front-end step and after merges; used by the mapper
  std::function<void(const Snapshot&)> on_snapshot;
  // called at sequence end, after the final global adjustment
  std::function<void(const Snapshot&)> on_final_snapshot;
};

struct ReplayResult {
  std::vector<int> kf_frame_indices;
  std::vector<double> kf_timestamps;
  std::vector<SE3> kf_poses;
  int backend_runs = 0;
  size_t max_graph_edges = 0;
};

ReplayResult run_replay(const FrameProvider& frames, FlowOracle& oracle,
                        Tracker& tracker, const ReplayHooks& hooks = {});

// Live schedule with three execution contexts on top of a bounded loader
// queue: the caller thread runs the front-end, a worker runs global
// adjustments against snapshots and merges them back (stale results are
// dropped), and a consumer drains a latest-wins snapshot slot. Thread timing
// makes this schedule non-deterministic; replay is the reference.
ReplayResult run_live(const FrameProvider& frames, FlowOracle& oracle,
                      Tracker& tracker, const ReplayHooks& hooks = {});

}  // namespace dvs
