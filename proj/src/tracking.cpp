#include "dvs/tracking.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <mutex>
#include <thread>
#include <unordered_map>

#include "dvs/dba.hpp"

namespace dvs {

// ---- configuration ----

void TrackerConfig::validate() const {
  auto bad = [](const std::string& what) {
    throw Error(ErrorCode::BadConfig, "tracker config: " + what);
  };
  if (!(tau_flow > 0.0)) bad("tau_flow must be positive");
  if (n_local < 2) bad("n_local must be at least 2");
  if (r_local < 1) bad("r_local must be at least 1");
  if (r_global < 1) bad("r_global must be at least 1");
  if (!(tau_co > 0.0)) bad("tau_co must be positive");
  if (s_edge < 1) bad("s_edge must be at least 1");
  if (frontend_iters < 1) bad("frontend_iters must be at least 1");
  if (backend_iters < 1) bad("backend_iters must be at least 1");
  if (skip_rate != 1 && skip_rate != 2 && skip_rate != 4 && skip_rate != 8)
    bad("skip_rate must be one of 1, 2, 4, 8");
  if (covis_stride < 1) bad("covis_stride must be at least 1");
  if (!(track_scale > 0.0 && track_scale <= 1.0))
    bad("track_scale must lie in (0, 1]");
}

// ---- snapshots ----

namespace {

inline void hash_bytes(uint64_t& h, const void* data, size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;  // FNV-1a
  }
}

inline void hash_double(uint64_t& h, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  hash_bytes(h, &bits, sizeof(bits));
}

inline void hash_int(uint64_t& h, int64_t v) { hash_bytes(h, &v, sizeof(v)); }

void hash_grid(uint64_t& h, const Grid2D<double>& g) {
  hash_int(h, g.rows());
  hash_int(h, g.cols());
  for (size_t i = 0; i < g.size(); ++i) hash_double(h, g[i]);
}

void hash_pose(uint64_t& h, const SE3& pose) {
  const Quat& q = pose.quat();
  hash_double(h, q.w());
  hash_double(h, q.x());
  hash_double(h, q.y());
  hash_double(h, q.z());
  for (int i = 0; i < 3; ++i) hash_double(h, pose.translation()[i]);
}

}  // namespace

uint64_t Snapshot::content_hash() const {
  uint64_t h = 0xcbf29ce484222325ull;
  hash_int(h, serial);
  hash_int(h, camera.width);
  hash_int(h, camera.height);
  hash_double(h, tracking_camera.fx);
  hash_int(h, static_cast<int64_t>(keyframes.size()));
  for (const SnapshotKeyframe& kf : keyframes) {
    hash_int(h, kf.id);
    hash_int(h, kf.source_frame);
    hash_int(h, kf.version);
    hash_double(h, kf.timestamp);
    hash_pose(h, kf.world_from_cam);
    hash_grid(h, kf.inv_depth);
    hash_grid(h, kf.prior_inv_depth);
  }
  return h;
}

// ---- tracker ----

Tracker::Tracker(const Intrinsics& camera, const TrackerConfig& cfg)
    : cfg_(cfg), camera_(camera), tracking_camera_(camera.scaled(cfg.track_scale)) {
  cfg_.validate();
  if (tracking_camera_.width < 4 || tracking_camera_.height < 4)
    throw Error(ErrorCode::BadConfig, "tracking resolution degenerate");
}

IngestResult Tracker::ingest_frame(const FrameInput& frame, FlowOracle& oracle) {
  ++frames_offered_;
  IngestResult res;
  if (frame.frame_index % cfg_.skip_rate != 0) {
    res.skipped = true;
    return res;
  }
  if (keyframes_.empty()) {
    create_keyframe(frame);
    res.keyframe_created = true;
    res.keyframe_id = keyframes_.back().id;
    return res;
  }
  Grid2D<Vec2> flow, conf;
  FrameHandle dst;
  dst.frame_index = frame.frame_index;
  oracle.query(keyframes_.back(), dst, flow, conf);
  res.mean_flow = mean_oracle_flow(flow, conf);
  if (res.mean_flow > cfg_.tau_flow) {
    create_keyframe(frame);
    res.keyframe_created = true;
    res.keyframe_id = keyframes_.back().id;
  }
  return res;
}

void Tracker::create_keyframe(const FrameInput& frame) {
  Keyframe kf;
  kf.id = static_cast<int>(keyframes_.size());
  kf.source_frame = frame.frame_index;
  kf.timestamp = frame.timestamp;

  const int n = kf.id;
  if (n == 0) {
    kf.world_from_cam = SE3();
  } else if (n == 1) {
    kf.world_from_cam = keyframes_[0].world_from_cam;
  } else {
    // constant-velocity extrapolation from the last two keyframes
    const SE3& a = keyframes_[n - 2].world_from_cam;
    const SE3& b = keyframes_[n - 1].world_from_cam;
    kf.world_from_cam = b * (a.inverse() * b);
  }

  const int ht = tracking_camera_.height, wt = tracking_camera_.width;
  double init = 1.0;
  if (n > 0) {
    const InverseDepthMap& prev = keyframes_[n - 1].inv_depth;
    double sum = 0.0;
    for (size_t i = 0; i < prev.size(); ++i) sum += prev[i];
    init = sum / static_cast<double>(prev.size());
  }

  kf.prior_inv_depth = Grid2D<double>(ht, wt);
  kf.prior_inv_depth.fill(-1.0);
  if (cfg_.mode != Mode::Mono && frame.load_prior_inv_depth) {
    Grid2D<double> prior = frame.load_prior_inv_depth();
    if (prior.rows() == ht && prior.cols() == wt) kf.prior_inv_depth = std::move(prior);
  }

  kf.inv_depth = Grid2D<double>(ht, wt);
  for (int r = 0; r < ht; ++r)
    for (int c = 0; c < wt; ++c) {
      double p = kf.prior_inv_depth(r, c);
      kf.inv_depth(r, c) = p > 0.0 ? p : init;
    }

  if (cfg_.keep_images) {
    if (frame.load_image) kf.image = frame.load_image();
    if (frame.load_depth) kf.depth_obs = frame.load_depth();
  }
  keyframes_.push_back(std::move(kf));
}

namespace {

struct WindowProblem {
  BundleState state;
  std::vector<FlowMeasurement> measurements;
  std::vector<int> ids;  // slot -> keyframe id
};

// Assembles a bundle problem over the given keyframe ids, with one
// measurement per requested (src, dst) direction.
WindowProblem assemble_problem(const std::vector<Keyframe>& kfs,
                               const std::vector<std::pair<int, int>>& directions,
                               const std::vector<int>& ids,
                               const std::vector<uint8_t>& frozen,
                               const Intrinsics& tracking_camera, Mode mode,
                               FlowOracle& oracle) {
  WindowProblem p;
  p.ids = ids;
  std::unordered_map<int, int> slot_of;
  for (size_t s = 0; s < ids.size(); ++s) slot_of[ids[s]] = static_cast<int>(s);

  p.state.camera = tracking_camera;
  p.state.frozen = frozen;
  p.state.poses.reserve(ids.size());
  p.state.inv_depths.reserve(ids.size());
  for (int id : ids) {
    p.state.poses.push_back(kfs[id].world_from_cam);
    p.state.inv_depths.push_back(kfs[id].inv_depth);
  }
  if (mode != Mode::Mono) {
    p.state.prior_inv_depth.reserve(ids.size());
    for (int id : ids) p.state.prior_inv_depth.push_back(kfs[id].prior_inv_depth);
  }

  for (const auto& [a, b] : directions) {
    FlowMeasurement m;
    m.src = slot_of.at(a);
    m.dst = slot_of.at(b);
    FrameHandle dst;
    dst.frame_index = kfs[b].source_frame;
    dst.kf = &kfs[b];
    oracle.query(kfs[a], dst, m.target_flow, m.confidence);
    p.measurements.push_back(std::move(m));
  }
  return p;
}

void optimize_problem(WindowProblem& p, int iters, Mode mode) {
  BundleOptions opts;
  opts.prior_weight = (mode == Mode::Mono) ? 0.0 : 10.0;
  double lambda = 1e-4;
  for (int it = 0; it < iters; ++it) dba_iterate(p.state, p.measurements, lambda, opts);
}

}  // namespace

void Tracker::frontend_step(FlowOracle& oracle) {
  const int n = static_cast<int>(keyframes_.size());
  if (n < 2) return;
  const int n_local = std::min(cfg_.n_local, n);

  CovisMatrix covis = build_covis_matrix(keyframes_, n_local, tracking_camera_,
                                         cfg_.tau_co, cfg_.covis_stride);
  std::vector<Edge> graph = select_local_edges(covis, cfg_.r_local, cfg_.s_edge);
  if (cfg_.enable_loop_closure) {
    std::vector<Edge> loops =
        detect_loops(covis, cfg_.loop_radius(), cfg_.tau_co, loop_state_);
    loop_edges_.insert(loop_edges_.end(), loops.begin(), loops.end());
  }
  const int first_local = covis.first_local;
  // accepted loop edges stay active while their newer endpoint is in the
  // window; they ride on top of the s_edge * n_local selection budget
  for (const Edge& le : loop_edges_)
    if (le.i >= first_local) graph.push_back(le);

  // window keyframes first, then any older loop endpoints (always frozen)
  std::vector<int> ids;
  for (int id = first_local; id < n; ++id) ids.push_back(id);
  for (const Edge& e : graph) {
    if (e.j < first_local && std::find(ids.begin(), ids.end(), e.j) == ids.end())
      ids.push_back(e.j);
  }
  const int window = n - first_local;
  std::vector<uint8_t> frozen(ids.size(), 0);
  for (size_t s = static_cast<size_t>(window); s < ids.size(); ++s) frozen[s] = 1;
  // loop endpoints anchor the window from outside; without them the oldest
  // window poses hold the gauge so the chain stays attached to its past
  if (ids.size() == static_cast<size_t>(window)) {
    const int gauge = std::min(cfg_.gauge_frozen_count(), window - 1);
    for (int s = 0; s < gauge; ++s) frozen[s] = 1;
  }

  // window-internal edges constrain both depth maps; edges into an older
  // keyframe stay one-directional so only local depths are variables
  std::vector<std::pair<int, int>> directions;
  for (const Edge& e : graph) {
    directions.emplace_back(e.i, e.j);
    if (e.j >= first_local) directions.emplace_back(e.j, e.i);
  }

  WindowProblem p = assemble_problem(keyframes_, directions, ids, frozen,
                                     tracking_camera_, cfg_.mode, oracle);
  optimize_problem(p, cfg_.frontend_iters, cfg_.mode);

  // the front-end owns the window: write back window poses and depths only
  for (int s = 0; s < window; ++s) {
    Keyframe& kf = keyframes_[p.ids[s]];
    if (!frozen[s]) kf.world_from_cam = p.state.poses[s];
    kf.inv_depth = std::move(p.state.inv_depths[s]);
    ++kf.version;
  }
  last_graph_ = std::move(graph);
}

Snapshot Tracker::take_snapshot() {
  Snapshot snap;
  snap.serial = ++snapshot_serial_;
  snap.camera = camera_;
  snap.tracking_camera = tracking_camera_;
  snap.keyframes.reserve(keyframes_.size());
  for (const Keyframe& kf : keyframes_) {
    SnapshotKeyframe s;
    s.id = kf.id;
    s.source_frame = kf.source_frame;
    s.timestamp = kf.timestamp;
    s.world_from_cam = kf.world_from_cam;
    s.inv_depth = kf.inv_depth;
    s.prior_inv_depth = kf.prior_inv_depth;
    s.image = kf.image;
    s.depth_obs = kf.depth_obs;
    s.version = kf.version;
    snap.keyframes.push_back(std::move(s));
  }
  return snap;
}

BackendResult Tracker::backend_full_ba(const Snapshot& snapshot,
                                       FlowOracle& oracle) const {
  BackendResult out;
  out.snapshot_serial = snapshot.serial;
  const int n = static_cast<int>(snapshot.keyframes.size());
  if (n < 2) return out;

  std::vector<Keyframe> kfs(n);
  for (int i = 0; i < n; ++i) {
    const SnapshotKeyframe& s = snapshot.keyframes[i];
    kfs[i].id = s.id;
    kfs[i].source_frame = s.source_frame;
    kfs[i].timestamp = s.timestamp;
    kfs[i].world_from_cam = s.world_from_cam;
    kfs[i].inv_depth = s.inv_depth;
    kfs[i].prior_inv_depth = s.prior_inv_depth;
    kfs[i].image = s.image;
    kfs[i].depth_obs = s.depth_obs;
  }

  // one covisibility matrix over the whole history; wider suppression keeps
  // the graph sparse at this scale
  CovisMatrix covis = build_covis_matrix(kfs, n, snapshot.tracking_camera,
                                         cfg_.tau_co, cfg_.covis_stride);
  std::vector<Edge> graph = select_local_edges(covis, cfg_.r_global, cfg_.s_edge);

  std::vector<int> ids(n);
  for (int i = 0; i < n; ++i) ids[i] = i;
  std::vector<uint8_t> frozen(n, 0);
  const int gauge = std::min(cfg_.gauge_frozen_count(), n - 1);
  for (int s = 0; s < gauge; ++s) frozen[s] = 1;

  std::vector<std::pair<int, int>> directions;
  for (const Edge& e : graph) {
    directions.emplace_back(e.i, e.j);
    directions.emplace_back(e.j, e.i);
  }
  WindowProblem p = assemble_problem(kfs, directions, ids, frozen,
                                     snapshot.tracking_camera, cfg_.mode, oracle);
  optimize_problem(p, cfg_.backend_iters, cfg_.mode);

  out.corrections.reserve(n);
  for (int i = 0; i < n; ++i) {
    KeyframeCorrection c;
    c.id = snapshot.keyframes[i].id;
    c.snapshot_pose = snapshot.keyframes[i].world_from_cam;
    c.corrected_pose = p.state.poses[i];
    c.corrected_inv_depth = std::move(p.state.inv_depths[i]);
    c.version_at_snapshot = snapshot.keyframes[i].version;
    out.corrections.push_back(std::move(c));
  }
  return out;
}

void Tracker::merge_backend_result(const BackendResult& result) {
  if (result.snapshot_serial <= merged_serial_)
    throw Error(ErrorCode::StaleSnapshot,
                "backend result predates an already merged snapshot");

  // keyframes untouched since the snapshot take the correction verbatim
  std::vector<std::pair<int, SE3>> anchors;  // (id, world-frame delta)
  std::vector<uint8_t> direct(keyframes_.size(), 0);
  for (const KeyframeCorrection& c : result.corrections) {
    Keyframe& kf = keyframes_.at(static_cast<size_t>(c.id));
    if (kf.version != c.version_at_snapshot) continue;
    anchors.emplace_back(c.id, c.corrected_pose * c.snapshot_pose.inverse());
    kf.world_from_cam = c.corrected_pose;
    kf.inv_depth = c.corrected_inv_depth;
    ++kf.version;
    direct[static_cast<size_t>(c.id)] = 1;
  }

  // everything else rides along with its nearest older corrected anchor so
  // the locally consistent chunk moves rigidly
  if (!anchors.empty()) {
    for (Keyframe& kf : keyframes_) {
      if (direct[static_cast<size_t>(kf.id)]) continue;
      const SE3* delta = nullptr;
      for (const auto& [aid, d] : anchors) {
        if (aid < kf.id) delta = &d;  // anchors are in ascending id order
      }
      if (!delta) delta = &anchors.front().second;
      kf.world_from_cam = (*delta) * kf.world_from_cam;
      ++kf.version;
    }
  }
  merged_serial_ = result.snapshot_serial;
}

// ---- replay pipeline ----

namespace {

ReplayResult finish_result(const Tracker& tracker, int backend_runs,
                           size_t max_edges) {
  ReplayResult out;
  out.backend_runs = backend_runs;
  out.max_graph_edges = max_edges;
  for (const Keyframe& kf : tracker.keyframes()) {
    out.kf_frame_indices.push_back(kf.source_frame);
    out.kf_timestamps.push_back(kf.timestamp);
    out.kf_poses.push_back(kf.world_from_cam);
  }
  return out;
}

}  // namespace

ReplayResult run_replay(const FrameProvider& frames, FlowOracle& oracle,
                        Tracker& tracker, const ReplayHooks& hooks) {
  const TrackerConfig& cfg = tracker.config();
  const int cadence = std::max(1, cfg.n_local / 5);
  int backend_runs = 0;
  int new_since_backend = 0;
  size_t max_edges = 0;

  auto run_backend = [&]() {
    Snapshot snap = tracker.take_snapshot();
    BackendResult br = tracker.backend_full_ba(snap, oracle);
    tracker.merge_backend_result(br);
    ++backend_runs;
    new_since_backend = 0;
  };

  for (int f = 0; f < frames.n_frames; ++f) {
    FrameInput input = frames.frame(f);
    IngestResult r = tracker.ingest_frame(input, oracle);
    if (!r.keyframe_created) continue;
    tracker.frontend_step(oracle);
    max_edges = std::max(max_edges, tracker.last_graph().size());
    ++new_since_backend;
    if (cfg.enable_full_ba && new_since_backend >= cadence &&
        static_cast<int>(tracker.keyframes().size()) >= cfg.n_local) {
      run_backend();
    }
    if (hooks.on_snapshot) hooks.on_snapshot(tracker.take_snapshot());
  }
  if (cfg.enable_full_ba && tracker.keyframes().size() >= 2) run_backend();
  if (hooks.on_final_snapshot) hooks.on_final_snapshot(tracker.take_snapshot());
  return finish_result(tracker, backend_runs, max_edges);
}

// ---- live pipeline ----

namespace {

// single-slot latest-wins hand-off
class SnapshotSlot {
 public:
  void publish(Snapshot snap) {
    std::lock_guard lock(mu_);
    slot_ = std::move(snap);
    cv_.notify_one();
  }
  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    cv_.notify_one();
  }
  bool take(Snapshot& out) {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return slot_.has_value() || closed_; });
    if (!slot_.has_value()) return false;
    out = std::move(*slot_);
    slot_.reset();
    return true;
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::optional<Snapshot> slot_;
  bool closed_ = false;
};

class FrameQueue {
 public:
  explicit FrameQueue(size_t cap) : cap_(cap) {}
  void push(FrameInput frame) {
    std::unique_lock lock(mu_);
    cv_space_.wait(lock, [&] { return q_.size() < cap_; });
    q_.push_back(std::move(frame));
    cv_item_.notify_one();
  }
  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    cv_item_.notify_one();
  }
  bool pop(FrameInput& out) {
    std::unique_lock lock(mu_);
    cv_item_.wait(lock, [&] { return !q_.empty() || closed_; });
    if (q_.empty()) return false;
    out = std::move(q_.front());
    q_.pop_front();
    cv_space_.notify_one();
    return true;
  }

 private:
  size_t cap_;
  std::mutex mu_;
  std::condition_variable cv_item_, cv_space_;
  std::deque<FrameInput> q_;
  bool closed_ = false;
};

}  // namespace

ReplayResult run_live(const FrameProvider& frames, FlowOracle& oracle,
                      Tracker& tracker, const ReplayHooks& hooks) {
  const TrackerConfig& cfg = tracker.config();
  const int cadence = std::max(1, cfg.n_local / 5);

  std::mutex tracker_mu;  // guards every Tracker access
  std::atomic<int> backend_runs{0};
  size_t max_edges = 0;

  FrameQueue queue(8);
  std::thread loader([&] {
    for (int f = 0; f < frames.n_frames; ++f) queue.push(frames.frame(f));
    queue.close();
  });

  // back-end worker: snapshot under the lock, optimize outside it, merge back
  std::mutex ba_mu;
  std::condition_variable ba_cv;
  bool ba_pending = false, ba_stop = false;
  std::exception_ptr ba_error;
  std::thread backend([&] {
    try {
      while (true) {
        {
          std::unique_lock lock(ba_mu);
          ba_cv.wait(lock, [&] { return ba_pending || ba_stop; });
          if (!ba_pending && ba_stop) return;
          ba_pending = false;
        }
        Snapshot snap;
        {
          std::lock_guard lock(tracker_mu);
          snap = tracker.take_snapshot();
        }
        BackendResult br = tracker.backend_full_ba(snap, oracle);
        {
          std::lock_guard lock(tracker_mu);
          try {
            tracker.merge_backend_result(br);
            ++backend_runs;
          } catch (const Error& e) {
            if (e.code() != ErrorCode::StaleSnapshot) throw;
          }
        }
      }
    } catch (...) {
      ba_error = std::current_exception();
    }
  });

  SnapshotSlot slot;
  std::thread consumer([&] {
    Snapshot snap;
    while (slot.take(snap)) {
      if (hooks.on_snapshot) hooks.on_snapshot(snap);
    }
  });

  int new_since_backend = 0;
  FrameInput input;
  while (queue.pop(input)) {
    bool created = false;
    {
      std::lock_guard lock(tracker_mu);
      IngestResult r = tracker.ingest_frame(input, oracle);
      created = r.keyframe_created;
      if (created) {
        tracker.frontend_step(oracle);
        max_edges = std::max(max_edges, tracker.last_graph().size());
      }
    }
    if (!created) continue;
    ++new_since_backend;
    bool trigger;
    {
      std::lock_guard lock(tracker_mu);
      trigger = cfg.enable_full_ba && new_since_backend >= cadence &&
                static_cast<int>(tracker.keyframes().size()) >= cfg.n_local;
    }
    if (trigger) {
      new_since_backend = 0;
      std::lock_guard lock(ba_mu);
      ba_pending = true;
      ba_cv.notify_one();
    }
    if (hooks.on_snapshot) {
      std::lock_guard lock(tracker_mu);
      slot.publish(tracker.take_snapshot());
    }
  }
  loader.join();
  {
    std::lock_guard lock(ba_mu);
    ba_stop = true;
    ba_cv.notify_one();
  }
  backend.join();
  slot.close();
  consumer.join();
  if (ba_error) std::rethrow_exception(ba_error);

  // final global adjustment, synchronous for parity with replay
  if (cfg.enable_full_ba && tracker.keyframes().size() >= 2) {
    Snapshot snap = tracker.take_snapshot();
    BackendResult br = tracker.backend_full_ba(snap, oracle);
    tracker.merge_backend_result(br);
    ++backend_runs;
  }
  if (hooks.on_final_snapshot) hooks.on_final_snapshot(tracker.take_snapshot());
  return finish_result(tracker, backend_runs.load(), max_edges);
}

}  // namespace dvs
