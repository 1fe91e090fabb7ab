#pragma once

#include <memory>
#include <vector>

#include "dvs/geometry.hpp"

namespace dvs {

using ImageF = Grid2D<std::array<float, 3>>;  // rgb in [0,1]

// ---- keyframes ----

struct Keyframe {
  int id = -1;            // equals its index in the store, strictly increasing
  int source_frame = -1;  // index of the raw input frame it was promoted from
  double timestamp = 0.0;
  std::shared_ptr<const ImageF> image;       // full resolution, may be deferred
  std::shared_ptr<const DepthMap> depth_obs; // sensor depth (rgbd/stereo), or null
  InverseDepthMap inv_depth;                 // estimate at tracking resolution
  Grid2D<double> prior_inv_depth;            // 1/depth_obs at tracking res, <=0 invalid
  SE3 world_from_cam;
  int version = 0;         // bumped on every pose or depth write
  int mapped_version = -1; // version last consumed by the mapper
};

enum class EdgeKind { Temporal, Covis, Loop };

struct Edge {
  int i = -1, j = -1;  // keyframe ids, i != j
  EdgeKind kind = EdgeKind::Temporal;
};

// ---- co-visibility ----

// Mean magnitude of the rigid flow from a into b, averaged over pixels whose
// warp stays in front of and inside the target view; sampled every `stride`
// pixels in each direction. Returns -1 when fewer than 10% of the sampled
// pixels are usable.
double mean_rigid_flow(const Keyframe& a, const Keyframe& b, const Intrinsics& k,
                       int stride = 1);

struct CovisEntry {
  double flow = -1.0;
  bool valid = false;
  bool filtered = false;  // valid but above the co-visibility threshold
};

struct CovisMatrix {
  int first_local = 0;         // store index of the keyframe behind row 0
  Grid2D<CovisEntry> entries;  // N_local rows, one column per keyframe

  int n_local() const { return entries.rows(); }
  int n_total() const { return entries.cols(); }
  int row_id(int r) const { return first_local + r; }
};

CovisMatrix build_covis_matrix(const std::vector<Keyframe>& kfs, int n_local,
                               const Intrinsics& k, double tau_co,
                               int stride = 1);

// ---- edge selection ----

// Temporal chain through the local window plus the most co-visible extra
// pairs. Each accepted pair suppresses candidates whose endpoints both lie
// within r_local of its own, and the total count is capped at
// s_edge * N_local.
std::vector<Edge> select_local_edges(const CovisMatrix& covis, int r_local,
                                     int s_edge);

// ---- loop detection ----

struct LoopCandidate {
  int src = -1, dst = -1;  // keyframe ids, dst older than the local window
  double flow = 0.0;
};

struct LoopDetectState {
  std::vector<std::vector<LoopCandidate>> recent;  // last three invocations
  std::vector<std::pair<int, int>> accepted;       // emitted loop edges
};

// One detection pass over the columns left of the local window, skipping
// pairs within one window size of each other (the recent past is not a
// revisit). A loop edge is emitted only when this and the two previous
// passes each produced a candidate aimed at the same revisited region
// (targets within r_loop).
std::vector<Edge> detect_loops(const CovisMatrix& covis, int r_loop,
                               double tau_co, LoopDetectState& state);

}  // namespace dvs
