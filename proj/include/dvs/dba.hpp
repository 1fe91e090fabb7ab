#pragma once

#include <vector>

#include "dvs/geometry.hpp"

namespace dvs {

// ---- measurements ----
//
// A flow measurement constrains one ordered keyframe pair: for every pixel of
// the source frame it gives the displacement into the target frame that the
// optimizer should reproduce, plus a per-axis confidence weight.

struct FlowMeasurement {
  int src = -1, dst = -1;     // indices into the bundle window
  Grid2D<Vec2> target_flow;   // pixel displacement source -> target
  Grid2D<Vec2> confidence;    // weights >= 0, zero disables a pixel axis
};

// ---- bundle window ----

struct BundleState {
  Intrinsics camera;                            // optimization-resolution camera
  std::vector<SE3> poses;                       // world-from-camera
  std::vector<InverseDepthMap> inv_depths;      // one per keyframe
  std::vector<Grid2D<double>> prior_inv_depth;  // <=0 entries are invalid; may
                                                // be empty (no prior anywhere)
  std::vector<uint8_t> frozen;                  // poses excluded from the solve
};

struct BundleOptions {
  double prior_weight = 10.0;   // residual scale on (d - d_observed), 0 = off
  double min_inv_depth = 1e-3;  // inverse depth floor applied after updates
  int max_retries = 5;          // damping increases before a step is abandoned
};

// ---- per-pixel linearization ----

struct PixelLinearization {
  Vec2 residual = Vec2::Zero();   // target flow minus induced flow
  Mat26 j_src = Mat26::Zero();    // d residual / d source pose tangent
  Mat26 j_dst = Mat26::Zero();    // d residual / d target pose tangent
  Vec2 j_depth = Vec2::Zero();    // d residual / d source inverse depth
  bool valid = false;             // false when the warp leaves the target view
};

PixelLinearization linearize_pixel(const Intrinsics& k, const SE3& dst_from_src,
                                   const Vec2& px, double inv_depth,
                                   const Vec2& target_flow);

// weighted squared flow error plus the depth-prior penalty
double bundle_cost(const BundleState& state,
                   const std::vector<FlowMeasurement>& measurements,
                   double prior_weight);

// ---- normal equations ----
//
// Pose blocks are kept dense over the free poses. Depth variables stay in
// per-pixel scalar blocks together with their pose couplings so they can be
// eliminated in closed form.

struct DepthEdgeCoupling {
  int dst_slot = -1;        // -1 when the target pose is frozen
  Grid2D<Vec6> coupling;    // J_dst^T W j_d per pixel
};

struct KeyframeDepthBlock {
  int kf = -1;              // window index of the source keyframe
  int src_slot = -1;        // -1 when the source pose is frozen
  Grid2D<double> h_d;       // damped per-pixel depth Hessian
  Grid2D<double> g_d;       // per-pixel depth gradient
  Grid2D<Vec6> src_coupling;
  std::vector<DepthEdgeCoupling> edges;
};

struct NormalSystem {
  int n_slots = 0;
  std::vector<int> pose_slot;  // per keyframe, -1 for frozen poses
  MatX h_pp;                   // 6S x 6S
  VecX g_p;                    // 6S
  std::vector<KeyframeDepthBlock> depth_blocks;
};

NormalSystem build_normal_system(const BundleState& state,
                                 const std::vector<FlowMeasurement>& measurements,
                                 double lambda, double prior_weight);

// ---- solve ----

struct BundleDelta {
  std::vector<int> pose_slot;
  VecX pose_delta;                          // 6 per slot
  std::vector<int> depth_kf;                // parallel to depth_delta
  std::vector<Grid2D<double>> depth_delta;  // inverse-depth increments
};

// Eliminates the per-pixel depth variables, solves the reduced pose system by
// dense Cholesky, then back-substitutes the depth increments.
BundleDelta schur_solve(const NormalSystem& system);

void apply_delta(BundleState& state, const BundleDelta& delta,
                 double min_inv_depth);

// ---- damped Gauss-Newton step ----

struct BundleStepResult {
  double cost_before = 0.0;
  double cost_after = 0.0;
  int retries = 0;
  bool accepted = false;
};

// One accept-or-reject step. Rejected updates are rolled back with the damping
// raised tenfold; accepted ones halve it. The reported cost never increases.
BundleStepResult dba_iterate(BundleState& state,
                             const std::vector<FlowMeasurement>& measurements,
                             double& lambda, const BundleOptions& opts);

}  // namespace dvs
