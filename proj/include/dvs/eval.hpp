#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "dvs/core.hpp"
#include "dvs/geometry.hpp"
#include "dvs/mesh.hpp"

namespace dvs {

// ---- trajectories ----

struct TimedPose {
  double timestamp = 0.0;  // seconds
  SE3 world_from_cam;
};

// timestamps must be strictly increasing
using Trajectory = std::vector<TimedPose>;

// an estimate sample matches the nearest reference sample within this window
inline constexpr double kAssociationToleranceS = 0.020;

// nearest-timestamp pairs (estimate index, reference index) within the
// association tolerance
std::vector<std::pair<size_t, size_t>> associate(const Trajectory& est,
                                                 const Trajectory& ref);

enum class AlignMode {
  kSE3,   // rigid alignment, metric trajectories
  kSim3,  // rigid + uniform scale, monocular trajectories
};

// similarity transform p -> scale * R * p + t taking estimate positions into
// the reference frame; scale stays 1 in SE3 mode
struct Alignment {
  SE3 transform;
  double scale = 1.0;

  Vec3 apply(const Vec3& p) const {
    return scale * (transform.quat() * p) + transform.translation();
  }
};

// closed-form least-squares alignment over associated pose positions
Alignment align(const Trajectory& est, const Trajectory& ref, AlignMode mode);

// root-mean-square position residual in meters after alignment
double ate_rmse(const Trajectory& est, const Trajectory& ref, AlignMode mode);

// ---- surface reconstruction metrics ----

struct ReconReport {
  double accuracy_cm = 0.0;          // mean estimate-to-reference distance
  double completion_cm = 0.0;        // mean reference-to-estimate distance
  double completion_ratio_pct = 0.0; // reference samples within threshold
  double f_score_pct = 0.0;          // harmonic mean of precision and recall
  double depth_l1_cm = 0.0;          // filled separately by depth_l1
};

// area-weighted random points on the mesh surface, deterministic per seed
std::vector<Vec3> sample_surface(const TriangleMesh& mesh, int n, Rng& rng);

// drops mesh geometry that falls outside every camera frustum along the
// trajectory; reference meshes are trimmed this way before scoring so the
// estimate is not penalized for regions no camera ever saw
TriangleMesh cull_to_observed(const TriangleMesh& mesh, const Trajectory& traj,
                              const Intrinsics& camera);

// point-cloud comparison of two surfaces: both meshes are sampled with
// n_samples points and scored with exact nearest-neighbor distances; the
// threshold (meters) defines the completion ratio and the F-score
ReconReport recon_metrics(const TriangleMesh& est, const TriangleMesh& ref,
                          int n_samples = 200000, double threshold = 0.05,
                          uint64_t seed = 0);

// ---- mesh ray casting ----

// median-split bounding-volume tree over mesh triangles
class MeshRaycaster {
 public:
  explicit MeshRaycaster(const TriangleMesh& mesh);

  // distance along the unit direction to the closest surface point, or a
  // negative value when the ray escapes the mesh
  double cast(const Vec3& origin, const Vec3& dir) const;

 private:
  struct Node {
    Vec3 lo, hi;
    int begin = 0, count = 0;  // leaf triangle range; count 0 for inner nodes
    int left = -1, right = -1;
  };

  std::vector<Node> nodes_;
  std::vector<int> order_;              // triangle indices, leaf-contiguous
  std::vector<Eigen::Matrix3d> tris_;   // columns: vertex 0, edge 1, edge 2

  int build(std::vector<int>& idx, std::vector<Vec3>& centroids, int begin,
            int end);
};

// z-depth image of the mesh from a camera pose; missed pixels are zero
DepthMap render_depth(const MeshRaycaster& caster, const SE3& world_from_cam,
                      const Intrinsics& camera);

// mean absolute z-depth difference in centimeters over pixels covered by
// both meshes, rendered at n_views poses spread evenly along the trajectory;
// the camera is resampled to the given render resolution
double depth_l1(const TriangleMesh& est, const TriangleMesh& ref,
                const Trajectory& traj, const Intrinsics& camera, int n_views,
                int render_width = 320, int render_height = 240);

}  // namespace dvs
