#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "dvs/field.hpp"
#include "dvs/mesh.hpp"
#include "dvs/tracking.hpp"

namespace dvs {

// ---- instant mapping ----
//
// Trains the implicit field against snapshots of keyframe geometry: pick
// keyframes worth refreshing, shoot rays through their pixels, render the
// field along each ray, and step the parameters against color, depth,
// distance-supervision, and unit-gradient losses. Poses and depths are taken
// from the snapshot as-is; the tracker owns their refinement.

struct MappingConfig {
  int pixels_per_keyframe = 200;  // rays sampled per selected keyframe
  int n_stratified = 24;          // coverage samples per ray
  int n_importance = 48;          // samples packed around the observed depth
  int n_iter = 2;                 // optimizer steps per mapping round
  double tau_trunc = 0.16;        // direct-supervision band around depth (m)
  double beta = 5.0;              // free-space penalty steepness
  double lambda_c = 1.0;
  double lambda_dep = 1.0;
  double lambda_eik = 0.1;
  double lambda_sdf = 1.0;
  double lr_tables = 1e-2;        // feature-table learning rate
  double lr_network = 1e-3;       // network weights and sharpness
  int top_k = 10;                 // most-moved keyframes per round
  int stratified_keyframes = 10;  // history coverage picks per round
  double t_near = 0.05;           // first ray sample (m)
  double far_fallback = 0.0;      // rays without depth march this far;
                                  // <=0 derives it from the field bounds
  int mesh_resolution = 128;      // extraction grid cells per axis

  void validate() const;  // throws BadConfig
};

// ---- rays ----

struct RayBatch {
  struct Ray {
    Vec3 origin = Vec3::Zero();
    Vec3 dir = Vec3::UnitZ();   // unit length
    std::vector<double> t;      // sample distances, sorted strictly ascending
    Vec3 color_gt = Vec3::Zero();
    double depth_gt = -1.0;     // distance along dir, <=0 when unobserved
    bool has_color = false;
  };
  std::vector<Ray> rays;
};

// M pixels with valid depth, drawn without replacement when enough exist and
// with replacement otherwise; per ray, coverage samples span [t_near,
// depth + 4 tau] and importance samples fill [depth - tau, depth + tau].
// Observed depth maps are sampled at full resolution through `camera`;
// keyframes carrying only estimated inverse depth sample at the tracking
// resolution through `tracking_camera`. A keyframe with no depth at all
// yields coverage rays marching to far_fallback.
RayBatch sample_rays(const SnapshotKeyframe& kf, const Intrinsics& camera,
                     const Intrinsics& tracking_camera,
                     const MappingConfig& cfg, double far_fallback, Rng& rng);

// ---- rendering ----
//
// Opacity compares adjacent sigmoid-mapped distances: alpha_i =
// max((sig(phi_i) - sig(phi_{i+1})) / sig(phi_i), 0), computed in log space
// so deeply saturated distances stay finite. The last sample's alpha is zero
// by convention. Weights are alpha times accumulated transmittance.

void render_weights(const std::vector<double>& phi, double sharpness,
                    std::vector<double>& alpha, std::vector<double>& weight,
                    std::vector<double>& trans);

struct RayRender {
  std::vector<double> phi;
  std::vector<Vec3> normal;
  std::vector<double> alpha, weight, trans;
  Vec3 c_hat = Vec3::Zero();
  double d_hat = 0.0;
  double d_var = 0.0;
  double weight_sum = 0.0;
};

void render_ray(const Field& field, const RayBatch::Ray& ray,
                std::vector<Field::PointEval>& evals, RayRender& out);

// ---- losses ----

// rays whose rendered depth variance falls below this are excluded from the
// depth term; the variance enters under a square root in the denominator
inline constexpr double kDepthVarFloor = 1e-10;

struct LossTerms {
  double color = 0.0;
  double depth = 0.0;
  double eikonal = 0.0;
  double sdf = 0.0;

  double total(const MappingConfig& cfg) const {
    return cfg.lambda_c * color + cfg.lambda_dep * depth +
           cfg.lambda_eik * eikonal + cfg.lambda_sdf * sdf;
  }
};

// aggregation only; renders must be parallel to batch.rays. Rays without
// ground-truth color or depth stay out of the respective terms, and rays
// whose depth variance is below 1e-10 are excluded from the depth loss.
LossTerms compute_losses(const RayBatch& batch,
                         const std::vector<RayRender>& renders,
                         const MappingConfig& cfg);

// fused forward and backward pass: accumulates d total / d params into grad
// (param_count doubles, caller-zeroed) and returns the loss values
LossTerms loss_gradient(const Field& field, const RayBatch& batch,
                        const MappingConfig& cfg, std::vector<double>& grad);

// ---- keyframe selection ----

struct MapperState {
  struct Record {
    SE3 pose;         // pose at the last round that sampled this keyframe
    int version = -1;
  };
  std::unordered_map<int, Record> mapped;
};

// translation norm plus half the rotation angle; the ranking metric for
// deciding which mapped keyframes moved most since their last refresh
double pose_difference(const SE3& a, const SE3& b);

// union of: latest two keyframes, never-mapped keyframes, top-k by pose
// difference since last mapping (movers only), and a stratified sample
// across the whole history; ascending id order
std::vector<int> select_keyframes(const Snapshot& snap,
                                  const MapperState& state,
                                  const MappingConfig& cfg, Rng& rng);

// padded axis-aligned box covering camera centers and their observed depth
// extent; the field bounds for a dataset without metadata
void snapshot_bounds(const Snapshot& snap, double pad_factor, Vec3& lo,
                     Vec3& hi);

// ---- mesh extraction ----

// zero isosurface of f sampled on a res^3 grid over [lo, hi]; cells are
// split into six tetrahedra so extraction needs no case tables; throws
// EmptyMesh when the grid never changes sign
TriangleMesh isosurface_grid(const std::function<double(const Vec3&)>& f,
                             const Vec3& lo, const Vec3& hi, int res);

// drops triangles whose vertices no keyframe observes: outside every
// frustum, or beyond the keyframe's depth reading plus tau at that pixel
void cull_unobserved(TriangleMesh& mesh, const Snapshot& snap,
                     double tau_trunc);

// per-vertex colors queried from the field
void colorize_mesh(TriangleMesh& mesh, const Field& field);

TriangleMesh extract_mesh(const Field& field, const Snapshot& snap,
                          int grid_res, double tau_trunc);

// ---- mapper context ----
//
// Owns the field, its optimizer, and the mapped-keyframe bookkeeping. One
// context per run; snapshots arrive through a latest-wins slot in live mode
// so a round always trains against the newest geometry.

class Mapper {
 public:
  Mapper(Field field, const MappingConfig& cfg, uint64_t seed);

  // one mapping round: select, sample, then n_iter optimizer steps on the
  // same rays; returns the losses measured before the first step
  LossTerms map_snapshot(const Snapshot& snap);

  TriangleMesh extract(const Snapshot& snap) const;

  const Field& field() const { return field_; }
  Field& field() { return field_; }
  const MappingConfig& config() const { return cfg_; }
  const MapperState& state() const { return state_; }
  int rounds() const { return rounds_; }
  int64_t optimizer_steps() const { return adam_.steps_taken(); }

 private:
  double far_fallback() const;

  Field field_;
  MappingConfig cfg_;
  Adam adam_;
  std::vector<float> lr_;
  MapperState state_;
  Rng rng_;
  std::vector<double> grad_;
  int rounds_ = 0;
};

}  // namespace dvs
