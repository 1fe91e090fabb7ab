#include "dvs/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <unordered_map>

#include <Eigen/Geometry>

#include "dvs/mapper.hpp"
#include "dvs/tracking.hpp"

namespace dvs {

namespace {

void check_timestamps(const Trajectory& traj, const char* which) {
  for (size_t i = 1; i < traj.size(); ++i)
    if (traj[i].timestamp <= traj[i - 1].timestamp)
      fail(ErrorCode::BadConfig,
           std::string(which) + " trajectory timestamps must be strictly "
                                "increasing");
}

}  // namespace

std::vector<std::pair<size_t, size_t>> associate(const Trajectory& est,
                                                 const Trajectory& ref) {
  check_timestamps(est, "estimate");
  check_timestamps(ref, "reference");

  std::vector<double> ref_ts(ref.size());
  for (size_t j = 0; j < ref.size(); ++j) ref_ts[j] = ref[j].timestamp;

  std::vector<std::pair<size_t, size_t>> pairs;
  for (size_t i = 0; i < est.size(); ++i) {
    const double t = est[i].timestamp;
    const auto it = std::lower_bound(ref_ts.begin(), ref_ts.end(), t);
    size_t j = static_cast<size_t>(it - ref_ts.begin());
    if (j == ref_ts.size() ||
        (j > 0 && t - ref_ts[j - 1] < ref_ts[j] - t))
      --j;
    if (j < ref_ts.size() && std::abs(ref_ts[j] - t) <= kAssociationToleranceS)
      pairs.emplace_back(i, j);
  }
  return pairs;
}

namespace {

Alignment align_pairs(const Trajectory& est, const Trajectory& ref,
                      const std::vector<std::pair<size_t, size_t>>& pairs,
                      AlignMode mode) {
  if (pairs.size() < 3)
    fail(ErrorCode::TooFewPairs,
         "alignment needs at least three associated poses, got " +
             std::to_string(pairs.size()));

  const int n = static_cast<int>(pairs.size());
  Eigen::Matrix3Xd src(3, n), dst(3, n);
  for (int k = 0; k < n; ++k) {
    src.col(k) = est[pairs[static_cast<size_t>(k)].first]
                     .world_from_cam.translation();
    dst.col(k) = ref[pairs[static_cast<size_t>(k)].second]
                     .world_from_cam.translation();
  }

  if (mode == AlignMode::kSim3) {
    const Eigen::Matrix3Xd centered = src.colwise() - src.rowwise().mean();
    if (centered.squaredNorm() < 1e-18)
      fail(ErrorCode::SingularSystem,
           "cannot scale-align a stationary trajectory");
  }

  const Mat4 m = Eigen::umeyama(src, dst, mode == AlignMode::kSim3);
  const Mat3 scaled_rot = m.topLeftCorner<3, 3>();
  const double scale = std::cbrt(scaled_rot.determinant());

  Alignment out;
  out.scale = scale;
  out.transform = SE3(Mat3(scaled_rot / scale), Vec3(m.topRightCorner<3, 1>()));
  return out;
}

}  // namespace

Alignment align(const Trajectory& est, const Trajectory& ref, AlignMode mode) {
  return align_pairs(est, ref, associate(est, ref), mode);
}

double ate_rmse(const Trajectory& est, const Trajectory& ref, AlignMode mode) {
  const auto pairs = associate(est, ref);
  const Alignment a = align_pairs(est, ref, pairs, mode);

  double sum_sq = 0.0;
  for (const auto& [i, j] : pairs) {
    const Vec3 r = a.apply(est[i].world_from_cam.translation()) -
                   ref[j].world_from_cam.translation();
    sum_sq += r.squaredNorm();
  }
  return std::sqrt(sum_sq / static_cast<double>(pairs.size()));
}

// ---- surface sampling and nearest-neighbor queries ----

std::vector<Vec3> sample_surface(const TriangleMesh& mesh, int n, Rng& rng) {
  if (n < 0) fail(ErrorCode::BadConfig, "sample count must be non-negative");
  if (mesh.empty())
    fail(ErrorCode::EmptyMesh, "cannot sample an empty mesh surface");

  std::vector<double> cum(mesh.triangles.size());
  double total = 0.0;
  for (size_t t = 0; t < mesh.triangles.size(); ++t) {
    const Eigen::Vector3i& tri = mesh.triangles[t];
    const Vec3& a = mesh.vertices[static_cast<size_t>(tri[0])];
    const Vec3& b = mesh.vertices[static_cast<size_t>(tri[1])];
    const Vec3& c = mesh.vertices[static_cast<size_t>(tri[2])];
    total += 0.5 * (b - a).cross(c - a).norm();
    cum[t] = total;
  }
  if (total <= 0.0)
    fail(ErrorCode::EmptyMesh, "mesh has zero surface area");

  std::vector<Vec3> points;
  points.reserve(static_cast<size_t>(n));
  for (int k = 0; k < n; ++k) {
    const double u = rng.uniform() * total;
    const size_t t = static_cast<size_t>(
        std::upper_bound(cum.begin(), cum.end(), u) - cum.begin());
    const Eigen::Vector3i& tri = mesh.triangles[std::min(t, cum.size() - 1)];
    const Vec3& a = mesh.vertices[static_cast<size_t>(tri[0])];
    const Vec3& b = mesh.vertices[static_cast<size_t>(tri[1])];
    const Vec3& c = mesh.vertices[static_cast<size_t>(tri[2])];
    // square-root warp gives uniform density over the triangle area
    const double su = std::sqrt(rng.uniform());
    const double v = rng.uniform();
    points.push_back((1.0 - su) * a + su * (1.0 - v) * b + su * v * c);
  }
  return points;
}

namespace {

// uniform voxel hash over a fixed point cloud answering exact nearest-neighbor
// distances; query cost grows with distance via an expanding shell search
class PointGrid {
 public:
  PointGrid(const std::vector<Vec3>& pts, double cell)
      : pts_(pts), cell_(cell) {
    lo_ = Vec3::Constant(std::numeric_limits<double>::max());
    hi_ = Vec3::Constant(std::numeric_limits<double>::lowest());
    for (size_t i = 0; i < pts.size(); ++i) {
      lo_ = lo_.cwiseMin(pts[i]);
      hi_ = hi_.cwiseMax(pts[i]);
      cells_[key_of(pts[i])].push_back(static_cast<int32_t>(i));
    }
  }

  double nearest(const Vec3& q) const {
    const int64_t qx = coord(q.x());
    const int64_t qy = coord(q.y());
    const int64_t qz = coord(q.z());

    // a shell beyond this radius cannot contain any cloud point
    int64_t max_ring = 1;
    for (int a = 0; a < 3; ++a) {
      const double reach = std::max(std::abs(q[a] - lo_[a]),
                                    std::abs(q[a] - hi_[a]));
      max_ring = std::max(
          max_ring, static_cast<int64_t>(std::ceil(reach / cell_)) + 1);
    }

    double best_sq = std::numeric_limits<double>::max();
    const auto scan = [&](int64_t x, int64_t y, int64_t z) {
      const auto it = cells_.find(key(x, y, z));
      if (it == cells_.end()) return;
      for (const int32_t i : it->second)
        best_sq =
            std::min(best_sq, (pts_[static_cast<size_t>(i)] - q).squaredNorm());
    };

    for (int64_t r = 0; r <= max_ring; ++r) {
      if (r == 0) {
        scan(qx, qy, qz);
      } else {
        // the six faces of the cube shell at Chebyshev radius r
        for (int64_t dx = -r; dx <= r; ++dx)
          for (int64_t dy = -r; dy <= r; ++dy) {
            scan(qx + dx, qy + dy, qz - r);
            scan(qx + dx, qy + dy, qz + r);
          }
        for (int64_t dx = -r; dx <= r; ++dx)
          for (int64_t dz = -r + 1; dz <= r - 1; ++dz) {
            scan(qx + dx, qy - r, qz + dz);
            scan(qx + dx, qy + r, qz + dz);
          }
        for (int64_t dy = -r + 1; dy <= r - 1; ++dy)
          for (int64_t dz = -r + 1; dz <= r - 1; ++dz) {
            scan(qx - r, qy + dy, qz + dz);
            scan(qx + r, qy + dy, qz + dz);
          }
      }
      // every unvisited point sits at least r cells away
      const double bound = static_cast<double>(r) * cell_;
      if (best_sq <= bound * bound) break;
    }
    return std::sqrt(best_sq);
  }

 private:
  int64_t coord(double v) const {
    return static_cast<int64_t>(std::floor(v / cell_));
  }

  static uint64_t key(int64_t x, int64_t y, int64_t z) {
    // aliased cells only merge buckets, which adds candidates but never
    // hides a point from the shell that contains it
    const uint64_t a = static_cast<uint64_t>(x) * 0x9E3779B97F4A7C15ull;
    const uint64_t b = static_cast<uint64_t>(y) * 0xC2B2AE3D27D4EB4Full;
    const uint64_t c = static_cast<uint64_t>(z) * 0x165667B19E3779F9ull;
    return a ^ (b + (a << 6) + (a >> 2)) ^ (c << 1);
  }

  uint64_t key_of(const Vec3& p) const {
    return key(coord(p.x()), coord(p.y()), coord(p.z()));
  }

  const std::vector<Vec3>& pts_;
  double cell_;
  Vec3 lo_, hi_;
  std::unordered_map<uint64_t, std::vector<int32_t>> cells_;
};

}  // namespace

TriangleMesh cull_to_observed(const TriangleMesh& mesh, const Trajectory& traj,
                              const Intrinsics& camera) {
  Snapshot snap;
  snap.camera = camera;
  snap.tracking_camera = camera;
  for (size_t i = 0; i < traj.size(); ++i) {
    SnapshotKeyframe kf;
    kf.id = static_cast<int>(i);
    kf.world_from_cam = traj[i].world_from_cam;
    snap.keyframes.push_back(std::move(kf));
  }

  TriangleMesh out = mesh;
  cull_unobserved(out, snap, 0.0);
  return out;
}

ReconReport recon_metrics(const TriangleMesh& est, const TriangleMesh& ref,
                          int n_samples, double threshold, uint64_t seed) {
  if (n_samples < 1)
    fail(ErrorCode::BadConfig, "reconstruction metrics need n_samples >= 1");
  if (threshold <= 0.0)
    fail(ErrorCode::BadConfig, "distance threshold must be positive");
  if (est.empty() || ref.empty())
    fail(ErrorCode::EmptyMesh,
         "reconstruction metrics need two non-empty meshes");

  Rng rng_est(seed, 0x45535420ull);
  Rng rng_ref(seed, 0x52454620ull);
  const std::vector<Vec3> est_pts = sample_surface(est, n_samples, rng_est);
  const std::vector<Vec3> ref_pts = sample_surface(ref, n_samples, rng_ref);

  const PointGrid ref_grid(ref_pts, threshold);
  const PointGrid est_grid(est_pts, threshold);

  double acc_sum = 0.0;
  int precise = 0;
  for (const Vec3& p : est_pts) {
    const double d = ref_grid.nearest(p);
    acc_sum += d;
    if (d < threshold) ++precise;
  }

  double comp_sum = 0.0;
  int complete = 0;
  for (const Vec3& p : ref_pts) {
    const double d = est_grid.nearest(p);
    comp_sum += d;
    if (d < threshold) ++complete;
  }

  const double n = static_cast<double>(n_samples);
  const double precision = 100.0 * static_cast<double>(precise) / n;
  const double recall = 100.0 * static_cast<double>(complete) / n;

  ReconReport report;
  report.accuracy_cm = 100.0 * acc_sum / n;
  report.completion_cm = 100.0 * comp_sum / n;
  report.completion_ratio_pct = recall;
  report.f_score_pct = (precision + recall > 0.0)
                           ? 2.0 * precision * recall / (precision + recall)
                           : 0.0;
  return report;
}

// ---- mesh ray casting ----

MeshRaycaster::MeshRaycaster(const TriangleMesh& mesh) {
  if (mesh.empty())
    fail(ErrorCode::EmptyMesh, "cannot cast rays against an empty mesh");

  const int n = static_cast<int>(mesh.triangles.size());
  tris_.resize(static_cast<size_t>(n));
  std::vector<Vec3> centroids(static_cast<size_t>(n));
  std::vector<int> idx(static_cast<size_t>(n));
  for (int t = 0; t < n; ++t) {
    const Eigen::Vector3i& tri = mesh.triangles[static_cast<size_t>(t)];
    const Vec3& a = mesh.vertices[static_cast<size_t>(tri[0])];
    const Vec3& b = mesh.vertices[static_cast<size_t>(tri[1])];
    const Vec3& c = mesh.vertices[static_cast<size_t>(tri[2])];
    tris_[static_cast<size_t>(t)].col(0) = a;
    tris_[static_cast<size_t>(t)].col(1) = b - a;
    tris_[static_cast<size_t>(t)].col(2) = c - a;
    centroids[static_cast<size_t>(t)] = (a + b + c) / 3.0;
    idx[static_cast<size_t>(t)] = t;
  }

  nodes_.reserve(static_cast<size_t>(2 * n));
  build(idx, centroids, 0, n);
  order_ = std::move(idx);
}

int MeshRaycaster::build(std::vector<int>& idx, std::vector<Vec3>& centroids,
                         int begin, int end) {
  const int node_index = static_cast<int>(nodes_.size());
  nodes_.emplace_back();

  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::max());
  Vec3 hi = Vec3::Constant(std::numeric_limits<double>::lowest());
  for (int i = begin; i < end; ++i) {
    const Eigen::Matrix3d& t = tris_[static_cast<size_t>(idx[static_cast<size_t>(i)])];
    const Vec3 a = t.col(0);
    const Vec3 b = a + t.col(1);
    const Vec3 c = a + t.col(2);
    lo = lo.cwiseMin(a).cwiseMin(b).cwiseMin(c);
    hi = hi.cwiseMax(a).cwiseMax(b).cwiseMax(c);
  }
  nodes_[static_cast<size_t>(node_index)].lo = lo;
  nodes_[static_cast<size_t>(node_index)].hi = hi;

  constexpr int kLeafSize = 4;
  if (end - begin <= kLeafSize) {
    nodes_[static_cast<size_t>(node_index)].begin = begin;
    nodes_[static_cast<size_t>(node_index)].count = end - begin;
    return node_index;
  }

  // split at the centroid median along the widest axis
  Vec3 clo = Vec3::Constant(std::numeric_limits<double>::max());
  Vec3 chi = Vec3::Constant(std::numeric_limits<double>::lowest());
  for (int i = begin; i < end; ++i) {
    const Vec3& c = centroids[static_cast<size_t>(idx[static_cast<size_t>(i)])];
    clo = clo.cwiseMin(c);
    chi = chi.cwiseMax(c);
  }
  int axis = 0;
  (chi - clo).maxCoeff(&axis);

  const int mid = (begin + end) / 2;
  std::nth_element(idx.begin() + begin, idx.begin() + mid, idx.begin() + end,
                   [&](int a, int b) {
                     return centroids[static_cast<size_t>(a)][axis] <
                            centroids[static_cast<size_t>(b)][axis];
                   });

  const int left = build(idx, centroids, begin, mid);
  const int right = build(idx, centroids, mid, end);
  nodes_[static_cast<size_t>(node_index)].left = left;
  nodes_[static_cast<size_t>(node_index)].right = right;
  return node_index;
}

double MeshRaycaster::cast(const Vec3& origin, const Vec3& dir) const {
  const Vec3 inv_dir = dir.cwiseInverse();
  double best = std::numeric_limits<double>::max();

  int stack[128];
  int top = 0;
  stack[top++] = 0;
  while (top > 0) {
    const Node& node = nodes_[static_cast<size_t>(stack[--top])];

    // slab test; infinities from zero direction components behave correctly
    double t0 = 1e-9, t1 = best;
    bool hit_box = true;
    for (int a = 0; a < 3; ++a) {
      double ta = (node.lo[a] - origin[a]) * inv_dir[a];
      double tb = (node.hi[a] - origin[a]) * inv_dir[a];
      if (ta > tb) std::swap(ta, tb);
      if (std::isnan(ta) || std::isnan(tb)) continue;
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
      if (t0 > t1) {
        hit_box = false;
        break;
      }
    }
    if (!hit_box) continue;

    if (node.count > 0) {
      for (int i = node.begin; i < node.begin + node.count; ++i) {
        const Eigen::Matrix3d& tri =
            tris_[static_cast<size_t>(order_[static_cast<size_t>(i)])];
        const Vec3 e1 = tri.col(1);
        const Vec3 e2 = tri.col(2);
        const Vec3 pvec = dir.cross(e2);
        const double det = e1.dot(pvec);
        if (std::abs(det) < 1e-14) continue;
        const double inv_det = 1.0 / det;
        const Vec3 tvec = origin - tri.col(0);
        const double u = tvec.dot(pvec) * inv_det;
        if (u < -1e-12 || u > 1.0 + 1e-12) continue;
        const Vec3 qvec = tvec.cross(e1);
        const double v = dir.dot(qvec) * inv_det;
        if (v < -1e-12 || u + v > 1.0 + 1e-12) continue;
        const double t = e2.dot(qvec) * inv_det;
        if (t > 1e-9 && t < best) best = t;
      }
    } else {
      // median splits keep the tree balanced, so depth stays far below the
      // stack capacity
      stack[top++] = node.right;
      stack[top++] = node.left;
    }
  }
  return best < std::numeric_limits<double>::max() ? best : -1.0;
}

DepthMap render_depth(const MeshRaycaster& caster, const SE3& world_from_cam,
                      const Intrinsics& camera) {
  DepthMap depth(camera.height, camera.width, 0.0f);
  const Vec3 origin = world_from_cam.translation();
  for (int r = 0; r < camera.height; ++r)
    for (int c = 0; c < camera.width; ++c) {
      const Vec3 dir_cam = camera.backproject(Vec2(c, r), 1.0).normalized();
      const double t = caster.cast(origin, world_from_cam.quat() * dir_cam);
      if (t > 0.0) depth(r, c) = static_cast<float>(t * dir_cam.z());
    }
  return depth;
}

double depth_l1(const TriangleMesh& est, const TriangleMesh& ref,
                const Trajectory& traj, const Intrinsics& camera, int n_views,
                int render_width, int render_height) {
  if (n_views < 1)
    fail(ErrorCode::BadConfig, "depth comparison needs n_views >= 1");
  if (render_width < 1 || render_height < 1)
    fail(ErrorCode::BadConfig, "render resolution must be positive");
  if (traj.empty())
    fail(ErrorCode::BadConfig, "depth comparison needs at least one pose");

  // per-axis rescale keeps the field of view at the render resolution
  Intrinsics rc = camera;
  const double sx = static_cast<double>(render_width) / camera.width;
  const double sy = static_cast<double>(render_height) / camera.height;
  rc.fx *= sx;
  rc.cx *= sx;
  rc.fy *= sy;
  rc.cy *= sy;
  rc.width = render_width;
  rc.height = render_height;

  const MeshRaycaster est_caster(est);
  const MeshRaycaster ref_caster(ref);

  const int views = std::min<int>(n_views, static_cast<int>(traj.size()));
  double sum = 0.0;
  int64_t count = 0;
  for (int v = 0; v < views; ++v) {
    const size_t i = static_cast<size_t>(v) * traj.size() /
                     static_cast<size_t>(views);
    const SE3& pose = traj[i].world_from_cam;
    const DepthMap de = render_depth(est_caster, pose, rc);
    const DepthMap dr = render_depth(ref_caster, pose, rc);
    for (size_t p = 0; p < de.size(); ++p)
      if (de[p] > 0.0f && dr[p] > 0.0f) {
        sum += std::abs(static_cast<double>(de[p]) - dr[p]);
        ++count;
      }
  }
  if (count == 0)
    fail(ErrorCode::NoOverlap, "no pixel covered by both meshes");
  return 100.0 * sum / static_cast<double>(count);
}

}  // namespace dvs
