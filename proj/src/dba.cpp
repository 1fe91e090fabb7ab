#include "dvs/dba.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <unordered_map>

namespace dvs {

namespace {

// residual + jacobians for one pixel against a precomputed relative transform;
// returns false when the warp lands behind the target camera or off its image
inline bool linearize_core(const Intrinsics& k, const Mat3& rot, const Vec3& trans,
                           double u, double v, double inv_depth,
                           const Vec2& target_flow, PixelLinearization& out) {
  const double z_src = 1.0 / inv_depth;
  const Vec3 x_src((u - k.cx) / k.fx * z_src, (v - k.cy) / k.fy * z_src, z_src);
  const Vec3 x_dst = rot * x_src + trans;
  if (x_dst.z() <= 0.0) return false;

  const double iz = 1.0 / x_dst.z();
  const double warped_u = k.fx * x_dst.x() * iz + k.cx;
  const double warped_v = k.fy * x_dst.y() * iz + k.cy;
  if (warped_u < 0.0 || warped_u > k.width - 1 || warped_v < 0.0 ||
      warped_v > k.height - 1) {
    return false;
  }

  out.residual = target_flow - Vec2(warped_u - u, warped_v - v);

  Eigen::Matrix<double, 2, 3> j_proj;
  j_proj << k.fx * iz, 0.0, -k.fx * x_dst.x() * iz * iz,
            0.0, k.fy * iz, -k.fy * x_dst.y() * iz * iz;
  const Eigen::Matrix<double, 2, 3> j_proj_rot = j_proj * rot;

  out.j_src.leftCols<3>() = j_proj_rot * skew(x_src);
  out.j_src.rightCols<3>() = -j_proj_rot;
  out.j_dst.leftCols<3>() = -j_proj * skew(x_dst);
  out.j_dst.rightCols<3>() = j_proj;
  out.j_depth = j_proj_rot * (x_src / inv_depth);
  out.valid = true;
  return true;
}

// residual only, for cost evaluation
inline bool residual_core(const Intrinsics& k, const Mat3& rot, const Vec3& trans,
                          double u, double v, double inv_depth,
                          const Vec2& target_flow, Vec2& residual) {
  const double z_src = 1.0 / inv_depth;
  const Vec3 x_src((u - k.cx) / k.fx * z_src, (v - k.cy) / k.fy * z_src, z_src);
  const Vec3 x_dst = rot * x_src + trans;
  if (x_dst.z() <= 0.0) return false;
  const double iz = 1.0 / x_dst.z();
  const double warped_u = k.fx * x_dst.x() * iz + k.cx;
  const double warped_v = k.fy * x_dst.y() * iz + k.cy;
  if (warped_u < 0.0 || warped_u > k.width - 1 || warped_v < 0.0 ||
      warped_v > k.height - 1) {
    return false;
  }
  residual = target_flow - Vec2(warped_u - u, warped_v - v);
  return true;
}

bool has_prior(const BundleState& state, int kf) {
  return static_cast<size_t>(kf) < state.prior_inv_depth.size() &&
         !state.prior_inv_depth[kf].empty();
}

}  // namespace

PixelLinearization linearize_pixel(const Intrinsics& k, const SE3& dst_from_src,
                                   const Vec2& px, double inv_depth,
                                   const Vec2& target_flow) {
  PixelLinearization out;
  if (inv_depth <= 0.0) return out;
  linearize_core(k, dst_from_src.rotation(), dst_from_src.translation(), px.x(),
                 px.y(), inv_depth, target_flow, out);
  return out;
}

double bundle_cost(const BundleState& state,
                   const std::vector<FlowMeasurement>& measurements,
                   double prior_weight) {
  double cost = 0.0;
  for (const FlowMeasurement& m : measurements) {
    const SE3 g = relative_pose(state.poses[m.src], state.poses[m.dst]);
    const Mat3 rot = g.rotation();
    const Vec3 trans = g.translation();
    const InverseDepthMap& dmap = state.inv_depths[m.src];
    for (int r = 0; r < dmap.rows(); ++r) {
      for (int c = 0; c < dmap.cols(); ++c) {
        Vec2 res;
        if (!residual_core(state.camera, rot, trans, c, r, dmap(r, c),
                           m.target_flow(r, c), res)) {
          continue;
        }
        const Vec2& w = m.confidence(r, c);
        cost += w.x() * res.x() * res.x() + w.y() * res.y() * res.y();
      }
    }
  }
  if (prior_weight > 0.0) {
    for (size_t kf = 0; kf < state.inv_depths.size(); ++kf) {
      if (!has_prior(state, static_cast<int>(kf))) continue;
      const auto& prior = state.prior_inv_depth[kf];
      const InverseDepthMap& dmap = state.inv_depths[kf];
      for (size_t i = 0; i < dmap.size(); ++i) {
        if (prior[i] <= 0.0) continue;
        const double e = prior_weight * (dmap[i] - prior[i]);
        cost += e * e;
      }
    }
  }
  return cost;
}

NormalSystem build_normal_system(const BundleState& state,
                                 const std::vector<FlowMeasurement>& measurements,
                                 double lambda, double prior_weight) {
  const int n_kf = static_cast<int>(state.poses.size());

  NormalSystem sys;
  sys.pose_slot.assign(n_kf, -1);
  for (int i = 0; i < n_kf; ++i) {
    if (!state.frozen[i]) sys.pose_slot[i] = sys.n_slots++;
  }
  if (sys.n_slots == 0) {
    fail(ErrorCode::EmptySystem, "normal system has no free poses");
  }
  if (measurements.empty()) {
    fail(ErrorCode::EmptySystem, "normal system has no measurements");
  }

  const int dim = 6 * sys.n_slots;
  sys.h_pp = MatX::Zero(dim, dim);
  sys.g_p = VecX::Zero(dim);

  // one depth block per distinct source keyframe, ordered by window index
  std::unordered_map<int, int> block_of_kf;
  for (const FlowMeasurement& m : measurements) {
    if (!block_of_kf.count(m.src)) block_of_kf[m.src] = 0;
  }
  {
    std::vector<int> src_kfs;
    src_kfs.reserve(block_of_kf.size());
    for (const auto& [kf, _] : block_of_kf) src_kfs.push_back(kf);
    std::sort(src_kfs.begin(), src_kfs.end());
    sys.depth_blocks.resize(src_kfs.size());
    for (size_t b = 0; b < src_kfs.size(); ++b) {
      const int kf = src_kfs[b];
      block_of_kf[kf] = static_cast<int>(b);
      KeyframeDepthBlock& blk = sys.depth_blocks[b];
      blk.kf = kf;
      blk.src_slot = sys.pose_slot[kf];
      const int h = state.inv_depths[kf].rows();
      const int w = state.inv_depths[kf].cols();
      blk.h_d = Grid2D<double>(h, w, lambda);
      blk.g_d = Grid2D<double>(h, w, 0.0);
      blk.src_coupling = Grid2D<Vec6>(h, w, Vec6::Zero());
    }
  }

  size_t n_active_px = 0;
  PixelLinearization lin;
  for (const FlowMeasurement& m : measurements) {
    const SE3 g = relative_pose(state.poses[m.src], state.poses[m.dst]);
    const Mat3 rot = g.rotation();
    const Vec3 trans = g.translation();
    const InverseDepthMap& dmap = state.inv_depths[m.src];

    KeyframeDepthBlock& blk = sys.depth_blocks[block_of_kf[m.src]];
    blk.edges.push_back(DepthEdgeCoupling{
        sys.pose_slot[m.dst],
        Grid2D<Vec6>(dmap.rows(), dmap.cols(), Vec6::Zero())});
    DepthEdgeCoupling& edge = blk.edges.back();

    const int si = sys.pose_slot[m.src];
    const int sj = sys.pose_slot[m.dst];

    for (int r = 0; r < dmap.rows(); ++r) {
      for (int c = 0; c < dmap.cols(); ++c) {
        const Vec2& w = m.confidence(r, c);
        if (w.x() <= 0.0 && w.y() <= 0.0) continue;
        if (!linearize_core(state.camera, rot, trans, c, r, dmap(r, c),
                            m.target_flow(r, c), lin)) {
          continue;
        }
        ++n_active_px;

        Mat26 wj_src = lin.j_src;
        wj_src.row(0) *= w.x();
        wj_src.row(1) *= w.y();
        Mat26 wj_dst = lin.j_dst;
        wj_dst.row(0) *= w.x();
        wj_dst.row(1) *= w.y();
        const Vec2 wr(w.x() * lin.residual.x(), w.y() * lin.residual.y());
        const Vec2 wj_d(w.x() * lin.j_depth.x(), w.y() * lin.j_depth.y());

        if (si >= 0) {
          sys.h_pp.block<6, 6>(6 * si, 6 * si).noalias() +=
              lin.j_src.transpose() * wj_src;
          sys.g_p.segment<6>(6 * si).noalias() += lin.j_src.transpose() * wr;
          blk.src_coupling(r, c).noalias() += lin.j_src.transpose() * wj_d;
        }
        if (sj >= 0) {
          sys.h_pp.block<6, 6>(6 * sj, 6 * sj).noalias() +=
              lin.j_dst.transpose() * wj_dst;
          sys.g_p.segment<6>(6 * sj).noalias() += lin.j_dst.transpose() * wr;
          edge.coupling(r, c).noalias() = lin.j_dst.transpose() * wj_d;
        }
        if (si >= 0 && sj >= 0) {
          const Mat6 h_ij = lin.j_src.transpose() * wj_dst;
          sys.h_pp.block<6, 6>(6 * si, 6 * sj).noalias() += h_ij;
          sys.h_pp.block<6, 6>(6 * sj, 6 * si).noalias() += h_ij.transpose();
        }
        blk.h_d(r, c) += lin.j_depth.dot(wj_d);
        blk.g_d(r, c) += lin.j_depth.dot(wr);
      }
    }
  }

  if (n_active_px == 0) {
    fail(ErrorCode::EmptySystem, "no measurement pixel survives warp and weights");
  }

  if (prior_weight > 0.0) {
    const double w2 = prior_weight * prior_weight;
    for (KeyframeDepthBlock& blk : sys.depth_blocks) {
      if (!has_prior(state, blk.kf)) continue;
      const auto& prior = state.prior_inv_depth[blk.kf];
      const InverseDepthMap& dmap = state.inv_depths[blk.kf];
      for (size_t i = 0; i < dmap.size(); ++i) {
        if (prior[i] <= 0.0) continue;
        blk.h_d[i] += w2;
        blk.g_d[i] += w2 * (dmap[i] - prior[i]);
      }
    }
  }

  sys.h_pp.diagonal().array() += lambda;
  return sys;
}

BundleDelta schur_solve(const NormalSystem& sys) {
  const int dim = 6 * sys.n_slots;
  MatX h_red = sys.h_pp;
  VecX g_red = sys.g_p;

  // per-pixel couplings gathered as (slot, vector) pairs; windows are small so
  // a linear scan for duplicate slots is fine
  std::vector<std::pair<int, Vec6>> entries;
  for (const KeyframeDepthBlock& blk : sys.depth_blocks) {
    const int rows = blk.h_d.rows(), cols = blk.h_d.cols();
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        const double h = blk.h_d(r, c);
        if (!(h > 0.0)) {
          fail(ErrorCode::SingularSystem, "non-positive depth pivot");
        }
        entries.clear();
        if (blk.src_slot >= 0) entries.emplace_back(blk.src_slot, blk.src_coupling(r, c));
        for (const DepthEdgeCoupling& e : blk.edges) {
          if (e.dst_slot < 0) continue;
          const Vec6& cp = e.coupling(r, c);
          bool merged = false;
          for (auto& [slot, vec] : entries) {
            if (slot == e.dst_slot) {
              vec += cp;
              merged = true;
              break;
            }
          }
          if (!merged) entries.emplace_back(e.dst_slot, cp);
        }
        if (entries.empty()) continue;

        const double inv_h = 1.0 / h;
        const double gd_scaled = blk.g_d(r, c) * inv_h;
        for (const auto& [sa, ca] : entries) {
          g_red.segment<6>(6 * sa).noalias() -= ca * gd_scaled;
          for (const auto& [sb, cb] : entries) {
            h_red.block<6, 6>(6 * sa, 6 * sb).noalias() -= ca * (cb.transpose() * inv_h);
          }
        }
      }
    }
  }

  Eigen::LLT<MatX> llt(h_red);
  if (llt.info() != Eigen::Success) {
    fail(ErrorCode::SingularSystem, "reduced pose system is not positive definite");
  }
  VecX dp = llt.solve(-g_red);
  if (!dp.allFinite()) {
    fail(ErrorCode::SingularSystem, "pose solve produced non-finite values");
  }

  BundleDelta delta;
  delta.pose_slot = sys.pose_slot;
  delta.pose_delta = dp;
  for (const KeyframeDepthBlock& blk : sys.depth_blocks) {
    const int rows = blk.h_d.rows(), cols = blk.h_d.cols();
    Grid2D<double> dd(rows, cols, 0.0);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        double coupled = blk.g_d(r, c);
        if (blk.src_slot >= 0) {
          coupled += blk.src_coupling(r, c).dot(dp.segment<6>(6 * blk.src_slot));
        }
        for (const DepthEdgeCoupling& e : blk.edges) {
          if (e.dst_slot < 0) continue;
          coupled += e.coupling(r, c).dot(dp.segment<6>(6 * e.dst_slot));
        }
        dd(r, c) = -coupled / blk.h_d(r, c);
      }
    }
    delta.depth_kf.push_back(blk.kf);
    delta.depth_delta.push_back(std::move(dd));
  }
  return delta;
}

void apply_delta(BundleState& state, const BundleDelta& delta,
                 double min_inv_depth) {
  for (size_t kf = 0; kf < state.poses.size(); ++kf) {
    const int slot = delta.pose_slot[kf];
    if (slot < 0) continue;
    state.poses[kf] = state.poses[kf].retract(delta.pose_delta.segment<6>(6 * slot));
  }
  for (size_t b = 0; b < delta.depth_kf.size(); ++b) {
    InverseDepthMap& dmap = state.inv_depths[delta.depth_kf[b]];
    const Grid2D<double>& dd = delta.depth_delta[b];
    for (size_t i = 0; i < dmap.size(); ++i) {
      dmap[i] = std::max(dmap[i] + dd[i], min_inv_depth);
    }
  }
}

BundleStepResult dba_iterate(BundleState& state,
                             const std::vector<FlowMeasurement>& measurements,
                             double& lambda, const BundleOptions& opts) {
  BundleStepResult result;
  result.cost_before = bundle_cost(state, measurements, opts.prior_weight);

  const std::vector<SE3> saved_poses = state.poses;
  const std::vector<InverseDepthMap> saved_depths = state.inv_depths;

  for (int attempt = 0; attempt <= opts.max_retries; ++attempt) {
    const NormalSystem sys =
        build_normal_system(state, measurements, lambda, opts.prior_weight);
    const BundleDelta delta = schur_solve(sys);
    apply_delta(state, delta, opts.min_inv_depth);

    const double cost = bundle_cost(state, measurements, opts.prior_weight);
    if (cost <= result.cost_before) {
      result.cost_after = cost;
      result.retries = attempt;
      result.accepted = true;
      lambda *= 0.5;
      return result;
    }
    state.poses = saved_poses;
    state.inv_depths = saved_depths;
    lambda *= 10.0;
  }

  result.cost_after = result.cost_before;
  result.retries = opts.max_retries + 1;
  result.accepted = false;
  return result;
}

}  // namespace dvs
