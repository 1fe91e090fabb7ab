#include "dvs/mapper.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <unordered_map>
#include <utility>

namespace dvs {

namespace {

inline double softplus(double z) {
  return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

inline double logistic(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double sign_of(double x) { return (x > 0.0) - (x < 0.0); }

// distance-supervision term for one sample: inside the truncation band the
// prediction chases b directly, outside it pays for violating free space,
// either by being too negative (exp branch) or by exceeding the bound
double bound_term(double phi, double b, double tau, double beta,
                  double& d_phi) {
  if (std::abs(b) <= tau) {
    const double diff = phi - b;
    d_phi = sign_of(diff);
    return std::abs(diff);
  }
  const double v_exp = std::expm1(-beta * phi);
  const double v_lin = phi - b;
  if (v_exp <= 0.0 && v_lin <= 0.0) {
    d_phi = 0.0;
    return 0.0;
  }
  if (v_exp >= v_lin) {
    d_phi = -beta * (v_exp + 1.0);
    return v_exp;
  }
  d_phi = 1.0;
  return v_lin;
}

double eikonal_term(const Vec3& n, Vec3& d_n) {
  const double len = n.norm();
  const double r = 1.0 - len;
  d_n = len > 1e-30 ? Vec3((-2.0 * r / len) * n) : Vec3::Zero();
  return r * r;
}

}  // namespace

// ---- configuration ----

void MappingConfig::validate() const {
  if (pixels_per_keyframe < 1 || n_stratified < 1 || n_importance < 1 ||
      n_iter < 1)
    fail(ErrorCode::BadConfig, "sample and iteration counts must be positive");
  if (!(tau_trunc > 0.0) || !(beta > 0.0))
    fail(ErrorCode::BadConfig, "truncation band and slope must be positive");
  if (!(lambda_c > 0.0) || !(lambda_dep > 0.0) || !(lambda_eik > 0.0) ||
      !(lambda_sdf > 0.0))
    fail(ErrorCode::BadConfig, "loss weights must be positive");
  if (!(lr_tables > 0.0) || !(lr_network > 0.0))
    fail(ErrorCode::BadConfig, "learning rates must be positive");
  if (top_k < 1 || stratified_keyframes < 1)
    fail(ErrorCode::BadConfig, "selection counts must be positive");
  if (!(t_near > 0.0))
    fail(ErrorCode::BadConfig, "near plane must be positive");
  if (mesh_resolution < 2)
    fail(ErrorCode::BadConfig, "mesh grid needs at least two cells per axis");
}

// ---- rays ----

RayBatch sample_rays(const SnapshotKeyframe& kf, const Intrinsics& camera,
                     const Intrinsics& tracking_camera,
                     const MappingConfig& cfg, double far_fallback, Rng& rng) {
  const bool use_obs = kf.depth_obs && !kf.depth_obs->empty();
  const bool use_est = !use_obs && !kf.inv_depth.empty();

  int rows, cols;
  const Intrinsics* cam;
  if (use_obs) {
    rows = kf.depth_obs->rows();
    cols = kf.depth_obs->cols();
    cam = &camera;
  } else if (use_est) {
    rows = kf.inv_depth.rows();
    cols = kf.inv_depth.cols();
    cam = &tracking_camera;
  } else {
    rows = camera.height;
    cols = camera.width;
    cam = &camera;
  }
  if (rows < 1 || cols < 1)
    fail(ErrorCode::BadConfig, "keyframe has no pixels to sample");

  std::vector<int> valid;
  if (use_obs) {
    valid.reserve(static_cast<size_t>(rows) * cols);
    for (int i = 0; i < rows * cols; ++i)
      if ((*kf.depth_obs)[static_cast<size_t>(i)] > 0.0f) valid.push_back(i);
  } else if (use_est) {
    // estimated inverse depths are strictly positive by construction
    valid.resize(static_cast<size_t>(rows) * cols);
    std::iota(valid.begin(), valid.end(), 0);
  }

  const int m = cfg.pixels_per_keyframe;
  std::vector<int> picks(static_cast<size_t>(m));
  if (static_cast<int>(valid.size()) >= m) {
    // partial shuffle, distinct picks
    for (int j = 0; j < m; ++j) {
      const int k = rng.uniform_int(j, static_cast<int>(valid.size()) - 1);
      std::swap(valid[static_cast<size_t>(j)], valid[static_cast<size_t>(k)]);
      picks[static_cast<size_t>(j)] = valid[static_cast<size_t>(j)];
    }
  } else if (!valid.empty()) {
    for (int j = 0; j < m; ++j)
      picks[static_cast<size_t>(j)] =
          valid[static_cast<size_t>(rng.uniform_int(
              0, static_cast<int>(valid.size()) - 1))];
  } else {
    // nothing observed here; emit coverage rays without depth supervision
    for (int j = 0; j < m; ++j)
      picks[static_cast<size_t>(j)] = rng.uniform_int(0, rows * cols - 1);
  }

  const bool have_image = kf.image && !kf.image->empty();
  const Mat3 rot = kf.world_from_cam.rotation();
  const Vec3 origin = kf.world_from_cam.translation();
  const double far_free = std::max(far_fallback, cfg.t_near + 1e-3);
  const int n_total = cfg.n_stratified + cfg.n_importance;

  RayBatch batch;
  batch.rays.resize(static_cast<size_t>(m));
  for (int j = 0; j < m; ++j) {
    const int idx = picks[static_cast<size_t>(j)];
    const int r = idx / cols;
    const int c = idx % cols;
    RayBatch::Ray& ray = batch.rays[static_cast<size_t>(j)];

    const Vec3 dir_cam = cam->backproject(Vec2(c, r), 1.0);
    const double z_norm = dir_cam.norm();
    ray.origin = origin;
    ray.dir = rot * (dir_cam / z_norm);

    // depth maps store z-depth; samples march along the unit ray direction
    if (use_obs)
      ray.depth_gt = static_cast<double>((*kf.depth_obs)(r, c)) * z_norm;
    else if (use_est)
      ray.depth_gt = z_norm / kf.inv_depth(r, c);
    else
      ray.depth_gt = -1.0;

    if (have_image) {
      int ri = r, ci = c;
      if (kf.image->rows() != rows || kf.image->cols() != cols) {
        ri = std::min(kf.image->rows() - 1, r * kf.image->rows() / rows);
        ci = std::min(kf.image->cols() - 1, c * kf.image->cols() / cols);
      }
      const auto& rgb = (*kf.image)(ri, ci);
      ray.color_gt = Vec3(rgb[0], rgb[1], rgb[2]);
      ray.has_color = true;
    }

    ray.t.reserve(static_cast<size_t>(n_total));
    if (ray.depth_gt > 0.0) {
      double far = ray.depth_gt + 4.0 * cfg.tau_trunc;
      if (far <= cfg.t_near) far = cfg.t_near + 1e-3;
      const double span = (far - cfg.t_near) / cfg.n_stratified;
      for (int i = 0; i < cfg.n_stratified; ++i)
        ray.t.push_back(cfg.t_near + (i + rng.uniform()) * span);
      const double lo = std::max(cfg.t_near, ray.depth_gt - cfg.tau_trunc);
      double hi = ray.depth_gt + cfg.tau_trunc;
      if (hi <= lo) hi = lo + 1e-6;
      for (int i = 0; i < cfg.n_importance; ++i)
        ray.t.push_back(rng.uniform(lo, hi));
    } else {
      const double span = (far_free - cfg.t_near) / n_total;
      for (int i = 0; i < n_total; ++i)
        ray.t.push_back(cfg.t_near + (i + rng.uniform()) * span);
    }
    std::sort(ray.t.begin(), ray.t.end());
    for (size_t i = 1; i < ray.t.size(); ++i)
      if (ray.t[i] <= ray.t[i - 1]) ray.t[i] = ray.t[i - 1] + 1e-9;
  }
  return batch;
}

// ---- rendering ----

void render_weights(const std::vector<double>& phi, double sharpness,
                    std::vector<double>& alpha, std::vector<double>& weight,
                    std::vector<double>& trans) {
  const size_t n = phi.size();
  alpha.assign(n, 0.0);
  weight.assign(n, 0.0);
  trans.assign(n, 1.0);
  if (n == 0) return;
  double t = 1.0;
  for (size_t i = 0; i + 1 < n; ++i) {
    // ratio of consecutive sigmoid values, formed in log space so strongly
    // saturated distances cannot overflow
    const double delta = softplus(-sharpness * phi[i]) -
                         softplus(-sharpness * phi[i + 1]);
    const double a = delta < 0.0 ? -std::expm1(delta) : 0.0;
    alpha[i] = a;
    trans[i] = t;
    weight[i] = a * t;
    t *= 1.0 - a;
  }
  trans[n - 1] = t;  // last alpha stays zero by convention
}

void render_ray(const Field& field, const RayBatch::Ray& ray,
                std::vector<Field::PointEval>& evals, RayRender& out) {
  const size_t n = ray.t.size();
  if (evals.size() < n) evals.resize(n);
  out.phi.resize(n);
  out.normal.resize(n);
  for (size_t i = 0; i < n; ++i) {
    field.eval_point(ray.origin + ray.t[i] * ray.dir, true, evals[i]);
    out.phi[i] = evals[i].phi();
    out.normal[i] = evals[i].n;
  }
  render_weights(out.phi, field.sharpness(), out.alpha, out.weight, out.trans);

  out.c_hat = Vec3::Zero();
  out.d_hat = 0.0;
  out.weight_sum = 0.0;
  for (size_t i = 0; i < n; ++i) {
    out.weight_sum += out.weight[i];
    out.c_hat += out.weight[i] * evals[i].color.color;
    out.d_hat += out.weight[i] * ray.t[i];
  }
  out.d_var = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double d = out.d_hat - ray.t[i];
    out.d_var += out.weight[i] * d * d;
  }
}

// ---- losses ----

LossTerms compute_losses(const RayBatch& batch,
                         const std::vector<RayRender>& renders,
                         const MappingConfig& cfg) {
  if (renders.size() != batch.rays.size())
    fail(ErrorCode::BadConfig, "render list does not match the ray batch");

  double sum_c = 0.0, sum_dep = 0.0, sum_eik = 0.0, sum_sdf = 0.0;
  int n_c = 0, n_dep = 0;
  size_t n_eik = 0, n_sdf = 0;

  for (size_t r = 0; r < batch.rays.size(); ++r) {
    const RayBatch::Ray& ray = batch.rays[r];
    const RayRender& out = renders[r];
    const size_t n = ray.t.size();

    n_eik += n;
    for (size_t i = 0; i < n; ++i) {
      Vec3 unused;
      sum_eik += eikonal_term(out.normal[i], unused);
    }

    if (ray.has_color) {
      ++n_c;
      sum_c += (ray.color_gt - out.c_hat).cwiseAbs().sum() / 3.0;
    }

    if (ray.depth_gt > 0.0) {
      n_sdf += n;
      for (size_t i = 0; i < n; ++i) {
        double unused;
        sum_sdf += bound_term(out.phi[i], ray.depth_gt - ray.t[i],
                              cfg.tau_trunc, cfg.beta, unused);
      }
      if (out.d_var >= kDepthVarFloor) {
        ++n_dep;
        sum_dep += std::abs(ray.depth_gt - out.d_hat) / std::sqrt(out.d_var);
      }
    }
  }

  LossTerms terms;
  terms.color = n_c > 0 ? sum_c / n_c : 0.0;
  terms.depth = n_dep > 0 ? sum_dep / n_dep : 0.0;
  terms.eikonal = n_eik > 0 ? sum_eik / static_cast<double>(n_eik) : 0.0;
  terms.sdf = n_sdf > 0 ? sum_sdf / static_cast<double>(n_sdf) : 0.0;
  return terms;
}

LossTerms loss_gradient(const Field& field, const RayBatch& batch,
                        const MappingConfig& cfg, std::vector<double>& grad) {
  if (grad.size() != field.param_count())
    fail(ErrorCode::BadConfig, "gradient buffer does not match the field");
  const double s = field.sharpness();

  // The depth normalizer counts rays that survive the variance floor, which
  // is only known after rendering, so a cheap distance-only pass settles the
  // ray counts before any gradient is accumulated.
  int n_c = 0, n_dep = 0;
  size_t n_eik = 0, n_sdf = 0;
  {
    Field::SdfEval scratch;
    std::vector<double> phi, alpha, weight, trans;
    for (const RayBatch::Ray& ray : batch.rays) {
      const size_t n = ray.t.size();
      n_eik += n;
      if (ray.has_color) ++n_c;
      if (!(ray.depth_gt > 0.0)) continue;
      n_sdf += n;
      phi.resize(n);
      for (size_t i = 0; i < n; ++i)
        phi[i] = field.sdf(ray.origin + ray.t[i] * ray.dir, scratch);
      render_weights(phi, s, alpha, weight, trans);
      double d_hat = 0.0;
      for (size_t i = 0; i < n; ++i) d_hat += weight[i] * ray.t[i];
      double d_var = 0.0;
      for (size_t i = 0; i < n; ++i) {
        const double d = d_hat - ray.t[i];
        d_var += weight[i] * d * d;
      }
      if (d_var >= kDepthVarFloor) ++n_dep;
    }
  }

  const double scale_c = n_c > 0 ? cfg.lambda_c / (3.0 * n_c) : 0.0;
  const double scale_dep = n_dep > 0 ? cfg.lambda_dep / n_dep : 0.0;
  const double scale_eik =
      n_eik > 0 ? cfg.lambda_eik / static_cast<double>(n_eik) : 0.0;
  const double scale_sdf =
      n_sdf > 0 ? cfg.lambda_sdf / static_cast<double>(n_sdf) : 0.0;

  double sum_c = 0.0, sum_dep = 0.0, sum_eik = 0.0, sum_sdf = 0.0;
  double d_log_s = 0.0;

  std::vector<Field::PointEval> evals;
  std::vector<double> phi, alpha, weight, trans, d_w, d_phi;
  for (const RayBatch::Ray& ray : batch.rays) {
    const size_t n = ray.t.size();
    if (n == 0) continue;
    const bool want_color = ray.has_color;
    const bool want_depth = ray.depth_gt > 0.0;

    if (evals.size() < n) evals.resize(n);
    phi.resize(n);
    for (size_t i = 0; i < n; ++i) {
      field.eval_point(ray.origin + ray.t[i] * ray.dir, want_color, evals[i]);
      phi[i] = evals[i].phi();
    }
    render_weights(phi, s, alpha, weight, trans);

    double w_sum = 0.0, d_hat = 0.0;
    Vec3 c_hat = Vec3::Zero();
    for (size_t i = 0; i < n; ++i) {
      w_sum += weight[i];
      d_hat += weight[i] * ray.t[i];
      if (want_color) c_hat += weight[i] * evals[i].color.color;
    }
    double d_var = 0.0;
    for (size_t i = 0; i < n; ++i) {
      const double d = d_hat - ray.t[i];
      d_var += weight[i] * d * d;
    }

    // upstream derivatives of the ray-level outputs, loss weights and
    // normalizers folded in
    Vec3 d_c_hat = Vec3::Zero();
    if (want_color) {
      const Vec3 err = ray.color_gt - c_hat;
      sum_c += err.cwiseAbs().sum() / 3.0;
      for (int ch = 0; ch < 3; ++ch)
        d_c_hat[ch] = -scale_c * sign_of(err[ch]);
    }
    double d_d_hat = 0.0, d_d_var = 0.0;
    bool depth_in = false;
    if (want_depth && d_var >= kDepthVarFloor) {
      depth_in = true;
      const double resid = ray.depth_gt - d_hat;
      const double root = std::sqrt(d_var);
      sum_dep += std::abs(resid) / root;
      d_d_hat = -scale_dep * sign_of(resid) / root;
      d_d_var = -scale_dep * 0.5 * std::abs(resid) / (d_var * root);
    }

    d_phi.assign(n, 0.0);
    if (want_color || depth_in) {
      d_w.resize(n);
      for (size_t i = 0; i < n; ++i) {
        // the variance depends on every weight both directly and through the
        // rendered depth, hence the (w_sum - 1) correction
        double g = 0.0;
        if (want_color) g += d_c_hat.dot(evals[i].color.color);
        if (depth_in) {
          const double d = d_hat - ray.t[i];
          g += d_d_hat * ray.t[i] +
               d_d_var * (d * d + 2.0 * ray.t[i] * d_hat * (w_sum - 1.0));
        }
        d_w[i] = g;
      }

      // weights to opacities: each alpha scales its own weight by the
      // transmittance and attenuates everything behind it; the running sum g
      // folds the suffix without dividing by (1 - alpha)
      double g_suffix = 0.0;
      for (size_t k = n - 1; k-- > 0;) {
        const double d_alpha = trans[k] * (d_w[k] - g_suffix);
        g_suffix = alpha[k] * d_w[k] + (1.0 - alpha[k]) * g_suffix;
        if (alpha[k] > 0.0) {
          const double sig_a = logistic(-s * phi[k]);
          const double sig_b = logistic(-s * phi[k + 1]);
          const double d_delta = d_alpha * (alpha[k] - 1.0);
          d_phi[k] += d_delta * (-s * sig_a);
          d_phi[k + 1] += d_delta * (s * sig_b);
          d_log_s += d_delta * s * (phi[k + 1] * sig_b - phi[k] * sig_a);
        }
      }
    }

    for (size_t i = 0; i < n; ++i) {
      Vec3 d_n;
      sum_eik += eikonal_term(evals[i].n, d_n);
      d_n *= scale_eik;
      if (want_depth) {
        double d_b;
        sum_sdf += bound_term(phi[i], ray.depth_gt - ray.t[i], cfg.tau_trunc,
                              cfg.beta, d_b);
        d_phi[i] += scale_sdf * d_b;
      }
      const Vec3 d_color =
          want_color ? Vec3(weight[i] * d_c_hat) : Vec3(Vec3::Zero());
      field.point_backward(evals[i], d_phi[i], d_n, d_color, grad);
    }
  }
  grad[field.sharpness_param()] += d_log_s;

  LossTerms terms;
  terms.color = n_c > 0 ? sum_c / n_c : 0.0;
  terms.depth = n_dep > 0 ? sum_dep / n_dep : 0.0;
  terms.eikonal = n_eik > 0 ? sum_eik / static_cast<double>(n_eik) : 0.0;
  terms.sdf = n_sdf > 0 ? sum_sdf / static_cast<double>(n_sdf) : 0.0;
  return terms;
}

// ---- keyframe selection ----

double pose_difference(const SE3& a, const SE3& b) {
  const Quat dq = a.quat().conjugate() * b.quat();
  const double angle = 2.0 * std::atan2(dq.vec().norm(), std::abs(dq.w()));
  return (a.translation() - b.translation()).norm() + 0.5 * angle;
}

std::vector<int> select_keyframes(const Snapshot& snap,
                                  const MapperState& state,
                                  const MappingConfig& cfg, Rng& rng) {
  const auto& kfs = snap.keyframes;
  const int n = static_cast<int>(kfs.size());
  if (n == 0) return {};

  std::vector<int> sel;
  sel.push_back(kfs[static_cast<size_t>(n - 1)].id);
  if (n >= 2) sel.push_back(kfs[static_cast<size_t>(n - 2)].id);

  std::vector<std::pair<double, int>> movers;
  for (const SnapshotKeyframe& kf : kfs) {
    const auto it = state.mapped.find(kf.id);
    if (it == state.mapped.end()) {
      sel.push_back(kf.id);
      continue;
    }
    const double diff = pose_difference(kf.world_from_cam, it->second.pose);
    if (diff > 0.0) movers.emplace_back(diff, kf.id);
  }
  std::sort(movers.begin(), movers.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  const int take = std::min<int>(cfg.top_k, static_cast<int>(movers.size()));
  for (int i = 0; i < take; ++i) sel.push_back(movers[static_cast<size_t>(i)].second);

  for (int b = 0; b < cfg.stratified_keyframes; ++b) {
    const int lo = static_cast<int>(static_cast<int64_t>(b) * n /
                                    cfg.stratified_keyframes);
    const int hi = static_cast<int>(static_cast<int64_t>(b + 1) * n /
                                    cfg.stratified_keyframes);
    if (hi <= lo) continue;
    sel.push_back(kfs[static_cast<size_t>(rng.uniform_int(lo, hi - 1))].id);
  }

  std::sort(sel.begin(), sel.end());
  sel.erase(std::unique(sel.begin(), sel.end()), sel.end());
  return sel;
}

void snapshot_bounds(const Snapshot& snap, double pad_factor, Vec3& lo,
                     Vec3& hi) {
  if (snap.keyframes.empty())
    fail(ErrorCode::BadConfig, "bounds need at least one keyframe");

  lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  hi = Vec3::Constant(-std::numeric_limits<double>::infinity());
  const auto expand = [&](const Vec3& p) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  };

  for (const SnapshotKeyframe& kf : snap.keyframes) {
    expand(kf.world_from_cam.translation());

    double reach = 0.0;
    const Intrinsics* cam = &snap.camera;
    if (kf.depth_obs && !kf.depth_obs->empty()) {
      for (size_t i = 0; i < kf.depth_obs->size(); ++i)
        reach = std::max(reach, static_cast<double>((*kf.depth_obs)[i]));
    } else if (!kf.inv_depth.empty()) {
      double min_inv = std::numeric_limits<double>::infinity();
      for (size_t i = 0; i < kf.inv_depth.size(); ++i)
        min_inv = std::min(min_inv, kf.inv_depth[i]);
      if (min_inv > 0.0) reach = 1.0 / min_inv;
      cam = &snap.tracking_camera;
    }
    if (!(reach > 0.0)) reach = 3.0;

    const double w = cam->width - 1, h = cam->height - 1;
    const Vec2 corners[5] = {Vec2(0, 0), Vec2(w, 0), Vec2(0, h), Vec2(w, h),
                             Vec2(cam->cx, cam->cy)};
    for (const Vec2& px : corners)
      expand(kf.world_from_cam * (cam->backproject(px, 1.0) * reach));
  }

  const Vec3 ext = hi - lo;
  double span = ext.maxCoeff();
  if (!(span > 0.0)) span = 1.0;
  for (int a = 0; a < 3; ++a) {
    const double pad = pad_factor * std::max(ext[a], 0.1 * span);
    lo[a] -= pad;
    hi[a] += pad;
  }
}

// ---- mesh extraction ----

namespace {

// six tetrahedra around the cube's main diagonal; corner c sits at offsets
// (c&1, c>>1&1, c>>2&1). Neighboring cubes cut their shared face along the
// same diagonal, so the extracted surface closes across cell boundaries.
constexpr int kTets[6][4] = {{0, 1, 3, 7}, {0, 1, 5, 7}, {0, 2, 3, 7},
                             {0, 2, 6, 7}, {0, 4, 5, 7}, {0, 4, 6, 7}};

struct TetSurfacer {
  const std::vector<double>& value;
  const std::vector<Vec3>& corner_pos;  // 8 positions of the current cell
  const uint32_t* corner_gid;           // 8 global grid vertex ids
  TriangleMesh& mesh;
  std::unordered_map<uint64_t, int>& edge_vertex;

  int vertex_on_edge(int a, int b) {
    uint32_t ga = corner_gid[a], gb = corner_gid[b];
    int pa = a, pb = b;
    if (ga > gb) {
      std::swap(ga, gb);
      std::swap(pa, pb);
    }
    const uint64_t key = (static_cast<uint64_t>(ga) << 32) | gb;
    const auto it = edge_vertex.find(key);
    if (it != edge_vertex.end()) return it->second;
    // canonical operand order keeps the interpolated point bit-identical no
    // matter which tetrahedron asks first
    const double va = value[ga], vb = value[gb];
    const double t = va / (va - vb);
    const int idx = static_cast<int>(mesh.vertices.size());
    mesh.vertices.push_back(corner_pos[static_cast<size_t>(pa)] +
                            t * (corner_pos[static_cast<size_t>(pb)] -
                                 corner_pos[static_cast<size_t>(pa)]));
    edge_vertex.emplace(key, idx);
    return idx;
  }

  void emit(int i0, int i1, int i2, const Vec3& grad) {
    const Vec3& p0 = mesh.vertices[static_cast<size_t>(i0)];
    const Vec3& p1 = mesh.vertices[static_cast<size_t>(i1)];
    const Vec3& p2 = mesh.vertices[static_cast<size_t>(i2)];
    if ((p1 - p0).cross(p2 - p0).dot(grad) < 0.0) std::swap(i1, i2);
    mesh.triangles.emplace_back(i0, i1, i2);
  }

  void surface_tet(const int tc[4]) {
    int inside[4], outside[4];
    int ni = 0, no = 0;
    for (int c = 0; c < 4; ++c) {
      if (value[corner_gid[tc[c]]] < 0.0)
        inside[ni++] = tc[c];
      else
        outside[no++] = tc[c];
    }
    if (ni == 0 || ni == 4) return;

    // gradient of the linear interpolant over this tetrahedron orients the
    // emitted triangles toward positive values
    const Vec3& p0 = corner_pos[static_cast<size_t>(tc[0])];
    const double v0 = value[corner_gid[tc[0]]];
    Mat3 m;
    Vec3 rhs;
    for (int c = 1; c < 4; ++c) {
      m.row(c - 1) = corner_pos[static_cast<size_t>(tc[c])] - p0;
      rhs[c - 1] = value[corner_gid[tc[c]]] - v0;
    }
    const Vec3 grad = m.inverse() * rhs;

    if (ni == 1) {
      emit(vertex_on_edge(inside[0], outside[0]),
           vertex_on_edge(inside[0], outside[1]),
           vertex_on_edge(inside[0], outside[2]), grad);
    } else if (ni == 3) {
      emit(vertex_on_edge(inside[0], outside[0]),
           vertex_on_edge(inside[1], outside[0]),
           vertex_on_edge(inside[2], outside[0]), grad);
    } else {
      const int ac = vertex_on_edge(inside[0], outside[0]);
      const int ad = vertex_on_edge(inside[0], outside[1]);
      const int bc = vertex_on_edge(inside[1], outside[0]);
      const int bd = vertex_on_edge(inside[1], outside[1]);
      emit(ac, ad, bd, grad);
      emit(ac, bd, bc, grad);
    }
  }
};

}  // namespace

TriangleMesh isosurface_grid(const std::function<double(const Vec3&)>& f,
                             const Vec3& lo, const Vec3& hi, int res) {
  if (res < 1) fail(ErrorCode::BadConfig, "grid resolution must be positive");
  if (!((hi - lo).minCoeff() > 0.0))
    fail(ErrorCode::BadConfig, "degenerate isosurface bounds");

  const int nv = res + 1;
  const Vec3 step = (hi - lo) / res;
  std::vector<double> value(static_cast<size_t>(nv) * nv * nv);
  const auto vid = [nv](int i, int j, int k) {
    return (static_cast<size_t>(k) * nv + j) * nv + i;
  };
  for (int k = 0; k < nv; ++k)
    for (int j = 0; j < nv; ++j)
      for (int i = 0; i < nv; ++i)
        value[vid(i, j, k)] =
            f(Vec3(lo.x() + i * step.x(), lo.y() + j * step.y(),
                   lo.z() + k * step.z()));

  TriangleMesh mesh;
  std::unordered_map<uint64_t, int> edge_vertex;
  std::vector<Vec3> corner_pos(8);
  uint32_t corner_gid[8];

  for (int k = 0; k < res; ++k) {
    for (int j = 0; j < res; ++j) {
      for (int i = 0; i < res; ++i) {
        int neg = 0, pos = 0;
        for (int c = 0; c < 8; ++c) {
          const int ci = i + (c & 1), cj = j + ((c >> 1) & 1),
                    ck = k + ((c >> 2) & 1);
          const size_t g = vid(ci, cj, ck);
          corner_gid[c] = static_cast<uint32_t>(g);
          (value[g] < 0.0 ? neg : pos) += 1;
          corner_pos[static_cast<size_t>(c)] =
              Vec3(lo.x() + ci * step.x(), lo.y() + cj * step.y(),
                   lo.z() + ck * step.z());
        }
        if (neg == 0 || pos == 0) continue;
        TetSurfacer surf{value, corner_pos, corner_gid, mesh, edge_vertex};
        for (const auto& tet : kTets) surf.surface_tet(tet);
      }
    }
  }

  if (mesh.triangles.empty())
    fail(ErrorCode::EmptyMesh, "no zero crossing in the sampled grid");
  return mesh;
}

void cull_unobserved(TriangleMesh& mesh, const Snapshot& snap,
                     double tau_trunc) {
  if (mesh.vertices.empty()) return;

  struct View {
    SE3 cam_from_world;
    const SnapshotKeyframe* kf;
  };
  std::vector<View> views;
  views.reserve(snap.keyframes.size());
  for (const SnapshotKeyframe& kf : snap.keyframes)
    views.push_back({kf.world_from_cam.inverse(), &kf});

  const auto pixel = [](const Vec2& px, int rows, int cols, int& r, int& c) {
    r = std::clamp(static_cast<int>(std::lround(px.y())), 0, rows - 1);
    c = std::clamp(static_cast<int>(std::lround(px.x())), 0, cols - 1);
  };

  std::vector<char> visible(mesh.vertices.size(), 0);
  for (size_t v = 0; v < mesh.vertices.size(); ++v) {
    for (const View& view : views) {
      const Vec3 xc = view.cam_from_world * mesh.vertices[v];
      if (!(xc.z() > 0.0)) continue;
      const SnapshotKeyframe& kf = *view.kf;
      bool seen = false;
      if (kf.depth_obs && !kf.depth_obs->empty()) {
        const Vec2 px = snap.camera.project(xc);
        if (!snap.camera.in_bounds(px)) continue;
        int r, c;
        pixel(px, kf.depth_obs->rows(), kf.depth_obs->cols(), r, c);
        const double d = (*kf.depth_obs)(r, c);
        // an invalid reading cannot occlude; the frustum test stands alone
        seen = d <= 0.0 || xc.z() <= d + tau_trunc;
      } else if (!kf.inv_depth.empty()) {
        const Vec2 px = snap.tracking_camera.project(xc);
        if (!snap.tracking_camera.in_bounds(px)) continue;
        int r, c;
        pixel(px, kf.inv_depth.rows(), kf.inv_depth.cols(), r, c);
        seen = xc.z() <= 1.0 / kf.inv_depth(r, c) + tau_trunc;
      } else {
        const Vec2 px = snap.camera.project(xc);
        seen = snap.camera.in_bounds(px);
      }
      if (seen) {
        visible[v] = 1;
        break;
      }
    }
  }

  std::vector<Eigen::Vector3i> kept;
  kept.reserve(mesh.triangles.size());
  for (const Eigen::Vector3i& t : mesh.triangles)
    if (visible[static_cast<size_t>(t[0])] &&
        visible[static_cast<size_t>(t[1])] &&
        visible[static_cast<size_t>(t[2])])
      kept.push_back(t);

  const bool had_colors = mesh.colors.size() == mesh.vertices.size();
  std::vector<int> remap(mesh.vertices.size(), -1);
  std::vector<Vec3> vertices;
  std::vector<RgbU8> colors;
  for (Eigen::Vector3i& t : kept) {
    for (int c = 0; c < 3; ++c) {
      int& idx = remap[static_cast<size_t>(t[c])];
      if (idx < 0) {
        idx = static_cast<int>(vertices.size());
        vertices.push_back(mesh.vertices[static_cast<size_t>(t[c])]);
        if (had_colors)
          colors.push_back(mesh.colors[static_cast<size_t>(t[c])]);
      }
      t[c] = idx;
    }
  }
  mesh.vertices.swap(vertices);
  mesh.colors.swap(colors);
  mesh.triangles.swap(kept);
}

void colorize_mesh(TriangleMesh& mesh, const Field& field) {
  mesh.colors.resize(mesh.vertices.size());
  Field::PointEval eval;
  for (size_t v = 0; v < mesh.vertices.size(); ++v) {
    field.eval_point(mesh.vertices[v], true, eval);
    RgbU8& rgb = mesh.colors[v];
    for (int ch = 0; ch < 3; ++ch)
      rgb[static_cast<size_t>(ch)] = static_cast<uint8_t>(
          std::lround(255.0 * std::clamp(eval.color.color[ch], 0.0, 1.0)));
  }
}

TriangleMesh extract_mesh(const Field& field, const Snapshot& snap,
                          int grid_res, double tau_trunc) {
  Field::SdfEval scratch;
  const auto sdf = [&](const Vec3& x) { return field.sdf(x, scratch); };
  TriangleMesh mesh =
      isosurface_grid(sdf, field.bounds_lo(), field.bounds_hi(), grid_res);
  cull_unobserved(mesh, snap, tau_trunc);
  colorize_mesh(mesh, field);
  return mesh;
}

// ---- mapper context ----

Mapper::Mapper(Field field, const MappingConfig& cfg, uint64_t seed)
    : field_(std::move(field)),
      cfg_(cfg),
      adam_(field_.param_count()),
      rng_(seed, 0x4D415050ull) {
  cfg_.validate();
  lr_.assign(field_.param_count(), static_cast<float>(cfg_.lr_network));
  const ParamSpan tables = field_.hash_params();
  std::fill_n(lr_.begin() + static_cast<long>(tables.offset), tables.size,
              static_cast<float>(cfg_.lr_tables));
  grad_.resize(field_.param_count());
}

double Mapper::far_fallback() const {
  if (cfg_.far_fallback > 0.0) return cfg_.far_fallback;
  return 1.2 * (field_.bounds_hi() - field_.bounds_lo()).norm();
}

LossTerms Mapper::map_snapshot(const Snapshot& snap) {
  if (snap.keyframes.empty()) return {};

  const std::vector<int> ids = select_keyframes(snap, state_, cfg_, rng_);
  std::unordered_map<int, const SnapshotKeyframe*> by_id;
  for (const SnapshotKeyframe& kf : snap.keyframes) by_id.emplace(kf.id, &kf);

  const double far = far_fallback();
  RayBatch batch;
  batch.rays.reserve(ids.size() *
                     static_cast<size_t>(cfg_.pixels_per_keyframe));
  for (int id : ids) {
    const SnapshotKeyframe& kf = *by_id.at(id);
    RayBatch part =
        sample_rays(kf, snap.camera, snap.tracking_camera, cfg_, far, rng_);
    for (RayBatch::Ray& ray : part.rays) batch.rays.push_back(std::move(ray));
    state_.mapped[id] = {kf.world_from_cam, kf.version};
  }

  LossTerms first;
  for (int it = 0; it < cfg_.n_iter; ++it) {
    std::fill(grad_.begin(), grad_.end(), 0.0);
    const LossTerms terms = loss_gradient(field_, batch, cfg_, grad_);
    if (it == 0) first = terms;
    adam_.step(field_.params(), grad_, lr_);
  }
  ++rounds_;
  return first;
}

TriangleMesh Mapper::extract(const Snapshot& snap) const {
  return extract_mesh(field_, snap, cfg_.mesh_resolution, cfg_.tau_trunc);
}

}  // namespace dvs
