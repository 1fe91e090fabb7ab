#include <doctest.h>

#include <Eigen/Cholesky>

#include "dvs/dba.hpp"
#include "test_util.hpp"

using namespace dvs;

namespace {

struct Problem {
  BundleState state;
  std::vector<SE3> true_poses;
  std::vector<InverseDepthMap> true_depths;
  std::vector<FlowMeasurement> meas;
};

// camera sweep along +x over a random fronto-parallel depth field, with flow
// targets rendered from the ground-truth geometry
Problem make_problem(int n_kf, Rng& rng, int rows = 12, int cols = 16,
                     double baseline = 0.08) {
  Problem p;
  Intrinsics k = testutil::vga_camera();
  k = k.scaled(static_cast<double>(cols) / k.width);
  k.height = rows;  // keep a small non-square grid
  k.cy = 0.5 * (rows - 1);
  p.state.camera = k;

  for (int i = 0; i < n_kf; ++i) {
    Vec6 t = Vec6::Zero();
    t.head<3>() = 0.02 * Vec3(rng.normal(), rng.normal(), rng.normal());
    t.tail<3>() = Vec3(i * baseline, 0.01 * rng.normal(), 0.01 * rng.normal());
    p.true_poses.push_back(SE3::exp(t));

    InverseDepthMap d(rows, cols);
    for (size_t px = 0; px < d.size(); ++px) d[px] = rng.uniform(0.25, 1.0);
    p.true_depths.push_back(std::move(d));
  }

  auto add_edge = [&](int i, int j) {
    const FlowField f = induced_flow(
        k, relative_pose(p.true_poses[i], p.true_poses[j]), p.true_depths[i]);
    FlowMeasurement m;
    m.src = i;
    m.dst = j;
    m.target_flow = f.flow;
    m.confidence = Grid2D<Vec2>(rows, cols, Vec2::Zero());
    for (size_t px = 0; px < f.valid.size(); ++px) {
      if (f.valid[px]) {
        m.confidence[px] = Vec2(rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0));
      }
    }
    p.meas.push_back(std::move(m));
  };
  for (int i = 0; i + 1 < n_kf; ++i) {
    add_edge(i, i + 1);
    add_edge(i + 1, i);
  }
  for (int i = 0; i + 2 < n_kf; ++i) add_edge(i, i + 2);

  p.state.poses = p.true_poses;
  p.state.inv_depths = p.true_depths;
  p.state.frozen.assign(n_kf, 0);
  return p;
}

void perturb(Problem& p, Rng& rng, double pose_eps, double depth_eps) {
  for (size_t i = 0; i < p.state.poses.size(); ++i) {
    if (p.state.frozen[i]) continue;
    Vec6 d;
    for (int a = 0; a < 6; ++a) d(a) = pose_eps * rng.normal();
    p.state.poses[i] = p.state.poses[i].retract(d);
    InverseDepthMap& im = p.state.inv_depths[i];
    for (size_t px = 0; px < im.size(); ++px) {
      im[px] *= std::exp(depth_eps * rng.normal());
    }
  }
}

}  // namespace

TEST_CASE("analytic jacobians match central differences") {
  Rng rng(101);
  const Intrinsics k = testutil::vga_camera().scaled(0.125);
  const double eps = 1e-6;
  int tested = 0;

  while (tested < 200) {
    const SE3 t_i = testutil::random_se3(rng, 0.3, 0.3);
    const SE3 t_j = testutil::random_se3(rng, 0.3, 0.3);
    const Vec2 px(rng.uniform(2.0, k.width - 3.0), rng.uniform(2.0, k.height - 3.0));
    const double d = rng.uniform(0.2, 2.0);
    const Vec2 target(rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0));

    const auto eval = [&](const SE3& a, const SE3& b, double depth) {
      return linearize_pixel(k, relative_pose(a, b), px, depth, target);
    };
    const PixelLinearization lin = eval(t_i, t_j, d);
    if (!lin.valid) continue;

    Mat26 fd_src, fd_dst;
    bool usable = true;
    for (int a = 0; a < 6 && usable; ++a) {
      Vec6 step = Vec6::Zero();
      step(a) = eps;
      const auto ip = eval(t_i.retract(step), t_j, d);
      const auto im = eval(t_i.retract(-step), t_j, d);
      const auto jp = eval(t_i, t_j.retract(step), d);
      const auto jm = eval(t_i, t_j.retract(-step), d);
      usable = ip.valid && im.valid && jp.valid && jm.valid;
      if (!usable) break;
      fd_src.col(a) = (ip.residual - im.residual) / (2 * eps);
      fd_dst.col(a) = (jp.residual - jm.residual) / (2 * eps);
    }
    const auto dp = eval(t_i, t_j, d + eps);
    const auto dm = eval(t_i, t_j, d - eps);
    usable = usable && dp.valid && dm.valid;
    if (!usable) continue;
    const Vec2 fd_depth = (dp.residual - dm.residual) / (2 * eps);

    CHECK((fd_src - lin.j_src).norm() / std::max(1.0, lin.j_src.norm()) < 1e-5);
    CHECK((fd_dst - lin.j_dst).norm() / std::max(1.0, lin.j_dst.norm()) < 1e-5);
    CHECK((fd_depth - lin.j_depth).norm() / std::max(1.0, lin.j_depth.norm()) <
          1e-5);
    ++tested;
  }
}

TEST_CASE("linearization flags warps that leave the target view") {
  const Intrinsics k = testutil::vga_camera().scaled(0.125);
  Vec6 turn = Vec6::Zero();
  turn(1) = M_PI * 0.95;
  const auto lin = linearize_pixel(k, SE3::exp(turn), Vec2(20.0, 15.0), 0.5,
                                   Vec2::Zero());
  CHECK_FALSE(lin.valid);
}

TEST_CASE("zero residual at the true configuration") {
  Rng rng(103);
  Problem p = make_problem(3, rng);
  CHECK(bundle_cost(p.state, p.meas, 0.0) == doctest::Approx(0.0).epsilon(1e-18));
}

TEST_CASE("gauss-newton recovers a perturbed window on perfect data") {
  Rng rng(107);
  Problem p = make_problem(4, rng);
  p.state.frozen[0] = 1;
  p.state.frozen[1] = 1;
  perturb(p, rng, 0.01, 0.05);

  double lambda = 1e-4;
  BundleOptions opts;
  opts.prior_weight = 0.0;
  for (int it = 0; it < 10; ++it) dba_iterate(p.state, p.meas, lambda, opts);

  for (size_t i = 0; i < p.state.poses.size(); ++i) {
    CHECK(testutil::pose_diff(p.state.poses[i], p.true_poses[i]) < 1e-7);
  }
  // depths are observable wherever some edge kept the pixel in view
  double max_err = 0.0;
  for (int r = 0; r < p.state.inv_depths[2].rows(); ++r) {
    for (int c = 0; c < p.state.inv_depths[2].cols(); ++c) {
      bool seen = false;
      for (const auto& m : p.meas) {
        if (m.src == 2 && m.confidence(r, c).x() > 0.0) seen = true;
      }
      if (!seen) continue;
      max_err = std::max(max_err,
                         std::abs(p.state.inv_depths[2](r, c) - p.true_depths[2](r, c)));
    }
  }
  CHECK(max_err < 1e-6);
}

TEST_CASE("accepted cost never increases, rejected steps roll back") {
  Rng rng(109);
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng prng(seed + 300);
    Problem p = make_problem(4, prng);
    p.state.frozen[0] = 1;
    p.state.frozen[1] = 1;
    perturb(p, prng, 0.05, 0.2);

    double lambda = 1e-4;
    BundleOptions opts;
    opts.prior_weight = 0.0;
    double prev = bundle_cost(p.state, p.meas, 0.0);
    for (int it = 0; it < 6; ++it) {
      const std::vector<SE3> before = p.state.poses;
      const BundleStepResult res = dba_iterate(p.state, p.meas, lambda, opts);
      CHECK(res.cost_before == doctest::Approx(prev).epsilon(1e-12));
      CHECK(res.cost_after <= res.cost_before);
      if (!res.accepted) {
        for (size_t i = 0; i < before.size(); ++i) {
          CHECK(testutil::pose_diff(before[i], p.state.poses[i]) == 0.0);
        }
      }
      prev = res.cost_after;
    }
  }
}

TEST_CASE("schur elimination matches a dense joint solve") {
  Rng rng(113);
  Problem p = make_problem(3, rng, 6, 8);
  p.state.frozen[0] = 1;
  perturb(p, rng, 0.02, 0.1);

  // rgbd-style prior on frame 1 to exercise the prior path too
  p.state.prior_inv_depth.resize(3);
  p.state.prior_inv_depth[1] = Grid2D<double>(6, 8, 0.0);
  for (size_t i = 0; i < p.true_depths[1].size(); ++i) {
    p.state.prior_inv_depth[1][i] = p.true_depths[1][i];
  }

  const double lambda = 1e-4;
  const double rho = 10.0;
  const NormalSystem sys = build_normal_system(p.state, p.meas, lambda, rho);
  const BundleDelta fast = schur_solve(sys);

  // dense reference: stack pose tangents then every depth pixel of every
  // source keyframe, assemble J^T W J + lambda I from per-pixel linearizations
  const int n_kf = 3;
  std::vector<int> slot(n_kf, -1);
  int n_slots = 0;
  for (int i = 0; i < n_kf; ++i) {
    if (!p.state.frozen[i]) slot[i] = n_slots++;
  }
  std::vector<int> src_kfs;
  for (const auto& m : p.meas) {
    if (std::find(src_kfs.begin(), src_kfs.end(), m.src) == src_kfs.end()) {
      src_kfs.push_back(m.src);
    }
  }
  std::sort(src_kfs.begin(), src_kfs.end());
  const int px_per_kf = 6 * 8;
  std::vector<int> depth_base(n_kf, -1);
  int dim = 6 * n_slots;
  for (const int kf : src_kfs) {
    depth_base[kf] = dim;
    dim += px_per_kf;
  }

  MatX h = MatX::Zero(dim, dim);
  VecX g = VecX::Zero(dim);
  for (const auto& m : p.meas) {
    const SE3 rel = relative_pose(p.state.poses[m.src], p.state.poses[m.dst]);
    for (int r = 0; r < 6; ++r) {
      for (int c = 0; c < 8; ++c) {
        const Vec2 w = m.confidence(r, c);
        if (w.x() <= 0.0 && w.y() <= 0.0) continue;
        const auto lin = linearize_pixel(p.state.camera, rel, Vec2(c, r),
                                         p.state.inv_depths[m.src](r, c),
                                         m.target_flow(r, c));
        if (!lin.valid) continue;

        Eigen::Matrix<double, 2, Eigen::Dynamic> jrow(2, dim);
        jrow.setZero();
        if (slot[m.src] >= 0) jrow.middleCols<6>(6 * slot[m.src]) = lin.j_src;
        if (slot[m.dst] >= 0) jrow.middleCols<6>(6 * slot[m.dst]) = lin.j_dst;
        jrow.col(depth_base[m.src] + r * 8 + c) = lin.j_depth;

        Eigen::Matrix<double, 2, Eigen::Dynamic> wj = jrow;
        wj.row(0) *= w.x();
        wj.row(1) *= w.y();
        h.noalias() += jrow.transpose() * wj;
        g.noalias() += jrow.transpose() * Vec2(w.x() * lin.residual.x(),
                                               w.y() * lin.residual.y());
      }
    }
  }
  for (const int kf : src_kfs) {
    if (p.state.prior_inv_depth.empty() || p.state.prior_inv_depth[kf].empty())
      continue;
    for (int i = 0; i < px_per_kf; ++i) {
      const double prior = p.state.prior_inv_depth[kf][i];
      if (prior <= 0.0) continue;
      h(depth_base[kf] + i, depth_base[kf] + i) += rho * rho;
      g(depth_base[kf] + i) += rho * rho * (p.state.inv_depths[kf][i] - prior);
    }
  }
  h.diagonal().array() += lambda;
  const VecX dense = Eigen::LDLT<MatX>(h).solve(-g);

  CHECK((dense.head(6 * n_slots) - fast.pose_delta).cwiseAbs().maxCoeff() < 1e-8);
  for (size_t b = 0; b < fast.depth_kf.size(); ++b) {
    const int kf = fast.depth_kf[b];
    for (int i = 0; i < px_per_kf; ++i) {
      CHECK(std::abs(dense(depth_base[kf] + i) - fast.depth_delta[b][i]) < 1e-8);
    }
  }
}

TEST_CASE("depth prior pulls inverse depth toward the observed value") {
  Rng rng(127);
  Problem p = make_problem(2, rng);
  p.state.frozen[0] = 1;  // second pose stays free but starts at the optimum

  p.state.prior_inv_depth.resize(2);
  p.state.prior_inv_depth[0] = Grid2D<double>(12, 16, 0.0);
  for (size_t i = 0; i < p.true_depths[0].size(); ++i) {
    p.state.prior_inv_depth[0][i] = p.true_depths[0][i];
  }
  for (size_t i = 0; i < p.state.inv_depths[0].size(); ++i) {
    p.state.inv_depths[0][i] = 0.5;  // far from truth
  }

  double lambda = 1e-4;
  BundleOptions opts;
  for (int it = 0; it < 8; ++it) dba_iterate(p.state, p.meas, lambda, opts);

  double max_err = 0.0;
  for (size_t i = 0; i < p.state.inv_depths[0].size(); ++i) {
    max_err = std::max(max_err,
                       std::abs(p.state.inv_depths[0][i] - p.true_depths[0][i]));
  }
  CHECK(max_err < 1e-4);
}

TEST_CASE("inverse depth updates are clamped at the floor") {
  BundleState state;
  state.camera = testutil::vga_camera().scaled(0.125);
  state.poses = {SE3::identity()};
  state.inv_depths = {InverseDepthMap(2, 2, 0.01)};
  state.frozen = {0};

  BundleDelta delta;
  delta.pose_slot = {0};
  delta.pose_delta = VecX::Zero(6);
  delta.depth_kf = {0};
  delta.depth_delta = {Grid2D<double>(2, 2, -5.0)};
  apply_delta(state, delta, 1e-3);
  for (size_t i = 0; i < 4; ++i) CHECK(state.inv_depths[0][i] == 1e-3);
}

TEST_CASE("degenerate systems are reported") {
  Rng rng(131);
  Problem p = make_problem(3, rng);

  SUBCASE("no measurements") {
    try {
      build_normal_system(p.state, {}, 1e-4, 0.0);
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::EmptySystem);
    }
  }

  SUBCASE("every pose frozen") {
    p.state.frozen.assign(3, 1);
    CHECK_THROWS_AS(build_normal_system(p.state, p.meas, 1e-4, 0.0), Error);
  }

  SUBCASE("all confidences zero") {
    for (auto& m : p.meas) m.confidence.fill(Vec2::Zero());
    try {
      build_normal_system(p.state, p.meas, 1e-4, 0.0);
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::EmptySystem);
    }
  }

  SUBCASE("undamped free pose without measurements is singular") {
    // keep only edges among frames 0 and 1; frame 2 stays free and untouched
    std::vector<FlowMeasurement> meas;
    for (auto& m : p.meas) {
      if (m.src <= 1 && m.dst <= 1) meas.push_back(m);
    }
    p.state.frozen = {1, 0, 0};
    const NormalSystem sys = build_normal_system(p.state, meas, 0.0, 0.0);
    try {
      schur_solve(sys);
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::SingularSystem);
    }
  }
}
