#include "dvs/geometry.hpp"

namespace dvs {

Vec2 Intrinsics::project(const Vec3& x) const {
  if (x.z() <= 0.0) {
    fail(ErrorCode::NonPositiveDepth,
         "project: point depth must be positive, got z=" + std::to_string(x.z()));
  }
  return {fx * x.x() / x.z() + cx, fy * x.y() / x.z() + cy};
}

Vec3 Intrinsics::backproject(const Vec2& px, double inv_depth) const {
  if (inv_depth <= 0.0) {
    fail(ErrorCode::NonPositiveInverseDepth,
         "backproject: inverse depth must be positive, got " +
             std::to_string(inv_depth));
  }
  const double z = 1.0 / inv_depth;
  return {(px.x() - cx) / fx * z, (px.y() - cy) / fy * z, z};
}

// ---- se3 exp/log ----
//
// Rotations are handled through the closed-form Rodrigues coefficients; the
// translation part goes through the left Jacobian V and its inverse. Both
// switch to series expansions below theta ~ 1e-5 where the closed forms lose
// precision to cancellation.

namespace {

struct RotationCoeffs {
  double a;  // sin(t)/t
  double b;  // (1-cos(t))/t^2
  double c;  // (t-sin(t))/t^3
};

RotationCoeffs rotation_coeffs(double theta) {
  RotationCoeffs r;
  const double t2 = theta * theta;
  if (theta < 1e-5) {
    r.a = 1.0 - t2 / 6.0;
    r.b = 0.5 - t2 / 24.0;
    r.c = 1.0 / 6.0 - t2 / 120.0;
  } else {
    r.a = std::sin(theta) / theta;
    r.b = (1.0 - std::cos(theta)) / t2;
    r.c = (theta - std::sin(theta)) / (t2 * theta);
  }
  return r;
}

}  // namespace

SE3 SE3::exp(const Vec6& tangent) {
  const Vec3 w = tangent.head<3>();
  const Vec3 v = tangent.tail<3>();
  const double theta = w.norm();
  const RotationCoeffs k = rotation_coeffs(theta);

  const Mat3 wx = skew(w);
  const Mat3 rot = Mat3::Identity() + k.a * wx + k.b * wx * wx;
  const Mat3 vmat = Mat3::Identity() + k.b * wx + k.c * wx * wx;
  return SE3(Quat(rot), vmat * v);
}

Vec6 SE3::log() const {
  Quat q = q_;
  if (q.w() < 0.0) q.coeffs() = -q.coeffs();

  const double sin_half = q.vec().norm();
  const double cos_half = q.w();
  const double theta = 2.0 * std::atan2(sin_half, cos_half);

  Vec3 w;
  if (sin_half < 1e-10) {
    w = 2.0 * q.vec();  // theta ~ 0, vec() ~ w/2 * axis
  } else {
    w = (theta / sin_half) * q.vec();
  }

  // V^{-1} = I - wx/2 + g * wx^2
  const double t2 = theta * theta;
  double g;
  if (theta < 1e-5) {
    g = 1.0 / 12.0 + t2 / 720.0;
  } else {
    g = (1.0 - 0.5 * theta * std::cos(0.5 * theta) / std::sin(0.5 * theta)) / t2;
  }
  const Mat3 wx = skew(w);
  const Mat3 vinv = Mat3::Identity() - 0.5 * wx + g * wx * wx;

  Vec6 tangent;
  tangent.head<3>() = w;
  tangent.tail<3>() = vinv * t_;
  return tangent;
}

// ---- inverse depth / flow ----

void check_inverse_depth(const InverseDepthMap& d) {
  for (size_t i = 0; i < d.size(); ++i) {
    if (!(d[i] > 0.0)) {
      fail(ErrorCode::NonPositiveInverseDepth,
           "inverse depth map contains a non-positive entry");
    }
  }
}

FlowField induced_flow(const Intrinsics& k, const SE3& target_from_source,
                       const InverseDepthMap& source_inv_depth) {
  const int h = source_inv_depth.rows();
  const int w = source_inv_depth.cols();
  FlowField out;
  out.flow = Grid2D<Vec2>(h, w, Vec2::Zero());
  out.valid = Grid2D<uint8_t>(h, w, 0);

  const Mat3 rot = target_from_source.rotation();
  const Vec3 trans = target_from_source.translation();

  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const Vec2 px(static_cast<double>(c), static_cast<double>(r));
      const Vec3 xs = k.backproject(px, source_inv_depth(r, c));
      const Vec3 xt = rot * xs + trans;
      if (xt.z() <= 0.0) continue;
      const Vec2 warped = k.project(xt);
      if (!k.in_bounds(warped)) continue;
      out.flow(r, c) = warped - px;
      out.valid(r, c) = 1;
    }
  }
  return out;
}

}  // namespace dvs
