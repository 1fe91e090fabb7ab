#pragma once

#include "dvs/core.hpp"
#include "dvs/geometry.hpp"

namespace dvs::testutil {

inline SE3 random_se3(Rng& rng, double max_angle = M_PI * 0.8,
                      double max_trans = 2.0) {
  Vec3 axis(rng.normal(), rng.normal(), rng.normal());
  if (axis.norm() < 1e-12) axis = Vec3::UnitX();
  axis.normalize();
  const double angle = rng.uniform(0.0, max_angle);
  Vec6 tangent;
  tangent.head<3>() = angle * axis;
  tangent.tail<3>() =
      Vec3(rng.uniform(-max_trans, max_trans), rng.uniform(-max_trans, max_trans),
           rng.uniform(-max_trans, max_trans));
  return SE3::exp(tangent);
}

inline double pose_diff(const SE3& a, const SE3& b) {
  return (a.inverse() * b).log().norm();
}

inline Intrinsics vga_camera() {
  Intrinsics k;
  k.fx = 320.0;
  k.fy = 320.0;
  k.cx = 159.5;
  k.cy = 119.5;
  k.width = 320;
  k.height = 240;
  return k;
}

}  // namespace dvs::testutil
