#pragma once

#include "dvs/core.hpp"

namespace dvs {

// ---- pinhole camera ----

struct Intrinsics {
  double fx = 0.0, fy = 0.0, cx = 0.0, cy = 0.0;
  int width = 0, height = 0;

  // resampled camera for a lower-resolution pyramid level
  Intrinsics scaled(double s) const {
    Intrinsics k = *this;
    k.fx *= s;
    k.fy *= s;
    k.cx *= s;
    k.cy *= s;
    k.width = static_cast<int>(std::lround(width * s));
    k.height = static_cast<int>(std::lround(height * s));
    return k;
  }

  Mat3 matrix() const {
    Mat3 k = Mat3::Identity();
    k(0, 0) = fx;
    k(1, 1) = fy;
    k(0, 2) = cx;
    k(1, 2) = cy;
    return k;
  }

  // camera point -> pixel; rejects points at or behind the camera plane
  Vec2 project(const Vec3& x) const;

  // pixel + inverse depth -> camera point; inverse depth must be positive
  Vec3 backproject(const Vec2& px, double inv_depth) const;

  bool in_bounds(const Vec2& px) const {
    return px.x() >= 0.0 && px.x() <= width - 1 && px.y() >= 0.0 &&
           px.y() <= height - 1;
  }
};

// ---- rigid transform, unit quaternion + translation ----
//
// Tangent vectors are [rotation; translation]. Retraction multiplies the
// increment on the right: T <- T * exp(delta).

class SE3 {
 public:
  SE3() : q_(Quat::Identity()), t_(Vec3::Zero()) {}
  SE3(const Quat& q, const Vec3& t) : q_(q.normalized()), t_(t) {}
  SE3(const Mat3& r, const Vec3& t) : q_(Quat(r).normalized()), t_(t) {}

  static SE3 identity() { return SE3(); }
  static SE3 exp(const Vec6& tangent);

  Vec6 log() const;

  SE3 inverse() const {
    const Quat qi = q_.conjugate();
    return SE3(qi, qi * -t_);
  }

  SE3 operator*(const SE3& other) const {
    return SE3(q_ * other.q_, q_ * other.t_ + t_);
  }

  Vec3 operator*(const Vec3& x) const { return q_ * x + t_; }

  SE3 retract(const Vec6& delta) const { return *this * SE3::exp(delta); }

  const Quat& quat() const { return q_; }
  const Vec3& translation() const { return t_; }
  Mat3 rotation() const { return q_.toRotationMatrix(); }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = rotation();
    m.topRightCorner<3, 1>() = t_;
    return m;
  }

 private:
  Quat q_;
  Vec3 t_;
};

inline Mat3 skew(const Vec3& w) {
  Mat3 m;
  m << 0.0, -w.z(), w.y(), w.z(), 0.0, -w.x(), -w.y(), w.x(), 0.0;
  return m;
}

// transform taking camera-i points to camera-j coordinates, given
// world-from-camera poses of both frames
inline SE3 relative_pose(const SE3& world_from_i, const SE3& world_from_j) {
  return world_from_j.inverse() * world_from_i;
}

// ---- inverse depth and rigid flow ----

using InverseDepthMap = Grid2D<double>;  // strictly positive entries

void check_inverse_depth(const InverseDepthMap& d);

struct FlowField {
  Grid2D<Vec2> flow;           // pixel displacement source -> target
  Grid2D<uint8_t> valid;       // 0 where the warp leaves the target image
};

// Warps every source pixel through its inverse depth and the relative
// transform, returning target-minus-source pixel displacements. Pixels whose
// warp lands behind the target camera or outside its image are masked out.
FlowField induced_flow(const Intrinsics& k, const SE3& target_from_source,
                       const InverseDepthMap& source_inv_depth);

}  // namespace dvs
