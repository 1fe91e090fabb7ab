#include "dvs/synth.hpp"

namespace dvs {

SceneSpec SceneSpec::default_room() {
  SceneSpec s;
  s.spheres.push_back({Vec3(0.9, -1.0, 0.6), 0.5, Vec3(0.82, 0.28, 0.22)});
  s.spheres.push_back({Vec3(-1.1, -1.05, -0.8), 0.45, Vec3(0.25, 0.6, 0.3)});
  s.blocks.push_back({Vec3(-0.5, -1.5, 0.9), Vec3(0.4, -0.6, 1.6),
                      Vec3(0.3, 0.42, 0.8)});
  return s;
}

SceneSpec SceneSpec::lone_sphere() {
  SceneSpec s;
  s.has_room = false;
  s.checker_scale = 0.0;
  s.spheres.push_back({Vec3::Zero(), 0.5, Vec3(0.75, 0.68, 0.55)});
  return s;
}

SE3 look_at_pose(const Vec3& eye, const Vec3& target) {
  const Vec3 view = target - eye;
  if (view.norm() < 1e-9) {
    fail(ErrorCode::DegeneratePath, "camera position coincides with its target");
  }
  const Vec3 z = view.normalized();
  const Vec3 up(0.0, 1.0, 0.0);
  Vec3 x = z.cross(up);
  if (x.norm() < 1e-9) {
    fail(ErrorCode::DegeneratePath, "view direction is parallel to the up axis");
  }
  x.normalize();
  const Vec3 y = z.cross(x);
  Mat3 rot;
  rot.col(0) = x;
  rot.col(1) = y;
  rot.col(2) = z;
  return SE3(rot, eye);
}

SyntheticSequence::SyntheticSequence(SceneSpec scene, PathSpec path,
                                     Intrinsics camera)
    : scene_(std::move(scene)), camera_(camera) {
  if (path.n_frames < 1) {
    fail(ErrorCode::DegeneratePath, "path needs at least one frame");
  }
  poses_.reserve(path.n_frames);
  times_.reserve(path.n_frames);
  for (int i = 0; i < path.n_frames; ++i) {
    Vec3 eye;
    switch (path.kind) {
      case PathSpec::Kind::Orbit: {
        const double angle =
            path.start_angle + path.total_angle * i / path.n_frames;
        eye = path.orbit_center +
              Vec3(path.orbit_radius * std::cos(angle),
                   path.orbit_height * std::sin(3.0 * angle),
                   path.orbit_radius * std::sin(angle));
        break;
      }
      case PathSpec::Kind::Line: {
        const double s =
            path.n_frames > 1 ? static_cast<double>(i) / (path.n_frames - 1) : 0.0;
        eye = path.line_from + s * (path.line_to - path.line_from);
        break;
      }
    }
    poses_.push_back(look_at_pose(eye, path.look_at));
    times_.push_back(i / path.fps);
  }
}

// ---- ray casting ----

namespace {

// nearest forward intersection with an axis-aligned box from outside
bool ray_box(const Vec3& o, const Vec3& d, const Vec3& lo, const Vec3& hi,
             double& t_hit, Vec3& normal) {
  double t_enter = -1e30, t_exit = 1e30;
  int enter_axis = -1;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-14) {
      if (o[a] < lo[a] || o[a] > hi[a]) return false;
      continue;
    }
    double t0 = (lo[a] - o[a]) / d[a];
    double t1 = (hi[a] - o[a]) / d[a];
    if (t0 > t1) std::swap(t0, t1);
    if (t0 > t_enter) {
      t_enter = t0;
      enter_axis = a;
    }
    t_exit = std::min(t_exit, t1);
  }
  if (t_enter > t_exit || t_exit < 1e-9 || t_enter < 1e-9 || enter_axis < 0) {
    return false;
  }
  t_hit = t_enter;
  normal = Vec3::Zero();
  normal[enter_axis] = d[enter_axis] > 0.0 ? -1.0 : 1.0;
  return true;
}

// exit point of a ray starting inside an axis-aligned shell
bool ray_room(const Vec3& o, const Vec3& d, const Vec3& lo, const Vec3& hi,
              double& t_hit, Vec3& normal) {
  double t_exit = 1e30;
  int exit_axis = -1;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-14) continue;
    const double t = d[a] > 0.0 ? (hi[a] - o[a]) / d[a] : (lo[a] - o[a]) / d[a];
    if (t < t_exit) {
      t_exit = t;
      exit_axis = a;
    }
  }
  if (exit_axis < 0 || t_exit < 1e-9) return false;
  t_hit = t_exit;
  normal = Vec3::Zero();
  normal[exit_axis] = d[exit_axis] > 0.0 ? -1.0 : 1.0;  // points back inside
  return true;
}

bool ray_sphere(const Vec3& o, const Vec3& d, const Vec3& c, double r,
                double& t_hit, Vec3& normal) {
  const Vec3 oc = o - c;
  const double b = oc.dot(d);
  const double disc = b * b - (oc.squaredNorm() - r * r);
  if (disc < 0.0) return false;
  const double sq = std::sqrt(disc);
  double t = -b - sq;
  if (t < 1e-9) t = -b + sq;
  if (t < 1e-9) return false;
  t_hit = t;
  normal = (o + t * d - c) / r;
  return true;
}

}  // namespace

SyntheticSequence::Hit SyntheticSequence::cast_ray(const Vec3& origin,
                                                   const Vec3& dir) const {
  Hit best;
  double t;
  Vec3 n;
  if (scene_.has_room &&
      ray_room(origin, dir, scene_.room_lo, scene_.room_hi, t, n)) {
    best = {t, n, scene_.room_albedo, true};
  }
  for (const SceneSphere& s : scene_.spheres) {
    if (ray_sphere(origin, dir, s.center, s.radius, t, n) &&
        (!best.valid || t < best.t)) {
      best = {t, n, s.albedo, true};
    }
  }
  for (const SceneBlock& b : scene_.blocks) {
    if (ray_box(origin, dir, b.lo, b.hi, t, n) && (!best.valid || t < best.t)) {
      best = {t, n, b.albedo, true};
    }
  }
  return best;
}

Vec3 SyntheticSequence::shade(const Hit& hit, const Vec3& point,
                              const Vec3& view_dir) const {
  Vec3 albedo = hit.albedo;
  if (scene_.checker_scale > 0.0) {
    const double s = scene_.checker_scale;
    const long long parity = static_cast<long long>(std::floor(point.x() * s)) +
                             static_cast<long long>(std::floor(point.y() * s)) +
                             static_cast<long long>(std::floor(point.z() * s));
    if (parity & 1) albedo *= 0.62;
  }
  Vec3 n = hit.normal;
  if (n.dot(view_dir) > 0.0) n = -n;  // face the camera
  static const Vec3 light = Vec3(0.35, 0.85, 0.30).normalized();
  const double intensity = 0.35 + 0.65 * std::max(0.0, n.dot(light));
  return (albedo * intensity).cwiseMin(1.0).cwiseMax(0.0);
}

ImageU8 SyntheticSequence::render_rgb(int i) const {
  const SE3& pose = poses_[i];
  const Mat3 rot = pose.rotation();
  const Vec3 origin = pose.translation();
  ImageU8 img(camera_.height, camera_.width, RgbU8{20, 20, 28});
  for (int r = 0; r < camera_.height; ++r) {
    for (int c = 0; c < camera_.width; ++c) {
      const Vec3 dir_cam = Vec3((c - camera_.cx) / camera_.fx,
                                (r - camera_.cy) / camera_.fy, 1.0)
                               .normalized();
      const Vec3 dir = rot * dir_cam;
      const Hit hit = cast_ray(origin, dir);
      if (!hit.valid) continue;
      const Vec3 rgb = shade(hit, origin + hit.t * dir, dir);
      img(r, c) = RgbU8{static_cast<uint8_t>(std::lround(rgb.x() * 255.0)),
                        static_cast<uint8_t>(std::lround(rgb.y() * 255.0)),
                        static_cast<uint8_t>(std::lround(rgb.z() * 255.0))};
    }
  }
  return img;
}

DepthMap SyntheticSequence::render_depth_at(int i, const Intrinsics& k) const {
  const SE3& pose = poses_[i];
  const Mat3 rot = pose.rotation();
  const Vec3 origin = pose.translation();
  DepthMap depth(k.height, k.width, 0.0f);  // 0 = no hit
  for (int r = 0; r < k.height; ++r) {
    for (int c = 0; c < k.width; ++c) {
      const Vec3 dir_cam((c - k.cx) / k.fx, (r - k.cy) / k.fy, 1.0);
      const double inv_norm = 1.0 / dir_cam.norm();
      const Vec3 dir = rot * (dir_cam * inv_norm);
      const Hit hit = cast_ray(origin, dir);
      if (!hit.valid) continue;
      // z-depth: distance along the camera forward axis
      depth(r, c) = static_cast<float>(hit.t * inv_norm);
    }
  }
  return depth;
}

TriangleMesh SyntheticSequence::gt_mesh(double box_cell, int sphere_subdiv) const {
  TriangleMesh mesh;
  if (scene_.has_room) {
    mesh = make_box_mesh(scene_.room_lo, scene_.room_hi, box_cell, true);
  }
  for (const SceneSphere& s : scene_.spheres) {
    append_mesh(mesh, make_icosphere(s.center, s.radius, sphere_subdiv));
  }
  for (const SceneBlock& b : scene_.blocks) {
    append_mesh(mesh, make_box_mesh(b.lo, b.hi, box_cell * 0.6, false));
  }
  return mesh;
}

void SyntheticSequence::bounds(Vec3& lo, Vec3& hi) const {
  if (scene_.has_room) {
    lo = scene_.room_lo;
    hi = scene_.room_hi;
    return;
  }
  lo = Vec3::Constant(1e30);
  hi = Vec3::Constant(-1e30);
  auto grow = [&](const Vec3& p) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  };
  for (const SceneSphere& s : scene_.spheres) {
    grow(s.center - Vec3::Constant(s.radius));
    grow(s.center + Vec3::Constant(s.radius));
  }
  for (const SceneBlock& b : scene_.blocks) {
    grow(b.lo);
    grow(b.hi);
  }
  for (const SE3& p : poses_) grow(p.translation());
}

}  // namespace dvs
