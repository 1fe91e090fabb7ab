#pragma once

#include <vector>

#include "dvs/geometry.hpp"
#include "dvs/mesh.hpp"

namespace dvs {

// ---- analytic test world ----
//
// Scenes are built from a handful of exactly-intersectable primitives so that
// rendered depth, flow targets, and ground-truth meshes all agree to machine
// precision instead of to some rasterizer's tolerance.

struct SceneSphere {
  Vec3 center = Vec3::Zero();
  double radius = 0.5;
  Vec3 albedo{0.8, 0.3, 0.25};
};

struct SceneBlock {
  Vec3 lo = Vec3::Zero(), hi = Vec3::Ones();
  Vec3 albedo{0.3, 0.5, 0.8};
};

struct SceneSpec {
  bool has_room = true;  // camera sits inside an axis-aligned shell
  Vec3 room_lo{-2.0, -1.5, -2.0};
  Vec3 room_hi{2.0, 1.5, 2.0};
  Vec3 room_albedo{0.75, 0.72, 0.65};
  std::vector<SceneSphere> spheres;
  std::vector<SceneBlock> blocks;
  double checker_scale = 1.5;  // checker cells per meter, 0 disables

  // furnished room used across the pipeline tests
  static SceneSpec default_room();
  // single untextured sphere floating in the void
  static SceneSpec lone_sphere();
};

struct PathSpec {
  enum class Kind { Orbit, Line };
  Kind kind = Kind::Orbit;
  int n_frames = 60;
  double fps = 10.0;
  Vec3 look_at = Vec3::Zero();

  Vec3 orbit_center = Vec3::Zero();
  double orbit_radius = 1.2;
  double orbit_height = 0.25;      // vertical wobble amplitude
  double start_angle = 0.0;
  double total_angle = 2.0 * M_PI;  // full sweep closes the loop

  Vec3 line_from{-1.0, 0.0, 0.0};
  Vec3 line_to{1.0, 0.0, 0.0};
};

// world-from-camera pose looking from eye toward target, y-up world
SE3 look_at_pose(const Vec3& eye, const Vec3& target);

class SyntheticSequence {
 public:
  // throws DegeneratePath when a frame has no usable view direction
  SyntheticSequence(SceneSpec scene, PathSpec path, Intrinsics camera);

  int size() const { return static_cast<int>(poses_.size()); }
  const Intrinsics& camera() const { return camera_; }
  const SceneSpec& scene() const { return scene_; }
  double timestamp(int i) const { return times_[i]; }
  const SE3& gt_pose(int i) const { return poses_[i]; }
  const std::vector<SE3>& gt_poses() const { return poses_; }

  ImageU8 render_rgb(int i) const;
  DepthMap render_depth(int i) const { return render_depth_at(i, camera_); }
  DepthMap render_depth_at(int i, const Intrinsics& k) const;

  TriangleMesh gt_mesh(double box_cell = 0.25, int sphere_subdiv = 4) const;

  // tight bound on everything a camera can see
  void bounds(Vec3& lo, Vec3& hi) const;

 private:
  struct Hit {
    double t = -1.0;
    Vec3 normal = Vec3::UnitY();
    Vec3 albedo = Vec3::Ones();
    bool valid = false;
  };
  Hit cast_ray(const Vec3& origin, const Vec3& dir) const;
  Vec3 shade(const Hit& hit, const Vec3& point, const Vec3& view_dir) const;

  SceneSpec scene_;
  Intrinsics camera_;
  std::vector<SE3> poses_;
  std::vector<double> times_;
};

}  // namespace dvs
