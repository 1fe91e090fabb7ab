#pragma once

#include <string>
#include <vector>

#include "dvs/core.hpp"

namespace dvs {

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<RgbU8> colors;  // per vertex; empty when the mesh is uncolored
  std::vector<Eigen::Vector3i> triangles;

  bool empty() const { return triangles.empty(); }
  double surface_area() const;
};

// axis-aligned cuboid tessellated into roughly square cells; inward flips the
// winding so normals face the interior (rooms viewed from inside)
TriangleMesh make_box_mesh(const Vec3& lo, const Vec3& hi, double cell_size,
                           bool inward);

// icosahedron refined n times, vertices projected to the radius
TriangleMesh make_icosphere(const Vec3& center, double radius, int subdivisions);

void append_mesh(TriangleMesh& dst, const TriangleMesh& src);

// binary little-endian PLY with optional per-vertex color
void save_ply(const TriangleMesh& mesh, const std::string& path);
TriangleMesh load_ply(const std::string& path);

}  // namespace dvs
