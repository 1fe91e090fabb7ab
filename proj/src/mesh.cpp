#include "dvs/mesh.hpp"

#include <cstdio>
#include <cstring>
#include <map>

namespace dvs {

double TriangleMesh::surface_area() const {
  double area = 0.0;
  for (const auto& t : triangles) {
    const Vec3 e1 = vertices[t[1]] - vertices[t[0]];
    const Vec3 e2 = vertices[t[2]] - vertices[t[0]];
    area += 0.5 * e1.cross(e2).norm();
  }
  return area;
}

TriangleMesh make_box_mesh(const Vec3& lo, const Vec3& hi, double cell_size,
                           bool inward) {
  TriangleMesh mesh;
  // six faces; each spanned by two in-plane axes (a, b) at a fixed third axis
  struct Face {
    int axis;      // fixed axis
    double value;  // lo or hi along it
    bool flip;     // winding so outward normals point away from the box
  };
  const Face faces[6] = {{0, lo.x(), true},  {0, hi.x(), false},
                         {1, lo.y(), true},  {1, hi.y(), false},
                         {2, lo.z(), true},  {2, hi.z(), false}};
  for (const Face& f : faces) {
    const int a = (f.axis + 1) % 3;
    const int b = (f.axis + 2) % 3;
    const int na = std::max(1, static_cast<int>(std::ceil((hi[a] - lo[a]) / cell_size)));
    const int nb = std::max(1, static_cast<int>(std::ceil((hi[b] - lo[b]) / cell_size)));
    const int base = static_cast<int>(mesh.vertices.size());
    for (int ib = 0; ib <= nb; ++ib) {
      for (int ia = 0; ia <= na; ++ia) {
        Vec3 v;
        v[f.axis] = f.value;
        v[a] = lo[a] + (hi[a] - lo[a]) * ia / na;
        v[b] = lo[b] + (hi[b] - lo[b]) * ib / nb;
        mesh.vertices.push_back(v);
      }
    }
    const int stride = na + 1;
    for (int ib = 0; ib < nb; ++ib) {
      for (int ia = 0; ia < na; ++ia) {
        const int v00 = base + ib * stride + ia;
        const int v10 = v00 + 1;
        const int v01 = v00 + stride;
        const int v11 = v01 + 1;
        bool flip = f.flip;
        if (inward) flip = !flip;
        if (flip) {
          mesh.triangles.emplace_back(v00, v01, v10);
          mesh.triangles.emplace_back(v10, v01, v11);
        } else {
          mesh.triangles.emplace_back(v00, v10, v01);
          mesh.triangles.emplace_back(v10, v11, v01);
        }
      }
    }
  }
  return mesh;
}

TriangleMesh make_icosphere(const Vec3& center, double radius, int subdivisions) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> verts = {
      {-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
      {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  for (Vec3& v : verts) v.normalize();
  std::vector<Eigen::Vector3i> tris = {
      {0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
      {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
      {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
      {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};

  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int i, int j) {
      const auto key = std::minmax(i, j);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      verts.push_back((verts[i] + verts[j]).normalized());
      const int idx = static_cast<int>(verts.size()) - 1;
      midpoint[key] = idx;
      return idx;
    };
    std::vector<Eigen::Vector3i> next;
    next.reserve(tris.size() * 4);
    for (const auto& tri : tris) {
      const int a = mid(tri[0], tri[1]);
      const int b = mid(tri[1], tri[2]);
      const int c = mid(tri[2], tri[0]);
      next.push_back({tri[0], a, c});
      next.push_back({tri[1], b, a});
      next.push_back({tri[2], c, b});
      next.push_back({a, b, c});
    }
    tris = std::move(next);
  }

  TriangleMesh mesh;
  mesh.vertices.reserve(verts.size());
  for (const Vec3& v : verts) mesh.vertices.push_back(center + radius * v);
  mesh.triangles = std::move(tris);
  return mesh;
}

void append_mesh(TriangleMesh& dst, const TriangleMesh& src) {
  const int base = static_cast<int>(dst.vertices.size());
  const RgbU8 gray{200, 200, 200};
  const bool want_colors = !dst.colors.empty() || !src.colors.empty();
  if (want_colors) dst.colors.resize(base, gray);
  dst.vertices.insert(dst.vertices.end(), src.vertices.begin(), src.vertices.end());
  if (want_colors) {
    if (src.colors.empty()) {
      dst.colors.resize(dst.vertices.size(), gray);
    } else {
      dst.colors.insert(dst.colors.end(), src.colors.begin(), src.colors.end());
    }
  }
  for (const auto& t : src.triangles) {
    dst.triangles.emplace_back(t[0] + base, t[1] + base, t[2] + base);
  }
}

// ---- binary little-endian ply ----

void save_ply(const TriangleMesh& mesh, const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) fail(ErrorCode::IoFailure, "cannot open for writing: " + path);

  const bool colored = !mesh.colors.empty();
  std::string header = "ply\nformat binary_little_endian 1.0\n";
  header += "element vertex " + std::to_string(mesh.vertices.size()) + "\n";
  header += "property float x\nproperty float y\nproperty float z\n";
  if (colored) {
    header += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  }
  header += "element face " + std::to_string(mesh.triangles.size()) + "\n";
  header += "property list uchar int vertex_indices\nend_header\n";
  std::fwrite(header.data(), 1, header.size(), f);

  for (size_t i = 0; i < mesh.vertices.size(); ++i) {
    const float xyz[3] = {static_cast<float>(mesh.vertices[i].x()),
                          static_cast<float>(mesh.vertices[i].y()),
                          static_cast<float>(mesh.vertices[i].z())};
    std::fwrite(xyz, sizeof(float), 3, f);
    if (colored) std::fwrite(mesh.colors[i].data(), 1, 3, f);
  }
  for (const auto& t : mesh.triangles) {
    const uint8_t n = 3;
    const int32_t idx[3] = {t[0], t[1], t[2]};
    std::fwrite(&n, 1, 1, f);
    std::fwrite(idx, sizeof(int32_t), 3, f);
  }
  if (std::fclose(f) != 0) fail(ErrorCode::IoFailure, "write failed: " + path);
}

TriangleMesh load_ply(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) fail(ErrorCode::IoFailure, "cannot open: " + path);

  auto read_line = [&]() {
    std::string line;
    int ch;
    while ((ch = std::fgetc(f)) != EOF && ch != '\n') line.push_back(static_cast<char>(ch));
    return line;
  };

  if (read_line() != "ply") {
    std::fclose(f);
    fail(ErrorCode::IoFailure, "not a ply file: " + path);
  }
  size_t n_verts = 0, n_faces = 0;
  bool colored = false;
  std::string line;
  while ((line = read_line()) != "end_header") {
    if (line.empty() && std::feof(f)) {
      std::fclose(f);
      fail(ErrorCode::IoFailure, "truncated ply header: " + path);
    }
    if (line.rfind("element vertex ", 0) == 0) n_verts = std::stoul(line.substr(15));
    if (line.rfind("element face ", 0) == 0) n_faces = std::stoul(line.substr(13));
    if (line == "property uchar red") colored = true;
  }

  TriangleMesh mesh;
  mesh.vertices.resize(n_verts);
  if (colored) mesh.colors.resize(n_verts);
  for (size_t i = 0; i < n_verts; ++i) {
    float xyz[3];
    if (std::fread(xyz, sizeof(float), 3, f) != 3) {
      std::fclose(f);
      fail(ErrorCode::IoFailure, "truncated ply vertices: " + path);
    }
    mesh.vertices[i] = Vec3(xyz[0], xyz[1], xyz[2]);
    if (colored && std::fread(mesh.colors[i].data(), 1, 3, f) != 3) {
      std::fclose(f);
      fail(ErrorCode::IoFailure, "truncated ply colors: " + path);
    }
  }
  mesh.triangles.resize(n_faces);
  for (size_t i = 0; i < n_faces; ++i) {
    uint8_t n = 0;
    int32_t idx[3];
    if (std::fread(&n, 1, 1, f) != 1 || n != 3 ||
        std::fread(idx, sizeof(int32_t), 3, f) != 3) {
      std::fclose(f);
      fail(ErrorCode::IoFailure, "truncated or non-triangular ply face: " + path);
    }
    mesh.triangles[i] = Eigen::Vector3i(idx[0], idx[1], idx[2]);
  }
  std::fclose(f);
  return mesh;
}

}  // namespace dvs
