#include "dvs/graph.hpp"

#include <algorithm>

namespace dvs {

double mean_rigid_flow(const Keyframe& a, const Keyframe& b, const Intrinsics& k,
                       int stride) {
  if (a.id == b.id) return 0.0;

  const SE3 g = relative_pose(a.world_from_cam, b.world_from_cam);
  const Mat3 rot = g.rotation();
  const Vec3 trans = g.translation();

  int sampled = 0, valid = 0;
  double sum = 0.0;
  for (int r = 0; r < a.inv_depth.rows(); r += stride) {
    for (int c = 0; c < a.inv_depth.cols(); c += stride) {
      ++sampled;
      const double inv_d = a.inv_depth(r, c);
      if (inv_d <= 0.0) continue;
      const double z = 1.0 / inv_d;
      const Vec3 xs((c - k.cx) / k.fx * z, (r - k.cy) / k.fy * z, z);
      const Vec3 xt = rot * xs + trans;
      if (xt.z() <= 0.0) continue;
      const double iz = 1.0 / xt.z();
      const double u = k.fx * xt.x() * iz + k.cx;
      const double v = k.fy * xt.y() * iz + k.cy;
      if (u < 0.0 || u > k.width - 1 || v < 0.0 || v > k.height - 1) continue;
      const double du = u - c;
      const double dv = v - r;
      sum += std::sqrt(du * du + dv * dv);
      ++valid;
    }
  }
  if (valid * 10 < sampled) return -1.0;
  return sum / valid;
}

CovisMatrix build_covis_matrix(const std::vector<Keyframe>& kfs, int n_local,
                               const Intrinsics& k, double tau_co, int stride) {
  const int n = static_cast<int>(kfs.size());
  const int rows = std::min(n_local, n);
  CovisMatrix covis;
  covis.first_local = n - rows;
  covis.entries = Grid2D<CovisEntry>(rows, n);
  for (int r = 0; r < rows; ++r) {
    const Keyframe& src = kfs[covis.first_local + r];
    for (int c = 0; c < n; ++c) {
      CovisEntry& e = covis.entries(r, c);
      e.flow = mean_rigid_flow(src, kfs[c], k, stride);
      e.valid = e.flow >= 0.0;
      e.filtered = e.valid && e.flow > tau_co;
    }
  }
  return covis;
}

namespace {

bool suppressed_by(int a, int b, int i, int j, int radius) {
  return (std::abs(a - i) <= radius && std::abs(b - j) <= radius) ||
         (std::abs(a - j) <= radius && std::abs(b - i) <= radius);
}

struct Candidate {
  double flow;
  int i, j;  // keyframe ids
};

}  // namespace

std::vector<Edge> select_local_edges(const CovisMatrix& covis, int r_local,
                                     int s_edge) {
  const int n_local = covis.n_local();
  const int first = covis.first_local;
  const size_t cap = static_cast<size_t>(s_edge) * n_local;

  std::vector<Edge> edges;
  std::vector<std::pair<int, int>> taken;  // unordered pairs, smaller id first
  auto ordered = [](int i, int j) {
    return std::pair<int, int>(std::min(i, j), std::max(i, j));
  };
  auto already_taken = [&](int i, int j) {
    return std::find(taken.begin(), taken.end(), ordered(i, j)) != taken.end();
  };

  for (int r = 0; r + 1 < n_local && edges.size() < cap; ++r) {
    edges.push_back({first + r, first + r + 1, EdgeKind::Temporal});
    taken.push_back({first + r, first + r + 1});
  }

  // co-visibility candidates restricted to pairs inside the local window
  std::vector<Candidate> cands;
  for (int r = 0; r < n_local; ++r) {
    const int i = covis.row_id(r);
    for (int c = first; c < covis.n_total(); ++c) {
      if (c == i) continue;
      const CovisEntry& e = covis.entries(r, c);
      if (!e.valid || e.filtered) continue;
      cands.push_back({e.flow, i, c});
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.flow != b.flow) return a.flow < b.flow;
    return std::tie(a.i, a.j) < std::tie(b.i, b.j);
  });

  for (const Candidate& c : cands) {
    if (edges.size() >= cap) break;
    if (already_taken(c.i, c.j)) continue;
    bool blocked = false;
    for (const auto& [ti, tj] : taken) {
      if (suppressed_by(c.i, c.j, ti, tj, r_local)) {
        blocked = true;
        break;
      }
    }
    if (blocked) continue;
    edges.push_back({c.i, c.j, EdgeKind::Covis});
    taken.push_back(ordered(c.i, c.j));
  }
  return edges;
}

std::vector<Edge> detect_loops(const CovisMatrix& covis, int r_loop,
                               double tau_co, LoopDetectState& state) {
  // candidates live strictly left of the local window and need a temporal
  // gap of at least the window size; anything closer is the recent past
  // still coupled through ordinary co-visibility, not a revisit
  std::vector<Candidate> cands;
  for (int r = 0; r < covis.n_local(); ++r) {
    for (int c = 0; c < covis.first_local; ++c) {
      if (covis.row_id(r) - c <= covis.n_local()) continue;
      const CovisEntry& e = covis.entries(r, c);
      if (!e.valid || !(e.flow < tau_co)) continue;
      bool near_accepted = false;
      for (const auto& [ai, aj] : state.accepted) {
        if (std::abs(covis.row_id(r) - ai) <= r_loop &&
            std::abs(c - aj) <= r_loop) {
          near_accepted = true;
          break;
        }
      }
      if (!near_accepted) cands.push_back({e.flow, covis.row_id(r), c});
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.flow != b.flow) return a.flow < b.flow;
    return std::tie(a.i, a.j) < std::tie(b.i, b.j);
  });

  // greedy pick with suppression, at most one candidate per revisited region
  std::vector<LoopCandidate> picked;
  for (const Candidate& c : cands) {
    bool blocked = false;
    for (const LoopCandidate& p : picked) {
      if (std::abs(c.i - p.src) <= r_loop && std::abs(c.j - p.dst) <= r_loop) {
        blocked = true;
        break;
      }
    }
    if (!blocked) picked.push_back({c.i, c.j, c.flow});
  }

  // a region counts as revisited once three consecutive passes agree on it
  std::vector<Edge> loops;
  if (state.recent.size() >= 2) {
    const auto& prev1 = state.recent[state.recent.size() - 1];
    const auto& prev2 = state.recent[state.recent.size() - 2];
    for (const LoopCandidate& cur : picked) {
      const auto matches = [&](const std::vector<LoopCandidate>& list) {
        for (const LoopCandidate& p : list) {
          if (std::abs(p.dst - cur.dst) <= r_loop) return true;
        }
        return false;
      };
      if (matches(prev1) && matches(prev2)) {
        loops.push_back({cur.src, cur.dst, EdgeKind::Loop});
        state.accepted.push_back({cur.src, cur.dst});
      }
    }
  }

  state.recent.push_back(std::move(picked));
  if (state.recent.size() > 3) state.recent.erase(state.recent.begin());
  return loops;
}

}  // namespace dvs
