#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <string>

#include "dvs/dba.hpp"
#include "dvs/graph.hpp"
#include "dvs/synth.hpp"

namespace dvs {

// ---- flow oracle ----
//
// The optimizer consumes dense pixel correspondences from an exchangeable
// source. Implementations must be pure in (seed, frame pair): the same query
// returns the same answer regardless of call order, which keeps replays and
// concurrent schedules consistent.

struct FrameHandle {
  int frame_index = -1;      // position in the raw input stream
  const Keyframe* kf = nullptr;  // set when the frame is already a keyframe
};

class FlowOracle {
 public:
  virtual ~FlowOracle() = default;

  // dense flow and per-axis confidence from keyframe src into frame dst at
  // tracking resolution; confidence 0 marks unusable pixels
  virtual void query(const Keyframe& src, const FrameHandle& dst,
                     Grid2D<Vec2>& flow, Grid2D<Vec2>& confidence) = 0;
};

// mean |flow| over confident pixels; +inf when fewer than 10% are usable,
// since a view change that large always warrants a keyframe
double mean_oracle_flow(const Grid2D<Vec2>& flow, const Grid2D<Vec2>& confidence);

// ---- synthetic oracle ----

struct OracleNoise {
  double sigma_px = 0.0;      // gaussian noise per axis
  double outlier_frac = 0.0;  // fraction of pixels replaced by gross errors
  double outlier_px = 8.0;    // magnitude scale of those errors
  double outlier_conf = 0.05; // confidence assigned to the corrupted pixels
  double drift_px = 0.0;      // systematic bias on temporally near pairs
  int drift_max_gap = 8;      // pair distance (frames) the bias applies to
};

// Ground-truth rigid flow rendered from the synthetic scene, optionally
// corrupted. Per-pair rng streams make the corruption order-independent.
class SyntheticFlowOracle : public FlowOracle {
 public:
  SyntheticFlowOracle(const SyntheticSequence& seq, const Intrinsics& tracking_k,
                      OracleNoise noise, uint64_t seed);

  void query(const Keyframe& src, const FrameHandle& dst, Grid2D<Vec2>& flow,
             Grid2D<Vec2>& confidence) override;

  // exact ground-truth inverse depth at tracking resolution (cached)
  const DepthMap& gt_depth(int frame_index);

 private:
  const SyntheticSequence& seq_;
  Intrinsics kt_;
  OracleNoise noise_;
  uint64_t seed_;
  std::mutex cache_mu_;  // queries may come from several execution contexts
  std::vector<DepthMap> depth_cache_;
  std::vector<uint8_t> cached_;
};

// ---- file-backed oracle ----
//
// Precomputed measurements keyed by (src_frame, dst_frame). The format is a
// flat little-endian dump: magic, grid size, entry count, then per entry the
// frame pair and interleaved flow/confidence floats.

class FileFlowOracle : public FlowOracle {
 public:
  explicit FileFlowOracle(const std::string& path);

  void query(const Keyframe& src, const FrameHandle& dst, Grid2D<Vec2>& flow,
             Grid2D<Vec2>& confidence) override;

  int rows() const { return rows_; }
  int cols() const { return cols_; }

 private:
  int rows_ = 0, cols_ = 0;
  struct Entry {
    Grid2D<Vec2> flow, confidence;
  };
  std::map<std::pair<int, int>, Entry> entries_;
};

struct FlowFileWriter {
  explicit FlowFileWriter(const std::string& path, int rows, int cols);
  ~FlowFileWriter();
  void add(int src_frame, int dst_frame, const Grid2D<Vec2>& flow,
           const Grid2D<Vec2>& confidence);
  void close();

 private:
  std::string path_;
  FILE* file_ = nullptr;
  int rows_, cols_;
  uint64_t count_ = 0;
};

// ---- rigid-flow oracle ----
//
// Flow induced by the current pose/depth estimates themselves. Carries no new
// information, so it only serves co-visibility style queries; dst must
// already be a keyframe.
class RigidFlowOracle : public FlowOracle {
 public:
  explicit RigidFlowOracle(const Intrinsics& tracking_k) : kt_(tracking_k) {}

  void query(const Keyframe& src, const FrameHandle& dst, Grid2D<Vec2>& flow,
             Grid2D<Vec2>& confidence) override;

 private:
  Intrinsics kt_;
};

}  // namespace dvs
