#include "dvs/oracle.hpp"

#include <cstdio>
#include <limits>

namespace dvs {

double mean_oracle_flow(const Grid2D<Vec2>& flow, const Grid2D<Vec2>& confidence) {
  double sum = 0.0;
  size_t valid = 0;
  for (size_t i = 0; i < flow.size(); ++i) {
    if (confidence[i].x() <= 0.0 && confidence[i].y() <= 0.0) continue;
    sum += flow[i].norm();
    ++valid;
  }
  if (valid * 10 < flow.size()) return std::numeric_limits<double>::infinity();
  return sum / valid;
}

// ---- synthetic oracle ----

SyntheticFlowOracle::SyntheticFlowOracle(const SyntheticSequence& seq,
                                         const Intrinsics& tracking_k,
                                         OracleNoise noise, uint64_t seed)
    : seq_(seq), kt_(tracking_k), noise_(noise), seed_(seed) {
  depth_cache_.resize(seq.size());
  cached_.assign(seq.size(), 0);
}

const DepthMap& SyntheticFlowOracle::gt_depth(int frame_index) {
  std::lock_guard lock(cache_mu_);
  if (!cached_[frame_index]) {
    depth_cache_[frame_index] = seq_.render_depth_at(frame_index, kt_);
    cached_[frame_index] = 1;
  }
  return depth_cache_[frame_index];
}

void SyntheticFlowOracle::query(const Keyframe& src, const FrameHandle& dst,
                                Grid2D<Vec2>& flow, Grid2D<Vec2>& confidence) {
  const int a = src.source_frame;
  const int b = dst.frame_index;
  if (a < 0 || a >= seq_.size() || b < 0 || b >= seq_.size()) {
    fail(ErrorCode::OracleFailure,
         "flow query outside the synthetic sequence: " + std::to_string(a) +
             " -> " + std::to_string(b));
  }

  const DepthMap& depth_a = gt_depth(a);
  InverseDepthMap inv(kt_.height, kt_.width, 1.0);
  Grid2D<uint8_t> has_depth(kt_.height, kt_.width, 0);
  for (size_t i = 0; i < inv.size(); ++i) {
    if (depth_a[i] > 0.0f) {
      inv[i] = 1.0 / depth_a[i];
      has_depth[i] = 1;
    }
  }
  const FlowField f = induced_flow(
      kt_, relative_pose(seq_.gt_pose(a), seq_.gt_pose(b)), inv);

  flow = f.flow;
  confidence = Grid2D<Vec2>(kt_.height, kt_.width, Vec2::Zero());

  // one rng stream per ordered pair keeps corruption independent of call order
  Rng rng(seed_, (static_cast<uint64_t>(a) << 24) ^ static_cast<uint64_t>(b));
  const bool biased = noise_.drift_px != 0.0 && a != b &&
                      std::abs(a - b) <= noise_.drift_max_gap;
  const double bias = biased ? noise_.drift_px * (b > a ? 1.0 : -1.0) : 0.0;

  for (size_t i = 0; i < flow.size(); ++i) {
    if (!f.valid[i] || !has_depth[i]) {
      flow[i] = Vec2::Zero();
      continue;
    }
    Vec2 w(1.0, 1.0);
    if (noise_.sigma_px > 0.0) {
      flow[i].x() += noise_.sigma_px * rng.normal();
      flow[i].y() += noise_.sigma_px * rng.normal();
    }
    if (noise_.outlier_frac > 0.0 && rng.uniform() < noise_.outlier_frac) {
      flow[i].x() += noise_.outlier_px * rng.normal();
      flow[i].y() += noise_.outlier_px * rng.normal();
      w.setConstant(noise_.outlier_conf);
    }
    flow[i].x() += bias;
    confidence[i] = w;
  }
}

// ---- file-backed oracle ----

namespace {
constexpr uint64_t kFlowMagic = 0x31574F4C46535644ull;  // "DVSFLOW1"
}

FlowFileWriter::FlowFileWriter(const std::string& path, int rows, int cols)
    : path_(path), rows_(rows), cols_(cols) {
  file_ = std::fopen(path.c_str(), "wb");
  if (!file_) fail(ErrorCode::IoFailure, "cannot open for writing: " + path);
  const uint64_t magic = kFlowMagic;
  const int32_t dims[2] = {rows, cols};
  uint64_t count = 0;  // patched on close
  std::fwrite(&magic, sizeof(magic), 1, file_);
  std::fwrite(dims, sizeof(int32_t), 2, file_);
  std::fwrite(&count, sizeof(count), 1, file_);
}

void FlowFileWriter::add(int src_frame, int dst_frame, const Grid2D<Vec2>& flow,
                         const Grid2D<Vec2>& confidence) {
  const int32_t pair[2] = {src_frame, dst_frame};
  std::fwrite(pair, sizeof(int32_t), 2, file_);
  for (size_t i = 0; i < flow.size(); ++i) {
    const float vals[4] = {
        static_cast<float>(flow[i].x()), static_cast<float>(flow[i].y()),
        static_cast<float>(confidence[i].x()),
        static_cast<float>(confidence[i].y())};
    std::fwrite(vals, sizeof(float), 4, file_);
  }
  ++count_;
}

void FlowFileWriter::close() {
  if (!file_) return;
  std::fseek(file_, sizeof(uint64_t) + 2 * sizeof(int32_t), SEEK_SET);
  std::fwrite(&count_, sizeof(count_), 1, file_);
  std::fclose(file_);
  file_ = nullptr;
}

FlowFileWriter::~FlowFileWriter() { close(); }

FileFlowOracle::FileFlowOracle(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) fail(ErrorCode::IoFailure, "cannot open flow file: " + path);
  uint64_t magic = 0, count = 0;
  int32_t dims[2] = {0, 0};
  if (std::fread(&magic, sizeof(magic), 1, f) != 1 || magic != kFlowMagic ||
      std::fread(dims, sizeof(int32_t), 2, f) != 2 ||
      std::fread(&count, sizeof(count), 1, f) != 1) {
    std::fclose(f);
    fail(ErrorCode::IoFailure, "not a flow file: " + path);
  }
  rows_ = dims[0];
  cols_ = dims[1];
  const size_t px = static_cast<size_t>(rows_) * cols_;
  for (uint64_t e = 0; e < count; ++e) {
    int32_t pair[2];
    if (std::fread(pair, sizeof(int32_t), 2, f) != 2) {
      std::fclose(f);
      fail(ErrorCode::IoFailure, "truncated flow file: " + path);
    }
    Entry entry;
    entry.flow = Grid2D<Vec2>(rows_, cols_);
    entry.confidence = Grid2D<Vec2>(rows_, cols_);
    for (size_t i = 0; i < px; ++i) {
      float vals[4];
      if (std::fread(vals, sizeof(float), 4, f) != 4) {
        std::fclose(f);
        fail(ErrorCode::IoFailure, "truncated flow file: " + path);
      }
      entry.flow[i] = Vec2(vals[0], vals[1]);
      entry.confidence[i] = Vec2(vals[2], vals[3]);
    }
    entries_[{pair[0], pair[1]}] = std::move(entry);
  }
  std::fclose(f);
}

void FileFlowOracle::query(const Keyframe& src, const FrameHandle& dst,
                           Grid2D<Vec2>& flow, Grid2D<Vec2>& confidence) {
  const auto it = entries_.find({src.source_frame, dst.frame_index});
  if (it == entries_.end()) {
    fail(ErrorCode::OracleFailure,
         "flow file has no entry for pair " + std::to_string(src.source_frame) +
             " -> " + std::to_string(dst.frame_index));
  }
  flow = it->second.flow;
  confidence = it->second.confidence;
}

// ---- rigid-flow oracle ----

void RigidFlowOracle::query(const Keyframe& src, const FrameHandle& dst,
                            Grid2D<Vec2>& flow, Grid2D<Vec2>& confidence) {
  if (dst.kf == nullptr) {
    fail(ErrorCode::OracleFailure,
         "rigid-flow oracle needs pose estimates on both sides");
  }
  const FlowField f = induced_flow(
      kt_, relative_pose(src.world_from_cam, dst.kf->world_from_cam),
      src.inv_depth);
  flow = f.flow;
  confidence = Grid2D<Vec2>(flow.rows(), flow.cols(), Vec2::Zero());
  for (size_t i = 0; i < flow.size(); ++i) {
    if (f.valid[i]) confidence[i] = Vec2(1.0, 1.0);
  }
}

}  // namespace dvs
