#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dvs/eval.hpp"
#include "dvs/field.hpp"
#include "dvs/mapper.hpp"
#include "dvs/tracking.hpp"

namespace dvs {

// ---- png images ----

// 8-bit rgb
void save_png_rgb(const ImageU8& image, const std::string& path);
ImageU8 load_png_rgb(const std::string& path);

// 16-bit grayscale storing meters times the TUM depth scale; zero is invalid
inline constexpr double kTumDepthScale = 5000.0;
void save_png_depth(const DepthMap& depth, const std::string& path);
DepthMap load_png_depth(const std::string& path);

// ---- TUM-layout datasets ----
//
// A sequence directory holds rgb.txt (timestamp and image path per line),
// optionally depth.txt in the same shape, and optionally groundtruth.txt with
// "timestamp tx ty tz qx qy qz qw" rows. Depth maps and ground-truth poses
// attach to the color frame with the nearest timestamp within the association
// window.

struct DatasetFrame {
  double timestamp = 0.0;
  std::string rgb_path;    // resolved against the sequence directory
  std::string depth_path;  // empty when no depth row associated
  std::optional<SE3> gt_pose;
};

struct TumSequence {
  std::vector<DatasetFrame> frames;
  Trajectory gt;  // the full ground-truth trajectory, for evaluation
};

TumSequence load_tum(const std::string& dir);

// lazy frame stream over a loaded sequence; pixels are read from disk only
// when the tracker materializes a keyframe, and image dimensions are checked
// against the camera on every load
FrameProvider dataset_frame_provider(const TumSequence& seq,
                                     const Intrinsics& camera,
                                     const Intrinsics& tracking_camera);

// frame stream over a synthetic sequence, rendering rgb, depth, and depth
// priors on demand
FrameProvider synthetic_frame_provider(const SyntheticSequence& seq,
                                       const Intrinsics& tracking_camera);

// ---- trajectory text ----
//
// One "timestamp tx ty tz qx qy qz qw" line per pose with nine significant
// digits, the interchange format shared with the evaluation module.

void export_trajectory(const Trajectory& traj, const std::string& path);
Trajectory load_trajectory(const std::string& path);

// ---- run configuration ----
//
// Flat key-value schema mirroring the tracker, mapping, and field structs
// plus the run-level knobs below. Files hold "key = value" lines with '#'
// comments; later assignments and command-line flags override earlier ones.

struct RunConfig {
  TrackerConfig tracker = TrackerConfig::defaults(Mode::Rgbd);
  MappingConfig mapping;
  FieldConfig field;

  uint64_t seed = 0;
  int map_every = 1;      // map every k-th snapshot; 0 disables mapping
  int final_rounds = 10;  // extra mapping rounds on the final snapshot
  double bounds_pad = 0.25;  // mapper bounds padding, dataset mode

  // synthetic sequence shape
  int n_frames = 60;
  int cam_width = 320;
  int cam_height = 240;
  double orbit_radius = 1.2;

  // oracle corruption
  double noise_sigma_px = 0.0;
  double noise_outlier_frac = 0.0;
  double noise_drift_px = 0.0;  // systematic bias on temporally near pairs

  Intrinsics camera() const {
    Intrinsics k;
    k.fx = k.fy = 0.8 * cam_width;
    k.cx = 0.5 * (cam_width - 1);
    k.cy = 0.5 * (cam_height - 1);
    k.width = cam_width;
    k.height = cam_height;
    return k;
  }
};

// applies one assignment; throws BadConfig on unknown keys or unparsable
// values
void set_config_key(RunConfig& cfg, const std::string& key,
                    const std::string& value);

// reads a config file on top of the given defaults
RunConfig load_config(const std::string& path, RunConfig base = {});

}  // namespace dvs
