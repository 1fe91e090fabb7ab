#include "dvs/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <png.h>

namespace dvs {

// ---- png images ----

namespace {

png_image make_png_header(int width, int height, png_uint_32 format) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = format;
  return image;
}

[[noreturn]] void fail_png(const png_image& image, const std::string& path,
                           const char* what) {
  fail(ErrorCode::IoFailure,
       std::string(what) + " " + path + ": " + image.message);
}

}  // namespace

void save_png_rgb(const ImageU8& image, const std::string& path) {
  if (image.empty()) fail(ErrorCode::IoFailure, "refusing to save empty image");
  png_image png = make_png_header(image.cols(), image.rows(), PNG_FORMAT_RGB);
  if (!png_image_write_to_file(&png, path.c_str(), 0, image.data(), 0, nullptr))
    fail_png(png, path, "cannot write");
}

ImageU8 load_png_rgb(const std::string& path) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str()))
    fail_png(png, path, "cannot open");
  png.format = PNG_FORMAT_RGB;
  ImageU8 image(static_cast<int>(png.height), static_cast<int>(png.width));
  if (!png_image_finish_read(&png, nullptr, image.data(), 0, nullptr))
    fail_png(png, path, "cannot decode");
  return image;
}

void save_png_depth(const DepthMap& depth, const std::string& path) {
  if (depth.empty()) fail(ErrorCode::IoFailure, "refusing to save empty depth");
  std::vector<uint16_t> raw(depth.size());
  for (size_t i = 0; i < depth.size(); ++i) {
    const double scaled = std::lround(
        std::max(0.0, static_cast<double>(depth[i])) * kTumDepthScale);
    raw[i] = static_cast<uint16_t>(std::min(scaled, 65535.0));
  }
  png_image png =
      make_png_header(depth.cols(), depth.rows(), PNG_FORMAT_LINEAR_Y);
  if (!png_image_write_to_file(&png, path.c_str(), 0, raw.data(), 0, nullptr))
    fail_png(png, path, "cannot write");
}

DepthMap load_png_depth(const std::string& path) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str()))
    fail_png(png, path, "cannot open");
  png.format = PNG_FORMAT_LINEAR_Y;
  std::vector<uint16_t> raw(static_cast<size_t>(png.width) * png.height);
  if (!png_image_finish_read(&png, nullptr, raw.data(), 0, nullptr))
    fail_png(png, path, "cannot decode");
  DepthMap depth(static_cast<int>(png.height), static_cast<int>(png.width));
  for (size_t i = 0; i < raw.size(); ++i)
    depth[i] = static_cast<float>(raw[i] / kTumDepthScale);
  return depth;
}

// ---- TUM-layout datasets ----

namespace {

struct IndexRow {
  double timestamp = 0.0;
  std::string rest;
};

// "timestamp payload" rows, '#' comments and blank lines skipped
std::vector<IndexRow> read_index(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::MissingIndexFile, "cannot open " + path);
  std::vector<IndexRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    IndexRow row;
    if (!(ss >> row.timestamp)) continue;
    std::getline(ss, row.rest);
    const size_t start = row.rest.find_first_not_of(" \t\r");
    const size_t end = row.rest.find_last_not_of(" \t\r");
    row.rest = (start == std::string::npos)
                   ? std::string()
                   : row.rest.substr(start, end - start + 1);
    rows.push_back(std::move(row));
  }
  return rows;
}

bool file_exists(const std::string& path) {
  std::ifstream probe(path);
  return probe.good();
}

// index of the nearest timestamp within the association window, in a sorted
// list
std::optional<size_t> nearest_within(const std::vector<double>& sorted,
                                     double t, double tol) {
  if (sorted.empty()) return std::nullopt;
  const auto it = std::lower_bound(sorted.begin(), sorted.end(), t);
  size_t j = static_cast<size_t>(it - sorted.begin());
  if (j == sorted.size() || (j > 0 && t - sorted[j - 1] < sorted[j] - t)) --j;
  if (std::abs(sorted[j] - t) <= tol) return j;
  return std::nullopt;
}

}  // namespace

TumSequence load_tum(const std::string& dir) {
  const auto rgb_rows = read_index(dir + "/rgb.txt");
  if (rgb_rows.empty())
    fail(ErrorCode::NoAssociations, dir + "/rgb.txt lists no frames");

  TumSequence seq;
  for (const IndexRow& row : rgb_rows) {
    DatasetFrame frame;
    frame.timestamp = row.timestamp;
    frame.rgb_path = dir + "/" + row.rest;
    seq.frames.push_back(std::move(frame));
  }

  if (file_exists(dir + "/depth.txt")) {
    const auto depth_rows = read_index(dir + "/depth.txt");
    std::vector<double> ts(depth_rows.size());
    for (size_t i = 0; i < depth_rows.size(); ++i) ts[i] = depth_rows[i].timestamp;
    int matched = 0;
    for (DatasetFrame& frame : seq.frames)
      if (const auto j =
              nearest_within(ts, frame.timestamp, kAssociationToleranceS)) {
        frame.depth_path = dir + "/" + depth_rows[*j].rest;
        ++matched;
      }
    if (matched == 0)
      fail(ErrorCode::NoAssociations,
           "no depth row associates with any color frame in " + dir);
  }

  if (file_exists(dir + "/groundtruth.txt")) {
    const auto gt_rows = read_index(dir + "/groundtruth.txt");
    std::vector<double> ts;
    for (const IndexRow& row : gt_rows) {
      double v[7];
      std::istringstream ss(row.rest);
      if (!(ss >> v[0] >> v[1] >> v[2] >> v[3] >> v[4] >> v[5] >> v[6]))
        fail(ErrorCode::IoFailure,
             "groundtruth row needs tx ty tz qx qy qz qw: " + row.rest);
      TimedPose tp;
      tp.timestamp = row.timestamp;
      tp.world_from_cam =
          SE3(Quat(v[6], v[3], v[4], v[5]), Vec3(v[0], v[1], v[2]));
      seq.gt.push_back(tp);
      ts.push_back(row.timestamp);
    }
    for (DatasetFrame& frame : seq.frames)
      if (const auto j =
              nearest_within(ts, frame.timestamp, kAssociationToleranceS))
        frame.gt_pose = seq.gt[*j].world_from_cam;
  }

  return seq;
}

namespace {

std::shared_ptr<const ImageF> to_float_image(const ImageU8& u8) {
  auto out = std::make_shared<ImageF>(u8.rows(), u8.cols());
  for (size_t i = 0; i < u8.size(); ++i)
    (*out)[i] = {u8[i][0] / 255.0f, u8[i][1] / 255.0f, u8[i][2] / 255.0f};
  return out;
}

void check_dims(int rows, int cols, const Intrinsics& camera,
                const std::string& path) {
  if (rows != camera.height || cols != camera.width)
    fail(ErrorCode::IoFailure,
         "image dimensions must stay constant within a sequence: " + path);
}

// nearest-pixel downsample of a full-resolution depth map to the tracking
// grid, inverted; invalid readings become -1
Grid2D<double> prior_from_depth(const DepthMap& depth, const Intrinsics& kt) {
  Grid2D<double> prior(kt.height, kt.width, -1.0);
  for (int r = 0; r < kt.height; ++r)
    for (int c = 0; c < kt.width; ++c) {
      const int sr = std::min(depth.rows() - 1,
                              static_cast<int>((r + 0.5) * depth.rows() /
                                               kt.height));
      const int sc = std::min(depth.cols() - 1,
                              static_cast<int>((c + 0.5) * depth.cols() /
                                               kt.width));
      const float d = depth(sr, sc);
      if (d > 0.0f) prior(r, c) = 1.0 / static_cast<double>(d);
    }
  return prior;
}

}  // namespace

FrameProvider dataset_frame_provider(const TumSequence& seq,
                                     const Intrinsics& camera,
                                     const Intrinsics& tracking_camera) {
  FrameProvider p;
  p.n_frames = static_cast<int>(seq.frames.size());
  p.frame = [&seq, camera, tracking_camera](int i) {
    const DatasetFrame& f = seq.frames[static_cast<size_t>(i)];
    FrameInput in;
    in.frame_index = i;
    in.timestamp = f.timestamp;
    in.load_image = [path = f.rgb_path, camera] {
      const ImageU8 u8 = load_png_rgb(path);
      check_dims(u8.rows(), u8.cols(), camera, path);
      return std::shared_ptr<const ImageF>(to_float_image(u8));
    };
    if (!f.depth_path.empty()) {
      in.load_depth = [path = f.depth_path, camera] {
        auto depth = std::make_shared<DepthMap>(load_png_depth(path));
        check_dims(depth->rows(), depth->cols(), camera, path);
        return std::shared_ptr<const DepthMap>(depth);
      };
      in.load_prior_inv_depth = [path = f.depth_path, camera,
                                 tracking_camera] {
        const DepthMap depth = load_png_depth(path);
        check_dims(depth.rows(), depth.cols(), camera, path);
        return prior_from_depth(depth, tracking_camera);
      };
    }
    return in;
  };
  return p;
}

FrameProvider synthetic_frame_provider(const SyntheticSequence& seq,
                                       const Intrinsics& tracking_camera) {
  FrameProvider p;
  p.n_frames = seq.size();
  p.frame = [&seq, tracking_camera](int i) {
    FrameInput in;
    in.frame_index = i;
    in.timestamp = seq.timestamp(i);
    in.load_image = [&seq, i] {
      return std::shared_ptr<const ImageF>(to_float_image(seq.render_rgb(i)));
    };
    in.load_depth = [&seq, i] {
      return std::shared_ptr<const DepthMap>(
          std::make_shared<DepthMap>(seq.render_depth(i)));
    };
    in.load_prior_inv_depth = [&seq, tracking_camera, i] {
      const DepthMap d = seq.render_depth_at(i, tracking_camera);
      Grid2D<double> prior(d.rows(), d.cols(), -1.0);
      for (size_t j = 0; j < d.size(); ++j)
        if (d[j] > 0.0f) prior[j] = 1.0 / static_cast<double>(d[j]);
      return prior;
    };
    return in;
  };
  return p;
}

// ---- trajectory text ----

void export_trajectory(const Trajectory& traj, const std::string& path) {
  if (traj.empty())
    fail(ErrorCode::BadConfig, "refusing to export an empty trajectory");
  FILE* file = std::fopen(path.c_str(), "w");
  if (!file) fail(ErrorCode::IoFailure, "cannot write " + path);
  for (const TimedPose& tp : traj) {
    const Vec3& t = tp.world_from_cam.translation();
    const Quat& q = tp.world_from_cam.quat();
    std::fprintf(file, "%.9g %.9g %.9g %.9g %.9g %.9g %.9g %.9g\n",
                 tp.timestamp, t.x(), t.y(), t.z(), q.x(), q.y(), q.z(),
                 q.w());
  }
  std::fclose(file);
}

Trajectory load_trajectory(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoFailure, "cannot open " + path);
  Trajectory traj;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    double v[8];
    if (!(ss >> v[0])) continue;
    for (int k = 1; k < 8; ++k)
      if (!(ss >> v[k]))
        fail(ErrorCode::IoFailure, path + " line " + std::to_string(line_no) +
                                       ": expected 8 fields");
    TimedPose tp;
    tp.timestamp = v[0];
    tp.world_from_cam =
        SE3(Quat(v[7], v[4], v[5], v[6]), Vec3(v[1], v[2], v[3]));
    traj.push_back(tp);
  }
  return traj;
}

// ---- run configuration ----

namespace {

double parse_double(const std::string& key, const std::string& value) {
  size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &pos);
  } catch (const std::exception&) {
    fail(ErrorCode::BadConfig, "config key " + key + ": bad number " + value);
  }
  if (pos != value.size())
    fail(ErrorCode::BadConfig, "config key " + key + ": bad number " + value);
  return v;
}

int parse_int(const std::string& key, const std::string& value) {
  const double v = parse_double(key, value);
  if (v != std::floor(v))
    fail(ErrorCode::BadConfig, "config key " + key + ": expected integer");
  return static_cast<int>(v);
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  fail(ErrorCode::BadConfig, "config key " + key + ": expected boolean");
}

Mode parse_mode(const std::string& value) {
  if (value == "mono") return Mode::Mono;
  if (value == "stereo") return Mode::Stereo;
  if (value == "rgbd") return Mode::Rgbd;
  fail(ErrorCode::BadConfig, "mode must be mono, stereo, or rgbd");
}

}  // namespace

void set_config_key(RunConfig& cfg, const std::string& key,
                    const std::string& value) {
  TrackerConfig& t = cfg.tracker;
  MappingConfig& m = cfg.mapping;
  FieldConfig& f = cfg.field;

  if (key == "mode") t.mode = parse_mode(value);
  else if (key == "tau_flow") t.tau_flow = parse_double(key, value);
  else if (key == "n_local") t.n_local = parse_int(key, value);
  else if (key == "r_local") t.r_local = parse_int(key, value);
  else if (key == "r_global") t.r_global = parse_int(key, value);
  else if (key == "tau_co") t.tau_co = parse_double(key, value);
  else if (key == "s_edge") t.s_edge = parse_int(key, value);
  else if (key == "frontend_iters") t.frontend_iters = parse_int(key, value);
  else if (key == "backend_iters") t.backend_iters = parse_int(key, value);
  else if (key == "skip_rate") t.skip_rate = parse_int(key, value);
  else if (key == "enable_loop_closure") t.enable_loop_closure = parse_bool(key, value);
  else if (key == "enable_full_ba") t.enable_full_ba = parse_bool(key, value);
  else if (key == "covis_stride") t.covis_stride = parse_int(key, value);
  else if (key == "track_scale") t.track_scale = parse_double(key, value);
  else if (key == "keep_images") t.keep_images = parse_bool(key, value);

  else if (key == "pixels_per_keyframe") m.pixels_per_keyframe = parse_int(key, value);
  else if (key == "n_stratified") m.n_stratified = parse_int(key, value);
  else if (key == "n_importance") m.n_importance = parse_int(key, value);
  else if (key == "n_iter") m.n_iter = parse_int(key, value);
  else if (key == "tau_trunc") m.tau_trunc = parse_double(key, value);
  else if (key == "beta") m.beta = parse_double(key, value);
  else if (key == "lambda_c") m.lambda_c = parse_double(key, value);
  else if (key == "lambda_dep") m.lambda_dep = parse_double(key, value);
  else if (key == "lambda_eik") m.lambda_eik = parse_double(key, value);
  else if (key == "lambda_sdf") m.lambda_sdf = parse_double(key, value);
  else if (key == "lr_tables") m.lr_tables = parse_double(key, value);
  else if (key == "lr_network") m.lr_network = parse_double(key, value);
  else if (key == "top_k") m.top_k = parse_int(key, value);
  else if (key == "stratified_keyframes") m.stratified_keyframes = parse_int(key, value);
  else if (key == "t_near") m.t_near = parse_double(key, value);
  else if (key == "far_fallback") m.far_fallback = parse_double(key, value);
  else if (key == "mesh_resolution") m.mesh_resolution = parse_int(key, value);

  else if (key == "levels") f.levels = parse_int(key, value);
  else if (key == "base_resolution") f.base_resolution = parse_int(key, value);
  else if (key == "growth") f.growth = parse_double(key, value);
  else if (key == "table_size") f.table_size = parse_int(key, value);
  else if (key == "feature_dim") f.feature_dim = parse_int(key, value);
  else if (key == "hidden_width") f.hidden_width = parse_int(key, value);
  else if (key == "geo_dim") f.geo_dim = parse_int(key, value);
  else if (key == "sharpness_init") f.sharpness_init = parse_double(key, value);
  else if (key == "gradient_step_scale") f.gradient_step_scale = parse_double(key, value);

  else if (key == "seed") cfg.seed = static_cast<uint64_t>(parse_double(key, value));
  else if (key == "map_every") cfg.map_every = parse_int(key, value);
  else if (key == "final_rounds") cfg.final_rounds = parse_int(key, value);
  else if (key == "bounds_pad") cfg.bounds_pad = parse_double(key, value);
  else if (key == "n_frames") cfg.n_frames = parse_int(key, value);
  else if (key == "cam_width") cfg.cam_width = parse_int(key, value);
  else if (key == "cam_height") cfg.cam_height = parse_int(key, value);
  else if (key == "orbit_radius") cfg.orbit_radius = parse_double(key, value);
  else if (key == "noise_sigma_px") cfg.noise_sigma_px = parse_double(key, value);
  else if (key == "noise_outlier_frac") cfg.noise_outlier_frac = parse_double(key, value);
  else if (key == "noise_drift_px") cfg.noise_drift_px = parse_double(key, value);

  else fail(ErrorCode::BadConfig, "unknown config key " + key);
}

RunConfig load_config(const std::string& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoFailure, "cannot open config " + path);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto trim = [](std::string s) {
      const size_t a = s.find_first_not_of(" \t\r");
      if (a == std::string::npos) return std::string();
      const size_t b = s.find_last_not_of(" \t\r");
      return s.substr(a, b - a + 1);
    };
    if (trim(line).empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      fail(ErrorCode::BadConfig, path + " line " + std::to_string(line_no) +
                                     ": expected key = value");
    set_config_key(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

}  // namespace dvs
