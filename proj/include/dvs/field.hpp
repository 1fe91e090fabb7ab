#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dvs/geometry.hpp"

namespace dvs {

// ---- implicit scene field ----
//
// The scene is stored implicitly: a multi-resolution feature grid feeds a
// small network predicting signed distance plus a geometry feature, and a
// second network maps position, surface normal, and that feature to color.
// Levels whose corner count exceeds the table size index features through a
// spatial hash, the coarser ones index directly.
//
// All learnable state lives in one flat float32 vector so gradients,
// optimizer moments, and checkpoints share a single layout. Arithmetic runs
// in double so finite-difference checks stay well conditioned.

struct FieldConfig {
  int levels = 8;
  int base_resolution = 16;  // coarsest level, cells per axis
  double growth = 1.382;     // per-level resolution multiplier
  int table_size = 1 << 17;  // feature entries per level, power of two
  int feature_dim = 2;       // floats per entry
  int hidden_width = 64;
  int geo_dim = 15;          // geometry feature vector length
  double sharpness_init = 10.0;       // rendering sigmoid sharpness
  double gradient_step_scale = 1e-3;  // normal probe step, fraction of the
                                      // bounds diagonal

  void validate() const;  // throws BadConfig
};

struct ParamSpan {
  size_t offset = 0;
  size_t size = 0;
};

class Field {
 public:
  // bounds are the axis-aligned box the encoding covers; positions are
  // clamped into it before lookup
  Field(const FieldConfig& cfg, const Vec3& bounds_lo, const Vec3& bounds_hi,
        uint64_t seed);

  const FieldConfig& config() const { return cfg_; }
  const Vec3& bounds_lo() const { return lo_; }
  const Vec3& bounds_hi() const { return hi_; }

  int level_resolution(int level) const { return res_[level]; }
  bool level_hashed(int level) const { return hashed_[level] != 0; }
  size_t level_offset(int level) const { return level_off_[level]; }
  size_t level_entries(int level) const { return entries_[level]; }
  int encoding_dim() const { return cfg_.levels * cfg_.feature_dim; }

  size_t param_count() const { return params_.size(); }
  std::vector<float>& params() { return params_; }
  const std::vector<float>& params() const { return params_; }

  ParamSpan hash_params() const { return {0, sdf_off_}; }
  ParamSpan sdf_params() const { return {sdf_off_, color_off_ - sdf_off_}; }
  ParamSpan color_params() const {
    return {color_off_, params_.size() - 1 - color_off_};
  }
  size_t sharpness_param() const { return params_.size() - 1; }
  double sharpness() const;  // exp of the stored log value

  // metric step used by the spatial-gradient probes
  double gradient_step() const { return eps_n_; }
  void set_gradient_step(double meters);

  // interpolated grid features at x, concatenated coarse to fine
  void hash_encode(const Vec3& x, double* out) const;

  // ---- evaluation caches ----
  //
  // Forward passes fill a cache with everything the matching backward pass
  // needs. Backward calls accumulate into a caller-owned gradient vector of
  // param_count() doubles and never touch the parameters themselves.

  struct SdfEval {
    std::vector<uint32_t> corner;  // levels*8 table entry indices
    std::vector<double> corner_w;  // matching interpolation weights
    std::vector<double> input;     // normalized coords then grid features
    std::vector<double> hidden;    // post-activation
    std::vector<double> slope;     // activation derivative at each unit
    double phi = 0.0;
    std::vector<double> g;
  };

  void sdf_eval(const Vec3& x, SdfEval& e) const;
  double sdf(const Vec3& x, SdfEval& scratch) const {
    sdf_eval(x, scratch);
    return scratch.phi;
  }
  double sdf(const Vec3& x) const;

  // d_g may be null when nothing consumes the geometry feature
  void sdf_backward(const SdfEval& e, double d_phi, const double* d_g,
                    std::vector<double>& grad) const;

  // central differences of the signed distance, step gradient_step()
  Vec3 sdf_spatial_gradient(const Vec3& x) const;

  struct ColorEval {
    std::vector<double> input;  // normalized coords, normal, geometry feature
    std::vector<double> h1, slope1, h2, slope2;
    Vec3 color = Vec3::Zero();
  };

  void color_eval(const Vec3& x, const Vec3& n, const double* g,
                  ColorEval& e) const;
  Vec3 color(const Vec3& x, const Vec3& n, const double* g) const;

  // adds the upstream normal and geometry-feature gradients into d_n / d_g
  void color_backward(const ColorEval& e, const Vec3& d_color, Vec3& d_n,
                      double* d_g, std::vector<double>& grad) const;

  // ---- full point evaluation ----
  //
  // One scene query: signed distance, spatial gradient from six probe
  // evaluations, and optionally color. The backward pass routes gradients
  // through every evaluation, probes included.

  struct PointEval {
    SdfEval center;
    std::array<SdfEval, 6> stencil;  // +x -x +y -y +z -z probes
    Vec3 n = Vec3::Zero();
    ColorEval color;
    bool has_color = false;

    double phi() const { return center.phi; }
  };

  void eval_point(const Vec3& x, bool want_color, PointEval& e) const;
  void point_backward(const PointEval& e, double d_phi, const Vec3& d_n,
                      const Vec3& d_color, std::vector<double>& grad) const;

  // versioned binary checkpoint: self-describing header plus the raw
  // little-endian float32 parameter vector
  void save_checkpoint(const std::string& path) const;
  static Field load_checkpoint(const std::string& path);

 private:
  size_t entry_index(int level, int ix, int iy, int iz) const;
  void init_params(uint64_t seed);

  FieldConfig cfg_;
  Vec3 lo_ = Vec3::Zero(), hi_ = Vec3::Ones();
  Vec3 inv_extent_ = Vec3::Ones();
  double eps_n_ = 1e-3;

  std::vector<int> res_;
  std::vector<uint8_t> hashed_;
  std::vector<size_t> entries_;
  std::vector<size_t> level_off_;  // float offsets into params_
  size_t sdf_off_ = 0;
  size_t color_off_ = 0;

  std::vector<float> params_;
};

// ---- optimizer ----
//
// Adaptive per-parameter first-order steps over the flat parameter vector.
// Learning rates come in per parameter so feature tables and network weights
// can move at different speeds.

class Adam {
 public:
  explicit Adam(size_t n, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);

  void step(std::vector<float>& params, const std::vector<double>& grad,
            const std::vector<float>& lr);

  int64_t steps_taken() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<double> m_, v_;
};

}  // namespace dvs
