#include "dvs/field.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace dvs {

namespace {

// log(1+e^z) with the logistic slope saved for the backward pass
inline double softplus(double z, double& slope) {
  if (z > 0.0) {
    const double e = std::exp(-z);
    slope = 1.0 / (1.0 + e);
    return z + std::log1p(e);
  }
  const double e = std::exp(z);
  slope = e / (1.0 + e);
  return std::log1p(e);
}

inline double logistic(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// y += W x + b, W row-major out x in
inline void affine(const float* w, const float* b, const double* x, int in,
                   int out, double* y) {
  for (int o = 0; o < out; ++o) {
    const float* row = w + static_cast<size_t>(o) * in;
    double acc = b[o];
    for (int i = 0; i < in; ++i) acc += static_cast<double>(row[i]) * x[i];
    y[o] = acc;
  }
}

// gradient of an affine layer: accumulates weight/bias gradients and, when
// d_x is non-null, the input gradient
inline void affine_backward(const float* w, const double* x, const double* d_y,
                            int in, int out, double* g_w, double* g_b,
                            double* d_x) {
  for (int o = 0; o < out; ++o) {
    const double dy = d_y[o];
    g_b[o] += dy;
    double* grow = g_w + static_cast<size_t>(o) * in;
    for (int i = 0; i < in; ++i) grow[i] += dy * x[i];
  }
  if (d_x) {
    std::fill(d_x, d_x + in, 0.0);
    for (int o = 0; o < out; ++o) {
      const double dy = d_y[o];
      const float* row = w + static_cast<size_t>(o) * in;
      for (int i = 0; i < in; ++i) d_x[i] += static_cast<double>(row[i]) * dy;
    }
  }
}

constexpr uint32_t kHashY = 2654435761u;
constexpr uint32_t kHashZ = 805459861u;

}  // namespace

void FieldConfig::validate() const {
  if (levels < 1) fail(ErrorCode::BadConfig, "field: levels must be >= 1");
  if (base_resolution < 2)
    fail(ErrorCode::BadConfig, "field: base resolution must be >= 2");
  if (!(growth > 1.0)) fail(ErrorCode::BadConfig, "field: growth must exceed 1");
  if (table_size < 8 || (table_size & (table_size - 1)) != 0)
    fail(ErrorCode::BadConfig, "field: table size must be a power of two >= 8");
  if (feature_dim < 1) fail(ErrorCode::BadConfig, "field: feature_dim >= 1");
  if (hidden_width < 1) fail(ErrorCode::BadConfig, "field: hidden_width >= 1");
  if (geo_dim < 1) fail(ErrorCode::BadConfig, "field: geo_dim >= 1");
  if (!(sharpness_init > 0.0))
    fail(ErrorCode::BadConfig, "field: sharpness must be positive");
  if (!(gradient_step_scale > 0.0))
    fail(ErrorCode::BadConfig, "field: gradient step must be positive");
}

Field::Field(const FieldConfig& cfg, const Vec3& bounds_lo,
             const Vec3& bounds_hi, uint64_t seed)
    : cfg_(cfg), lo_(bounds_lo), hi_(bounds_hi) {
  cfg_.validate();
  for (int a = 0; a < 3; ++a) {
    if (!(hi_[a] > lo_[a]))
      fail(ErrorCode::BadConfig, "field: degenerate bounds");
    inv_extent_[a] = 1.0 / (hi_[a] - lo_[a]);
  }
  eps_n_ = cfg_.gradient_step_scale * (hi_ - lo_).norm();

  res_.resize(cfg_.levels);
  hashed_.resize(cfg_.levels);
  entries_.resize(cfg_.levels);
  level_off_.resize(cfg_.levels);
  size_t off = 0;
  for (int l = 0; l < cfg_.levels; ++l) {
    res_[l] = static_cast<int>(
        std::floor(cfg_.base_resolution * std::pow(cfg_.growth, l)));
    if (l > 0 && res_[l] <= res_[l - 1])
      fail(ErrorCode::BadConfig, "field: level resolutions must increase");
    const size_t corners = static_cast<size_t>(res_[l] + 1) * (res_[l] + 1) *
                           (res_[l] + 1);
    hashed_[l] = corners > static_cast<size_t>(cfg_.table_size) ? 1 : 0;
    entries_[l] = hashed_[l] ? static_cast<size_t>(cfg_.table_size) : corners;
    level_off_[l] = off;
    off += entries_[l] * cfg_.feature_dim;
  }
  sdf_off_ = off;

  const int enc = encoding_dim();
  const int sdf_in = 3 + enc;
  const int sdf_out = 1 + cfg_.geo_dim;
  const int w = cfg_.hidden_width;
  off += static_cast<size_t>(w) * sdf_in + w;        // first layer
  off += static_cast<size_t>(sdf_out) * w + sdf_out;  // head
  color_off_ = off;

  const int col_in = 6 + cfg_.geo_dim;
  off += static_cast<size_t>(w) * col_in + w;
  off += static_cast<size_t>(w) * w + w;
  off += static_cast<size_t>(3) * w + 3;
  off += 1;  // log sharpness

  params_.assign(off, 0.0f);
  init_params(seed);
}

void Field::init_params(uint64_t seed) {
  Rng rng(seed, 0xF1E1Dull);
  for (size_t i = 0; i < sdf_off_; ++i)
    params_[i] = static_cast<float>(rng.uniform(-1e-4, 1e-4));

  // weight matrices scaled by fan-in and fan-out, biases zero
  size_t off = sdf_off_;
  auto init_layer = [&](int in, int out) {
    const double a = std::sqrt(6.0 / (in + out));
    for (int i = 0; i < in * out; ++i)
      params_[off + i] = static_cast<float>(rng.uniform(-a, a));
    off += static_cast<size_t>(in) * out + out;
  };
  const int enc = encoding_dim();
  const int w = cfg_.hidden_width;
  init_layer(3 + enc, w);
  init_layer(w, 1 + cfg_.geo_dim);
  init_layer(6 + cfg_.geo_dim, w);
  init_layer(w, w);
  init_layer(w, 3);
  params_.back() = static_cast<float>(std::log(cfg_.sharpness_init));
}

double Field::sharpness() const {
  return std::exp(static_cast<double>(params_.back()));
}

void Field::set_gradient_step(double meters) {
  if (!(meters > 0.0))
    fail(ErrorCode::BadConfig, "field: gradient step must be positive");
  eps_n_ = meters;
}

size_t Field::entry_index(int level, int ix, int iy, int iz) const {
  if (!hashed_[level]) {
    const size_t n1 = static_cast<size_t>(res_[level]) + 1;
    return (static_cast<size_t>(iz) * n1 + iy) * n1 + ix;
  }
  const uint32_t h = static_cast<uint32_t>(ix) ^
                     (static_cast<uint32_t>(iy) * kHashY) ^
                     (static_cast<uint32_t>(iz) * kHashZ);
  return h & static_cast<uint32_t>(cfg_.table_size - 1);
}

void Field::hash_encode(const Vec3& x, double* out) const {
  SdfEval scratch;
  sdf_eval(x, scratch);
  const int enc = encoding_dim();
  for (int i = 0; i < enc; ++i) out[i] = scratch.input[3 + i];
}

void Field::sdf_eval(const Vec3& x, SdfEval& e) const {
  const int levels = cfg_.levels;
  const int f_dim = cfg_.feature_dim;
  const int enc = levels * f_dim;
  const int in_dim = 3 + enc;
  const int width = cfg_.hidden_width;
  const int out_dim = 1 + cfg_.geo_dim;

  e.corner.resize(static_cast<size_t>(levels) * 8);
  e.corner_w.resize(static_cast<size_t>(levels) * 8);
  e.input.assign(in_dim, 0.0);
  e.hidden.resize(width);
  e.slope.resize(width);
  e.g.resize(cfg_.geo_dim);

  // box-normalized coordinates drive both the grid and the network input;
  // distances stay metric
  double u[3];
  for (int a = 0; a < 3; ++a) {
    u[a] = (x[a] - lo_[a]) * inv_extent_[a];
    u[a] = std::min(1.0, std::max(0.0, u[a]));
    e.input[a] = u[a];
  }

  for (int l = 0; l < levels; ++l) {
    const int n = res_[l];
    int c[3];
    double frac[3];
    for (int a = 0; a < 3; ++a) {
      const double p = u[a] * n;
      c[a] = std::min(static_cast<int>(p), n - 1);
      frac[a] = p - c[a];
    }
    const float* table = params_.data() + level_off_[l];
    double* feat = e.input.data() + 3 + l * f_dim;
    for (int k = 0; k < 8; ++k) {
      const int dx = k & 1, dy = (k >> 1) & 1, dz = k >> 2;
      const double wgt = (dx ? frac[0] : 1.0 - frac[0]) *
                         (dy ? frac[1] : 1.0 - frac[1]) *
                         (dz ? frac[2] : 1.0 - frac[2]);
      const size_t idx = entry_index(l, c[0] + dx, c[1] + dy, c[2] + dz);
      e.corner[static_cast<size_t>(l) * 8 + k] = static_cast<uint32_t>(idx);
      e.corner_w[static_cast<size_t>(l) * 8 + k] = wgt;
      const float* entry = table + idx * f_dim;
      for (int f = 0; f < f_dim; ++f)
        feat[f] += wgt * static_cast<double>(entry[f]);
    }
  }

  const float* w1 = params_.data() + sdf_off_;
  const float* b1 = w1 + static_cast<size_t>(width) * in_dim;
  const float* w2 = b1 + width;
  const float* b2 = w2 + static_cast<size_t>(out_dim) * width;

  static thread_local std::vector<double> pre, out;
  pre.resize(width);
  out.resize(out_dim);
  affine(w1, b1, e.input.data(), in_dim, width, pre.data());
  for (int h = 0; h < width; ++h) e.hidden[h] = softplus(pre[h], e.slope[h]);
  affine(w2, b2, e.hidden.data(), width, out_dim, out.data());
  e.phi = out[0];
  for (int k = 0; k < cfg_.geo_dim; ++k) e.g[k] = out[1 + k];
}

double Field::sdf(const Vec3& x) const {
  SdfEval scratch;
  return sdf(x, scratch);
}

void Field::sdf_backward(const SdfEval& e, double d_phi, const double* d_g,
                         std::vector<double>& grad) const {
  const int f_dim = cfg_.feature_dim;
  const int enc = cfg_.levels * f_dim;
  const int in_dim = 3 + enc;
  const int width = cfg_.hidden_width;
  const int out_dim = 1 + cfg_.geo_dim;

  const float* w1 = params_.data() + sdf_off_;
  const float* w2 = w1 + static_cast<size_t>(width) * in_dim + width;
  double* g_w1 = grad.data() + sdf_off_;
  double* g_b1 = g_w1 + static_cast<size_t>(width) * in_dim;
  double* g_w2 = g_b1 + width;
  double* g_b2 = g_w2 + static_cast<size_t>(out_dim) * width;

  static thread_local std::vector<double> d_out, d_hid, d_in;
  d_out.resize(out_dim);
  d_hid.resize(width);
  d_in.resize(in_dim);

  d_out[0] = d_phi;
  for (int k = 0; k < cfg_.geo_dim; ++k) d_out[1 + k] = d_g ? d_g[k] : 0.0;

  affine_backward(w2, e.hidden.data(), d_out.data(), width, out_dim, g_w2,
                  g_b2, d_hid.data());
  for (int h = 0; h < width; ++h) d_hid[h] *= e.slope[h];
  affine_backward(w1, e.input.data(), d_hid.data(), in_dim, width, g_w1, g_b1,
                  d_in.data());

  // scatter the feature gradient into the touched table entries; aliased
  // corners accumulate, which is exactly what the shared entry should see
  for (int l = 0; l < cfg_.levels; ++l) {
    double* table_g = grad.data() + level_off_[l];
    const double* d_feat = d_in.data() + 3 + l * f_dim;
    for (int k = 0; k < 8; ++k) {
      const size_t idx = e.corner[static_cast<size_t>(l) * 8 + k];
      const double wgt = e.corner_w[static_cast<size_t>(l) * 8 + k];
      for (int f = 0; f < f_dim; ++f) table_g[idx * f_dim + f] += wgt * d_feat[f];
    }
  }
}

Vec3 Field::sdf_spatial_gradient(const Vec3& x) const {
  SdfEval scratch;
  Vec3 n;
  for (int a = 0; a < 3; ++a) {
    Vec3 d = Vec3::Zero();
    d[a] = eps_n_;
    const double hi = sdf(x + d, scratch);
    const double lo = sdf(x - d, scratch);
    n[a] = (hi - lo) / (2.0 * eps_n_);
  }
  return n;
}

void Field::color_eval(const Vec3& x, const Vec3& n, const double* g,
                       ColorEval& e) const {
  const int in_dim = 6 + cfg_.geo_dim;
  const int width = cfg_.hidden_width;

  e.input.resize(in_dim);
  e.h1.resize(width);
  e.slope1.resize(width);
  e.h2.resize(width);
  e.slope2.resize(width);

  for (int a = 0; a < 3; ++a) {
    double u = (x[a] - lo_[a]) * inv_extent_[a];
    e.input[a] = std::min(1.0, std::max(0.0, u));
    e.input[3 + a] = n[a];
  }
  for (int k = 0; k < cfg_.geo_dim; ++k) e.input[6 + k] = g[k];

  const float* w1 = params_.data() + color_off_;
  const float* b1 = w1 + static_cast<size_t>(width) * in_dim;
  const float* w2 = b1 + width;
  const float* b2 = w2 + static_cast<size_t>(width) * width;
  const float* w3 = b2 + width;
  const float* b3 = w3 + static_cast<size_t>(3) * width;

  static thread_local std::vector<double> pre;
  pre.resize(width);
  affine(w1, b1, e.input.data(), in_dim, width, pre.data());
  for (int h = 0; h < width; ++h) e.h1[h] = softplus(pre[h], e.slope1[h]);
  affine(w2, b2, e.h1.data(), width, width, pre.data());
  for (int h = 0; h < width; ++h) e.h2[h] = softplus(pre[h], e.slope2[h]);
  double head[3];
  affine(w3, b3, e.h2.data(), width, 3, head);
  for (int c = 0; c < 3; ++c) e.color[c] = logistic(head[c]);
}

Vec3 Field::color(const Vec3& x, const Vec3& n, const double* g) const {
  ColorEval e;
  color_eval(x, n, g, e);
  return e.color;
}

void Field::color_backward(const ColorEval& e, const Vec3& d_color, Vec3& d_n,
                           double* d_g, std::vector<double>& grad) const {
  const int in_dim = 6 + cfg_.geo_dim;
  const int width = cfg_.hidden_width;

  const float* w1 = params_.data() + color_off_;
  const float* w2 = w1 + static_cast<size_t>(width) * in_dim + width;
  const float* w3 = w2 + static_cast<size_t>(width) * width + width;
  double* g_w1 = grad.data() + color_off_;
  double* g_b1 = g_w1 + static_cast<size_t>(width) * in_dim;
  double* g_w2 = g_b1 + width;
  double* g_b2 = g_w2 + static_cast<size_t>(width) * width;
  double* g_w3 = g_b2 + width;
  double* g_b3 = g_w3 + static_cast<size_t>(3) * width;

  static thread_local std::vector<double> d1, d2, d_in;
  d1.resize(width);
  d2.resize(width);
  d_in.resize(in_dim);

  double d_head[3];
  for (int c = 0; c < 3; ++c)
    d_head[c] = d_color[c] * e.color[c] * (1.0 - e.color[c]);

  affine_backward(w3, e.h2.data(), d_head, width, 3, g_w3, g_b3, d2.data());
  for (int h = 0; h < width; ++h) d2[h] *= e.slope2[h];
  affine_backward(w2, e.h1.data(), d2.data(), width, width, g_w2, g_b2,
                  d1.data());
  for (int h = 0; h < width; ++h) d1[h] *= e.slope1[h];
  affine_backward(w1, e.input.data(), d1.data(), in_dim, width, g_w1, g_b1,
                  d_in.data());

  for (int a = 0; a < 3; ++a) d_n[a] += d_in[3 + a];
  if (d_g)
    for (int k = 0; k < cfg_.geo_dim; ++k) d_g[k] += d_in[6 + k];
}

void Field::eval_point(const Vec3& x, bool want_color, PointEval& e) const {
  sdf_eval(x, e.center);
  for (int a = 0; a < 3; ++a) {
    Vec3 d = Vec3::Zero();
    d[a] = eps_n_;
    sdf_eval(x + d, e.stencil[static_cast<size_t>(2 * a)]);
    sdf_eval(x - d, e.stencil[static_cast<size_t>(2 * a) + 1]);
    e.n[a] = (e.stencil[static_cast<size_t>(2 * a)].phi -
              e.stencil[static_cast<size_t>(2 * a) + 1].phi) /
             (2.0 * eps_n_);
  }
  e.has_color = want_color;
  if (want_color) color_eval(x, e.n, e.center.g.data(), e.color);
}

void Field::point_backward(const PointEval& e, double d_phi, const Vec3& d_n,
                           const Vec3& d_color,
                           std::vector<double>& grad) const {
  Vec3 dn_total = d_n;
  static thread_local std::vector<double> d_g;
  d_g.assign(cfg_.geo_dim, 0.0);

  // a zero upstream color gradient contributes nothing anywhere, so the
  // color backward pass can be skipped outright
  const bool color_grad = e.has_color && !d_color.isZero(0.0);
  if (color_grad) color_backward(e.color, d_color, dn_total, d_g.data(), grad);

  // the normal is a finite difference, so its gradient splits across the six
  // probe evaluations
  const double scale = 1.0 / (2.0 * eps_n_);
  for (int a = 0; a < 3; ++a) {
    const double d = dn_total[a] * scale;
    if (d != 0.0) {
      sdf_backward(e.stencil[static_cast<size_t>(2 * a)], d, nullptr, grad);
      sdf_backward(e.stencil[static_cast<size_t>(2 * a) + 1], -d, nullptr,
                   grad);
    }
  }
  sdf_backward(e.center, d_phi, color_grad ? d_g.data() : nullptr, grad);
}

// ---- checkpoint ----

namespace {

constexpr char kMagic[4] = {'D', 'V', 'S', 'F'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) fail(ErrorCode::BadCheckpoint, "checkpoint: truncated file");
}

}  // namespace

void Field::save_checkpoint(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoFailure, "checkpoint: cannot open " + path);
  out.write(kMagic, 4);
  write_pod(out, kVersion);
  write_pod(out, static_cast<uint32_t>(cfg_.levels));
  write_pod(out, static_cast<uint32_t>(cfg_.base_resolution));
  write_pod(out, static_cast<uint32_t>(cfg_.table_size));
  write_pod(out, static_cast<uint32_t>(cfg_.feature_dim));
  write_pod(out, static_cast<uint32_t>(cfg_.hidden_width));
  write_pod(out, static_cast<uint32_t>(cfg_.geo_dim));
  write_pod(out, cfg_.growth);
  write_pod(out, cfg_.sharpness_init);
  write_pod(out, cfg_.gradient_step_scale);
  for (int a = 0; a < 3; ++a) write_pod(out, lo_[a]);
  for (int a = 0; a < 3; ++a) write_pod(out, hi_[a]);
  write_pod(out, static_cast<uint64_t>(params_.size()));
  out.write(reinterpret_cast<const char*>(params_.data()),
            static_cast<std::streamsize>(params_.size() * sizeof(float)));
  if (!out) fail(ErrorCode::IoFailure, "checkpoint: write failed " + path);
}

Field Field::load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoFailure, "checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    fail(ErrorCode::BadCheckpoint, "checkpoint: bad magic");
  uint32_t version = 0;
  read_pod(in, version);
  if (version != kVersion)
    fail(ErrorCode::BadCheckpoint, "checkpoint: unsupported version");

  FieldConfig cfg;
  uint32_t v = 0;
  read_pod(in, v);
  cfg.levels = static_cast<int>(v);
  read_pod(in, v);
  cfg.base_resolution = static_cast<int>(v);
  read_pod(in, v);
  cfg.table_size = static_cast<int>(v);
  read_pod(in, v);
  cfg.feature_dim = static_cast<int>(v);
  read_pod(in, v);
  cfg.hidden_width = static_cast<int>(v);
  read_pod(in, v);
  cfg.geo_dim = static_cast<int>(v);
  read_pod(in, cfg.growth);
  read_pod(in, cfg.sharpness_init);
  read_pod(in, cfg.gradient_step_scale);
  Vec3 lo, hi;
  for (int a = 0; a < 3; ++a) read_pod(in, lo[a]);
  for (int a = 0; a < 3; ++a) read_pod(in, hi[a]);

  Field field(cfg, lo, hi, 0);
  uint64_t count = 0;
  read_pod(in, count);
  if (count != field.params_.size())
    fail(ErrorCode::BadCheckpoint, "checkpoint: parameter count mismatch");
  in.read(reinterpret_cast<char*>(field.params_.data()),
          static_cast<std::streamsize>(count * sizeof(float)));
  if (!in) fail(ErrorCode::BadCheckpoint, "checkpoint: truncated parameters");
  return field;
}

// ---- optimizer ----

Adam::Adam(size_t n, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

void Adam::step(std::vector<float>& params, const std::vector<double>& grad,
                const std::vector<float>& lr) {
  if (params.size() != m_.size() || grad.size() != m_.size() ||
      lr.size() != m_.size())
    fail(ErrorCode::BadConfig, "optimizer: size mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < m_.size(); ++i) {
    const double g = grad[i];
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
    const double step = lr[i] * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    params[i] = static_cast<float>(static_cast<double>(params[i]) - step);
  }
}

}  // namespace dvs
