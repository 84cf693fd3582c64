// Copyright 2026 The EEND Lab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Dense 64-bit linear algebra, activations and convolution primitives with
// their reverse-mode counterparts, a SplitMix64 generator and a central
// finite-difference gradient. Everything here is deterministic: loops run in
// a fixed order and no function touches shared state.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "eend/errors.hpp"

namespace eend {

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Row-major dense matrix of doubles. Vectors are stored as 1 x n.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ConfigError("Matrix: data length " + std::to_string(data_.size()) +
                        " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ConfigError("Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  static Matrix row_vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Matrix(1, n, std::move(v));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const double& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Matrix& operator+=(const Matrix& o) {
    check_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Matrix& operator-=(const Matrix& o) {
    check_same(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Matrix& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }
  friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
  friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
  friend Matrix operator*(Matrix a, double s) { return a *= s; }
  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  std::string shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

 private:
  void check_same(const Matrix& o, const char* op) const {
    if (!same_shape(o)) {
      throw ConfigError(std::string("Matrix ") + op + ": shape " + shape_string() + " vs " +
                        o.shape_string());
    }
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// a * b, accumulating each output element left to right over the inner index.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ConfigError("matmul: " + a.shape_string() + " * " + b.shape_string());
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* o = &out(i, 0);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const double* br = &b(k, 0);
      for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aik * br[j];
    }
  }
  return out;
}

/// a^T * b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ConfigError("matmul_tn: " + a.shape_string() + "^T * " + b.shape_string());
  }
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      double* o = &out(i, 0);
      const double* br = &b(k, 0);
      for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aki * br[j];
    }
  }
  return out;
}

/// a * b^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ConfigError("matmul_nt: " + a.shape_string() + " * " + b.shape_string() + "^T");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(j, k);
      out(i, j) = s;
    }
  }
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

/// Adds a 1 x cols bias to every row in place.
inline void add_row_bias(Matrix& x, std::span<const double> bias) {
  if (bias.size() != x.cols()) throw ConfigError("add_row_bias: bias length mismatch");
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias[c];
  }
}

/// Accumulates column sums of x into out.
inline void accumulate_col_sums(const Matrix& x, std::span<double> out) {
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) out[c] += row[c];
  }
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ConfigError("hadamard: shape mismatch");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// Layer normalization
// ---------------------------------------------------------------------------

/// Row statistics kept for the backward pass.
struct LayerNormTape {
  Matrix normalized;             // (x - mean) / sqrt(var + eps)
  std::vector<double> inv_std;   // per row
};

inline Matrix layer_norm(const Matrix& x, std::span<const double> gain,
                         std::span<const double> bias, double eps = 1e-5,
                         LayerNormTape* tape = nullptr) {
  const std::size_t n = x.cols();
  if (n == 0) throw ConfigError("layer_norm: zero-length rows");
  if (gain.size() != n || bias.size() != n) throw ConfigError("layer_norm: gain/bias length mismatch");
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  Matrix out(x.rows(), n);
  if (tape) {
    tape->normalized = Matrix(x.rows(), n);
    tape->inv_std.assign(x.rows(), 0.0);
  }
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      const double xh = (row[c] - mean) * inv;
      out(r, c) = xh * gain[c] + bias[c];
      if (tape) tape->normalized(r, c) = xh;
    }
    if (tape) tape->inv_std[r] = inv;
  }
  return out;
}

/// Returns dL/dx; accumulates dL/dgain and dL/dbias.
inline Matrix layer_norm_backward(const LayerNormTape& tape, std::span<const double> gain,
                                  const Matrix& dy, std::span<double> dgain,
                                  std::span<double> dbias) {
  const Matrix& xh = tape.normalized;
  const std::size_t n = xh.cols();
  Matrix dx(xh.rows(), n);
  std::vector<double> dxh(n);
  for (std::size_t r = 0; r < xh.rows(); ++r) {
    double mean_d = 0.0, mean_dx = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      dgain[c] += dy(r, c) * xh(r, c);
      dbias[c] += dy(r, c);
      dxh[c] = dy(r, c) * gain[c];
      mean_d += dxh[c];
      mean_dx += dxh[c] * xh(r, c);
    }
    mean_d /= static_cast<double>(n);
    mean_dx /= static_cast<double>(n);
    for (std::size_t c = 0; c < n; ++c) {
      dx(r, c) = tape.inv_std[r] * (dxh[c] - mean_d - xh(r, c) * mean_dx);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Activation { sigmoid, swish, relu, glu };

inline double sigmoid(double x) {
  // Branches keep exp() from overflowing for large |x|.
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Matrix activate(const Matrix& x, Activation kind) {
  if (kind == Activation::glu) {
    if (x.cols() % 2 != 0) throw ConfigError("glu: column count must be even, got " + std::to_string(x.cols()));
    const std::size_t h = x.cols() / 2;
    Matrix out(x.rows(), h);
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t c = 0; c < h; ++c) out(r, c) = x(r, c) * sigmoid(x(r, c + h));
    return out;
  }
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    switch (kind) {
      case Activation::sigmoid: out[i] = sigmoid(v); break;
      case Activation::swish: out[i] = v * sigmoid(v); break;
      case Activation::relu: out[i] = v > 0.0 ? v : 0.0; break;
      case Activation::glu: break;
    }
  }
  return out;
}

/// dL/dx given the activation input x and dL/dy.
inline Matrix activate_backward(const Matrix& x, const Matrix& dy, Activation kind) {
  if (kind == Activation::glu) {
    const std::size_t h = x.cols() / 2;
    Matrix dx(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      for (std::size_t c = 0; c < h; ++c) {
        const double a = x(r, c);
        const double s = sigmoid(x(r, c + h));
        dx(r, c) = dy(r, c) * s;
        dx(r, c + h) = dy(r, c) * a * s * (1.0 - s);
      }
    }
    return dx;
  }
  Matrix dx(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    switch (kind) {
      case Activation::sigmoid: {
        const double s = sigmoid(v);
        dx[i] = dy[i] * s * (1.0 - s);
        break;
      }
      case Activation::swish: {
        const double s = sigmoid(v);
        dx[i] = dy[i] * (s + v * s * (1.0 - s));
        break;
      }
      case Activation::relu: dx[i] = v > 0.0 ? dy[i] : 0.0; break;
      case Activation::glu: break;
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

/// Zero padding placed before the first input element for a "same" convolution
/// producing ceil(in / stride) outputs. Odd totals put the extra element on the
/// right, so stride 1 gives (k - 1) / 2 on the left.
inline std::size_t same_pad_left(std::size_t in, std::size_t kernel, std::size_t stride) {
  const std::size_t out = (in + stride - 1) / stride;
  const std::ptrdiff_t total = static_cast<std::ptrdiff_t>((out - 1) * stride + kernel) -
                               static_cast<std::ptrdiff_t>(in);
  return total > 0 ? static_cast<std::size_t>(total) / 2 : 0;
}

/// Per-channel 1-D convolution along time (rows), stride 1, "same" length.
/// kernel is C x K; bias is empty or length C.
inline Matrix conv1d_depthwise(const Matrix& x, const Matrix& kernel,
                               std::span<const double> bias = {}) {
  const std::size_t T = x.rows(), C = x.cols(), K = kernel.cols();
  if (K == 0) throw ConfigError("conv1d_depthwise: kernel size must be >= 1");
  if (kernel.rows() != C) throw ConfigError("conv1d_depthwise: kernel rows != channels");
  if (!bias.empty() && bias.size() != C) throw ConfigError("conv1d_depthwise: bias length mismatch");
  const std::ptrdiff_t left = static_cast<std::ptrdiff_t>((K - 1) / 2);
  Matrix out(T, C);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = bias.empty() ? 0.0 : bias[c];
      for (std::size_t k = 0; k < K; ++k) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - left;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
        s += kernel(c, k) * x(static_cast<std::size_t>(src), c);
      }
      out(t, c) = s;
    }
  }
  return out;
}

/// Returns dL/dx; accumulates kernel and bias gradients.
inline Matrix conv1d_depthwise_backward(const Matrix& x, const Matrix& kernel, const Matrix& dy,
                                        Matrix& dkernel, std::span<double> dbias) {
  const std::size_t T = x.rows(), C = x.cols(), K = kernel.cols();
  const std::ptrdiff_t left = static_cast<std::ptrdiff_t>((K - 1) / 2);
  Matrix dx(T, C);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t c = 0; c < C; ++c) {
      const double g = dy(t, c);
      if (!dbias.empty()) dbias[c] += g;
      for (std::size_t k = 0; k < K; ++k) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - left;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
        dkernel(c, k) += g * x(static_cast<std::size_t>(src), c);
        dx(static_cast<std::size_t>(src), c) += g * kernel(c, k);
      }
    }
  }
  return dx;
}

/// time x freq x channel feature grid, channel fastest.
struct Grid3 {
  std::size_t time = 0, freq = 0, channels = 0;
  std::vector<double> data;

  Grid3() = default;
  Grid3(std::size_t t, std::size_t f, std::size_t c, double fill = 0.0)
      : time(t), freq(f), channels(c), data(t * f * c, fill) {}

  double& at(std::size_t t, std::size_t f, std::size_t c) { return data[(t * freq + f) * channels + c]; }
  double at(std::size_t t, std::size_t f, std::size_t c) const { return data[(t * freq + f) * channels + c]; }

  /// (time*freq) x channels view copy, the layout used by pointwise mixing.
  Matrix as_matrix() const { return Matrix(time * freq, channels, data); }
  static Grid3 from_matrix(const Matrix& m, std::size_t t, std::size_t f) {
    Grid3 g;
    g.time = t;
    g.freq = f;
    g.channels = m.cols();
    g.data = m.storage();
    return g;
  }
};

struct Conv2dShape {
  std::size_t kernel_t = 1, kernel_f = 1;
  std::size_t stride_t = 1, stride_f = 1;

  std::size_t out_time(std::size_t t) const { return (t + stride_t - 1) / stride_t; }
  std::size_t out_freq(std::size_t f) const { return (f + stride_f - 1) / stride_f; }
};

/// Depthwise 2-D convolution with "same" zero padding and strides.
/// kernel is C x (kernel_t * kernel_f), bias is empty or length C.
inline Grid3 conv2d_depthwise(const Grid3& x, const Matrix& kernel, std::span<const double> bias,
                              const Conv2dShape& s) {
  if (s.stride_t == 0 || s.stride_f == 0 || s.kernel_t == 0 || s.kernel_f == 0) {
    throw ConfigError("conv2d_depthwise: kernel sizes and strides must be >= 1");
  }
  if (kernel.rows() != x.channels || kernel.cols() != s.kernel_t * s.kernel_f) {
    throw ConfigError("conv2d_depthwise: kernel shape " + kernel.shape_string() + " does not match " +
                      std::to_string(x.channels) + " channels of " + std::to_string(s.kernel_t) + "x" +
                      std::to_string(s.kernel_f));
  }
  if (!bias.empty() && bias.size() != x.channels) throw ConfigError("conv2d_depthwise: bias length mismatch");
  const std::size_t To = s.out_time(x.time), Fo = s.out_freq(x.freq), C = x.channels;
  const auto pt = static_cast<std::ptrdiff_t>(same_pad_left(x.time, s.kernel_t, s.stride_t));
  const auto pf = static_cast<std::ptrdiff_t>(same_pad_left(x.freq, s.kernel_f, s.stride_f));
  Grid3 out(To, Fo, C);
  for (std::size_t t = 0; t < To; ++t) {
    for (std::size_t f = 0; f < Fo; ++f) {
      for (std::size_t c = 0; c < C; ++c) {
        double acc = bias.empty() ? 0.0 : bias[c];
        for (std::size_t i = 0; i < s.kernel_t; ++i) {
          const std::ptrdiff_t st = static_cast<std::ptrdiff_t>(t * s.stride_t + i) - pt;
          if (st < 0 || st >= static_cast<std::ptrdiff_t>(x.time)) continue;
          for (std::size_t j = 0; j < s.kernel_f; ++j) {
            const std::ptrdiff_t sf = static_cast<std::ptrdiff_t>(f * s.stride_f + j) - pf;
            if (sf < 0 || sf >= static_cast<std::ptrdiff_t>(x.freq)) continue;
            acc += kernel(c, i * s.kernel_f + j) *
                   x.at(static_cast<std::size_t>(st), static_cast<std::size_t>(sf), c);
          }
        }
        out.at(t, f, c) = acc;
      }
    }
  }
  return out;
}

/// Returns dL/dx; accumulates kernel and bias gradients.
inline Grid3 conv2d_depthwise_backward(const Grid3& x, const Matrix& kernel, const Grid3& dy,
                                       const Conv2dShape& s, Matrix& dkernel,
                                       std::span<double> dbias) {
  const std::size_t C = x.channels;
  const auto pt = static_cast<std::ptrdiff_t>(same_pad_left(x.time, s.kernel_t, s.stride_t));
  const auto pf = static_cast<std::ptrdiff_t>(same_pad_left(x.freq, s.kernel_f, s.stride_f));
  Grid3 dx(x.time, x.freq, C);
  for (std::size_t t = 0; t < dy.time; ++t) {
    for (std::size_t f = 0; f < dy.freq; ++f) {
      for (std::size_t c = 0; c < C; ++c) {
        const double g = dy.at(t, f, c);
        if (!dbias.empty()) dbias[c] += g;
        for (std::size_t i = 0; i < s.kernel_t; ++i) {
          const std::ptrdiff_t st = static_cast<std::ptrdiff_t>(t * s.stride_t + i) - pt;
          if (st < 0 || st >= static_cast<std::ptrdiff_t>(x.time)) continue;
          for (std::size_t j = 0; j < s.kernel_f; ++j) {
            const std::ptrdiff_t sf = static_cast<std::ptrdiff_t>(f * s.stride_f + j) - pf;
            if (sf < 0 || sf >= static_cast<std::ptrdiff_t>(x.freq)) continue;
            const auto ust = static_cast<std::size_t>(st);
            const auto usf = static_cast<std::size_t>(sf);
            dkernel(c, i * s.kernel_f + j) += g * x.at(ust, usf, c);
            dx.at(ust, usf, c) += g * kernel(c, i * s.kernel_f + j);
          }
        }
      }
    }
  }
  return dx;
}

/// 1x1 channel mixing: pointwise is C_in x C_out, bias empty or length C_out.
inline Grid3 conv2d_pointwise(const Grid3& x, const Matrix& pointwise, std::span<const double> bias) {
  if (pointwise.rows() != x.channels) throw ConfigError("conv2d_pointwise: weight rows != input channels");
  Matrix y = matmul(x.as_matrix(), pointwise);
  if (!bias.empty()) add_row_bias(y, bias);
  return Grid3::from_matrix(y, x.time, x.freq);
}

/// Depthwise spatial convolution followed by pointwise channel mixing.
inline Grid3 conv2d_depthwise_separable(const Grid3& x, const Matrix& depthwise,
                                        std::span<const double> depthwise_bias,
                                        const Matrix& pointwise,
                                        std::span<const double> pointwise_bias,
                                        const Conv2dShape& s) {
  return conv2d_pointwise(conv2d_depthwise(x, depthwise, depthwise_bias, s), pointwise, pointwise_bias);
}

// ---------------------------------------------------------------------------
// SplitMix64
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] (inclusive), unbiased by rejection.
  std::uint64_t uniform_int(std::uint64_t lo, std::uint64_t hi) {
    if (hi < lo) throw ConfigError("Rng::uniform_int: empty range");
    const std::uint64_t span = hi - lo;
    if (span == std::numeric_limits<std::uint64_t>::max()) return next_u64();
    const std::uint64_t n = span + 1;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return lo + v % n;
  }

  /// Exponential with the given mean; mean 0 returns 0 without consuming a draw.
  double exponential(double mean) {
    if (mean == 0.0) return 0.0;
    return -mean * std::log1p(-uniform());
  }

  /// Standard normal by Box-Muller (two draws per call, no caching).
  double normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  std::uint64_t state() const noexcept { return state_; }

 private:
  std::uint64_t state_;
};

/// Child seed for stream `index` of a parent seed; independent of call order.
inline std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t index) {
  Rng r(parent ^ (0xd1b54a32d192ed03ULL * (index + 1)));
  return r.next_u64();
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central-difference gradient of f at theta.
inline std::vector<double> finite_difference_gradient(
    const std::function<double(std::span<const double>)>& f, std::vector<double> theta,
    double h = 1e-5) {
  if (!(h > 0.0)) throw ConfigError("finite_difference_gradient: h must be positive");
  std::vector<double> g(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double saved = theta[i];
    theta[i] = saved + h;
    const double fp = f(theta);
    theta[i] = saved - h;
    const double fm = f(theta);
    theta[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw EvaluationError("finite_difference_gradient: non-finite value at coordinate " +
                            std::to_string(i));
    }
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// |a - b| / max(|a|, |b|, floor). The floor keeps coordinates whose true
/// derivative is ~0 from dominating with pure round-off.
inline double relative_error(double a, double b, double floor = 1e-8) {
  const double denom = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / denom;
}

}  // namespace eend
