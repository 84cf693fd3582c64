// Copyright 2026 The EEND Lab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// EEND network: front end (stacked frames + linear, or two depthwise-separable
// 2-D conv layers), a stack of pre-norm Transformer or Conformer blocks, a
// final LayerNorm and a per-speaker sigmoid head. Every layer has a
// hand-written reverse pass; forward() records what backward() needs in an
// EncoderTape.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "eend/annotation.hpp"
#include "eend/audio_features.hpp"
#include "eend/errors.hpp"
#include "eend/numerics.hpp"
#include "json.hpp"

namespace eend {

enum class Arch { transformer, conformer };
enum class FrontendKind { stacked, conv_subsample };

inline std::string to_string(Arch a) { return a == Arch::transformer ? "transformer" : "conformer"; }
inline std::string to_string(FrontendKind f) { return f == FrontendKind::stacked ? "stacked" : "conv_subsample"; }

inline Arch parse_arch(const std::string& s) {
  if (s == "transformer") return Arch::transformer;
  if (s == "conformer") return Arch::conformer;
  throw ConfigError("unknown encoder arch '" + s + "' (expected transformer|conformer)");
}
inline FrontendKind parse_frontend(const std::string& s) {
  if (s == "stacked") return FrontendKind::stacked;
  if (s == "conv_subsample") return FrontendKind::conv_subsample;
  throw ConfigError("unknown frontend '" + s + "' (expected stacked|conv_subsample)");
}

struct EncoderConfig {
  Arch arch = Arch::conformer;
  std::size_t n_blocks = 4;
  std::size_t d_model = 256;
  std::size_t n_heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t conv_kernel = 32;
  std::size_t n_speakers = 2;
  FrontendKind frontend = FrontendKind::conv_subsample;
  std::size_t input_dims = 23;
  std::size_t frontend_channels = 256;
  double dropout = 0.0;
  double ln_eps = 1e-5;

  static EncoderConfig transformer_default() {
    EncoderConfig c;
    c.arch = Arch::transformer;
    c.ffn_dim = 1024;
    return c;
  }
  static EncoderConfig conformer_default() { return EncoderConfig{}; }

  void validate() const {
    if (n_heads == 0 || d_model == 0 || d_model % n_heads != 0) {
      throw ConfigError("encoder: d_model (" + std::to_string(d_model) + ") must be a positive multiple of n_heads (" +
                        std::to_string(n_heads) + ")");
    }
    if (conv_kernel == 0) throw ConfigError("encoder: conv_kernel must be >= 1");
    if (n_speakers == 0) throw ConfigError("encoder: n_speakers must be >= 1");
    if (ffn_dim == 0) throw ConfigError("encoder: ffn_dim must be >= 1");
    if (frontend_channels == 0) throw ConfigError("encoder: frontend_channels must be >= 1");
    if (frontend == FrontendKind::conv_subsample && input_dims != 23 && input_dims != 80) {
      throw ConfigError("encoder: conv_subsample front end needs input_dims 23 or 80, got " +
                        std::to_string(input_dims));
    }
    if (input_dims == 0) throw ConfigError("encoder: input_dims must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("encoder: dropout must be in [0, 1)");
  }

  /// Kernel/stride of the two subsampling layers, bound to (time, freq).
  Conv2dShape subsample_layer(int which) const {
    const std::size_t fs = input_dims == 80 ? 2 : 1;
    if (which == 0) return Conv2dShape{3, 3, 2, fs};
    return Conv2dShape{7, 7, 5, fs};
  }
  std::size_t subsampled_freq() const {
    return subsample_layer(1).out_freq(subsample_layer(0).out_freq(input_dims));
  }
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"arch", to_string(c.arch)},
                     {"n_blocks", c.n_blocks},
                     {"d_model", c.d_model},
                     {"n_heads", c.n_heads},
                     {"ffn_dim", c.ffn_dim},
                     {"conv_kernel", c.conv_kernel},
                     {"n_speakers", c.n_speakers},
                     {"frontend", to_string(c.frontend)},
                     {"input_dims", c.input_dims},
                     {"frontend_channels", c.frontend_channels},
                     {"dropout", c.dropout},
                     {"ln_eps", c.ln_eps}};
}

/// Reads the keys present in `j` over `c`; unknown keys are rejected.
inline void update_from_json(EncoderConfig& c, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("encoder config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "arch") c.arch = parse_arch(v.get<std::string>());
      else if (key == "n_blocks") c.n_blocks = v.get<std::size_t>();
      else if (key == "d_model") c.d_model = v.get<std::size_t>();
      else if (key == "n_heads") c.n_heads = v.get<std::size_t>();
      else if (key == "ffn_dim") c.ffn_dim = v.get<std::size_t>();
      else if (key == "conv_kernel") c.conv_kernel = v.get<std::size_t>();
      else if (key == "n_speakers") c.n_speakers = v.get<std::size_t>();
      else if (key == "frontend") c.frontend = parse_frontend(v.get<std::string>());
      else if (key == "input_dims") c.input_dims = v.get<std::size_t>();
      else if (key == "frontend_channels") c.frontend_channels = v.get<std::size_t>();
      else if (key == "dropout") c.dropout = v.get<double>();
      else if (key == "ln_eps") c.ln_eps = v.get<double>();
      else throw ConfigError("encoder config: unknown key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("encoder config: bad value for '" + key + "': " + e.what());
    }
  }
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c = EncoderConfig{};
  update_from_json(c, j);
}

inline bool operator==(const EncoderConfig& a, const EncoderConfig& b) {
  return nlohmann::json(a) == nlohmann::json(b);
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Ordered collection of named tensors. Order is the layout order and is
/// what checkpoints and flat views follow.
class ParamSet {
 public:
  void add(std::string name, Matrix m) {
    if (index_.count(name)) throw InternalError("duplicate parameter " + name);
    index_.emplace(name, tensors_.size());
    names_.push_back(std::move(name));
    tensors_.push_back(std::move(m));
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  Matrix& operator[](const std::string& name) { return tensors_[lookup(name)]; }
  const Matrix& operator[](const std::string& name) const { return tensors_[lookup(name)]; }

  std::size_t size() const { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Matrix& tensor(std::size_t i) { return tensors_[i]; }
  const Matrix& tensor(std::size_t i) const { return tensors_[i]; }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  ParamSet zeros_like() const {
    ParamSet z;
    for (std::size_t i = 0; i < size(); ++i) z.add(names_[i], Matrix(tensors_[i].rows(), tensors_[i].cols()));
    return z;
  }

  bool same_layout(const ParamSet& o) const {
    if (o.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      if (o.names_[i] != names_[i] || !o.tensors_[i].same_shape(tensors_[i])) return false;
    }
    return true;
  }

  std::vector<double> flatten() const {
    std::vector<double> v;
    v.reserve(element_count());
    for (const auto& t : tensors_) v.insert(v.end(), t.storage().begin(), t.storage().end());
    return v;
  }

  void assign_flat(std::span<const double> v) {
    if (v.size() != element_count()) throw InternalError("assign_flat: size mismatch");
    std::size_t k = 0;
    for (auto& t : tensors_)
      for (double& x : t.storage()) x = v[k++];
  }

  ParamSet& operator+=(const ParamSet& o) {
    if (!same_layout(o)) throw InternalError("ParamSet +=: layout mismatch");
    for (std::size_t i = 0; i < size(); ++i) tensors_[i] += o.tensors_[i];
    return *this;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    return a.names_ == b.names_ && a.tensors_ == b.tensors_;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InternalError("unknown parameter " + name);
    return it->second;
  }

  std::vector<std::string> names_;
  std::vector<Matrix> tensors_;
  std::map<std::string, std::size_t> index_;
};

struct EncoderParams {
  EncoderConfig config;
  ParamSet tensors;
};

enum class Init { glorot, zeros, ones };

struct TensorSpec {
  std::string name;
  std::size_t rows = 0, cols = 0;
  Init init = Init::zeros;
  // Fan sizes used for Glorot initialization.
  std::size_t fan_in = 0, fan_out = 0;

  std::size_t count() const { return rows * cols; }
};

namespace detail {

inline void add_linear(std::vector<TensorSpec>& v, const std::string& p, std::size_t in, std::size_t out) {
  v.push_back({p + ".weight", in, out, Init::glorot, in, out});
  v.push_back({p + ".bias", 1, out, Init::zeros, 0, 0});
}
inline void add_norm(std::vector<TensorSpec>& v, const std::string& p, std::size_t d) {
  v.push_back({p + ".gain", 1, d, Init::ones, 0, 0});
  v.push_back({p + ".bias", 1, d, Init::zeros, 0, 0});
}
inline void add_attention(std::vector<TensorSpec>& v, const std::string& p, std::size_t d) {
  for (const char* m : {".query", ".key", ".value", ".output"}) add_linear(v, p + m, d, d);
}
inline void add_ffn(std::vector<TensorSpec>& v, const std::string& p, std::size_t d, std::size_t hidden) {
  add_linear(v, p + ".linear1", d, hidden);
  add_linear(v, p + ".linear2", hidden, d);
}

}  // namespace detail

/// Every learnable tensor in layout order. This is the parameter ledger:
/// count_parameters() and init_params() both derive from it.
inline std::vector<TensorSpec> parameter_layout(const EncoderConfig& cfg) {
  cfg.validate();
  using namespace detail;
  std::vector<TensorSpec> v;
  const std::size_t D = cfg.d_model;
  if (cfg.frontend == FrontendKind::stacked) {
    add_linear(v, "frontend.linear", (2 * kContext + 1) * cfg.input_dims, D);
  } else {
    const std::size_t C = cfg.frontend_channels;
    const Conv2dShape s0 = cfg.subsample_layer(0), s1 = cfg.subsample_layer(1);
    const std::size_t k0 = s0.kernel_t * s0.kernel_f, k1 = s1.kernel_t * s1.kernel_f;
    v.push_back({"frontend.conv1.depthwise.kernel", 1, k0, Init::glorot, k0, k0});
    v.push_back({"frontend.conv1.depthwise.bias", 1, 1, Init::zeros, 0, 0});
    v.push_back({"frontend.conv1.pointwise.weight", 1, C, Init::glorot, 1, C});
    v.push_back({"frontend.conv1.pointwise.bias", 1, C, Init::zeros, 0, 0});
    v.push_back({"frontend.conv2.depthwise.kernel", C, k1, Init::glorot, k1, k1});
    v.push_back({"frontend.conv2.depthwise.bias", 1, C, Init::zeros, 0, 0});
    v.push_back({"frontend.conv2.pointwise.weight", C, C, Init::glorot, C, C});
    v.push_back({"frontend.conv2.pointwise.bias", 1, C, Init::zeros, 0, 0});
    add_linear(v, "frontend.linear", cfg.subsampled_freq() * C, D);
  }
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    const std::string p = "block" + std::to_string(b);
    if (cfg.arch == Arch::transformer) {
      add_norm(v, p + ".attn_norm", D);
      add_attention(v, p + ".attn", D);
      add_norm(v, p + ".ffn_norm", D);
      add_ffn(v, p + ".ffn", D, cfg.ffn_dim);
    } else {
      add_norm(v, p + ".ffn1_norm", D);
      add_ffn(v, p + ".ffn1", D, cfg.ffn_dim);
      add_norm(v, p + ".attn_norm", D);
      add_attention(v, p + ".attn", D);
      add_norm(v, p + ".conv_norm", D);
      add_linear(v, p + ".conv.pointwise1", D, 2 * D);
      v.push_back({p + ".conv.depthwise.kernel", D, cfg.conv_kernel, Init::glorot, cfg.conv_kernel, cfg.conv_kernel});
      v.push_back({p + ".conv.depthwise.bias", 1, D, Init::zeros, 0, 0});
      add_norm(v, p + ".conv.channel_norm", D);
      add_linear(v, p + ".conv.pointwise2", D, D);
      add_norm(v, p + ".ffn2_norm", D);
      add_ffn(v, p + ".ffn2", D, cfg.ffn_dim);
      add_norm(v, p + ".out_norm", D);
    }
  }
  add_norm(v, "final_norm", D);
  add_linear(v, "head", D, cfg.n_speakers);
  return v;
}

inline std::size_t count_parameters(const EncoderConfig& cfg) {
  std::size_t n = 0;
  for (const auto& s : parameter_layout(cfg)) n += s.count();
  return n;
}

/// Glorot-uniform weights, zero biases, unit gains.
inline EncoderParams init_params(const EncoderConfig& cfg, Rng& rng) {
  EncoderParams p{cfg, {}};
  for (const auto& s : parameter_layout(cfg)) {
    Matrix m(s.rows, s.cols);
    if (s.init == Init::ones) {
      m.fill(1.0);
    } else if (s.init == Init::glorot) {
      const double limit = std::sqrt(6.0 / static_cast<double>(s.fan_in + s.fan_out));
      for (double& x : m.storage()) x = rng.uniform(-limit, limit);
    }
    p.tensors.add(s.name, std::move(m));
  }
  return p;
}

inline EncoderParams zero_params(const EncoderConfig& cfg) {
  EncoderParams p{cfg, {}};
  for (const auto& s : parameter_layout(cfg)) p.tensors.add(s.name, Matrix(s.rows, s.cols));
  return p;
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

struct PosteriorMatrix {
  Matrix values;  // frames x speakers, in [0, 1]
  double frame_shift = kSubsampledFrameShift;

  std::size_t frames() const { return values.rows(); }
  std::size_t speakers() const { return values.cols(); }
};

namespace layers {

struct LinearTape {
  Matrix input;
};

inline Matrix linear(const Matrix& x, const ParamSet& p, const std::string& prefix, LinearTape* tape) {
  Matrix y = matmul(x, p[prefix + ".weight"]);
  add_row_bias(y, p[prefix + ".bias"].values());
  if (tape) tape->input = x;
  return y;
}

inline Matrix linear_backward(const LinearTape& tape, const ParamSet& p, ParamSet& g,
                              const std::string& prefix, const Matrix& dy) {
  g[prefix + ".weight"] += matmul_tn(tape.input, dy);
  accumulate_col_sums(dy, g[prefix + ".bias"].values());
  return matmul_nt(dy, p[prefix + ".weight"]);
}

inline Matrix norm(const Matrix& x, const ParamSet& p, const std::string& prefix, double eps,
                   LayerNormTape* tape) {
  return layer_norm(x, p[prefix + ".gain"].values(), p[prefix + ".bias"].values(), eps, tape);
}

inline Matrix norm_backward(const LayerNormTape& tape, const ParamSet& p, ParamSet& g,
                            const std::string& prefix, const Matrix& dy) {
  return layer_norm_backward(tape, p[prefix + ".gain"].values(), dy, g[prefix + ".gain"].values(),
                             g[prefix + ".bias"].values());
}

/// Inverted dropout mask; empty when disabled.
struct DropoutTape {
  Matrix mask;
};

inline Matrix dropout(Matrix x, double rate, Rng* rng, DropoutTape* tape) {
  if (rate <= 0.0 || rng == nullptr) return x;
  Matrix mask(x.rows(), x.cols());
  const double keep = 1.0 - rate;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = rng->uniform() < keep ? 1.0 / keep : 0.0;
    x[i] *= mask[i];
  }
  if (tape) tape->mask = std::move(mask);
  return x;
}

inline Matrix dropout_backward(const DropoutTape& tape, const Matrix& dy) {
  return tape.mask.empty() ? dy : hadamard(dy, tape.mask);
}

struct AttentionTape {
  LinearTape query, key, value, output;
  Matrix q, k, v;
  std::vector<Matrix> probs;  // one T x T matrix per head
};

/// Multi-head scaled dot-product self-attention without positional encoding
/// or masking.
inline Matrix self_attention(const Matrix& x, const ParamSet& p, const std::string& prefix,
                             std::size_t heads, AttentionTape* tape) {
  const std::size_t T = x.rows(), D = x.cols(), dh = D / heads;
  AttentionTape local;
  AttentionTape& t = tape ? *tape : local;
  t.q = linear(x, p, prefix + ".query", &t.query);
  t.k = linear(x, p, prefix + ".key", &t.key);
  t.v = linear(x, p, prefix + ".value", &t.value);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix context(T, D);
  t.probs.assign(heads, Matrix());
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    Matrix a(T, T);
    for (std::size_t i = 0; i < T; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < T; ++j) {
        double s = 0.0;
        for (std::size_t d = 0; d < dh; ++d) s += t.q(i, off + d) * t.k(j, off + d);
        a(i, j) = s * scale;
        mx = std::max(mx, a(i, j));
      }
      double z = 0.0;
      for (std::size_t j = 0; j < T; ++j) {
        a(i, j) = std::exp(a(i, j) - mx);
        z += a(i, j);
      }
      for (std::size_t j = 0; j < T; ++j) a(i, j) /= z;
    }
    for (std::size_t i = 0; i < T; ++i) {
      for (std::size_t j = 0; j < T; ++j) {
        const double w = a(i, j);
        for (std::size_t d = 0; d < dh; ++d) context(i, off + d) += w * t.v(j, off + d);
      }
    }
    t.probs[h] = std::move(a);
  }
  return linear(context, p, prefix + ".output", &t.output);
}

inline Matrix self_attention_backward(const AttentionTape& t, const ParamSet& p, ParamSet& g,
                                      const std::string& prefix, std::size_t heads, const Matrix& dy) {
  const Matrix dcontext = linear_backward(t.output, p, g, prefix + ".output", dy);
  const std::size_t T = t.q.rows(), D = t.q.cols(), dh = D / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix dq(T, D), dk(T, D), dv(T, D);
  Matrix da(T, T);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    const Matrix& a = t.probs[h];
    for (std::size_t i = 0; i < T; ++i) {
      for (std::size_t j = 0; j < T; ++j) {
        double s = 0.0;
        for (std::size_t d = 0; d < dh; ++d) {
          s += dcontext(i, off + d) * t.v(j, off + d);
          dv(j, off + d) += a(i, j) * dcontext(i, off + d);
        }
        da(i, j) = s;
      }
    }
    // Softmax Jacobian, then the 1/sqrt(dh) score scale.
    for (std::size_t i = 0; i < T; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < T; ++j) dot += a(i, j) * da(i, j);
      for (std::size_t j = 0; j < T; ++j) da(i, j) = a(i, j) * (da(i, j) - dot) * scale;
    }
    for (std::size_t i = 0; i < T; ++i) {
      for (std::size_t j = 0; j < T; ++j) {
        const double ds = da(i, j);
        for (std::size_t d = 0; d < dh; ++d) {
          dq(i, off + d) += ds * t.k(j, off + d);
          dk(j, off + d) += ds * t.q(i, off + d);
        }
      }
    }
  }
  Matrix dx = linear_backward(t.query, p, g, prefix + ".query", dq);
  dx += linear_backward(t.key, p, g, prefix + ".key", dk);
  dx += linear_backward(t.value, p, g, prefix + ".value", dv);
  return dx;
}

struct FeedForwardTape {
  LinearTape linear1, linear2;
  Matrix hidden;  // pre-activation
};

inline Matrix feed_forward(const Matrix& x, const ParamSet& p, const std::string& prefix, Activation act,
                           FeedForwardTape* tape) {
  FeedForwardTape local;
  FeedForwardTape& t = tape ? *tape : local;
  t.hidden = linear(x, p, prefix + ".linear1", &t.linear1);
  return linear(activate(t.hidden, act), p, prefix + ".linear2", &t.linear2);
}

inline Matrix feed_forward_backward(const FeedForwardTape& t, const ParamSet& p, ParamSet& g,
                                    const std::string& prefix, Activation act, const Matrix& dy) {
  const Matrix dact = linear_backward(t.linear2, p, g, prefix + ".linear2", dy);
  return linear_backward(t.linear1, p, g, prefix + ".linear1", activate_backward(t.hidden, dact, act));
}

/// Per-channel normalization over the time axis of one sequence followed by
/// a per-channel scale and shift.
struct ChannelNormTape {
  LayerNormTape rows;  // statistics of the transposed (channel x time) input
};

inline Matrix channel_norm(const Matrix& x, const ParamSet& p, const std::string& prefix, double eps,
                           ChannelNormTape* tape) {
  const std::vector<double> ones(x.rows(), 1.0), zeros(x.rows(), 0.0);
  LayerNormTape local;
  const Matrix n = layer_norm(transpose(x), ones, zeros, eps, tape ? &tape->rows : &local);
  const auto gain = p[prefix + ".gain"].values();
  const auto bias = p[prefix + ".bias"].values();
  Matrix out(x.rows(), x.cols());
  for (std::size_t t = 0; t < x.rows(); ++t)
    for (std::size_t c = 0; c < x.cols(); ++c) out(t, c) = n(c, t) * gain[c] + bias[c];
  return out;
}

inline Matrix channel_norm_backward(const ChannelNormTape& tape, const ParamSet& p, ParamSet& g,
                                    const std::string& prefix, const Matrix& dy) {
  const Matrix& n = tape.rows.normalized;  // C x T
  const auto gain = p[prefix + ".gain"].values();
  auto dgain = g[prefix + ".gain"].values();
  auto dbias = g[prefix + ".bias"].values();
  Matrix dn(n.rows(), n.cols());
  for (std::size_t t = 0; t < dy.rows(); ++t) {
    for (std::size_t c = 0; c < dy.cols(); ++c) {
      dgain[c] += dy(t, c) * n(c, t);
      dbias[c] += dy(t, c);
      dn(c, t) = dy(t, c) * gain[c];
    }
  }
  const std::vector<double> ones(n.cols(), 1.0);
  std::vector<double> sink_g(n.cols()), sink_b(n.cols());
  return transpose(layer_norm_backward(tape.rows, ones, dn, sink_g, sink_b));
}

/// Conformer convolution module: pointwise (D -> 2D), GLU, depthwise 1-D
/// conv along time, channel norm, swish, pointwise (D -> D).
struct ConvModuleTape {
  LinearTape pointwise1, pointwise2;
  Matrix glu_in, depthwise_in, norm_out;
  ChannelNormTape norm;
};

inline Matrix conv_module(const Matrix& x, const ParamSet& p, const std::string& prefix, double eps,
                          ConvModuleTape* tape) {
  ConvModuleTape local;
  ConvModuleTape& t = tape ? *tape : local;
  t.glu_in = linear(x, p, prefix + ".pointwise1", &t.pointwise1);
  t.depthwise_in = activate(t.glu_in, Activation::glu);
  const Matrix conv = conv1d_depthwise(t.depthwise_in, p[prefix + ".depthwise.kernel"],
                                       p[prefix + ".depthwise.bias"].values());
  t.norm_out = channel_norm(conv, p, prefix + ".channel_norm", eps, &t.norm);
  return linear(activate(t.norm_out, Activation::swish), p, prefix + ".pointwise2", &t.pointwise2);
}

inline Matrix conv_module_backward(const ConvModuleTape& t, const ParamSet& p, ParamSet& g,
                                   const std::string& prefix, const Matrix& dy) {
  Matrix d = linear_backward(t.pointwise2, p, g, prefix + ".pointwise2", dy);
  d = activate_backward(t.norm_out, d, Activation::swish);
  d = channel_norm_backward(t.norm, p, g, prefix + ".channel_norm", d);
  d = conv1d_depthwise_backward(t.depthwise_in, p[prefix + ".depthwise.kernel"], d,
                                g[prefix + ".depthwise.kernel"], g[prefix + ".depthwise.bias"].values());
  d = activate_backward(t.glu_in, d, Activation::glu);
  return linear_backward(t.pointwise1, p, g, prefix + ".pointwise1", d);
}

}  // namespace layers

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

struct TransformerBlockTape {
  LayerNormTape attn_norm, ffn_norm;
  layers::AttentionTape attn;
  layers::FeedForwardTape ffn;
  layers::DropoutTape attn_drop, ffn_drop;
};

/// Pre-norm: e' = e + MHSA(LN(e)); out = e' + FFN(LN(e')), ReLU FFN.
inline Matrix transformer_block(const Matrix& e, const EncoderParams& params, std::size_t index,
                                TransformerBlockTape* tape = nullptr, Rng* dropout_rng = nullptr) {
  using namespace layers;
  const EncoderConfig& cfg = params.config;
  const ParamSet& p = params.tensors;
  const std::string pre = "block" + std::to_string(index);
  TransformerBlockTape local;
  TransformerBlockTape& t = tape ? *tape : local;
  Matrix x = e;
  x += dropout(self_attention(norm(x, p, pre + ".attn_norm", cfg.ln_eps, &t.attn_norm), p, pre + ".attn",
                              cfg.n_heads, &t.attn),
               cfg.dropout, dropout_rng, &t.attn_drop);
  x += dropout(feed_forward(norm(x, p, pre + ".ffn_norm", cfg.ln_eps, &t.ffn_norm), p, pre + ".ffn",
                            Activation::relu, &t.ffn),
               cfg.dropout, dropout_rng, &t.ffn_drop);
  return x;
}

inline Matrix transformer_block_backward(const TransformerBlockTape& t, const EncoderParams& params,
                                         std::size_t index, ParamSet& g, const Matrix& dy) {
  using namespace layers;
  const ParamSet& p = params.tensors;
  const std::string pre = "block" + std::to_string(index);
  Matrix d = dy;
  d += norm_backward(t.ffn_norm, p, g, pre + ".ffn_norm",
                     feed_forward_backward(t.ffn, p, g, pre + ".ffn", Activation::relu,
                                           dropout_backward(t.ffn_drop, dy)));
  const Matrix d_mid = d;
  d += norm_backward(t.attn_norm, p, g, pre + ".attn_norm",
                     self_attention_backward(t.attn, p, g, pre + ".attn", params.config.n_heads,
                                             dropout_backward(t.attn_drop, d_mid)));
  return d;
}

struct ConformerBlockTape {
  LayerNormTape ffn1_norm, attn_norm, conv_norm, ffn2_norm, out_norm;
  layers::FeedForwardTape ffn1, ffn2;
  layers::AttentionTape attn;
  layers::ConvModuleTape conv;
  layers::DropoutTape ffn1_drop, attn_drop, conv_drop, ffn2_drop;
};

/// a = e + FFN1(e)/2; b = a + MHSA(a); c = b + Conv(b); out = LN(c + FFN2(c)/2),
/// each branch normalized at its entry; swish FFNs.
inline Matrix conformer_block(const Matrix& e, const EncoderParams& params, std::size_t index,
                              ConformerBlockTape* tape = nullptr, Rng* dropout_rng = nullptr,
                              Matrix* pre_final_norm = nullptr) {
  using namespace layers;
  const EncoderConfig& cfg = params.config;
  const ParamSet& p = params.tensors;
  const std::string pre = "block" + std::to_string(index);
  ConformerBlockTape local;
  ConformerBlockTape& t = tape ? *tape : local;
  const double eps = cfg.ln_eps;
  Matrix x = e;
  x += dropout(feed_forward(norm(x, p, pre + ".ffn1_norm", eps, &t.ffn1_norm), p, pre + ".ffn1",
                            Activation::swish, &t.ffn1),
               cfg.dropout, dropout_rng, &t.ffn1_drop) *
       0.5;
  x += dropout(self_attention(norm(x, p, pre + ".attn_norm", eps, &t.attn_norm), p, pre + ".attn",
                              cfg.n_heads, &t.attn),
               cfg.dropout, dropout_rng, &t.attn_drop);
  x += dropout(conv_module(norm(x, p, pre + ".conv_norm", eps, &t.conv_norm), p, pre + ".conv", eps, &t.conv),
               cfg.dropout, dropout_rng, &t.conv_drop);
  x += dropout(feed_forward(norm(x, p, pre + ".ffn2_norm", eps, &t.ffn2_norm), p, pre + ".ffn2",
                            Activation::swish, &t.ffn2),
               cfg.dropout, dropout_rng, &t.ffn2_drop) *
       0.5;
  if (pre_final_norm) *pre_final_norm = x;
  return norm(x, p, pre + ".out_norm", eps, &t.out_norm);
}

inline Matrix conformer_block_backward(const ConformerBlockTape& t, const EncoderParams& params,
                                       std::size_t index, ParamSet& g, const Matrix& dy) {
  using namespace layers;
  const ParamSet& p = params.tensors;
  const std::string pre = "block" + std::to_string(index);
  const std::size_t heads = params.config.n_heads;
  Matrix d = norm_backward(t.out_norm, p, g, pre + ".out_norm", dy);
  {
    const Matrix half = d * 0.5;
    d += norm_backward(t.ffn2_norm, p, g, pre + ".ffn2_norm",
                       feed_forward_backward(t.ffn2, p, g, pre + ".ffn2", Activation::swish,
                                             dropout_backward(t.ffn2_drop, half)));
  }
  {
    const Matrix branch = dropout_backward(t.conv_drop, d);
    d += norm_backward(t.conv_norm, p, g, pre + ".conv_norm", conv_module_backward(t.conv, p, g, pre + ".conv", branch));
  }
  {
    const Matrix branch = dropout_backward(t.attn_drop, d);
    d += norm_backward(t.attn_norm, p, g, pre + ".attn_norm",
                       self_attention_backward(t.attn, p, g, pre + ".attn", heads, branch));
  }
  {
    const Matrix half = d * 0.5;
    d += norm_backward(t.ffn1_norm, p, g, pre + ".ffn1_norm",
                       feed_forward_backward(t.ffn1, p, g, pre + ".ffn1", Activation::swish,
                                             dropout_backward(t.ffn1_drop, half)));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Front ends
// ---------------------------------------------------------------------------

struct FrontendTape {
  // conv_subsample
  Grid3 input, conv1_depthwise_out, conv1_pre, conv1_out, conv2_depthwise_out, conv2_pre;
  // both
  layers::LinearTape linear;
};

/// Two depthwise-separable conv layers with ReLU, flatten (freq x channel)
/// per frame, then Linear to d_model. Output has ceil(ceil(T/2)/5) rows.
inline Matrix conv_subsample_frontend(const FeatureMatrix& x, const EncoderParams& params,
                                      FrontendTape* tape = nullptr) {
  const EncoderConfig& cfg = params.config;
  const ParamSet& p = params.tensors;
  if (x.dims() != cfg.input_dims) {
    throw ConfigError("frontend: feature dims " + std::to_string(x.dims()) + " != configured input_dims " +
                      std::to_string(cfg.input_dims));
  }
  if (x.dims() != 23 && x.dims() != 80) {
    throw ConfigError("frontend: conv subsampling needs 23 or 80 dims, got " + std::to_string(x.dims()));
  }
  if (x.frames() == 0) throw InputError("frontend: empty feature matrix");
  FrontendTape local;
  FrontendTape& t = tape ? *tape : local;
  t.input = Grid3(x.frames(), x.dims(), 1);
  t.input.data = x.values.storage();
  const Conv2dShape s0 = cfg.subsample_layer(0), s1 = cfg.subsample_layer(1);
  t.conv1_depthwise_out = conv2d_depthwise(t.input, p["frontend.conv1.depthwise.kernel"],
                                           p["frontend.conv1.depthwise.bias"].values(), s0);
  t.conv1_pre = conv2d_pointwise(t.conv1_depthwise_out, p["frontend.conv1.pointwise.weight"],
                                 p["frontend.conv1.pointwise.bias"].values());
  t.conv1_out = t.conv1_pre;
  for (double& v : t.conv1_out.data) v = v > 0.0 ? v : 0.0;
  t.conv2_depthwise_out = conv2d_depthwise(t.conv1_out, p["frontend.conv2.depthwise.kernel"],
                                           p["frontend.conv2.depthwise.bias"].values(), s1);
  t.conv2_pre = conv2d_pointwise(t.conv2_depthwise_out, p["frontend.conv2.pointwise.weight"],
                                 p["frontend.conv2.pointwise.bias"].values());
  const Grid3& g2 = t.conv2_pre;
  Matrix flat(g2.time, g2.freq * g2.channels);
  for (std::size_t i = 0; i < g2.data.size(); ++i) flat[i] = g2.data[i] > 0.0 ? g2.data[i] : 0.0;
  return layers::linear(flat, p, "frontend.linear", &t.linear);
}

inline void conv_subsample_frontend_backward(const FrontendTape& t, const EncoderParams& params, ParamSet& g,
                                             const Matrix& dy) {
  const EncoderConfig& cfg = params.config;
  const ParamSet& p = params.tensors;
  const Matrix dflat = layers::linear_backward(t.linear, p, g, "frontend.linear", dy);
  Grid3 d2(t.conv2_pre.time, t.conv2_pre.freq, t.conv2_pre.channels);
  for (std::size_t i = 0; i < d2.data.size(); ++i) d2.data[i] = t.conv2_pre.data[i] > 0.0 ? dflat[i] : 0.0;
  // Pointwise 2
  const Matrix d2m = d2.as_matrix();
  g["frontend.conv2.pointwise.weight"] += matmul_tn(t.conv2_depthwise_out.as_matrix(), d2m);
  accumulate_col_sums(d2m, g["frontend.conv2.pointwise.bias"].values());
  const Grid3 d2dw = Grid3::from_matrix(matmul_nt(d2m, p["frontend.conv2.pointwise.weight"]), d2.time, d2.freq);
  Grid3 d1 = conv2d_depthwise_backward(t.conv1_out, p["frontend.conv2.depthwise.kernel"], d2dw,
                                       cfg.subsample_layer(1), g["frontend.conv2.depthwise.kernel"],
                                       g["frontend.conv2.depthwise.bias"].values());
  for (std::size_t i = 0; i < d1.data.size(); ++i) {
    if (!(t.conv1_pre.data[i] > 0.0)) d1.data[i] = 0.0;
  }
  const Matrix d1m = d1.as_matrix();
  g["frontend.conv1.pointwise.weight"] += matmul_tn(t.conv1_depthwise_out.as_matrix(), d1m);
  accumulate_col_sums(d1m, g["frontend.conv1.pointwise.bias"].values());
  const Grid3 d1dw = Grid3::from_matrix(matmul_nt(d1m, p["frontend.conv1.pointwise.weight"]), d1.time, d1.freq);
  conv2d_depthwise_backward(t.input, p["frontend.conv1.depthwise.kernel"], d1dw, cfg.subsample_layer(0),
                            g["frontend.conv1.depthwise.kernel"], g["frontend.conv1.depthwise.bias"].values());
}

inline Matrix stacked_frontend(const FeatureMatrix& x, const EncoderParams& params, FrontendTape* tape = nullptr) {
  if (x.dims() != params.config.input_dims) {
    throw ConfigError("frontend: feature dims " + std::to_string(x.dims()) + " != configured input_dims " +
                      std::to_string(params.config.input_dims));
  }
  if (x.frames() == 0) throw InputError("frontend: empty feature matrix");
  FrontendTape local;
  return layers::linear(stack_and_decimate(x).values, params.tensors, "frontend.linear",
                        tape ? &tape->linear : &local.linear);
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

struct EncoderTape {
  std::size_t param_elements = 0;
  std::string config_signature;
  FrontendTape frontend;
  std::vector<TransformerBlockTape> transformer;
  std::vector<ConformerBlockTape> conformer;
  LayerNormTape final_norm;
  layers::LinearTape head;
  Matrix posteriors;
};

/// Raw 10 ms features in, T' x S speech-activity posteriors out.
/// dropout_rng enables dropout (training only) when the config rate is > 0.
inline PosteriorMatrix forward(const FeatureMatrix& x, const EncoderParams& params, EncoderTape* tape = nullptr,
                               Rng* dropout_rng = nullptr) {
  const EncoderConfig& cfg = params.config;
  cfg.validate();
  if (tape) {
    *tape = EncoderTape{};
    tape->param_elements = params.tensors.element_count();
    tape->config_signature = nlohmann::json(cfg).dump();
  }
  FrontendTape* ft = tape ? &tape->frontend : nullptr;
  Matrix e = cfg.frontend == FrontendKind::conv_subsample ? conv_subsample_frontend(x, params, ft)
                                                          : stacked_frontend(x, params, ft);
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    if (cfg.arch == Arch::transformer) {
      TransformerBlockTape* bt = nullptr;
      if (tape) bt = &tape->transformer.emplace_back();
      e = transformer_block(e, params, b, bt, dropout_rng);
    } else {
      ConformerBlockTape* bt = nullptr;
      if (tape) bt = &tape->conformer.emplace_back();
      e = conformer_block(e, params, b, bt, dropout_rng);
    }
  }
  e = layers::norm(e, params.tensors, "final_norm", cfg.ln_eps, tape ? &tape->final_norm : nullptr);
  layers::LinearTape head_local;
  Matrix logits = layers::linear(e, params.tensors, "head", tape ? &tape->head : &head_local);
  PosteriorMatrix z{activate(logits, Activation::sigmoid), kSubsampledFrameShift};
  if (tape) tape->posteriors = z.values;
  return z;
}

/// Accumulates dL/dparams into `grads` given dL/dZ.
inline void backward_accumulate(const EncoderTape& tape, const EncoderParams& params, const Matrix& dz,
                                ParamSet& grads) {
  const EncoderConfig& cfg = params.config;
  if (tape.param_elements != params.tensors.element_count() ||
      tape.config_signature != nlohmann::json(cfg).dump()) {
    throw InternalError("backward: tape was recorded with a different model");
  }
  if (!grads.same_layout(params.tensors)) throw InternalError("backward: gradient layout mismatch");
  if (!dz.same_shape(tape.posteriors)) {
    throw InternalError("backward: upstream gradient " + dz.shape_string() + " vs posteriors " +
                        tape.posteriors.shape_string());
  }
  Matrix dlogits(dz.rows(), dz.cols());
  for (std::size_t i = 0; i < dz.size(); ++i) {
    const double z = tape.posteriors[i];
    dlogits[i] = dz[i] * z * (1.0 - z);
  }
  Matrix d = layers::linear_backward(tape.head, params.tensors, grads, "head", dlogits);
  d = layers::norm_backward(tape.final_norm, params.tensors, grads, "final_norm", d);
  for (std::size_t b = cfg.n_blocks; b-- > 0;) {
    d = cfg.arch == Arch::transformer ? transformer_block_backward(tape.transformer[b], params, b, grads, d)
                                      : conformer_block_backward(tape.conformer[b], params, b, grads, d);
  }
  if (cfg.frontend == FrontendKind::conv_subsample) {
    conv_subsample_frontend_backward(tape.frontend, params, grads, d);
  } else {
    layers::linear_backward(tape.frontend.linear, params.tensors, grads, "frontend.linear", d);
  }
}

inline ParamSet backward(const EncoderTape& tape, const EncoderParams& params, const Matrix& dz) {
  ParamSet g = params.tensors.zeros_like();
  backward_accumulate(tape, params, dz, g);
  return g;
}

// ---------------------------------------------------------------------------
// Decisions
// ---------------------------------------------------------------------------

/// Running median over an odd window with edge replication.
inline std::vector<double> median_filter(std::span<const double> x, std::size_t window) {
  if (window % 2 == 0) throw ConfigError("median_window must be odd, got " + std::to_string(window));
  if (window == 1) return {x.begin(), x.end()};
  const auto n = static_cast<std::ptrdiff_t>(x.size());
  const auto half = static_cast<std::ptrdiff_t>(window / 2);
  std::vector<double> out(x.size()), buf(window);
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    for (std::ptrdiff_t k = -half; k <= half; ++k) {
      buf[static_cast<std::size_t>(k + half)] = x[static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i + k, 0, n - 1))];
    }
    std::nth_element(buf.begin(), buf.begin() + half, buf.end());
    out[static_cast<std::size_t>(i)] = buf[static_cast<std::size_t>(half)];
  }
  return out;
}

inline std::string speaker_label(std::size_t s) { return "spk" + std::to_string(s); }

/// Thresholds (>=) optionally median-smoothed posteriors; each maximal run of
/// active frames becomes one segment on the 100 ms grid.
/// t * shift, computed as t / rate when the frame rate is integral so that
/// e.g. frame 3 at 0.1 s lands on exactly 0.3.
inline double frame_time(std::size_t t, double shift) {
  const double rate = std::round(1.0 / shift);
  if (std::abs(rate * shift - 1.0) < 1e-12) return static_cast<double>(t) / rate;
  return static_cast<double>(t) * shift;
}

inline Annotation decide(const PosteriorMatrix& z, double threshold = 0.5, std::size_t median_window = 1,
                         const std::string& recording = "rec") {
  if (median_window == 0 || median_window % 2 == 0) {
    throw ConfigError("decide: median_window must be odd, got " + std::to_string(median_window));
  }
  Annotation a;
  a.recording = recording;
  a.duration = frame_time(z.frames(), z.frame_shift);
  for (std::size_t s = 0; s < z.speakers(); ++s) {
    std::vector<double> col(z.frames());
    for (std::size_t t = 0; t < z.frames(); ++t) col[t] = z.values(t, s);
    col = median_filter(col, median_window);
    std::size_t t = 0;
    while (t < col.size()) {
      if (col[t] >= threshold) {
        std::size_t e = t;
        while (e < col.size() && col[e] >= threshold) ++e;
        a.segments.push_back({speaker_label(s), frame_time(t, z.frame_shift), frame_time(e, z.frame_shift)});
        t = e;
      } else {
        ++t;
      }
    }
  }
  return a;
}

}  // namespace eend
