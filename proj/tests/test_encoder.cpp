// Copyright 2026 The EEND Lab Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "eend/checkpoint.hpp"
#include "eend/encoder.hpp"
#include "eend/gradcheck.hpp"

namespace {

using eend::Arch;
using eend::EncoderConfig;
using eend::EncoderParams;
using eend::FeatureMatrix;
using eend::FrontendKind;
using eend::Matrix;
using eend::PosteriorMatrix;
using eend::Rng;

FeatureMatrix random_features(std::size_t frames, std::size_t dims, std::uint64_t seed) {
  Rng rng(seed);
  FeatureMatrix f{Matrix(frames, dims), eend::kRawFrameShift};
  for (double& v : f.values.storage()) v = rng.normal();
  return f;
}

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Matrix m(r, c);
  for (double& v : m.storage()) v = scale * rng.normal();
  return m;
}

EncoderParams random_params(const EncoderConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  EncoderParams p = eend::init_params(cfg, rng);
  for (std::size_t i = 0; i < p.tensors.size(); ++i)
    for (double& v : p.tensors.tensor(i).storage()) v += 0.05 * rng.normal();
  return p;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Zero everywhere except layer-norm gains, which are 1.
EncoderParams identity_norm_params(const EncoderConfig& cfg) {
  EncoderParams p = eend::zero_params(cfg);
  for (std::size_t i = 0; i < p.tensors.size(); ++i)
    if (ends_with(p.tensors.name(i), ".gain")) p.tensors.tensor(i).fill(1.0);
  return p;
}

EncoderConfig small(Arch arch, FrontendKind fe) {
  EncoderConfig c = eend::toy_config(arch, fe);
  c.d_model = 16;
  c.n_heads = 4;
  c.ffn_dim = 24;
  return c;
}

Matrix ref_layer_norm(const Matrix& x, double eps = 1e-5) {
  Matrix y(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) mean += x(r, c);
    mean /= x.cols();
    for (std::size_t c = 0; c < x.cols(); ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
    var /= x.cols();
    for (std::size_t c = 0; c < x.cols(); ++c) y(r, c) = (x(r, c) - mean) / std::sqrt(var + eps);
  }
  return y;
}

Matrix ref_affine(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix y(x.rows(), w.cols());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t j = 0; j < w.cols(); ++j) {
      double acc = b(0, j);
      for (std::size_t k = 0; k < x.cols(); ++k) acc += x(r, k) * w(k, j);
      y(r, j) = acc;
    }
  return y;
}

// Direct "same"-padded strided depthwise conv over a (time, freq, channel)
// volume, written without the library's padding helper.
std::vector<double> ref_depthwise(const std::vector<double>& x, std::size_t T, std::size_t F, std::size_t C,
                                  const Matrix& k, const Matrix& bias, std::size_t kt, std::size_t kf,
                                  std::size_t st, std::size_t sf, std::size_t& To, std::size_t& Fo) {
  To = (T + st - 1) / st;
  Fo = (F + sf - 1) / sf;
  const long pad_t = std::max<long>(0, static_cast<long>((To - 1) * st + kt) - static_cast<long>(T)) / 2;
  const long pad_f = std::max<long>(0, static_cast<long>((Fo - 1) * sf + kf) - static_cast<long>(F)) / 2;
  std::vector<double> out(To * Fo * C);
  for (std::size_t t = 0; t < To; ++t)
    for (std::size_t f = 0; f < Fo; ++f)
      for (std::size_t c = 0; c < C; ++c) {
        double acc = bias(0, c);
        for (std::size_t i = 0; i < kt; ++i)
          for (std::size_t j = 0; j < kf; ++j) {
            const long a = static_cast<long>(t * st + i) - pad_t, b = static_cast<long>(f * sf + j) - pad_f;
            if (a < 0 || b < 0 || a >= static_cast<long>(T) || b >= static_cast<long>(F)) continue;
            acc += k(c, i * kf + j) * x[(a * F + b) * C + c];
          }
        out[(t * Fo + f) * C + c] = acc;
      }
  return out;
}

std::vector<double> ref_pointwise_relu(const std::vector<double>& x, std::size_t cells, std::size_t Cin,
                                       const Matrix& w, const Matrix& b) {
  std::vector<double> out(cells * w.cols());
  for (std::size_t n = 0; n < cells; ++n)
    for (std::size_t o = 0; o < w.cols(); ++o) {
      double acc = b(0, o);
      for (std::size_t i = 0; i < Cin; ++i) acc += x[n * Cin + i] * w(i, o);
      out[n * w.cols() + o] = std::max(acc, 0.0);
    }
  return out;
}

TEST(Frontend, ThousandFramesBecomeHundred) {
  for (auto fe : {FrontendKind::conv_subsample, FrontendKind::stacked}) {
    for (std::size_t dims : {23u, 80u}) {
      EncoderConfig cfg = small(Arch::conformer, fe);
      cfg.input_dims = dims;
      const EncoderParams p = random_params(cfg, 1);
      const FeatureMatrix x = random_features(1000, dims, 2);
      const Matrix e = fe == FrontendKind::stacked ? eend::stacked_frontend(x, p) : eend::conv_subsample_frontend(x, p);
      EXPECT_EQ(e.rows(), 100u);
      EXPECT_EQ(e.cols(), cfg.d_model);
    }
  }
  for (std::size_t T : {1u, 9u, 10u, 11u, 19u, 20u, 21u, 37u}) {
    const EncoderConfig cfg = small(Arch::conformer, FrontendKind::conv_subsample);
    const Matrix e = eend::conv_subsample_frontend(random_features(T, 23, T), random_params(cfg, 3));
    EXPECT_EQ(e.rows(), ((T + 1) / 2 + 4) / 5) << T;
  }
}

TEST(Frontend, ZeroParametersGiveZeroOutput) {
  for (auto fe : {FrontendKind::conv_subsample, FrontendKind::stacked}) {
    const EncoderConfig cfg = small(Arch::transformer, fe);
    const Matrix e = fe == FrontendKind::stacked
                         ? eend::stacked_frontend(random_features(200, 23, 4), eend::zero_params(cfg))
                         : eend::conv_subsample_frontend(random_features(200, 23, 4), eend::zero_params(cfg));
    for (double v : e.storage()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Frontend, MatchesDirectConvolutionComposition) {
  for (std::size_t dims : {23u, 80u}) {
    EncoderConfig cfg = small(Arch::conformer, FrontendKind::conv_subsample);
    cfg.input_dims = dims;
    const EncoderParams p = random_params(cfg, 5);
    const auto& P = p.tensors;
    const std::size_t T = 57, C = cfg.frontend_channels, fs = dims == 80 ? 2 : 1;
    const FeatureMatrix x = random_features(T, dims, 6);

    std::size_t T1, F1, T2, F2;
    auto h = ref_depthwise(x.values.storage(), T, dims, 1, P["frontend.conv1.depthwise.kernel"],
                           P["frontend.conv1.depthwise.bias"], 3, 3, 2, fs, T1, F1);
    h = ref_pointwise_relu(h, T1 * F1, 1, P["frontend.conv1.pointwise.weight"], P["frontend.conv1.pointwise.bias"]);
    h = ref_depthwise(h, T1, F1, C, P["frontend.conv2.depthwise.kernel"], P["frontend.conv2.depthwise.bias"], 7, 7, 5,
                      fs, T2, F2);
    h = ref_pointwise_relu(h, T2 * F2, C, P["frontend.conv2.pointwise.weight"], P["frontend.conv2.pointwise.bias"]);
    const Matrix expect = ref_affine(Matrix(T2, F2 * C, h), P["frontend.linear.weight"], P["frontend.linear.bias"]);

    const Matrix got = eend::conv_subsample_frontend(x, p);
    ASSERT_TRUE(got.same_shape(expect));
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], expect[i], 1e-10);
  }
}

TEST(Blocks, ZeroWeightTransformerBlockIsIdentity) {
  const EncoderConfig cfg = small(Arch::transformer, FrontendKind::stacked);
  const Matrix e = random_matrix(9, cfg.d_model, 7);
  for (const EncoderParams& p : {eend::zero_params(cfg), identity_norm_params(cfg)}) {
    EXPECT_EQ(eend::transformer_block(e, p, 0), e);
  }
}

TEST(Blocks, SingleFrameAttentionIsValueThenOutput) {
  const EncoderConfig cfg = small(Arch::transformer, FrontendKind::stacked);
  const EncoderParams p = random_params(cfg, 8);
  const Matrix x = random_matrix(1, cfg.d_model, 9);
  const auto& P = p.tensors;
  const Matrix expect = ref_affine(ref_affine(x, P["block0.attn.value.weight"], P["block0.attn.value.bias"]),
                                   P["block0.attn.output.weight"], P["block0.attn.output.bias"]);
  const Matrix got = eend::layers::self_attention(x, P, "block0.attn", cfg.n_heads, nullptr);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], expect[i], 1e-12);
}

TEST(Blocks, ZeroWeightConformerBlockIsLayerNormOfInput) {
  const EncoderConfig cfg = small(Arch::conformer, FrontendKind::stacked);
  const Matrix e = random_matrix(11, cfg.d_model, 10);
  const Matrix got = eend::conformer_block(e, identity_norm_params(cfg), 1);
  const Matrix expect = ref_layer_norm(e);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], expect[i], 1e-12);
}

TEST(Blocks, ConformerHalfStepFeedForwardResidual) {
  const EncoderConfig cfg = small(Arch::conformer, FrontendKind::stacked);
  EncoderParams p = identity_norm_params(cfg);
  Rng rng(11);
  for (const char* n : {"block0.ffn1.linear1.weight", "block0.ffn1.linear1.bias", "block0.ffn1.linear2.weight",
                        "block0.ffn1.linear2.bias"})
    for (double& v : p.tensors[n].storage()) v = rng.normal() * 0.3;
  const Matrix e = random_matrix(6, cfg.d_model, 12);

  Matrix hidden = ref_affine(ref_layer_norm(e), p.tensors["block0.ffn1.linear1.weight"],
                             p.tensors["block0.ffn1.linear1.bias"]);
  for (double& v : hidden.storage()) v = v / (1.0 + std::exp(-v));
  const Matrix ffn = ref_affine(hidden, p.tensors["block0.ffn1.linear2.weight"], p.tensors["block0.ffn1.linear2.bias"]);

  Matrix pre;
  eend::conformer_block(e, p, 0, nullptr, nullptr, &pre);
  ASSERT_TRUE(pre.same_shape(e));
  for (std::size_t i = 0; i < e.size(); ++i) EXPECT_NEAR(pre[i], e[i] + 0.5 * ffn[i], 1e-12);
}

TEST(Blocks, PreserveShape) {
  for (auto arch : {Arch::transformer, Arch::conformer}) {
    const EncoderConfig cfg = small(arch, FrontendKind::stacked);
    const EncoderParams p = random_params(cfg, 13);
    for (std::size_t T : {1u, 2u, 17u}) {
      const Matrix e = random_matrix(T, cfg.d_model, T);
      const Matrix out = arch == Arch::transformer ? eend::transformer_block(e, p, 0) : eend::conformer_block(e, p, 0);
      EXPECT_TRUE(out.same_shape(e));
    }
  }
}

TEST(Blocks, TransformerIsTimePermutationEquivariant) {
  const EncoderConfig cfg = small(Arch::transformer, FrontendKind::stacked);
  const EncoderParams p = random_params(cfg, 14);
  const std::size_t T = 12;
  const Matrix e = random_matrix(T, cfg.d_model, 15);
  std::vector<std::size_t> perm(T);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(16);
  for (std::size_t i = T - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, i)]);
  Matrix ep(T, cfg.d_model);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < cfg.d_model; ++c) ep(t, c) = e(perm[t], c);
  const Matrix a = eend::transformer_block(eend::transformer_block(e, p, 0), p, 1);
  const Matrix b = eend::transformer_block(eend::transformer_block(ep, p, 0), p, 1);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < cfg.d_model; ++c) EXPECT_NEAR(b(t, c), a(perm[t], c), 1e-12);
}

TEST(Model, ZeroParametersGiveOneHalf) {
  for (auto arch : {Arch::transformer, Arch::conformer})
    for (auto fe : {FrontendKind::conv_subsample, FrontendKind::stacked}) {
      const EncoderConfig cfg = small(arch, fe);
      const PosteriorMatrix z = eend::forward(random_features(1000, 23, 17), eend::zero_params(cfg));
      EXPECT_EQ(z.frames(), 100u);
      EXPECT_EQ(z.speakers(), 2u);
      EXPECT_EQ(z.frame_shift, 0.1);
      for (double v : z.values.storage()) EXPECT_EQ(v, 0.5);
    }
}

TEST(Model, HeadBiasIsMonotone) {
  const EncoderConfig cfg = small(Arch::conformer, FrontendKind::conv_subsample);
  EncoderParams p = random_params(cfg, 18);
  const FeatureMatrix x = random_features(300, 23, 19);
  Matrix prev = eend::forward(x, p).values;
  for (int step = 0; step < 5; ++step) {
    p.tensors["head.bias"](0, 1) += 0.5;
    const Matrix z = eend::forward(x, p).values;
    for (std::size_t t = 0; t < z.rows(); ++t) {
      EXPECT_EQ(z(t, 0), prev(t, 0));
      EXPECT_GT(z(t, 1), prev(t, 1));
    }
    prev = z;
  }
}

TEST(Model, ZeroUpstreamGradientGivesZeroGradients) {
  for (auto arch : {Arch::transformer, Arch::conformer}) {
    const EncoderConfig cfg = small(arch, FrontendKind::conv_subsample);
    const EncoderParams p = random_params(cfg, 20);
    eend::EncoderTape tape;
    const PosteriorMatrix z = eend::forward(random_features(120, 23, 21), p, &tape);
    const eend::ParamSet g = eend::backward(tape, p, Matrix(z.frames(), z.speakers()));
    for (double v : g.flatten()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Model, HeadGradientMatchesLogisticClosedForm) {
  // Everything but final_norm.bias and the head is zero, so every frame
  // reaches the head as the same vector b.
  const EncoderConfig cfg = small(Arch::conformer, FrontendKind::conv_subsample);
  EncoderParams p = eend::zero_params(cfg);
  Rng rng(22);
  auto& b = p.tensors["final_norm.bias"];
  for (double& v : b.storage()) v = rng.normal();
  for (double& v : p.tensors["head.weight"].storage()) v = rng.normal() * 0.3;
  for (double& v : p.tensors["head.bias"].storage()) v = rng.normal();

  eend::EncoderTape tape;
  const PosteriorMatrix z = eend::forward(random_features(80, 23, 23), p, &tape);
  const Matrix dz = random_matrix(z.frames(), 2, 24);
  const eend::ParamSet g = eend::backward(tape, p, dz);

  for (std::size_t s = 0; s < 2; ++s) {
    double logit = p.tensors["head.bias"](0, s);
    for (std::size_t i = 0; i < cfg.d_model; ++i) logit += b(0, i) * p.tensors["head.weight"](i, s);
    const double zs = 1.0 / (1.0 + std::exp(-logit));
    double sum = 0.0;
    for (std::size_t t = 0; t < z.frames(); ++t) sum += dz(t, s) * zs * (1.0 - zs);
    EXPECT_NEAR(g["head.bias"](0, s), sum, 1e-12);
    for (std::size_t i = 0; i < cfg.d_model; ++i) EXPECT_NEAR(g["head.weight"](i, s), b(0, i) * sum, 1e-12);
  }
}

TEST(Model, GradientsMatchFiniteDifferences) {
  for (auto arch : {Arch::transformer, Arch::conformer})
    for (auto fe : {FrontendKind::conv_subsample, FrontendKind::stacked})
      for (std::uint64_t seed : {101u, 202u}) {
        const auto r = eend::gradient_check(eend::toy_config(arch, fe), seed);
        EXPECT_LE(r.max_relative_error, 1e-4) << eend::to_string(arch) << "/" << eend::to_string(fe) << " seed "
                                              << seed << " worst " << r.worst_parameter << "[" << r.worst_index
                                              << "]";
        EXPECT_EQ(r.checked, eend::count_parameters(eend::toy_config(arch, fe)));
      }
}

TEST(Model, BackwardRejectsForeignTape) {
  const EncoderConfig a = small(Arch::transformer, FrontendKind::stacked);
  EncoderConfig b = a;
  b.ffn_dim = 8;
  const EncoderParams pa = random_params(a, 25), pb = random_params(b, 25);
  eend::EncoderTape tape;
  const PosteriorMatrix z = eend::forward(random_features(50, 23, 26), pa, &tape);
  EXPECT_THROW(eend::backward(tape, pb, Matrix(z.frames(), 2)), eend::InternalError);
  EXPECT_THROW(eend::backward(tape, pa, Matrix(z.frames() + 1, 2)), eend::InternalError);
}

PosteriorMatrix posteriors(std::initializer_list<std::initializer_list<double>> rows) {
  return PosteriorMatrix{Matrix(rows), 0.1};
}

TEST(Decide, AllBelowThresholdIsEmpty) {
  const eend::Annotation a = eend::decide(PosteriorMatrix{Matrix(20, 2, 0.4), 0.1});
  EXPECT_TRUE(a.segments.empty());
  EXPECT_DOUBLE_EQ(a.duration, 2.0);
}

TEST(Decide, RunsBecomeSegments) {
  const eend::Annotation a = eend::decide(posteriors({{0.9}, {0.9}, {0.1}, {0.9}}));
  ASSERT_EQ(a.segments.size(), 2u);
  EXPECT_EQ(a.segments[0].start, 0.0);
  EXPECT_EQ(a.segments[0].end, 0.2);
  EXPECT_EQ(a.segments[1].start, 0.3);
  EXPECT_EQ(a.segments[1].end, 0.4);
  EXPECT_EQ(a.segments[0].speaker, a.segments[1].speaker);
}

TEST(Decide, MedianSmoothingFillsSingleFrameGaps) {
  const eend::Annotation a = eend::decide(posteriors({{1}, {0}, {1}, {1}, {0}, {1}}), 0.5, 3);
  ASSERT_EQ(a.segments.size(), 1u);
  EXPECT_EQ(a.segments[0].start, 0.0);
  EXPECT_EQ(a.segments[0].end, 0.6);
  EXPECT_THROW(eend::decide(posteriors({{1}}), 0.5, 2), eend::ConfigError);
  EXPECT_THROW(eend::decide(posteriors({{1}}), 0.5, 0), eend::ConfigError);
}

TEST(Decide, InvariantUnderMonotoneLogitReparameterization) {
  Rng rng(27);
  const std::size_t T = 200;
  Matrix l(T, 3);
  for (double& v : l.storage()) {
    do v = rng.uniform(-4.0, 4.0);
    while (std::abs(v) < 1e-3);
  }
  auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  for (std::size_t w : {1u, 3u, 5u}) {
    PosteriorMatrix a{Matrix(T, 3), 0.1}, b{Matrix(T, 3), 0.1};
    for (std::size_t i = 0; i < l.size(); ++i) {
      a.values[i] = sig(l[i]);
      b.values[i] = sig(3.0 * l[i] + 2.0);
    }
    EXPECT_EQ(eend::decide(a, 0.5, w).segments, eend::decide(b, sig(2.0), w).segments) << w;
  }
}

TEST(Parameters, DefaultsCountNearTargetsAndMatchHandLedger) {
  const std::size_t tb = eend::count_parameters(EncoderConfig::transformer_default());
  const std::size_t cb = eend::count_parameters(EncoderConfig::conformer_default());
  EXPECT_NEAR(static_cast<double>(tb), 4.4e6, 0.15 * 4.4e6);
  EXPECT_NEAR(static_cast<double>(cb), 4.2e6, 0.15 * 4.2e6);

  auto block_total = [](const EncoderConfig& cfg) {
    std::size_t n = 0;
    for (const auto& s : eend::parameter_layout(cfg))
      if (s.name.rfind("block0.", 0) == 0) n += s.count();
    return n;
  };
  // D=256: norms 4*256, attention 4*(256*256+256), FFN 256*1024+1024+1024*256+256.
  EXPECT_EQ(block_total(EncoderConfig::transformer_default()), 789760u);
  // D=256, ffn 256, kernel 32: 6 norms, 2 FFNs, attention, conv 131584+8448+65792.
  EXPECT_EQ(block_total(EncoderConfig::conformer_default()), 735232u);

  // Whole-model ledger: frontend + blocks + final norm + head.
  const std::size_t frontend = (9 + 1) + (256 + 256) + (256 * 49 + 256) + (256 * 256 + 256) + (23 * 256 * 256 + 256);
  const std::size_t tail = 512 + 256 * 2 + 2;
  EXPECT_EQ(tb, frontend + 4 * 789760u + tail);
  EXPECT_EQ(cb, frontend + 4 * 735232u + tail);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  for (auto arch : {Arch::transformer, Arch::conformer}) {
    const EncoderParams p = random_params(small(arch, FrontendKind::conv_subsample), 28);
    const std::string bytes = eend::checkpoint_bytes(p);
    std::istringstream is(bytes);
    const EncoderParams q = eend::read_checkpoint(is);
    EXPECT_EQ(q.config, p.config);
    EXPECT_TRUE(q.tensors == p.tensors);
    EXPECT_EQ(eend::checkpoint_bytes(q), bytes);
  }
  std::istringstream junk("not a checkpoint");
  EXPECT_THROW(eend::read_checkpoint(junk), eend::FormatError);
}

}  // namespace
