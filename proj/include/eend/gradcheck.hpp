// Copyright 2026 The EEND Lab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Central-difference check of backward() through the PIT-BCE loss on small
// models.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "eend/encoder.hpp"
#include "eend/training.hpp"

namespace eend {

/// D=8, H=2, P=2, S=2 model sized for exhaustive gradient checks.
inline EncoderConfig toy_config(Arch arch, FrontendKind frontend) {
  EncoderConfig c;
  c.arch = arch;
  c.frontend = frontend;
  c.n_blocks = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.ffn_dim = 16;
  c.conv_kernel = 4;
  c.n_speakers = 2;
  c.input_dims = 23;
  c.frontend_channels = 4;
  return c;
}

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  // Coordinates whose +-h probe crossed a ReLU kink or a PIT permutation
  // switch and were re-probed with a smaller step.
  std::size_t kink_refined = 0;
};

/// Sign pattern of every ReLU input plus the PIT permutation: the loss is
/// smooth in a neighbourhood where this pattern is constant.
inline std::vector<bool> piecewise_pattern(const EncoderTape& tape, const PitResult& pit) {
  std::vector<bool> p;
  for (const auto* g : {&tape.frontend.conv1_pre, &tape.frontend.conv2_pre})
    for (double v : g->data) p.push_back(v > 0.0);
  for (const auto& b : tape.transformer)
    for (double v : b.ffn.hidden.storage()) p.push_back(v > 0.0);
  for (std::size_t s : pit.permutation)
    for (int bit = 0; bit < 8; ++bit) p.push_back((s >> bit) & 1u);
  return p;
}

/// Random features (frames_out * 10 raw frames), random binary labels and a
/// seeded Glorot init; compares backward() against central differences on
/// every parameter. A probe that straddles a kink of the piecewise-smooth
/// loss is repeated with the step divided by 10 (up to three times).
inline GradCheckReport gradient_check(const EncoderConfig& cfg, std::uint64_t seed, std::size_t frames_out = 12,
                                      double h = 1e-5, double floor = 1e-6) {
  Rng rng(seed);
  EncoderParams params = init_params(cfg, rng);
  // Non-trivial norms and biases so their gradients are exercised off the
  // identity point.
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    const std::string& n = params.tensors.name(i);
    const bool is_gain = n.size() > 5 && n.compare(n.size() - 5, 5, ".gain") == 0;
    const bool is_bias = n.size() > 5 && n.compare(n.size() - 5, 5, ".bias") == 0;
    if (is_gain || is_bias) {
      for (double& v : params.tensors.tensor(i).storage()) v = (is_gain ? 1.0 : 0.0) + rng.uniform(-0.2, 0.2);
    }
  }
  FeatureMatrix x{Matrix(frames_out * kSubsampling, cfg.input_dims), kRawFrameShift};
  for (double& v : x.values.storage()) v = rng.normal();
  Matrix y(frames_out, cfg.n_speakers);
  for (double& v : y.storage()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;

  EncoderTape tape;
  const PosteriorMatrix z = forward(x, params, &tape);
  const PitResult pit = pit_bce_loss(z.values, y);
  const std::vector<double> analytic = backward(tape, params, pit.grad).flatten();
  const std::vector<bool> base_pattern = piecewise_pattern(tape, pit);

  EncoderParams probe = params;
  std::vector<double> theta = params.tensors.flatten();
  bool smooth = true;
  auto loss = [&](std::span<const double> th) {
    probe.tensors.assign_flat(th);
    EncoderTape t;
    const PitResult r = pit_bce_loss(forward(x, probe, &t).values, y);
    if (piecewise_pattern(t, r) != base_pattern) smooth = false;
    return r.loss;
  };

  GradCheckReport rep;
  rep.checked = theta.size();
  std::size_t k = 0;
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    for (std::size_t j = 0; j < params.tensors.tensor(i).size(); ++j, ++k) {
      double step = h, numeric = 0.0;
      for (int attempt = 0; attempt < 4; ++attempt, step /= 10.0) {
        smooth = true;
        const double saved = theta[k];
        theta[k] = saved + step;
        const double fp = loss(theta);
        theta[k] = saved - step;
        const double fm = loss(theta);
        theta[k] = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
          throw EvaluationError("gradient_check: non-finite loss at " + params.tensors.name(i));
        }
        numeric = (fp - fm) / (2.0 * step);
        if (smooth) break;
        if (attempt == 0) ++rep.kink_refined;
      }
      const double e = relative_error(analytic[k], numeric, floor);
      if (e > rep.max_relative_error) {
        rep.max_relative_error = e;
        rep.worst_parameter = params.tensors.name(i);
        rep.worst_index = j;
      }
    }
  }
  return rep;
}

}  // namespace eend
