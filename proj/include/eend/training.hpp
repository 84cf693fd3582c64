// Copyright 2026 The EEND Lab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Permutation-invariant BCE, the Noam schedule, Adam / momentum SGD, checkpoint
// averaging, the training loop and the fine-tuning grid.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <future>
#include <numeric>
#include <string>
#include <vector>

#include "eend/annotation.hpp"
#include "eend/audio_features.hpp"
#include "eend/checkpoint.hpp"
#include "eend/encoder.hpp"
#include "eend/scoring.hpp"

namespace eend {

// ---------------------------------------------------------------------------
// Labels
// ---------------------------------------------------------------------------

/// frames x speakers binary matrix. Frame t covers [t*shift, (t+1)*shift);
/// a speaker is active when their merged segments cover at least half of it.
/// Columns follow the sorted speaker ids of the annotation.
inline Matrix rasterize_labels(const Annotation& a, std::size_t frames, std::size_t n_speakers,
                               double frame_shift = kSubsampledFrameShift) {
  const auto act = speaker_activity(a);
  if (act.size() > n_speakers) {
    throw InputError("labels: recording '" + a.recording + "' has " + std::to_string(act.size()) +
                     " speakers, model supports " + std::to_string(n_speakers));
  }
  Matrix y(frames, n_speakers);
  std::size_t col = 0;
  for (const auto& [spk, ivs] : act) {
    for (std::size_t t = 0; t < frames; ++t) {
      const double lo = static_cast<double>(t) * frame_shift, hi = lo + frame_shift;
      double cover = 0.0;
      for (const auto& iv : ivs) cover += std::max(0.0, std::min(hi, iv.end) - std::max(lo, iv.start));
      y(t, col) = cover >= 0.5 * frame_shift - 1e-9 ? 1.0 : 0.0;
    }
    ++col;
  }
  return y;
}

// ---------------------------------------------------------------------------
// PIT loss
// ---------------------------------------------------------------------------

inline constexpr double kProbClip = 1e-7;

struct PitResult {
  double loss = 0.0;
  std::vector<std::size_t> permutation;  // output column s is matched with label column permutation[s]
  Matrix grad;                           // dL/dz under the winning permutation
};

/// min over label-column permutations of mean BCE; ties go to the
/// lexicographically smallest permutation.
inline PitResult pit_bce_loss(const Matrix& z, const Matrix& y) {
  if (!z.same_shape(y)) throw InputError("pit_bce_loss: posteriors " + z.shape_string() + " vs labels " + y.shape_string());
  const std::size_t T = z.rows(), S = z.cols();
  if (T == 0 || S == 0) throw InputError("pit_bce_loss: empty input");
  const double norm = 1.0 / static_cast<double>(T * S);
  auto bce = [](double p, double label) {
    const double q = std::clamp(p, kProbClip, 1.0 - kProbClip);
    return -(label * std::log(q) + (1.0 - label) * std::log(1.0 - q));
  };
  // cost[s][k]: output column s against label column k.
  std::vector<std::vector<double>> cost(S, std::vector<double>(S, 0.0));
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t k = 0; k < S; ++k)
      for (std::size_t t = 0; t < T; ++t) cost[s][k] += bce(z(t, s), y(t, k));
  std::vector<std::size_t> perm(S);
  std::iota(perm.begin(), perm.end(), 0);
  PitResult best;
  best.loss = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (std::size_t s = 0; s < S; ++s) total += cost[s][perm[s]];
    total *= norm;
    if (total < best.loss) {
      best.loss = total;
      best.permutation = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  best.grad = Matrix(T, S);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      const double p = z(t, s);
      if (p <= kProbClip || p >= 1.0 - kProbClip) continue;  // clipped: flat
      const double label = y(t, best.permutation[s]);
      best.grad(t, s) = norm * (p - label) / (p * (1.0 - p));
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Schedule and optimizers
// ---------------------------------------------------------------------------

/// scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)
inline double noam_lr(std::size_t step, std::size_t d_model, std::size_t warmup = 25000, double scale = 1.0) {
  if (step == 0) throw InputError("noam_lr: step must be >= 1");
  if (warmup == 0) throw ConfigError("noam_lr: warmup must be >= 1");
  const double s = static_cast<double>(step), w = static_cast<double>(warmup);
  return scale * std::pow(static_cast<double>(d_model), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

enum class OptimizerKind { adam, sgd };
enum class ScheduleKind { noam, constant };

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::adam;
  ScheduleKind schedule = ScheduleKind::noam;
  double lr = 1e-5;  // used by the constant schedule
  double noam_scale = 1.0;
  std::size_t warmup_steps = 25000;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t batch_size = 64;
  std::size_t epochs = 100;
  std::size_t average_last = 10;
  std::uint64_t seed = 0;
  bool spec_augment = true;
  SpecAugmentConfig augment;
  std::size_t jobs = 1;

  void validate() const {
    if (schedule == ScheduleKind::constant && !(lr > 0.0)) throw ConfigError("train: lr must be > 0");
    if (schedule == ScheduleKind::noam && noam_scale < 0.0) throw ConfigError("train: noam_scale must be >= 0");
    if (warmup_steps == 0) throw ConfigError("train: warmup_steps must be >= 1");
    if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
    if (average_last == 0) throw ConfigError("train: average_last must be >= 1");
    if (momentum < 0.0 || weight_decay < 0.0) throw ConfigError("train: momentum/weight_decay must be >= 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0 || !(adam_eps > 0.0)) {
      throw ConfigError("train: adam betas must be in [0,1) and eps > 0");
    }
  }

  double learning_rate(std::size_t step, std::size_t d_model) const {
    return schedule == ScheduleKind::noam ? noam_lr(step, d_model, warmup_steps, noam_scale) : lr;
  }
};

struct OptimizerState {
  std::size_t step = 0;
  ParamSet first, second;  // Adam moments, or SGD velocity in `first`
};

/// One update. Adam folds weight decay into the gradient (L2); SGD uses
/// v <- momentum*v + g + wd*theta, theta <- theta - lr*v.
inline void optimizer_step(ParamSet& params, const ParamSet& grads, OptimizerState& state, const TrainConfig& cfg,
                           double lr) {
  if (!grads.same_layout(params)) throw InternalError("optimizer_step: gradient layout mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!all_finite(grads.tensor(i).values())) {
      throw TrainingError("non-finite gradient in parameter '" + grads.name(i) + "'");
    }
  }
  if (state.first.size() == 0) {
    state.first = params.zeros_like();
    if (cfg.optimizer == OptimizerKind::adam) state.second = params.zeros_like();
  }
  ++state.step;
  if (cfg.optimizer == OptimizerKind::adam) {
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto th = params.tensor(i).values();
      const auto g = grads.tensor(i).values();
      auto m = state.first.tensor(i).values();
      auto v = state.second.tensor(i).values();
      for (std::size_t k = 0; k < th.size(); ++k) {
        const double gk = g[k] + cfg.weight_decay * th[k];
        m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
        v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
        th[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.adam_eps);
      }
    }
  } else {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto th = params.tensor(i).values();
      const auto g = grads.tensor(i).values();
      auto vel = state.first.tensor(i).values();
      for (std::size_t k = 0; k < th.size(); ++k) {
        vel[k] = cfg.momentum * vel[k] + g[k] + cfg.weight_decay * th[k];
        th[k] -= lr * vel[k];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Averaging
// ---------------------------------------------------------------------------

inline EncoderParams average_checkpoints(const std::vector<EncoderParams>& ckpts) {
  if (ckpts.empty()) throw InputError("average_checkpoints: no checkpoints");
  EncoderParams out = ckpts.front();
  const nlohmann::json ref_cfg = ckpts.front().config;
  for (std::size_t c = 1; c < ckpts.size(); ++c) {
    if (nlohmann::json(ckpts[c].config) != ref_cfg || !ckpts[c].tensors.same_layout(out.tensors)) {
      throw InputError("average_checkpoints: checkpoint " + std::to_string(c) + " has a different config");
    }
  }
  const double n = static_cast<double>(ckpts.size());
  for (std::size_t i = 0; i < out.tensors.size(); ++i) {
    auto dst = out.tensors.tensor(i).values();
    for (std::size_t k = 0; k < dst.size(); ++k) {
      double s = 0.0;
      for (const auto& c : ckpts) s += c.tensors.tensor(i)[k];
      dst[k] = s / n;
    }
  }
  return out;
}

inline EncoderParams average_checkpoints(const std::vector<std::string>& paths) {
  std::vector<EncoderParams> v;
  v.reserve(paths.size());
  for (const auto& p : paths) v.push_back(load_checkpoint(p));
  return average_checkpoints(v);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct Example {
  std::string id;
  FeatureMatrix features;  // raw 10 ms features
  Matrix labels;           // T' x S
  Annotation reference;
};

/// Builds a training example, rasterizing labels onto the model frame grid.
inline Example make_example(std::string id, FeatureMatrix features, Annotation reference, std::size_t n_speakers) {
  const std::size_t frames = (features.frames() + kSubsampling - 1) / kSubsampling;
  Matrix labels = rasterize_labels(reference, frames, n_speakers);
  return Example{std::move(id), std::move(features), std::move(labels), std::move(reference)};
}

struct LossLogEntry {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

inline std::string format_loss_log(const std::vector<LossLogEntry>& log) {
  std::string out;
  char buf[128];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%zu\t%.10e\t%.10e\n", e.step, e.lr, e.loss);
    out += buf;
  }
  return out;
}

struct SequenceGradient {
  double loss = 0.0;
  ParamSet grads;
};

/// Loss and gradient of one sequence; seeds are derived from the global
/// sequence position so results do not depend on scheduling.
inline SequenceGradient sequence_gradient(const Example& ex, const EncoderParams& params, const TrainConfig& cfg,
                                          std::uint64_t seq_seed) {
  FeatureMatrix x = ex.features;
  Rng aug_rng(derive_seed(seq_seed, 0));
  Rng drop_rng(derive_seed(seq_seed, 1));
  if (cfg.spec_augment) x = spec_augment(x, cfg.augment, aug_rng);
  EncoderTape tape;
  const PosteriorMatrix z = forward(x, params, &tape, params.config.dropout > 0.0 ? &drop_rng : nullptr);
  if (!z.values.same_shape(ex.labels)) {
    throw InputError("train: '" + ex.id + "' labels " + ex.labels.shape_string() + " vs model output " +
                     z.values.shape_string());
  }
  PitResult pit = pit_bce_loss(z.values, ex.labels);
  return {pit.loss, backward(tape, params, pit.grad)};
}

struct TrainResult {
  EncoderParams final_params;
  std::vector<EncoderParams> recent;  // last average_last epoch checkpoints, oldest first
  std::vector<LossLogEntry> log;
};

using EpochCallback = std::function<void(std::size_t epoch, const EncoderParams&)>;

/// Mini-batch training. Per-sequence gradients are summed in sequence order;
/// the batch loss logged is the mean PIT loss. on_epoch sees every epoch's
/// checkpoint (1-based epoch index).
inline TrainResult train(const std::vector<Example>& corpus, const EncoderParams& initial, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (corpus.empty()) throw InputError("train: empty corpus");
  TrainResult out;
  out.final_params = initial;
  EncoderParams& params = out.final_params;
  OptimizerState state;
  Rng shuffle_rng(derive_seed(cfg.seed, 0xC0FFEE));
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  const std::size_t jobs = std::max<std::size_t>(1, cfg.jobs);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, i - 1))]);
    }
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      ++step;
      std::vector<SequenceGradient> parts(end - begin);
      auto work = [&](std::size_t k) {
        const std::uint64_t seq_seed = derive_seed(cfg.seed, (static_cast<std::uint64_t>(step) << 20) + k);
        parts[k] = sequence_gradient(corpus[order[begin + k]], params, cfg, seq_seed);
      };
      if (jobs == 1 || parts.size() == 1) {
        for (std::size_t k = 0; k < parts.size(); ++k) work(k);
      } else {
        for (std::size_t k0 = 0; k0 < parts.size(); k0 += jobs) {
          std::vector<std::future<void>> fs;
          for (std::size_t k = k0; k < std::min(parts.size(), k0 + jobs); ++k) {
            fs.push_back(std::async(std::launch::async, work, k));
          }
          for (auto& f : fs) f.get();
        }
      }
      ParamSet grads = std::move(parts[0].grads);
      double loss = parts[0].loss;
      for (std::size_t k = 1; k < parts.size(); ++k) {
        grads += parts[k].grads;
        loss += parts[k].loss;
      }
      const double lr = cfg.learning_rate(step, params.config.d_model);
      optimizer_step(params.tensors, grads, state, cfg, lr);
      out.log.push_back({step, lr, loss / static_cast<double>(parts.size())});
    }
    out.recent.push_back(params);
    if (out.recent.size() > cfg.average_last) out.recent.erase(out.recent.begin());
    if (on_epoch) on_epoch(epoch, params);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation and fine-tuning
// ---------------------------------------------------------------------------

struct DecodeConfig {
  double threshold = 0.5;
  std::size_t median_window = 1;
  double collar = 0.25;
};

inline Annotation infer(const Example& ex, const EncoderParams& params, const DecodeConfig& dc) {
  return decide(forward(ex.features, params), dc.threshold, dc.median_window, ex.id);
}

/// Pooled DER of the model over a labelled corpus.
inline DERReport evaluate_der(const EncoderParams& params, const std::vector<Example>& corpus, const DecodeConfig& dc) {
  if (corpus.empty()) throw InputError("evaluate_der: empty corpus");
  AnnotationMap ref, hyp;
  for (const auto& ex : corpus) {
    Annotation r = ex.reference;
    r.recording = ex.id;
    ref[ex.id] = r;
    hyp[ex.id] = infer(ex, params, dc);
  }
  return score_corpus(ref, hyp, dc.collar).pooled;
}

struct FinetuneSetting {
  OptimizerKind optimizer = OptimizerKind::sgd;
  double lr = 0.0;
  double momentum = 0.0;
  double weight_decay = 0.0;
};

/// Adam at a fixed 1e-5, then SGD over lr {0.01, 0.005, 0.001} x momentum
/// {0.9, 0.0} x weight decay {0.0, 1e-4}.
inline std::vector<FinetuneSetting> finetune_settings() {
  std::vector<FinetuneSetting> v;
  v.push_back({OptimizerKind::adam, 1e-5, 0.0, 0.0});
  for (double lr : {0.01, 0.005, 0.001})
    for (double mom : {0.9, 0.0})
      for (double wd : {0.0, 0.0001}) v.push_back({OptimizerKind::sgd, lr, mom, wd});
  return v;
}

struct FinetuneResult {
  FinetuneSetting setting;
  double der = 0.0;
};

/// Fine-tunes the full model under every setting for `base_cfg.epochs`
/// epochs and ranks by pooled dev DER (stable: grid order breaks ties).
inline std::vector<FinetuneResult> finetune_grid(const EncoderParams& base, const std::vector<Example>& adapt,
                                                 const std::vector<Example>& dev, const TrainConfig& base_cfg,
                                                 const DecodeConfig& dc) {
  if (adapt.empty()) throw InputError("finetune: empty adaptation corpus");
  if (dev.empty()) throw InputError("finetune: empty dev corpus");
  std::vector<FinetuneResult> out;
  for (const auto& s : finetune_settings()) {
    TrainConfig cfg = base_cfg;
    cfg.optimizer = s.optimizer;
    cfg.schedule = ScheduleKind::constant;
    cfg.lr = s.lr;
    cfg.momentum = s.momentum;
    cfg.weight_decay = s.weight_decay;
    const EncoderParams tuned = cfg.epochs == 0 ? base : train(adapt, base, cfg).final_params;
    out.push_back({s, evaluate_der(tuned, dev, dc).der});
  }
  std::stable_sort(out.begin(), out.end(), [](const FinetuneResult& a, const FinetuneResult& b) { return a.der < b.der; });
  return out;
}

inline std::string format_finetune_report(const std::vector<FinetuneResult>& r) {
  std::string out = "optimizer\tlr\tmomentum\tweight_decay\tder\n";
  char buf[160];
  for (const auto& x : r) {
    std::snprintf(buf, sizeof buf, "%s\t%g\t%g\t%g\t%.4f\n", x.setting.optimizer == OptimizerKind::adam ? "adam" : "sgd",
                  x.setting.lr, x.setting.momentum, x.setting.weight_decay, x.der);
    out += buf;
  }
  return out;
}

}  // namespace eend
