// Copyright 2026 The EEND Lab Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <tuple>

#include "eend/checkpoint.hpp"
#include "eend/gradcheck.hpp"
#include "eend/training.hpp"

namespace {

using eend::Annotation;
using eend::EncoderParams;
using eend::FeatureMatrix;
using eend::Matrix;
using eend::Rng;

double bce(double p, double y) {
  p = std::min(std::max(p, 1e-7), 1.0 - 1e-7);
  return -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
}

// Both S=2 assignments evaluated directly.
std::pair<double, int> exhaustive_s2(const Matrix& z, const Matrix& y) {
  double id = 0.0, sw = 0.0;
  for (std::size_t t = 0; t < z.rows(); ++t) {
    id += bce(z(t, 0), y(t, 0)) + bce(z(t, 1), y(t, 1));
    sw += bce(z(t, 0), y(t, 1)) + bce(z(t, 1), y(t, 0));
  }
  const double n = 2.0 * z.rows();
  return sw / n < id / n ? std::pair{sw / n, 1} : std::pair{id / n, 0};
}

Matrix random_probs(std::size_t T, std::size_t S, Rng& rng) {
  Matrix z(T, S);
  for (double& v : z.storage()) v = rng.uniform(0.01, 0.99);
  return z;
}

Matrix random_labels(std::size_t T, std::size_t S, Rng& rng) {
  Matrix y(T, S);
  for (double& v : y.storage()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
  return y;
}

Matrix permute_cols(const Matrix& y, const std::vector<std::size_t>& p) {
  Matrix out(y.rows(), y.cols());
  for (std::size_t t = 0; t < y.rows(); ++t)
    for (std::size_t s = 0; s < y.cols(); ++s) out(t, s) = y(t, p[s]);
  return out;
}

TEST(Pit, PerfectPredictionIsNearZeroWithIdentity) {
  const Matrix y{{1, 0}, {1, 1}, {0, 0}, {0, 1}};
  const auto r = eend::pit_bce_loss(y, y);
  EXPECT_LE(r.loss, 1e-6);
  EXPECT_EQ(r.permutation, (std::vector<std::size_t>{0, 1}));
}

TEST(Pit, WorkedTwoFrameExampleMatchesExhaustiveOracle) {
  const Matrix z{{0.9, 0.2}, {0.8, 0.3}};
  const Matrix y{{1, 0}, {1, 0}};
  const auto r = eend::pit_bce_loss(z, y);
  const auto [loss, perm] = exhaustive_s2(z, y);
  EXPECT_NEAR(r.loss, loss, 1e-12);
  EXPECT_EQ(r.permutation[0], static_cast<std::size_t>(perm));
  EXPECT_NEAR(r.loss, -(std::log(0.9) + std::log(0.8) + std::log(0.8) + std::log(0.7)) / 4.0, 1e-12);
}

TEST(Pit, RandomTwoSpeakerInstancesMatchExhaustiveOracle) {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const std::size_t T = 1 + rng.uniform_int(0, 30);
    const Matrix z = random_probs(T, 2, rng), y = random_labels(T, 2, rng);
    const auto r = eend::pit_bce_loss(z, y);
    const auto [loss, perm] = exhaustive_s2(z, y);
    EXPECT_NEAR(r.loss, loss, 1e-12);
    EXPECT_EQ(r.permutation[0], static_cast<std::size_t>(perm));
    EXPECT_EQ(r.permutation[1], static_cast<std::size_t>(1 - perm));
  }
}

TEST(Pit, InvariantUnderLabelColumnPermutation) {
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const Matrix z = random_probs(20, 2, rng), y = random_labels(20, 2, rng);
    EXPECT_EQ(eend::pit_bce_loss(z, y).loss, eend::pit_bce_loss(z, permute_cols(y, {1, 0})).loss);
  }
  for (int i = 0; i < 50; ++i) {
    const Matrix z = random_probs(15, 3, rng), y = random_labels(15, 3, rng);
    const double base = eend::pit_bce_loss(z, y).loss;
    std::vector<std::size_t> p{0, 1, 2};
    do EXPECT_NEAR(eend::pit_bce_loss(z, permute_cols(y, p)).loss, base, 1e-12);
    while (std::next_permutation(p.begin(), p.end()));
  }
}

TEST(Pit, TiesPickLexicographicallySmallest) {
  const Matrix z(4, 2, 0.5);
  const Matrix y{{1, 0}, {0, 1}, {1, 1}, {0, 0}};
  EXPECT_EQ(eend::pit_bce_loss(z, y).permutation, (std::vector<std::size_t>{0, 1}));
  const Matrix z3(3, 3, 0.3);
  EXPECT_EQ(eend::pit_bce_loss(z3, Matrix(3, 3)).permutation, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Pit, LossIsBoundedAndShapeChecked) {
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    Matrix z(10, 2);
    for (double& v : z.storage()) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
    const double l = eend::pit_bce_loss(z, random_labels(10, 2, rng)).loss;
    EXPECT_GE(l, 0.0);
    EXPECT_LE(l, -std::log(1e-7) + 1e-12);
  }
  EXPECT_THROW(eend::pit_bce_loss(Matrix(3, 2), Matrix(3, 3)), eend::InputError);
}

TEST(Pit, GradientMatchesFiniteDifferences) {
  Rng rng(4);
  const Matrix z = random_probs(6, 3, rng), y = random_labels(6, 3, rng);
  const auto r = eend::pit_bce_loss(z, y);
  for (std::size_t i = 0; i < z.size(); ++i) {
    Matrix zp = z, zm = z;
    zp[i] += 1e-6;
    zm[i] -= 1e-6;
    const double fd = (eend::pit_bce_loss(zp, y).loss - eend::pit_bce_loss(zm, y).loss) / 2e-6;
    EXPECT_NEAR(r.grad[i], fd, 1e-7);
  }
}

TEST(Noam, ClosedFormAtReferenceSteps) {
  const double D = 256.0, W = 25000.0;
  EXPECT_NEAR(eend::noam_lr(1, 256), 1.0 / 16.0 * 1.0 / (W * std::sqrt(W)), 1e-12);
  EXPECT_NEAR(eend::noam_lr(25000, 256), 1.0 / (std::sqrt(D) * std::sqrt(W)), 1e-12);
  EXPECT_NEAR(eend::noam_lr(25000, 256), 3.952847075210474e-04, 1e-12);  // 1/(16*158.1138830...)
  EXPECT_NEAR(eend::noam_lr(100000, 256), 1.0 / (16.0 * std::sqrt(100000.0)), 1e-12);
  EXPECT_THROW(eend::noam_lr(0, 256), eend::InputError);
  for (std::size_t s : {1u, 10u, 30000u}) EXPECT_EQ(eend::noam_lr(s, 256, 25000, 0.0), 0.0);
}

TEST(Noam, RisesThenFalls) {
  double prev = 0.0;
  for (std::size_t s = 1; s <= 100; ++s) {
    const double lr = eend::noam_lr(s, 64, 50);
    if (s <= 50) EXPECT_GT(lr, prev) << s;
    else EXPECT_LT(lr, prev) << s;
    prev = lr;
  }
}

eend::ParamSet scalar_set(double v) {
  eend::ParamSet p;
  p.add("theta", Matrix(1, 1, v));
  return p;
}

TEST(Optimizer, ZeroGradientLeavesParamsAlone) {
  for (auto kind : {eend::OptimizerKind::adam, eend::OptimizerKind::sgd}) {
    eend::TrainConfig cfg;
    cfg.optimizer = kind;
    eend::ParamSet p = scalar_set(0.7);
    eend::OptimizerState st;
    for (int i = 0; i < 3; ++i) eend::optimizer_step(p, scalar_set(0.0), st, cfg, 0.1);
    EXPECT_EQ(p["theta"](0, 0), 0.7);
  }
}

TEST(Optimizer, PlainSgdStep) {
  eend::TrainConfig cfg;
  cfg.optimizer = eend::OptimizerKind::sgd;
  cfg.momentum = 0.0;
  eend::ParamSet p = scalar_set(2.0);
  eend::OptimizerState st;
  eend::optimizer_step(p, scalar_set(1.0), st, cfg, 0.1);
  EXPECT_DOUBLE_EQ(p["theta"](0, 0), 1.9);
}

TEST(Optimizer, SgdMomentumAndDecayRecurrence) {
  eend::TrainConfig cfg;
  cfg.optimizer = eend::OptimizerKind::sgd;
  cfg.momentum = 0.9;
  cfg.weight_decay = 1e-4;
  eend::ParamSet p = scalar_set(1.0);
  eend::OptimizerState st;
  double th = 1.0, v = 0.0;
  for (int i = 0; i < 10; ++i) {
    const double g = 2.0 * th;
    eend::optimizer_step(p, scalar_set(g), st, cfg, 0.01);
    v = 0.9 * v + g + 1e-4 * th;
    th -= 0.01 * v;
    EXPECT_NEAR(p["theta"](0, 0), th, 1e-12);
  }
}

TEST(Optimizer, AdamOnQuadraticMatchesRecurrence) {
  eend::TrainConfig cfg;
  eend::ParamSet p = scalar_set(1.0);
  eend::OptimizerState st;
  double th = 1.0, m = 0.0, v = 0.0;
  const double lr = 0.05, b1 = 0.9, b2 = 0.98, eps = 1e-9;
  for (int k = 1; k <= 10; ++k) {
    const double g = 2.0 * th;
    eend::optimizer_step(p, scalar_set(g), st, cfg, lr);
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    th -= lr * (m / (1 - std::pow(b1, k))) / (std::sqrt(v / (1 - std::pow(b2, k))) + eps);
    EXPECT_NEAR(p["theta"](0, 0), th, 1e-12);
  }
  EXPECT_EQ(st.step, 10u);
}

TEST(Optimizer, NonFiniteGradientNamesParameter) {
  eend::TrainConfig cfg;
  eend::ParamSet p = scalar_set(1.0);
  eend::OptimizerState st;
  try {
    eend::optimizer_step(p, scalar_set(std::nan("")), st, cfg, 0.1);
    FAIL() << "expected TrainingError";
  } catch (const eend::TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("theta"), std::string::npos);
  }
}

EncoderParams random_model(std::uint64_t seed) {
  Rng rng(seed);
  return eend::init_params(eend::toy_config(eend::Arch::conformer, eend::FrontendKind::conv_subsample), rng);
}

TEST(Averaging, ElementwiseMeanOracle) {
  std::vector<EncoderParams> ck;
  for (std::uint64_t s = 0; s < 10; ++s) ck.push_back(random_model(s));
  const EncoderParams avg = eend::average_checkpoints(ck);
  const auto flat = avg.tensors.flatten();
  std::vector<std::vector<double>> flats;
  for (const auto& c : ck) flats.push_back(c.tensors.flatten());
  for (std::size_t i = 0; i < flat.size(); ++i) {
    double s = 0.0;
    for (const auto& f : flats) s += f[i];
    EXPECT_NEAR(flat[i], s / 10.0, 1e-12);
  }
  const EncoderParams a = random_model(1), b = random_model(2);
  const auto two = eend::average_checkpoints({a, b}).tensors.flatten();
  const auto fa = a.tensors.flatten(), fb = b.tensors.flatten();
  for (std::size_t i = 0; i < two.size(); ++i) EXPECT_EQ(two[i], (fa[i] + fb[i]) / 2.0);
}

TEST(Averaging, IdenticalAndIdempotent) {
  const EncoderParams a = random_model(3);
  EXPECT_EQ(eend::checkpoint_bytes(eend::average_checkpoints({a, a, a, a})), eend::checkpoint_bytes(a));
  const EncoderParams avg = eend::average_checkpoints({random_model(4), random_model(5)});
  EXPECT_EQ(eend::checkpoint_bytes(eend::average_checkpoints({avg})), eend::checkpoint_bytes(avg));
}

TEST(Averaging, RejectsMismatchedConfigs) {
  Rng rng(0);
  const EncoderParams other = eend::init_params(eend::toy_config(eend::Arch::transformer, eend::FrontendKind::stacked), rng);
  EXPECT_THROW(eend::average_checkpoints({random_model(0), other}), eend::InputError);
  EXPECT_THROW(eend::average_checkpoints(std::vector<EncoderParams>{}), eend::InputError);
}

TEST(Labels, MajorityRuleOnHundredMsFrames) {
  Annotation a;
  a.recording = "r";
  a.duration = 1.0;
  a.segments = {{"b", 0.05, 0.25}, {"a", 0.30, 0.34}, {"a", 0.52, 0.61}};
  const Matrix y = eend::rasterize_labels(a, 10, 2);
  // Columns follow sorted speaker ids: a, b.
  const std::vector<double> a_col{0, 0, 0, 0, 0, 1, 0, 0, 0, 0};
  const std::vector<double> b_col{1, 1, 1, 0, 0, 0, 0, 0, 0, 0};
  for (std::size_t t = 0; t < 10; ++t) {
    EXPECT_EQ(y(t, 0), a_col[t]) << t;
    EXPECT_EQ(y(t, 1), b_col[t]) << t;
  }
  a.segments.push_back({"c", 0.0, 1.0});
  EXPECT_THROW(eend::rasterize_labels(a, 10, 2), eend::InputError);
}

TEST(FinetuneGrid, ThirteenSettings) {
  const auto g = eend::finetune_settings();
  ASSERT_EQ(g.size(), 13u);
  EXPECT_EQ(g[0].optimizer, eend::OptimizerKind::adam);
  EXPECT_EQ(g[0].lr, 1e-5);
  std::set<std::tuple<double, double, double>> sgd;
  for (std::size_t i = 1; i < g.size(); ++i) {
    EXPECT_EQ(g[i].optimizer, eend::OptimizerKind::sgd);
    sgd.insert({g[i].lr, g[i].momentum, g[i].weight_decay});
  }
  EXPECT_EQ(sgd.size(), 12u);
  for (double lr : {0.01, 0.005, 0.001})
    for (double m : {0.9, 0.0})
      for (double wd : {0.0, 0.0001}) EXPECT_TRUE(sgd.count({lr, m, wd}));
}

std::vector<eend::Example> tiny_corpus(std::uint64_t seed, std::size_t n = 3) {
  Rng rng(seed);
  std::vector<eend::Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    FeatureMatrix f{Matrix(60, 23), 0.01};
    for (double& v : f.values.storage()) v = rng.normal();
    Annotation a;
    a.recording = "r" + std::to_string(i);
    a.duration = 0.6;
    a.segments = {{"x", 0.0, 0.3}, {"y", 0.2, 0.6}};
    out.push_back(eend::make_example(a.recording, f, a, 2));
  }
  return out;
}

TEST(FinetuneGrid, ZeroEpochsTieAtBaseDerAndRankingIsSorted) {
  const auto corpus = tiny_corpus(6);
  const EncoderParams base = random_model(6);
  eend::TrainConfig cfg;
  cfg.epochs = 0;
  const eend::DecodeConfig dc;
  const auto r = eend::finetune_grid(base, corpus, corpus, cfg, dc);
  ASSERT_EQ(r.size(), 13u);
  const double base_der = eend::evaluate_der(base, corpus, dc).der;
  for (const auto& x : r) EXPECT_EQ(x.der, base_der);
  cfg.epochs = 1;
  cfg.batch_size = 2;
  const auto r1 = eend::finetune_grid(base, corpus, corpus, cfg, dc);
  EXPECT_TRUE(std::is_sorted(r1.begin(), r1.end(), [](const auto& a, const auto& b) { return a.der < b.der; }));
  const std::string table = eend::format_finetune_report(r1);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 14);
  EXPECT_THROW(eend::finetune_grid(base, {}, corpus, cfg, dc), eend::InputError);
}

TEST(Train, ZeroScaleKeepsParametersAndLogsEveryStep) {
  const auto corpus = tiny_corpus(7, 5);
  const EncoderParams init = random_model(7);
  eend::TrainConfig cfg;
  cfg.noam_scale = 0.0;
  cfg.epochs = 1;
  cfg.batch_size = 2;
  cfg.spec_augment = false;
  const auto r = eend::train(corpus, init, cfg);
  EXPECT_TRUE(r.final_params.tensors == init.tensors);
  EXPECT_EQ(r.log.size(), 3u);
  const std::string log = eend::format_loss_log(r.log);
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 3);
  EXPECT_THROW(eend::train({}, init, cfg), eend::InputError);
}

TEST(Train, BitwiseReproducibleAcrossThreadCounts) {
  const auto corpus = tiny_corpus(8, 4);
  const EncoderParams init = random_model(8);
  eend::TrainConfig cfg;
  cfg.schedule = eend::ScheduleKind::constant;
  cfg.lr = 1e-3;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.average_last = 2;
  cfg.seed = 42;
  const auto a = eend::train(corpus, init, cfg);
  const auto b = eend::train(corpus, init, cfg);
  cfg.jobs = 3;
  const auto c = eend::train(corpus, init, cfg);
  EXPECT_EQ(eend::checkpoint_bytes(a.final_params), eend::checkpoint_bytes(b.final_params));
  EXPECT_EQ(eend::checkpoint_bytes(a.final_params), eend::checkpoint_bytes(c.final_params));
  EXPECT_EQ(eend::format_loss_log(a.log), eend::format_loss_log(c.log));
  EXPECT_EQ(a.recent.size(), 2u);
  EXPECT_FALSE(a.final_params.tensors == init.tensors);
}

}  // namespace
