// Copyright 2026 The EEND Lab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Run configuration: one JSON document with feature / encoder / train / sim /
// score sections and a top-level seed. Every field is optional; unknown keys
// are errors. The effective config is echoed as config.echo.json.

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "json.hpp"

#include "eend/audio_features.hpp"
#include "eend/encoder.hpp"
#include "eend/errors.hpp"
#include "eend/simulator.hpp"
#include "eend/training.hpp"
#include "eend/turn_taking.hpp"

namespace eend {

struct FeatureConfig {
  std::size_t n_mels = 23;
};

struct ScoreConfig {
  double collar = 0.25;
  double threshold = 0.5;
  std::size_t median_window = 1;
  bool skip_missing = false;
  double gamma = kSimilarityGamma;
  double bin_width = 0.0;  // 0: exact empirical CDFs

  DecodeConfig decode() const { return {threshold, median_window, collar}; }
};

struct RunConfig {
  std::uint64_t seed = 0;
  FeatureConfig feature;
  EncoderConfig encoder;
  TrainConfig train;
  SimConfig sim;
  ScoreConfig score;
};

namespace config_detail {

using Setter = std::function<void(const nlohmann::json&)>;

inline void apply(const std::string& section, const nlohmann::json& j, const std::map<std::string, Setter>& setters) {
  if (!j.is_object()) throw ConfigError(section + ": expected a JSON object");
  for (const auto& [key, v] : j.items()) {
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError(section + ": unknown key '" + key + "'");
    try {
      it->second(v);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(section + ": bad value for '" + key + "': " + e.what());
    }
  }
}

template <class T>
Setter into(T& field) {
  return [&field](const nlohmann::json& v) { field = v.get<T>(); };
}

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  throw ConfigError("train.optimizer: expected adam|sgd, got '" + s + "'");
}

inline ScheduleKind parse_schedule(const std::string& s) {
  if (s == "noam") return ScheduleKind::noam;
  if (s == "constant") return ScheduleKind::constant;
  throw ConfigError("train.schedule: expected noam|constant, got '" + s + "'");
}

inline RirMode parse_rir_mode(const std::string& s) {
  if (s == "mixture") return RirMode::mixture;
  if (s == "per_speaker") return RirMode::per_speaker;
  throw ConfigError("sim.rir_mode: expected mixture|per_speaker, got '" + s + "'");
}

}  // namespace config_detail

inline void update_from_json(SpecAugmentConfig& c, const nlohmann::json& j) {
  using config_detail::into;
  config_detail::apply("train.augment", j,
                       {{"n_freq_masks", into(c.n_freq_masks)},
                        {"max_freq_width", into(c.max_freq_width)},
                        {"n_time_masks", into(c.n_time_masks)},
                        {"max_time_width", into(c.max_time_width)},
                        {"fill", into(c.fill)}});
}

inline void update_from_json(TrainConfig& c, const nlohmann::json& j) {
  using config_detail::into;
  config_detail::apply(
      "train", j,
      {{"optimizer", [&c](const nlohmann::json& v) { c.optimizer = config_detail::parse_optimizer(v.get<std::string>()); }},
       {"schedule", [&c](const nlohmann::json& v) { c.schedule = config_detail::parse_schedule(v.get<std::string>()); }},
       {"lr", into(c.lr)},
       {"noam_scale", into(c.noam_scale)},
       {"warmup_steps", into(c.warmup_steps)},
       {"beta1", into(c.beta1)},
       {"beta2", into(c.beta2)},
       {"adam_eps", into(c.adam_eps)},
       {"momentum", into(c.momentum)},
       {"weight_decay", into(c.weight_decay)},
       {"batch_size", into(c.batch_size)},
       {"epochs", into(c.epochs)},
       {"average_last", into(c.average_last)},
       {"spec_augment", into(c.spec_augment)},
       {"augment", [&c](const nlohmann::json& v) { update_from_json(c.augment, v); }}});
}

inline void update_from_json(SimConfig& c, const nlohmann::json& j) {
  using config_detail::into;
  config_detail::apply(
      "sim", j,
      {{"n_speakers", into(c.n_speakers)},
       {"utts_min", into(c.utts_min)},
       {"utts_max", into(c.utts_max)},
       {"gap_mean_beta", into(c.gap_mean_beta)},
       {"min_utt_len", into(c.min_utt_len)},
       {"snr_db", into(c.snr_db)},
       {"use_noise", into(c.use_noise)},
       {"use_rir", into(c.use_rir)},
       {"rir_mode", [&c](const nlohmann::json& v) { c.rir_mode = config_detail::parse_rir_mode(v.get<std::string>()); }},
       {"noise_list", into(c.noise_list)},
       {"rir_list", into(c.rir_list)},
       {"n_mixtures", into(c.n_mixtures)}});
}

inline void update_from_json(ScoreConfig& c, const nlohmann::json& j) {
  using config_detail::into;
  config_detail::apply("score", j,
                       {{"collar", into(c.collar)},
                        {"threshold", into(c.threshold)},
                        {"median_window", into(c.median_window)},
                        {"skip_missing", into(c.skip_missing)},
                        {"gamma", into(c.gamma)},
                        {"bin_width", into(c.bin_width)}});
}

inline void to_json(nlohmann::json& j, const SpecAugmentConfig& c) {
  j = nlohmann::json{{"n_freq_masks", c.n_freq_masks},
                     {"max_freq_width", c.max_freq_width},
                     {"n_time_masks", c.n_time_masks},
                     {"max_time_width", c.max_time_width},
                     {"fill", c.fill}};
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"optimizer", c.optimizer == OptimizerKind::adam ? "adam" : "sgd"},
                     {"schedule", c.schedule == ScheduleKind::noam ? "noam" : "constant"},
                     {"lr", c.lr},
                     {"noam_scale", c.noam_scale},
                     {"warmup_steps", c.warmup_steps},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"adam_eps", c.adam_eps},
                     {"momentum", c.momentum},
                     {"weight_decay", c.weight_decay},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"average_last", c.average_last},
                     {"spec_augment", c.spec_augment},
                     {"augment", c.augment}};
}

inline void to_json(nlohmann::json& j, const ScoreConfig& c) {
  j = nlohmann::json{{"collar", c.collar},           {"threshold", c.threshold}, {"median_window", c.median_window},
                     {"skip_missing", c.skip_missing}, {"gamma", c.gamma},         {"bin_width", c.bin_width}};
}

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"seed", c.seed},   {"feature", {{"n_mels", c.feature.n_mels}}},
                     {"encoder", c.encoder}, {"train", c.train},
                     {"sim", c.sim},     {"score", c.score}};
}

inline void validate(const RunConfig& c) {
  if (c.feature.n_mels != 23 && c.feature.n_mels != 80) throw ConfigError("feature.n_mels must be 23 or 80");
  c.encoder.validate();
  if (c.encoder.input_dims != c.feature.n_mels) {
    throw ConfigError("encoder.input_dims (" + std::to_string(c.encoder.input_dims) + ") != feature.n_mels (" +
                      std::to_string(c.feature.n_mels) + ")");
  }
  c.train.validate();
  c.sim.validate();
  if (c.score.collar < 0.0) throw ConfigError("score.collar must be >= 0");
  if (c.score.median_window == 0 || c.score.median_window % 2 == 0) throw ConfigError("score.median_window must be odd");
  if (!(c.score.gamma > 0.0)) throw ConfigError("score.gamma must be > 0");
  if (c.score.bin_width < 0.0) throw ConfigError("score.bin_width must be >= 0");
}

/// Parses a run config. encoder.input_dims follows feature.n_mels unless set.
inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig c;
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  bool dims_set = false;
  config_detail::apply(
      "config", j,
      {{"seed", config_detail::into(c.seed)},
       {"feature", [&c](const nlohmann::json& v) {
          config_detail::apply("feature", v, {{"n_mels", config_detail::into(c.feature.n_mels)}});
        }},
       {"encoder", [&c, &dims_set](const nlohmann::json& v) {
          update_from_json(c.encoder, v);
          dims_set = v.is_object() && v.contains("input_dims");
        }},
       {"train", [&c](const nlohmann::json& v) { update_from_json(c.train, v); }},
       {"sim", [&c](const nlohmann::json& v) { update_from_json(c.sim, v); }},
       {"score", [&c](const nlohmann::json& v) { update_from_json(c.score, v); }}});
  if (!dims_set) c.encoder.input_dims = c.feature.n_mels;
  c.train.seed = c.seed;
  validate(c);
  return c;
}

inline RunConfig parse_run_config_text(const std::string& text, const std::string& name = "<config>") {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(name + ": " + e.what());
  }
  return parse_run_config(j);
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  try {
    return parse_run_config_text(ss.str(), path);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

/// Sets the seed everywhere it is consumed.
inline void set_seed(RunConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.train.seed = seed;
}

inline std::string echo_config(const RunConfig& c) { return nlohmann::json(c).dump(2) + "\n"; }

}  // namespace eend
