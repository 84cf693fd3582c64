// Copyright 2026 The EEND Lab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Data directories and the end-to-end smoke pipeline.
//
// A data directory holds
//   wav/<rec>.wav     mixtures
//   ref.rttm          reference segments
//   reco2dur          `<rec> <seconds>` per line
//   feats/<rec>.feat  feature archives (after featurize)

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "eend/audio_features.hpp"
#include "eend/checkpoint.hpp"
#include "eend/config.hpp"
#include "eend/scoring.hpp"
#include "eend/simulator.hpp"
#include "eend/training.hpp"
#include "eend/turn_taking.hpp"

namespace eend {

namespace fs = std::filesystem;

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw InputError("cannot create directory " + dir + ": " + ec.message());
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write " + path);
  os << text;
  if (!os) throw InputError("write failed: " + path);
}

inline std::string read_text(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// reco2dur
// ---------------------------------------------------------------------------

inline std::map<std::string, double> parse_reco2dur(std::istream& is, const std::string& name = "reco2dur") {
  std::map<std::string, double> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::string rec, dur, extra;
    if (!(ss >> rec)) continue;
    if (!(ss >> dur) || (ss >> extra)) throw ParseError(name + ": expected `<recording> <seconds>`", lineno);
    try {
      std::size_t used = 0;
      const double d = std::stod(dur, &used);
      if (used != dur.size() || !std::isfinite(d) || d < 0.0) throw std::invalid_argument(dur);
      out[rec] = d;
    } catch (const std::exception&) {
      throw ParseError(name + ": bad duration '" + dur + "'", lineno);
    }
  }
  return out;
}

inline std::string format_reco2dur(const AnnotationMap& m) {
  std::string out;
  char buf[64];
  for (const auto& [id, a] : m) {
    std::snprintf(buf, sizeof buf, " %.6f\n", a.duration);
    out += id + buf;
  }
  return out;
}

/// ref.rttm plus reco2dur when present. `path` is a data directory or an
/// RTTM file.
inline AnnotationMap load_annotations(const std::string& path) {
  const bool is_dir = fs::is_directory(path);
  const std::string rttm = is_dir ? path + "/ref.rttm" : path;
  AnnotationMap m = load_rttm(rttm);
  const std::string r2d = is_dir ? path + "/reco2dur" : (fs::path(path).parent_path() / "reco2dur").string();
  if (fs::exists(r2d)) {
    std::ifstream is(r2d);
    for (const auto& [id, d] : parse_reco2dur(is, r2d)) {
      auto it = m.find(id);
      if (it == m.end()) {
        m[id] = Annotation{id, {}, d};  // recording without speech
      } else {
        // RTTM carries millisecond precision; allow for its rounding.
        if (d + 2e-3 < it->second.max_end()) {
          throw InputError(r2d + ": duration of '" + id + "' is shorter than its last segment");
        }
        it->second.duration = std::max(d, it->second.max_end());
      }
    }
  }
  return m;
}

inline std::vector<Annotation> as_list(const AnnotationMap& m) {
  std::vector<Annotation> v;
  for (const auto& [id, a] : m) v.push_back(a);
  return v;
}

// ---------------------------------------------------------------------------
// Data directories
// ---------------------------------------------------------------------------

/// Writes mixtures as PCM16 wavs with ref.rttm and reco2dur.
inline void write_data_dir(const std::string& dir, const std::vector<SimulatedMixture>& mixtures) {
  ensure_dir(dir + "/wav");
  AnnotationMap m;
  for (const auto& x : mixtures) {
    write_wav(dir + "/wav/" + x.annotation.recording + ".wav", x.waveform);
    m[x.annotation.recording] = x.annotation;
  }
  write_text(dir + "/ref.rttm", emit_rttm(m));
  write_text(dir + "/reco2dur", format_reco2dur(m));
}

/// Files in `dir` with the given extension, sorted by name.
inline std::vector<fs::path> list_files(const std::string& dir, const std::string& ext) {
  if (!fs::is_directory(dir)) throw InputError("not a directory: " + dir);
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

/// Log-Mel features for every wav/<rec>.wav of `data_dir`, written to
/// `out_dir`/feats. Returns the number of recordings.
inline std::size_t featurize_dir(const std::string& data_dir, const std::string& out_dir, std::size_t n_mels) {
  const LogMelExtractor ex(n_mels);
  ensure_dir(out_dir + "/feats");
  std::size_t n = 0;
  for (const auto& p : list_files(data_dir + "/wav", ".wav")) {
    save_features(out_dir + "/feats/" + p.stem().string() + ".feat", ex(load_wav(p.string())));
    ++n;
  }
  if (n == 0) throw InputError("featurize: no wav files under " + data_dir + "/wav");
  return n;
}

/// Examples for every feature archive in `dir`/feats, labelled from the
/// directory's annotations (recordings missing from ref.rttm get no speech).
inline std::vector<Example> load_examples(const std::string& dir, std::size_t n_speakers) {
  const AnnotationMap ann = fs::exists(dir + "/ref.rttm") ? load_annotations(dir) : AnnotationMap{};
  std::vector<Example> out;
  for (const auto& p : list_files(dir + "/feats", ".feat")) {
    const std::string id = p.stem().string();
    FeatureMatrix f = load_features(p.string());
    auto it = ann.find(id);
    Annotation ref = it != ann.end() ? it->second : Annotation{id, {}, 0.0};
    ref.duration = std::max(ref.duration, static_cast<double>(f.frames()) * f.frame_shift);
    out.push_back(make_example(id, std::move(f), std::move(ref), n_speakers));
  }
  if (out.empty()) throw InputError("no feature archives under " + dir + "/feats");
  return out;
}

/// Simulates `n` mixtures named `<prefix>_NNNNNN`, each from its own child
/// seed of `seed`.
inline std::vector<SimulatedMixture> simulate_corpus(const UtterancePool& pool, const SimConfig& cfg,
                                                     const AugmentPools& aug, std::uint64_t seed, std::size_t n,
                                                     const std::string& prefix) {
  std::vector<SimulatedMixture> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(simulate_indexed(pool, cfg, aug, seed, i, prefix));
  return out;
}

inline AugmentPools load_augment_pools(const SimConfig& cfg) {
  AugmentPools p;
  if (cfg.use_noise && !cfg.noise_list.empty()) p.noise = load_wav_list(cfg.noise_list);
  if (cfg.use_rir && !cfg.rir_list.empty()) p.rir = load_wav_list(cfg.rir_list);
  return p;
}

// ---------------------------------------------------------------------------
// Training artifacts
// ---------------------------------------------------------------------------

inline std::string epoch_checkpoint_name(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%06zu.ckpt", epoch);
  return buf;
}

/// Trains and writes the last `average_last` epoch checkpoints, final.ckpt,
/// avg.ckpt and loss.tsv under `out_dir`.
inline TrainResult train_to_dir(const std::vector<Example>& corpus, const EncoderParams& init, const TrainConfig& cfg,
                                const std::string& out_dir) {
  ensure_dir(out_dir);
  TrainResult r = train(corpus, init, cfg, [&](std::size_t epoch, const EncoderParams& p) {
    if (epoch + cfg.average_last > cfg.epochs) save_checkpoint(out_dir + "/" + epoch_checkpoint_name(epoch), p);
  });
  save_checkpoint(out_dir + "/final.ckpt", r.final_params);
  save_checkpoint(out_dir + "/avg.ckpt", average_checkpoints(r.recent));
  write_text(out_dir + "/loss.tsv", "step\tlr\tloss\n" + format_loss_log(r.log));
  return r;
}

inline AnnotationMap infer_corpus(const std::vector<Example>& corpus, const EncoderParams& params, const DecodeConfig& dc) {
  AnnotationMap hyp;
  for (const auto& ex : corpus) hyp[ex.id] = infer(ex, params, dc);
  return hyp;
}

// ---------------------------------------------------------------------------
// Smoke pipeline
// ---------------------------------------------------------------------------

/// Small conv-subsampled Conformer, constant-rate Adam, no SpecAugment: the
/// setting the smoke run overfits its two training mixtures with.
inline RunConfig smoke_config() {
  RunConfig c;
  c.encoder.arch = Arch::conformer;
  c.encoder.frontend = FrontendKind::conv_subsample;
  c.encoder.n_blocks = 2;
  c.encoder.d_model = 16;
  c.encoder.n_heads = 4;
  c.encoder.ffn_dim = 32;
  c.encoder.conv_kernel = 8;
  c.encoder.frontend_channels = 8;
  c.train.schedule = ScheduleKind::constant;
  c.train.lr = 1e-3;
  c.train.epochs = 500;
  c.train.batch_size = 64;
  c.train.average_last = 10;
  c.train.spec_augment = false;
  c.sim.utts_min = 3;
  c.sim.utts_max = 5;
  c.sim.gap_mean_beta = 1.5;
  c.sim.use_noise = true;
  c.sim.snr_db = {20.0};
  c.sim.n_mixtures = 2;
  return c;
}

struct SmokeReport {
  DERReport der;
  CorpusSimilarity similarity;
  double first_loss = 0.0, last_loss = 0.0;
};

inline std::string format_smoke_summary(const SmokeReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "der\t%.4f\n"
                "similarity\toverlap\t%.9f\t%.9f\n"
                "similarity\tsilence\t%.9f\t%.9f\n",
                r.der.der, r.similarity.overlap.emd, r.similarity.overlap.similarity, r.similarity.silence.emd,
                r.similarity.silence.similarity);
  return buf;
}

/// simulate -> featurize -> train -> average -> infer -> score -> similarity
/// under `out`. The comparison corpus for similarity uses a third of the
/// training gap mean. Failures are rethrown with the stage name.
inline SmokeReport pipeline_smoke(const std::string& out, const RunConfig& cfg, std::ostream* log = nullptr) {
  validate(cfg);
  std::string stage;
  auto step = [&](const char* name) {
    stage = name;
    if (log) *log << "[smoke] " << name << std::endl;
  };
  try {
    step("setup");
    ensure_dir(out);
    write_text(out + "/config.echo.json", echo_config(cfg));

    step("pool");
    ensure_dir(out + "/pool");
    write_pool(out + "/pool", synthetic_utterances(derive_seed(cfg.seed, 1)));
    write_wav(out + "/pool/noise_000.wav", synthetic_noise(derive_seed(cfg.seed, 2)));
    write_text(out + "/pool/noise.lst", "noise_000.wav\n");
    UtterancePool pool = build_pool(out + "/pool/manifest.tsv", cfg.sim.min_utt_len);
    load_pool_audio(pool);
    SimConfig sim = cfg.sim;
    if (sim.use_noise && sim.noise_list.empty()) sim.noise_list = out + "/pool/noise.lst";
    const AugmentPools aug = load_augment_pools(sim);

    step("simulate");
    write_data_dir(out + "/sim_train", simulate_corpus(pool, sim, aug, derive_seed(cfg.seed, 3), sim.n_mixtures, "train"));
    SimConfig other = sim;
    other.gap_mean_beta = sim.gap_mean_beta / 3.0;
    write_data_dir(out + "/sim_compare", simulate_corpus(pool, other, aug, derive_seed(cfg.seed, 4), 8, "compare"));
    const AnnotationMap train_ref = load_annotations(out + "/sim_train");
    const AnnotationMap compare_ref = load_annotations(out + "/sim_compare");
    write_text(out + "/sim_train/stats.tsv", format_stats("sim_train", sim.min_utt_len, corpus_stats(as_list(train_ref))));
    write_text(out + "/sim_compare/stats.tsv",
               format_stats("sim_compare", other.min_utt_len, corpus_stats(as_list(compare_ref))));

    step("featurize");
    featurize_dir(out + "/sim_train", out + "/sim_train", cfg.feature.n_mels);
    const std::vector<Example> corpus = load_examples(out + "/sim_train", cfg.encoder.n_speakers);

    step("train");
    Rng init_rng(derive_seed(cfg.seed, 5));
    const TrainResult tr = train_to_dir(corpus, init_params(cfg.encoder, init_rng), cfg.train, out + "/model");

    step("average");
    const EncoderParams avg = load_checkpoint(out + "/model/avg.ckpt");

    step("infer");
    ensure_dir(out + "/infer");
    const AnnotationMap hyp = infer_corpus(corpus, avg, cfg.score.decode());
    write_text(out + "/infer/hyp.rttm", emit_rttm(hyp));

    step("score");
    const CorpusScore score =
        score_corpus(train_ref, load_rttm(out + "/infer/hyp.rttm"), cfg.score.collar, cfg.score.skip_missing);
    write_text(out + "/der.tsv", format_der_table(score));

    step("similarity");
    SmokeReport rep;
    rep.der = score.pooled;
    rep.similarity = compare_corpora(as_list(train_ref), as_list(compare_ref), cfg.score.gamma, cfg.score.bin_width);
    rep.first_loss = tr.log.front().loss;
    rep.last_loss = tr.log.back().loss;
    write_text(out + "/similarity.tsv", format_similarity(rep.similarity));
    write_text(out + "/summary.txt", format_smoke_summary(rep));
    return rep;
  } catch (const ConfigError& e) {
    throw ConfigError("smoke stage '" + stage + "': " + e.what());
  } catch (const InputError& e) {
    throw InputError("smoke stage '" + stage + "': " + e.what());
  } catch (const Error& e) {
    throw EvaluationError("smoke stage '" + stage + "': " + e.what());
  }
}

}  // namespace eend
