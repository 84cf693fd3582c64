// Copyright 2026 The EEND Lab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Two-speaker conversation mixtures from an utterance pool, noise/RIR
// augmentation and corpus statistics.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "eend/annotation.hpp"
#include "eend/audio_features.hpp"
#include "eend/errors.hpp"
#include "eend/numerics.hpp"

namespace eend {

// ---------------------------------------------------------------------------
// Pool
// ---------------------------------------------------------------------------

struct Utterance {
  std::string speaker;
  std::string path;
  double duration = 0.0;                  // manifest value, seconds
  std::shared_ptr<const Waveform> audio;  // null until loaded
};

struct UtterancePool {
  std::string manifest;
  std::map<std::string, std::vector<Utterance>> speakers;

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& [s, v] : speakers) n += v.size();
    return n;
  }
};

/// Reads `speaker<TAB>wav<TAB>duration` lines. Blank lines and lines starting
/// with '#' are skipped. Relative wav paths resolve against the manifest's
/// directory.
inline UtterancePool read_pool(std::istream& is, double min_utt_len, const std::string& base_dir = "",
                               const std::string& name = "<manifest>") {
  if (min_utt_len < 0.0) throw ConfigError("pool: min_utt_len must be >= 0");
  UtterancePool pool;
  pool.manifest = name;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> f;
    std::size_t pos = 0;
    while (true) {
      const std::size_t tab = line.find('\t', pos);
      f.push_back(line.substr(pos, tab == std::string::npos ? std::string::npos : tab - pos));
      if (tab == std::string::npos) break;
      pos = tab + 1;
    }
    if (f.size() != 3 || f[0].empty() || f[1].empty()) {
      throw ParseError(name + ": expected speaker<TAB>wav<TAB>duration", lineno);
    }
    double dur = 0.0;
    try {
      std::size_t used = 0;
      dur = std::stod(f[2], &used);
      if (used != f[2].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ParseError(name + ": bad duration '" + f[2] + "'", lineno);
    }
    if (!std::isfinite(dur) || dur <= 0.0) throw ParseError(name + ": duration must be > 0", lineno);
    if (dur < min_utt_len) continue;
    std::string path = f[1];
    if (!base_dir.empty() && path[0] != '/') path = base_dir + "/" + path;
    pool.speakers[f[0]].push_back({f[0], path, dur, nullptr});
  }
  return pool;
}

inline UtterancePool build_pool(const std::string& manifest, double min_utt_len) {
  std::ifstream is(manifest);
  if (!is) throw InputError("cannot open manifest: " + manifest);
  const auto slash = manifest.find_last_of('/');
  return read_pool(is, min_utt_len, slash == std::string::npos ? "" : manifest.substr(0, slash), manifest);
}

inline void load_pool_audio(UtterancePool& pool) {
  for (auto& [spk, utts] : pool.speakers)
    for (auto& u : utts)
      if (!u.audio) u.audio = std::make_shared<const Waveform>(load_wav(u.path));
}

/// One wav path per line (noise or RIR lists); relative paths resolve
/// against the list's directory.
inline std::vector<Waveform> load_wav_list(const std::string& list) {
  std::ifstream is(list);
  if (!is) throw InputError("cannot open wav list: " + list);
  const auto slash = list.find_last_of('/');
  const std::string base = slash == std::string::npos ? "" : list.substr(0, slash);
  std::vector<Waveform> out;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    out.push_back(load_wav(!base.empty() && line[0] != '/' ? base + "/" + line : line));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class RirMode { mixture, per_speaker };

struct SimConfig {
  std::size_t n_speakers = 2;
  std::size_t utts_min = 10;
  std::size_t utts_max = 20;
  double gap_mean_beta = 2.0;  // seconds
  double min_utt_len = 0.0;
  std::vector<double> snr_db = {10.0, 15.0, 20.0};
  bool use_noise = false;
  bool use_rir = false;
  RirMode rir_mode = RirMode::mixture;
  std::string noise_list;
  std::string rir_list;
  std::size_t n_mixtures = 100;

  void validate() const {
    if (n_speakers != 2) throw ConfigError("sim: only n_speakers = 2 is supported");
    if (utts_min == 0 || utts_min > utts_max) throw ConfigError("sim: need 1 <= utts_min <= utts_max");
    if (!(gap_mean_beta >= 0.0) || !std::isfinite(gap_mean_beta)) throw ConfigError("sim: gap_mean_beta must be >= 0");
    if (!(min_utt_len >= 0.0)) throw ConfigError("sim: min_utt_len must be >= 0");
    if (use_noise && snr_db.empty()) throw ConfigError("sim: snr_db choices are empty");
    for (double s : snr_db)
      if (std::isnan(s)) throw ConfigError("sim: snr_db must be a number");
  }
};

inline void to_json(nlohmann::json& j, const SimConfig& c) {
  j = nlohmann::json{{"n_speakers", c.n_speakers},
                     {"utts_min", c.utts_min},
                     {"utts_max", c.utts_max},
                     {"gap_mean_beta", c.gap_mean_beta},
                     {"min_utt_len", c.min_utt_len},
                     {"snr_db", c.snr_db},
                     {"use_noise", c.use_noise},
                     {"use_rir", c.use_rir},
                     {"rir_mode", c.rir_mode == RirMode::mixture ? "mixture" : "per_speaker"},
                     {"noise_list", c.noise_list},
                     {"rir_list", c.rir_list},
                     {"n_mixtures", c.n_mixtures}};
}

// ---------------------------------------------------------------------------
// Mixtures
// ---------------------------------------------------------------------------

struct SimulatedMixture {
  Waveform waveform;
  Annotation annotation;
  std::vector<Waveform> tracks;  // per selected speaker, before summation
  std::vector<double> gaps;      // every sampled silence gap, seconds
};

inline std::size_t seconds_to_samples(double s, int rate) {
  return static_cast<std::size_t>(std::llround(s * static_cast<double>(rate)));
}

inline const Waveform& utterance_audio(const Utterance& u, std::shared_ptr<const Waveform>& scratch) {
  if (u.audio) return *u.audio;
  scratch = std::make_shared<const Waveform>(load_wav(u.path));
  return *scratch;
}

/// Picks two distinct speakers, then for each speaker lays n utterances on
/// its own track, each preceded by an exponential gap measured from the end
/// of that speaker's previous utterance (the first one from t=0). Gaps are
/// rounded to whole samples so annotation times are sample-exact.
inline SimulatedMixture simulate_mixture(const UtterancePool& pool, const SimConfig& cfg, Rng& rng,
                                         const std::string& recording = "mix") {
  cfg.validate();
  if (pool.speakers.size() < 2) {
    throw InputError("simulate: pool '" + pool.manifest + "' has " + std::to_string(pool.speakers.size()) +
                     " speaker(s), need 2");
  }
  std::vector<const std::vector<Utterance>*> spk;
  for (const auto& [id, v] : pool.speakers) spk.push_back(&v);
  const std::uint64_t n = spk.size();
  const auto a = static_cast<std::size_t>(rng.uniform_int(0, n - 1));
  auto b = static_cast<std::size_t>(rng.uniform_int(0, n - 2));
  if (b >= a) ++b;

  SimulatedMixture m;
  m.annotation.recording = recording;
  int rate = 0;
  for (std::size_t which : {a, b}) {
    const auto& utts = *spk[which];
    const auto count = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::uint64_t>(cfg.utts_min), static_cast<std::uint64_t>(cfg.utts_max)));
    Waveform track;
    std::size_t cursor = 0;
    for (std::size_t k = 0; k < count; ++k) {
      const Utterance& u = utts[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::uint64_t>(utts.size()) - 1))];
      std::shared_ptr<const Waveform> scratch;
      const Waveform& w = utterance_audio(u, scratch);
      if (rate == 0) rate = w.sample_rate;
      if (w.sample_rate != rate) throw InputError("simulate: mixed sample rates in pool ('" + u.path + "')");
      const double gap = rng.exponential(cfg.gap_mean_beta);
      m.gaps.push_back(gap);
      cursor += seconds_to_samples(gap, rate);
      if (track.samples.size() < cursor + w.samples.size()) track.samples.resize(cursor + w.samples.size(), 0.0);
      std::copy(w.samples.begin(), w.samples.end(), track.samples.begin() + static_cast<std::ptrdiff_t>(cursor));
      m.annotation.segments.push_back({u.speaker, static_cast<double>(cursor) / rate,
                                       static_cast<double>(cursor + w.samples.size()) / rate});
      cursor += w.samples.size();
    }
    track.sample_rate = rate;
    m.tracks.push_back(std::move(track));
  }
  const std::size_t len = std::max(m.tracks[0].samples.size(), m.tracks[1].samples.size());
  m.waveform.sample_rate = rate;
  m.waveform.samples.assign(len, 0.0);
  for (const auto& t : m.tracks)
    for (std::size_t i = 0; i < t.samples.size(); ++i) m.waveform.samples[i] += t.samples[i];
  m.annotation.duration = static_cast<double>(len) / rate;
  return m;
}

/// Full convolution truncated to the input length.
inline Waveform convolve_truncated(const Waveform& x, const Waveform& h) {
  Waveform y;
  y.sample_rate = x.sample_rate;
  y.samples.assign(x.samples.size(), 0.0);
  for (std::size_t i = 0; i < x.samples.size(); ++i) {
    if (x.samples[i] == 0.0) continue;
    const std::size_t kmax = std::min(h.samples.size(), x.samples.size() - i);
    for (std::size_t k = 0; k < kmax; ++k) y.samples[i + k] += x.samples[i] * h.samples[k];
  }
  return y;
}

inline constexpr double kMaxSample = 32767.0 / 32768.0;

/// Mean power over the samples where `region` is nonzero.
inline double region_power(const std::vector<double>& x, const std::vector<double>& region) {
  double p = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (region[i] != 0.0) {
      p += x[i] * x[i];
      ++n;
    }
  }
  return n == 0 ? 0.0 : p / static_cast<double>(n);
}

/// Optional RIR (full convolution, truncated), then a looped noise clip
/// scaled to `snr_db` over the nonzero-signal region, then clipping to
/// [-1, 32767/32768]. snr_db = +inf disables noise. `noise_gain_out`
/// receives the applied noise scale.
inline Waveform augment_mixture(const Waveform& w, const std::vector<Waveform>& noise_pool,
                                const std::vector<Waveform>& rir_pool, double snr_db, Rng& rng,
                                double* noise_gain_out = nullptr) {
  Waveform out = w;
  if (!rir_pool.empty()) {
    const auto& h = rir_pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::uint64_t>(rir_pool.size()) - 1))];
    out = convolve_truncated(out, h);
  }
  if (noise_gain_out) *noise_gain_out = 0.0;
  if (std::isinf(snr_db) && snr_db > 0.0) {
    if (rir_pool.empty()) return w;
  } else {
    if (noise_pool.empty()) throw ConfigError("augment: noise requested but the noise pool is empty");
    const auto& nz =
        noise_pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::uint64_t>(noise_pool.size()) - 1))];
    if (nz.samples.empty()) throw InputError("augment: empty noise clip");
    std::vector<double> noise(out.samples.size());
    for (std::size_t i = 0; i < noise.size(); ++i) noise[i] = nz.samples[i % nz.samples.size()];
    const double ps = region_power(out.samples, out.samples);
    const double pn = region_power(noise, out.samples);
    if (ps > 0.0) {
      if (!(pn > 0.0)) throw InputError("augment: noise clip is silent over the speech region");
      const double gain = std::sqrt(ps / (pn * std::pow(10.0, snr_db / 10.0)));
      for (std::size_t i = 0; i < noise.size(); ++i) out.samples[i] += gain * noise[i];
      if (noise_gain_out) *noise_gain_out = gain;
    }
  }
  for (double& v : out.samples) v = std::clamp(v, -1.0, kMaxSample);
  return out;
}

struct AugmentPools {
  std::vector<Waveform> noise;
  std::vector<Waveform> rir;
};

/// Mixture `index` of a corpus: its own child stream, so any generation order
/// gives the same corpus.
inline SimulatedMixture simulate_indexed(const UtterancePool& pool, const SimConfig& cfg, const AugmentPools& aug,
                                         std::uint64_t corpus_seed, std::size_t index, const std::string& prefix) {
  Rng rng(derive_seed(corpus_seed, index));
  char id[64];
  std::snprintf(id, sizeof id, "%s_%06zu", prefix.c_str(), index);
  SimulatedMixture m = simulate_mixture(pool, cfg, rng, id);
  if (cfg.use_rir && aug.rir.empty()) throw ConfigError("sim: use_rir set but the RIR pool is empty");
  std::vector<Waveform> rirs = cfg.use_rir ? aug.rir : std::vector<Waveform>{};
  if (cfg.use_rir && cfg.rir_mode == RirMode::per_speaker) {
    std::fill(m.waveform.samples.begin(), m.waveform.samples.end(), 0.0);
    for (const auto& t : m.tracks) {
      const auto& h = rirs[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::uint64_t>(rirs.size()) - 1))];
      const Waveform r = convolve_truncated(t, h);
      for (std::size_t i = 0; i < r.samples.size(); ++i) m.waveform.samples[i] += r.samples[i];
    }
    rirs.clear();
  }
  double snr = std::numeric_limits<double>::infinity();
  if (cfg.use_noise) snr = cfg.snr_db[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::uint64_t>(cfg.snr_db.size()) - 1))];
  m.waveform = augment_mixture(m.waveform, cfg.use_noise ? aug.noise : std::vector<Waveform>{}, rirs, snr, rng);
  return m;
}

// ---------------------------------------------------------------------------
// Corpus statistics
// ---------------------------------------------------------------------------

struct CorpusStats {
  std::size_t recordings = 0;
  double average_duration = 0.0;  // seconds
  double overlap_ratio = 0.0;     // percent of union speech time
  double total_duration = 0.0;    // hours
  double speech_time = 0.0;       // seconds, union over speakers
  double overlap_time = 0.0;      // seconds, >= 2 active
};

/// Recording length used for statistics: the annotation duration, or the
/// latest segment end when that is larger (RTTM input).
inline double recording_length(const Annotation& a) { return std::max(a.duration, a.max_end()); }

inline CorpusStats corpus_stats(const std::vector<Annotation>& corpus) {
  if (corpus.empty()) throw InputError("corpus_stats: empty corpus");
  CorpusStats s;
  s.recordings = corpus.size();
  double total = 0.0;
  for (const auto& a : corpus) {
    const double len = recording_length(a);
    total += len;
    for (const auto& r : activity_runs(a, len)) {
      if (r.active >= 1) s.speech_time += r.end - r.start;
      if (r.active >= 2) s.overlap_time += r.end - r.start;
    }
  }
  s.average_duration = total / static_cast<double>(corpus.size());
  s.total_duration = total / 3600.0;
  s.overlap_ratio = s.speech_time > 0.0 ? 100.0 * s.overlap_time / s.speech_time : 0.0;
  return s;
}

inline std::string format_stats(const std::string& corpus, double min_utt_len, const CorpusStats& s) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "corpus\tmin_length_s\trecordings\tavg_duration_s\toverlap_ratio_pct\ttotal_duration_h\n"
                                 "%s\t%.2f\t%zu\t%.3f\t%.3f\t%.6f\n",
                corpus.c_str(), min_utt_len, s.recordings, s.average_duration, s.overlap_ratio, s.total_duration);
  return buf;
}

// ---------------------------------------------------------------------------
// Synthetic pool
// ---------------------------------------------------------------------------

/// Deterministic stand-in for real speech: each speaker is a harmonic tone
/// with its own fundamental and spectral tilt plus a little noise, split
/// into utterances of 0.8-2.5 s. About `seconds` of audio in total.
inline std::vector<Utterance> synthetic_utterances(std::uint64_t seed, std::size_t n_speakers = 4, double seconds = 30.0,
                                                   int rate = kSampleRate) {
  static constexpr double kF0[] = {110.0, 175.0, 260.0, 390.0, 145.0, 215.0, 320.0, 480.0};
  static constexpr double kTilt[] = {0.9, 0.6, 0.75, 0.45, 0.8, 0.5, 0.7, 0.55};
  if (n_speakers == 0 || n_speakers > 8) throw ConfigError("synthetic pool: 1..8 speakers");
  Rng rng(seed);
  std::vector<Utterance> out;
  const double budget = seconds / static_cast<double>(n_speakers);
  for (std::size_t s = 0; s < n_speakers; ++s) {
    char spk[16];
    std::snprintf(spk, sizeof spk, "spk%02zu", s);
    double used = 0.0;
    std::size_t k = 0;
    while (used < budget - 0.4) {
      const double want = std::min(rng.uniform(0.8, 2.5), std::max(0.8, budget - used));
      const std::size_t n = seconds_to_samples(want, rate);
      auto w = std::make_shared<Waveform>();
      w->sample_rate = rate;
      w->samples.resize(n);
      const double f0 = kF0[s] * rng.uniform(0.97, 1.03);
      const std::size_t ramp = static_cast<std::size_t>(rate / 100);
      for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / rate;
        double v = 0.0, amp = 1.0;
        for (int h = 1; h * f0 < 0.45 * rate; ++h, amp *= kTilt[s]) v += amp * std::sin(2.0 * M_PI * h * f0 * t);
        const double env = std::min({1.0, static_cast<double>(i) / ramp, static_cast<double>(n - 1 - i) / ramp});
        w->samples[i] = std::round((0.12 * env * v + 0.01 * rng.normal()) * 32768.0) / 32768.0;
      }
      char path[64];
      std::snprintf(path, sizeof path, "%s_%03zu.wav", spk, k++);
      out.push_back({spk, path, static_cast<double>(n) / rate, std::move(w)});
      used += static_cast<double>(n) / rate;
    }
  }
  return out;
}

/// Low-passed white noise clip.
inline Waveform synthetic_noise(std::uint64_t seed, double seconds = 5.0, int rate = kSampleRate) {
  Rng rng(seed);
  Waveform w;
  w.sample_rate = rate;
  w.samples.resize(seconds_to_samples(seconds, rate));
  double prev = 0.0;
  for (double& v : w.samples) {
    prev = 0.7 * prev + 0.3 * rng.normal();
    v = std::round(std::clamp(0.1 * prev, -1.0, kMaxSample) * 32768.0) / 32768.0;
  }
  return w;
}

/// Writes the utterances as wavs under `dir` plus `dir/manifest.tsv`.
inline void write_pool(const std::string& dir, const std::vector<Utterance>& utts) {
  std::ofstream man(dir + "/manifest.tsv");
  if (!man) throw InputError("cannot write manifest under " + dir);
  for (const auto& u : utts) {
    write_wav(dir + "/" + u.path, *u.audio);
    char dur[32];
    std::snprintf(dur, sizeof dur, "%.6f", u.duration);
    man << u.speaker << '\t' << u.path << '\t' << dur << '\n';
  }
}

}  // namespace eend
