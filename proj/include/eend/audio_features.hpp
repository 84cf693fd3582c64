// Copyright 2026 The EEND Lab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Telephone-band front end: 8 kHz PCM16 WAV I/O, log-Mel filterbanks
// (25 ms window, 10 ms shift), SpecAugment masking, 15-frame stacking with
// decimation by ten, and the EENDFEAT feature archive.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "eend/binary_io.hpp"
#include "eend/errors.hpp"
#include "eend/numerics.hpp"

namespace eend {

inline constexpr int kSampleRate = 8000;
inline constexpr std::size_t kFrameLength = 200;  // 25 ms
inline constexpr std::size_t kFrameShift = 80;    // 10 ms
inline constexpr std::size_t kFftSize = 256;
inline constexpr double kLogFloor = 1e-10;
inline constexpr double kRawFrameShift = 0.010;
inline constexpr double kSubsampledFrameShift = 0.100;
inline constexpr std::size_t kSubsampling = 10;
inline constexpr std::size_t kContext = 7;

struct Waveform {
  std::vector<double> samples;  // PCM16 / 32768, in [-1, 1)
  int sample_rate = kSampleRate;

  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
};

// ---------------------------------------------------------------------------
// WAV
// ---------------------------------------------------------------------------

inline std::int16_t to_pcm16(double v) {
  const double s = std::nearbyint(v * 32768.0);
  return static_cast<std::int16_t>(std::clamp(s, -32768.0, 32767.0));
}

inline Waveform read_wav(std::istream& is) {
  using binary::get_le;
  if (binary::get_bytes(is, 4, "RIFF tag") != "RIFF") throw FormatError("wav: missing RIFF tag");
  get_le<std::uint32_t>(is, "RIFF size");
  if (binary::get_bytes(is, 4, "WAVE tag") != "WAVE") throw FormatError("wav: missing WAVE tag");
  bool have_fmt = false;
  Waveform w;
  while (true) {
    const std::string id = binary::get_bytes(is, 4, "chunk id");
    const auto size = get_le<std::uint32_t>(is, "chunk size");
    if (id == "fmt ") {
      const auto format = get_le<std::uint16_t>(is, "audio format");
      const auto channels = get_le<std::uint16_t>(is, "channels");
      const auto rate = get_le<std::uint32_t>(is, "sample rate");
      get_le<std::uint32_t>(is, "byte rate");
      get_le<std::uint16_t>(is, "block align");
      const auto bits = get_le<std::uint16_t>(is, "bits per sample");
      if (format != 1) throw FormatError("wav: audio format " + std::to_string(format) + " (expected PCM = 1)");
      if (channels != 1) throw FormatError("wav: channels = " + std::to_string(channels) + " (expected 1)");
      if (rate != static_cast<std::uint32_t>(kSampleRate)) {
        throw FormatError("wav: sample rate = " + std::to_string(rate) + " (expected 8000)");
      }
      if (bits != 16) throw FormatError("wav: bits per sample = " + std::to_string(bits) + " (expected 16)");
      if (size > 16) binary::get_bytes(is, size - 16, "fmt extension");
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw FormatError("wav: data chunk before fmt chunk");
      const std::size_t n = size / 2;
      w.samples.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto raw = static_cast<std::int16_t>(get_le<std::uint16_t>(is, "sample"));
        w.samples[i] = static_cast<double>(raw) / 32768.0;
      }
      return w;
    } else {
      binary::get_bytes(is, size + (size & 1u), "unknown chunk");
    }
  }
}

inline Waveform load_wav(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open wav file: " + path);
  try {
    return read_wav(is);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

inline void write_wav(std::ostream& os, const Waveform& w) {
  using binary::put_le;
  const auto data_bytes = static_cast<std::uint32_t>(w.samples.size() * 2);
  binary::put_bytes(os, "RIFF");
  put_le<std::uint32_t>(os, 36 + data_bytes);
  binary::put_bytes(os, "WAVEfmt ");
  put_le<std::uint32_t>(os, 16);
  put_le<std::uint16_t>(os, 1);
  put_le<std::uint16_t>(os, 1);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(w.sample_rate));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(w.sample_rate) * 2);
  put_le<std::uint16_t>(os, 2);
  put_le<std::uint16_t>(os, 16);
  binary::put_bytes(os, "data");
  put_le<std::uint32_t>(os, data_bytes);
  for (double s : w.samples) put_le<std::uint16_t>(os, static_cast<std::uint16_t>(to_pcm16(s)));
}

inline void write_wav(const std::string& path, const Waveform& w) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write wav file: " + path);
  write_wav(os, w);
}

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

/// Time-major feature grid (frames x dims) with its frame shift in seconds.
struct FeatureMatrix {
  Matrix values;
  double frame_shift = kRawFrameShift;

  std::size_t frames() const { return values.rows(); }
  std::size_t dims() const { return values.cols(); }
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Precomputed analysis tables for one mel configuration. Hann window
/// (symmetric), 256-point DFT of each 200-sample frame, power spectrum,
/// triangular filters equally spaced on the HTK mel scale over 0-4000 Hz.
class LogMelExtractor {
 public:
  explicit LogMelExtractor(std::size_t n_mels) : n_mels_(n_mels) {
    if (n_mels != 23 && n_mels != 80) {
      throw ConfigError("logmel: n_mels must be 23 or 80, got " + std::to_string(n_mels));
    }
    window_.resize(kFrameLength);
    constexpr double pi = 3.14159265358979323846;
    for (std::size_t n = 0; n < kFrameLength; ++n) {
      window_[n] = 0.5 - 0.5 * std::cos(2.0 * pi * static_cast<double>(n) / (kFrameLength - 1));
    }
    const std::size_t bins = kFftSize / 2 + 1;
    cos_.assign(bins * kFrameLength, 0.0);
    sin_.assign(bins * kFrameLength, 0.0);
    for (std::size_t k = 0; k < bins; ++k) {
      for (std::size_t n = 0; n < kFrameLength; ++n) {
        // Reduce k*n modulo the FFT size so the angle stays exact.
        const double a = 2.0 * pi * static_cast<double>((k * n) % kFftSize) / kFftSize;
        cos_[k * kFrameLength + n] = std::cos(a);
        sin_[k * kFrameLength + n] = std::sin(a);
      }
    }
    const double mel_lo = hz_to_mel(0.0), mel_hi = hz_to_mel(kSampleRate / 2.0);
    const double step = (mel_hi - mel_lo) / static_cast<double>(n_mels + 1);
    centers_hz_.resize(n_mels);
    filters_ = Matrix(n_mels, bins);
    for (std::size_t m = 0; m < n_mels; ++m) {
      const double left = mel_lo + step * m, center = left + step, right = center + step;
      centers_hz_[m] = mel_to_hz(center);
      for (std::size_t k = 0; k < bins; ++k) {
        const double mel = hz_to_mel(static_cast<double>(k) * kSampleRate / kFftSize);
        double w = 0.0;
        if (mel > left && mel <= center) w = (mel - left) / (center - left);
        else if (mel > center && mel < right) w = (right - mel) / (right - center);
        filters_(m, k) = w;
      }
    }
  }

  std::size_t n_mels() const { return n_mels_; }
  const std::vector<double>& centers_hz() const { return centers_hz_; }
  const Matrix& filters() const { return filters_; }

  FeatureMatrix operator()(const Waveform& w) const {
    if (w.sample_rate != kSampleRate) {
      throw InputError("logmel: sample rate " + std::to_string(w.sample_rate) + " != 8000");
    }
    if (w.samples.size() < kFrameLength) {
      throw InputError("logmel: waveform has " + std::to_string(w.samples.size()) +
                       " samples, fewer than one 200-sample frame");
    }
    const std::size_t T = (w.samples.size() - kFrameLength) / kFrameShift + 1;
    const std::size_t bins = kFftSize / 2 + 1;
    FeatureMatrix out{Matrix(T, n_mels_), kRawFrameShift};
    std::vector<double> frame(kFrameLength), power(bins);
    for (std::size_t t = 0; t < T; ++t) {
      const double* src = w.samples.data() + t * kFrameShift;
      for (std::size_t n = 0; n < kFrameLength; ++n) frame[n] = src[n] * window_[n];
      for (std::size_t k = 0; k < bins; ++k) {
        double re = 0.0, im = 0.0;
        const double* c = &cos_[k * kFrameLength];
        const double* s = &sin_[k * kFrameLength];
        for (std::size_t n = 0; n < kFrameLength; ++n) {
          re += frame[n] * c[n];
          im -= frame[n] * s[n];
        }
        power[k] = re * re + im * im;
      }
      for (std::size_t m = 0; m < n_mels_; ++m) {
        double e = 0.0;
        for (std::size_t k = 0; k < bins; ++k) e += filters_(m, k) * power[k];
        out.values(t, m) = std::log(std::max(e, kLogFloor));
      }
    }
    return out;
  }

 private:
  std::size_t n_mels_;
  std::vector<double> window_, cos_, sin_, centers_hz_;
  Matrix filters_;
};

inline FeatureMatrix logmel(const Waveform& w, std::size_t n_mels) { return LogMelExtractor(n_mels)(w); }

// ---------------------------------------------------------------------------
// SpecAugment
// ---------------------------------------------------------------------------

struct SpecAugmentConfig {
  std::size_t n_freq_masks = 2;
  std::size_t max_freq_width = 2;
  std::size_t n_time_masks = 2;
  std::size_t max_time_width = 1200;
  double fill = 0.0;
};

struct MaskBand {
  std::size_t start = 0, width = 0;
};

struct SpecAugmentMasks {
  std::vector<MaskBand> freq, time;
};

/// Frequency masks first, then time masks; each mask draws its width
/// uniformly from {0..max} (capped by the axis length) and then its start
/// uniformly from the positions where it fits.
inline FeatureMatrix spec_augment(const FeatureMatrix& f, const SpecAugmentConfig& cfg, Rng& rng,
                                  SpecAugmentMasks* masks_out = nullptr) {
  FeatureMatrix out = f;
  const std::size_t T = f.frames(), F = f.dims();
  SpecAugmentMasks masks;
  auto draw = [&rng](std::size_t max_width, std::size_t axis) {
    const std::size_t w = static_cast<std::size_t>(rng.uniform_int(0, std::min(max_width, axis)));
    const std::size_t start = static_cast<std::size_t>(rng.uniform_int(0, axis - w));
    return MaskBand{start, w};
  };
  for (std::size_t i = 0; i < cfg.n_freq_masks; ++i) {
    const MaskBand b = draw(cfg.max_freq_width, F);
    masks.freq.push_back(b);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = b.start; c < b.start + b.width; ++c) out.values(t, c) = cfg.fill;
  }
  for (std::size_t i = 0; i < cfg.n_time_masks; ++i) {
    const MaskBand b = draw(cfg.max_time_width, T);
    masks.time.push_back(b);
    for (std::size_t t = b.start; t < b.start + b.width; ++t)
      for (std::size_t c = 0; c < F; ++c) out.values(t, c) = cfg.fill;
  }
  if (masks_out) *masks_out = std::move(masks);
  return out;
}

// ---------------------------------------------------------------------------
// Frame stacking
// ---------------------------------------------------------------------------

/// Output frame j is the +-7 frame context of input frame 10*j (edges
/// replicate the nearest frame), giving 15*F dims at a 100 ms shift.
inline FeatureMatrix stack_and_decimate(const FeatureMatrix& f) {
  const std::size_t T = f.frames(), F = f.dims();
  const std::size_t width = 2 * kContext + 1;
  const std::size_t To = (T + kSubsampling - 1) / kSubsampling;
  FeatureMatrix out{Matrix(To, width * F), kSubsampledFrameShift};
  for (std::size_t j = 0; j < To; ++j) {
    const auto center = static_cast<std::ptrdiff_t>(j * kSubsampling);
    for (std::size_t k = 0; k < width; ++k) {
      const std::ptrdiff_t src = std::clamp<std::ptrdiff_t>(
          center + static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(kContext), 0,
          static_cast<std::ptrdiff_t>(T) - 1);
      const auto row = f.values.row(static_cast<std::size_t>(src));
      std::copy(row.begin(), row.end(), &out.values(j, k * F));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature archive
// ---------------------------------------------------------------------------
//
//   "EENDFEAT" | u32 version | u64 frames | u64 dims | f64 frame_shift |
//   frames*dims f32 values, row-major; all little-endian.

inline constexpr std::uint32_t kFeatureArchiveVersion = 1;

inline void write_features(std::ostream& os, const FeatureMatrix& f) {
  binary::put_bytes(os, "EENDFEAT");
  binary::put_le<std::uint32_t>(os, kFeatureArchiveVersion);
  binary::put_le<std::uint64_t>(os, f.frames());
  binary::put_le<std::uint64_t>(os, f.dims());
  binary::put_f64(os, f.frame_shift);
  for (double v : f.values.storage()) binary::put_f32(os, static_cast<float>(v));
}

inline FeatureMatrix read_features(std::istream& is) {
  if (binary::get_bytes(is, 8, "magic") != "EENDFEAT") throw FormatError("feature archive: bad magic");
  const auto version = binary::get_le<std::uint32_t>(is, "version");
  if (version != kFeatureArchiveVersion) {
    throw FormatError("feature archive: unsupported version " + std::to_string(version));
  }
  const auto T = binary::get_le<std::uint64_t>(is, "frames");
  const auto F = binary::get_le<std::uint64_t>(is, "dims");
  FeatureMatrix f;
  f.frame_shift = binary::get_f64(is, "frame_shift");
  f.values = Matrix(T, F);
  for (double& v : f.values.storage()) v = binary::get_f32(is, "payload");
  return f;
}

inline void save_features(const std::string& path, const FeatureMatrix& f) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write feature archive: " + path);
  write_features(os, f);
}

inline FeatureMatrix load_features(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open feature archive: " + path);
  try {
    return read_features(is);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

}  // namespace eend
