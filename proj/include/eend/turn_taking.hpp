// Copyright 2026 The EEND Lab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Overlap / silence duration distributions and their 1-D earth mover's
// distance.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "eend/annotation.hpp"
#include "eend/errors.hpp"

namespace eend {

enum class RegionKind { overlap, silence };

inline const char* to_string(RegionKind k) { return k == RegionKind::overlap ? "overlap" : "silence"; }

struct DurationSample {
  RegionKind kind = RegionKind::overlap;
  std::vector<double> durations;  // seconds, each > 0
};

struct Regions {
  DurationSample overlaps{RegionKind::overlap, {}};
  DurationSample silences{RegionKind::silence, {}};
};

/// Maximal >=2-active and 0-active intervals within [0, duration].
inline Regions extract_regions(const Annotation& a) {
  for (const auto& s : a.segments) {
    if (s.start < 0.0 || s.end > a.duration) {
      throw InputError("extract_regions: segment [" + std::to_string(s.start) + ", " + std::to_string(s.end) +
                       ") of '" + a.recording + "' lies outside [0, " + std::to_string(a.duration) + "]");
    }
  }
  Regions r;
  // activity_runs merges equal-count neighbours; >=2 runs with different
  // counts (2 then 3) are joined here into one maximal overlap.
  double open_start = -1.0, open_end = -1.0;
  for (const auto& run : activity_runs(a, a.duration)) {
    if (run.active == 0) r.silences.durations.push_back(run.end - run.start);
    if (run.active >= 2) {
      if (open_start >= 0.0 && open_end == run.start) {
        open_end = run.end;
      } else {
        if (open_start >= 0.0) r.overlaps.durations.push_back(open_end - open_start);
        open_start = run.start;
        open_end = run.end;
      }
    }
  }
  if (open_start >= 0.0) r.overlaps.durations.push_back(open_end - open_start);
  return r;
}

/// Wasserstein-1 distance between the empirical distributions of `a` and `b`
/// (each sample carries equal mass): the integral of |F_a - F_b|.
inline double emd_1d(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) throw InputError("emd_1d: empty duration sample");
  std::vector<double> x = a, y = b;
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  const double na = static_cast<double>(x.size()), nb = static_cast<double>(y.size());
  std::size_t i = 0, j = 0;
  double prev = std::min(x[0], y[0]), total = 0.0;
  while (i < x.size() || j < y.size()) {
    const double next = j == y.size() || (i < x.size() && x[i] <= y[j]) ? x[i] : y[j];
    total += std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb) * (next - prev);
    while (i < x.size() && x[i] == next) ++i;
    while (j < y.size() && y[j] == next) ++j;
    prev = next;
  }
  return total;
}

inline double emd_1d(const DurationSample& a, const DurationSample& b) { return emd_1d(a.durations, b.durations); }

/// Histogram approximation for very large corpora: durations are replaced by
/// the centre of their `width`-second bin before the exact computation.
inline std::vector<double> bin_durations(const std::vector<double>& d, double width) {
  if (!(width > 0.0)) throw ConfigError("bin width must be > 0");
  std::vector<double> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) out[i] = (std::floor(d[i] / width) + 0.5) * width;
  return out;
}

inline constexpr double kSimilarityGamma = 0.01;

struct SimilarityReport {
  RegionKind kind = RegionKind::overlap;
  double emd = 0.0;
  double gamma = kSimilarityGamma;
  double similarity = 1.0;
};

inline SimilarityReport similarity(const DurationSample& a, const DurationSample& b, double gamma = kSimilarityGamma,
                                   double bin_width = 0.0) {
  if (a.kind != b.kind) throw InputError("similarity: comparing overlap with silence durations");
  if (!(gamma > 0.0)) throw ConfigError("similarity: gamma must be > 0");
  const double e = bin_width > 0.0 ? emd_1d(bin_durations(a.durations, bin_width), bin_durations(b.durations, bin_width))
                                   : emd_1d(a, b);
  return {a.kind, e, gamma, std::exp(-gamma * e)};
}

/// Region durations pooled over a corpus, in corpus order.
inline Regions pool_regions(const std::vector<Annotation>& corpus) {
  Regions out;
  for (const auto& a : corpus) {
    Regions r = extract_regions(a);
    out.overlaps.durations.insert(out.overlaps.durations.end(), r.overlaps.durations.begin(), r.overlaps.durations.end());
    out.silences.durations.insert(out.silences.durations.end(), r.silences.durations.begin(), r.silences.durations.end());
  }
  return out;
}

struct CorpusSimilarity {
  SimilarityReport overlap;
  SimilarityReport silence;
};

inline CorpusSimilarity compare_corpora(const std::vector<Annotation>& train, const std::vector<Annotation>& test,
                                        double gamma = kSimilarityGamma, double bin_width = 0.0) {
  if (train.empty() || test.empty()) throw InputError("compare_corpora: empty corpus");
  const Regions a = pool_regions(train), b = pool_regions(test);
  auto one = [&](const DurationSample& x, const DurationSample& y) {
    if (x.durations.empty() || y.durations.empty()) {
      throw InputError(std::string("compare_corpora: no ") + to_string(x.kind) + " regions in " +
                       (x.durations.empty() ? "the first" : "the second") + " corpus");
    }
    return similarity(x, y, gamma, bin_width);
  };
  return {one(a.overlaps, b.overlaps), one(a.silences, b.silences)};
}

inline std::string format_similarity(const CorpusSimilarity& s) {
  std::string out = "kind\temd_seconds\tgamma\tsimilarity\n";
  char buf[160];
  for (const auto* r : {&s.overlap, &s.silence}) {
    std::snprintf(buf, sizeof buf, "%s\t%.9f\t%g\t%.9f\n", to_string(r->kind), r->emd, r->gamma, r->similarity);
    out += buf;
  }
  return out;
}

}  // namespace eend
