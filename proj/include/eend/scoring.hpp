// Copyright 2026 The EEND Lab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// RTTM reading/writing and diarization error rate with a no-score collar
// around reference boundaries and an optimal one-to-one speaker mapping.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "eend/annotation.hpp"
#include "eend/errors.hpp"

namespace eend {

// ---------------------------------------------------------------------------
// RTTM
// ---------------------------------------------------------------------------

/// Parses `SPEAKER <rec> <chan> <onset> <dur> <NA> <NA> <spk> <NA> <NA>`
/// lines; other line types and blank lines are skipped.
inline AnnotationMap parse_rttm(std::istream& is) {
  AnnotationMap out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::vector<std::string> f;
    for (std::string tok; ss >> tok;) f.push_back(tok);
    if (f.empty() || f[0] != "SPEAKER") continue;
    if (f.size() < 8) throw ParseError("SPEAKER line needs at least 8 fields, got " + std::to_string(f.size()), lineno);
    double onset = 0.0, dur = 0.0;
    try {
      std::size_t used = 0;
      onset = std::stod(f[3], &used);
      if (used != f[3].size()) throw std::invalid_argument(f[3]);
      dur = std::stod(f[4], &used);
      if (used != f[4].size()) throw std::invalid_argument(f[4]);
    } catch (const std::exception&) {
      throw ParseError("malformed onset/duration '" + f[3] + "' '" + f[4] + "'", lineno);
    }
    if (!std::isfinite(onset) || !std::isfinite(dur)) throw ParseError("non-finite onset/duration", lineno);
    if (dur < 0.0) throw ParseError("negative duration " + f[4], lineno);
    if (onset < 0.0) throw ParseError("negative onset " + f[3], lineno);
    Annotation& a = out[f[1]];
    a.recording = f[1];
    a.segments.push_back({f[7], onset, onset + dur});
    a.duration = std::max(a.duration, onset + dur);
  }
  return out;
}

inline AnnotationMap load_rttm(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open rttm file: " + path);
  try {
    return parse_rttm(is);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what(), e.line());
  }
}

/// Seconds with exactly three decimals, ties rounded to even thousandths.
inline std::string format_millis(double seconds) {
  const double r = std::nearbyint(seconds * 1000.0);  // default FE_TONEAREST = half-even
  auto ms = static_cast<long long>(r);
  std::string sign;
  if (ms < 0) {
    sign = "-";
    ms = -ms;
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%lld.%03lld", sign.c_str(), ms / 1000, ms % 1000);
  return buf;
}

/// One SPEAKER line per segment, ordered by (recording, onset, speaker).
inline std::string emit_rttm(const std::vector<Annotation>& annotations) {
  struct Row {
    const std::string* rec;
    const Segment* seg;
  };
  std::vector<Row> rows;
  for (const auto& a : annotations)
    for (const auto& s : a.segments) rows.push_back({&a.recording, &s});
  std::stable_sort(rows.begin(), rows.end(), [](const Row& x, const Row& y) {
    if (*x.rec != *y.rec) return *x.rec < *y.rec;
    if (x.seg->start != y.seg->start) return x.seg->start < y.seg->start;
    if (x.seg->speaker != y.seg->speaker) return x.seg->speaker < y.seg->speaker;
    return x.seg->end < y.seg->end;
  });
  std::string out;
  for (const auto& r : rows) {
    out += "SPEAKER " + *r.rec + " 1 " + format_millis(r.seg->start) + " " + format_millis(r.seg->length()) +
           " <NA> <NA> " + r.seg->speaker + " <NA> <NA>\n";
  }
  return out;
}

inline std::string emit_rttm(const AnnotationMap& m) {
  std::vector<Annotation> v;
  for (const auto& [k, a] : m) v.push_back(a);
  return emit_rttm(v);
}

// ---------------------------------------------------------------------------
// Assignment
// ---------------------------------------------------------------------------

/// Maximum-weight perfect matching on a square matrix (Hungarian method with
/// potentials). Returns assignment[row] = column.
inline std::vector<std::size_t> hungarian_max(const std::vector<std::vector<double>>& w) {
  const std::size_t n = w.size();
  if (n == 0) return {};
  double mx = 0.0;
  for (const auto& r : w) {
    if (r.size() != n) throw InternalError("hungarian_max: matrix must be square");
    for (double v : r) mx = std::max(mx, v);
  }
  // 1-based arrays as in the classic formulation; cost = mx - weight.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = (mx - w[i0 - 1][j - 1]) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> assign(n);
  for (std::size_t j = 1; j <= n; ++j) assign[p[j] - 1] = j - 1;
  return assign;
}

/// Exhaustive search over permutations; the first maximum in lexicographic
/// order wins.
inline std::vector<std::size_t> exhaustive_max(const std::vector<std::vector<double>>& w) {
  const std::size_t n = w.size();
  std::vector<std::size_t> perm(n), best;
  std::iota(perm.begin(), perm.end(), 0);
  double best_v = -std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += w[i][perm[i]];
    if (s > best_v) {
      best_v = s;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

// ---------------------------------------------------------------------------
// DER
// ---------------------------------------------------------------------------

struct DERReport {
  std::string recording;
  double scored_speech = 0.0;
  double missed = 0.0;
  double false_alarm = 0.0;
  double confusion = 0.0;
  double der = 0.0;  // percent
  std::vector<std::pair<std::string, std::string>> mapping;  // (reference, hypothesis)

  double errors() const { return missed + false_alarm + confusion; }
};

inline double der_percent(double errors, double scored) {
  if (scored > 0.0) return 100.0 * errors / scored;
  return errors > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
}

inline std::int64_t to_millis(double seconds) { return std::llround(seconds * 1000.0); }

/// Scores on a 1 ms grid: instant k covers [k, k+1) ms. A collar of c removes
/// [b - c, b + c) around every boundary b of each reference speaker's merged
/// activity from scoring for both sides. Overlapped speech is scored.
inline DERReport der(const Annotation& ref, const Annotation& hyp, double collar = 0.25) {
  if (!(collar >= 0.0)) throw ConfigError("der: collar must be >= 0");
  DERReport rep;
  rep.recording = ref.recording;
  const auto ref_act = speaker_activity(ref);
  const auto hyp_act = speaker_activity(hyp);
  std::int64_t horizon = 0;
  for (const auto* act : {&ref_act, &hyp_act})
    for (const auto& [spk, ivs] : *act)
      for (const auto& iv : ivs) horizon = std::max(horizon, to_millis(iv.end));
  const auto N = static_cast<std::size_t>(horizon);

  auto rasterize = [N](const std::vector<Interval>& ivs) {
    std::vector<std::uint8_t> r(N, 0);
    for (const auto& iv : ivs) {
      const auto a = static_cast<std::size_t>(std::max<std::int64_t>(0, to_millis(iv.start)));
      const auto b = static_cast<std::size_t>(std::min<std::int64_t>(static_cast<std::int64_t>(N), to_millis(iv.end)));
      for (std::size_t k = a; k < b; ++k) r[k] = 1;
    }
    return r;
  };
  std::vector<std::string> ref_names, hyp_names;
  std::vector<std::vector<std::uint8_t>> R, H;
  for (const auto& [spk, ivs] : ref_act) {
    ref_names.push_back(spk);
    R.push_back(rasterize(ivs));
  }
  for (const auto& [spk, ivs] : hyp_act) {
    hyp_names.push_back(spk);
    H.push_back(rasterize(ivs));
  }

  std::vector<std::uint8_t> scored(N, 1);
  const std::int64_t c = to_millis(collar);
  if (c > 0) {
    for (const auto& [spk, ivs] : ref_act) {
      for (const auto& iv : ivs) {
        for (const double b : {iv.start, iv.end}) {
          const std::int64_t bm = to_millis(b);
          const std::int64_t lo = std::max<std::int64_t>(0, bm - c);
          const std::int64_t hi = std::min<std::int64_t>(static_cast<std::int64_t>(N), bm + c);
          for (std::int64_t k = lo; k < hi; ++k) scored[static_cast<std::size_t>(k)] = 0;
        }
      }
    }
  }

  const std::size_t nr = R.size(), nh = H.size(), n = std::max(nr, nh);
  std::vector<std::vector<double>> overlap(n, std::vector<double>(n, 0.0));
  std::int64_t scored_ms = 0, miss_ms = 0, fa_ms = 0, matched_ms = 0;
  for (std::size_t k = 0; k < N; ++k) {
    if (!scored[k]) continue;
    std::int64_t a = 0, b = 0;
    for (std::size_t i = 0; i < nr; ++i) a += R[i][k];
    for (std::size_t j = 0; j < nh; ++j) b += H[j][k];
    scored_ms += a;
    miss_ms += std::max<std::int64_t>(0, a - b);
    fa_ms += std::max<std::int64_t>(0, b - a);
    matched_ms += std::min(a, b);
    if (a == 0 || b == 0) continue;
    for (std::size_t i = 0; i < nr; ++i) {
      if (!R[i][k]) continue;
      for (std::size_t j = 0; j < nh; ++j) overlap[i][j] += H[j][k];
    }
  }
  std::int64_t correct_ms = 0;
  if (n > 0) {
    const auto assign = n <= 3 ? exhaustive_max(overlap) : hungarian_max(overlap);
    for (std::size_t i = 0; i < nr; ++i) {
      if (assign[i] < nh) {
        correct_ms += static_cast<std::int64_t>(overlap[i][assign[i]]);
        rep.mapping.emplace_back(ref_names[i], hyp_names[assign[i]]);
      }
    }
  }
  rep.scored_speech = static_cast<double>(scored_ms) / 1000.0;
  rep.missed = static_cast<double>(miss_ms) / 1000.0;
  rep.false_alarm = static_cast<double>(fa_ms) / 1000.0;
  rep.confusion = static_cast<double>(matched_ms - correct_ms) / 1000.0;
  rep.der = der_percent(rep.errors(), rep.scored_speech);
  return rep;
}

struct CorpusScore {
  std::vector<DERReport> recordings;  // ordered by recording id
  DERReport pooled;
  std::vector<std::string> skipped;
};

/// Pooled DER sums time components across recordings. Without skip_missing
/// the two recording-id sets must be identical.
inline CorpusScore score_corpus(const AnnotationMap& ref, const AnnotationMap& hyp, double collar = 0.25,
                                bool skip_missing = false) {
  CorpusScore out;
  for (const auto& [id, a] : ref)
    if (!hyp.count(id)) out.skipped.push_back(id);
  for (const auto& [id, a] : hyp)
    if (!ref.count(id)) out.skipped.push_back(id);
  if (!out.skipped.empty() && !skip_missing) {
    throw InputError("score: recording '" + out.skipped.front() +
                     "' is present in only one of reference/hypothesis (use skip mode to ignore)");
  }
  out.pooled.recording = "ALL";
  for (const auto& [id, r] : ref) {
    auto it = hyp.find(id);
    if (it == hyp.end()) continue;
    DERReport rep = der(r, it->second, collar);
    out.pooled.scored_speech += rep.scored_speech;
    out.pooled.missed += rep.missed;
    out.pooled.false_alarm += rep.false_alarm;
    out.pooled.confusion += rep.confusion;
    out.recordings.push_back(std::move(rep));
  }
  if (out.recordings.empty()) throw InputError("score: no common recordings between reference and hypothesis");
  out.pooled.der = der_percent(out.pooled.errors(), out.pooled.scored_speech);
  return out;
}

inline std::string format_der_line(const DERReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s\t%.3f\t%.3f\t%.3f\t%.3f\t%.4f\n", r.recording.c_str(), r.scored_speech, r.missed,
                r.false_alarm, r.confusion, r.der);
  return buf;
}

/// `recording\tscored\tmiss\tfa\tconf\tder`, per recording then ALL.
inline std::string format_der_table(const CorpusScore& s) {
  std::string out = "recording\tscored\tmiss\tfa\tconf\tder\n";
  for (const auto& r : s.recordings) out += format_der_line(r);
  out += format_der_line(s.pooled);
  return out;
}

}  // namespace eend
