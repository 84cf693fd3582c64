// Copyright 2026 The EEND Lab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Slow, independent reference computations shared by the unit tests and the
// acceptance runner. None of them call into the library under test.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

namespace oracle {

/// Transport cost between uniform empirical distributions by the north-west
/// corner rule on sorted values, which is optimal on the line.
inline double transport_nw_corner(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  // Integer masses: each a-atom carries m units, each b-atom n units.
  std::vector<std::size_t> sa(a.size(), b.size()), sb(b.size(), a.size());
  std::size_t i = 0, j = 0;
  double cost = 0.0;
  while (i < a.size() && j < b.size()) {
    const std::size_t f = std::min(sa[i], sb[j]);
    cost += static_cast<double>(f) * std::abs(a[i] - b[j]);
    sa[i] -= f;
    sb[j] -= f;
    if (sa[i] == 0) ++i;
    if (sb[j] == 0) ++j;
  }
  return cost / static_cast<double>(a.size() * b.size());
}

/// Exhaustive search over flows. Both samples are expanded to L = lcm(n, m)
/// equal atoms; with equal uniform masses an optimal flow is a permutation
/// (Birkhoff), so enumerating all L! matchings is exact. Keep L <= 8.
inline double transport_brute(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t L = std::lcm(a.size(), b.size());
  std::vector<double> x, y;
  for (double v : a) x.insert(x.end(), L / a.size(), v);
  for (double v : b) y.insert(y.end(), L / b.size(), v);
  std::vector<std::size_t> p(L);
  std::iota(p.begin(), p.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double c = 0.0;
    for (std::size_t k = 0; k < L; ++k) c += std::abs(x[k] - y[p[k]]);
    best = std::min(best, c / static_cast<double>(L));
  } while (std::next_permutation(p.begin(), p.end()));
  return best;
}

struct Seg {
  std::string speaker;
  double start, end;
};

/// Per-millisecond activity of each speaker, sampled at cell centres.
inline std::map<std::string, std::vector<char>> ms_grid(const std::vector<Seg>& segs, std::size_t cells) {
  std::map<std::string, std::vector<char>> g;
  for (const auto& s : segs) {
    auto& v = g[s.speaker];
    v.resize(cells, 0);
    for (std::size_t t = 0; t < cells; ++t) {
      const double c = (static_cast<double>(t) + 0.5) / 1000.0;
      if (c >= s.start && c < s.end) v[t] = 1;
    }
  }
  return g;
}

/// Lengths (s) of maximal runs on the 1 ms grid where the active count
/// satisfies `pred`.
template <class Pred>
std::vector<double> grid_runs(const std::vector<Seg>& segs, double duration, Pred pred) {
  const auto cells = static_cast<std::size_t>(std::llround(duration * 1000.0));
  const auto g = ms_grid(segs, cells);
  std::vector<double> out;
  std::size_t run = 0;
  for (std::size_t t = 0; t <= cells; ++t) {
    int n = 0;
    if (t < cells)
      for (const auto& [k, v] : g) n += v[t];
    if (t < cells && pred(n)) {
      ++run;
    } else if (run) {
      out.push_back(run / 1000.0);
      run = 0;
    }
  }
  return out;
}

struct DerParts {
  double scored = 0.0, miss = 0.0, false_alarm = 0.0, confusion = 0.0;
  double der() const { return scored > 0.0 ? (miss + false_alarm + confusion) / scored : 0.0; }
};

/// Diarization error on a 1 ms grid for <= 2 reference and <= 2 hypothesis
/// speakers. Cells within `collar` of a reference boundary are not scored.
/// The speaker map is the better of the (at most two) one-to-one mappings.
inline DerParts der_ms_grid(const std::vector<Seg>& ref, const std::vector<Seg>& hyp, double duration,
                            double collar) {
  const auto cells = static_cast<std::size_t>(std::llround(duration * 1000.0));
  const auto R = ms_grid(ref, cells), H = ms_grid(hyp, cells);
  std::vector<const std::vector<char>*> r, h;
  for (const auto& [k, v] : R) r.push_back(&v);
  for (const auto& [k, v] : H) h.push_back(&v);
  std::vector<char> scored(cells, 1);
  for (const auto& s : ref)
    for (double b : {s.start, s.end})
      for (std::size_t t = 0; t < cells; ++t) {
        const double c = (static_cast<double>(t) + 0.5) / 1000.0;
        if (c > b - collar && c < b + collar) scored[t] = 0;
      }
  // Candidate maps: ref index -> hyp index (or -1), one-to-one.
  std::vector<std::vector<int>> maps;
  std::vector<int> hidx(std::max(r.size(), h.size()));
  std::iota(hidx.begin(), hidx.end(), 0);
  do {
    std::vector<int> m(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) m[i] = hidx[i] < static_cast<int>(h.size()) ? hidx[i] : -1;
    maps.push_back(m);
  } while (std::next_permutation(hidx.begin(), hidx.end()));
  DerParts best;
  double best_err = std::numeric_limits<double>::infinity();
  for (const auto& m : maps) {
    DerParts d;
    for (std::size_t t = 0; t < cells; ++t) {
      if (!scored[t]) continue;
      int nr = 0, nh = 0, matched = 0;
      for (const auto* v : r) nr += (*v)[t];
      for (const auto* v : h) nh += (*v)[t];
      for (std::size_t i = 0; i < r.size(); ++i)
        if ((*r[i])[t] && m[i] >= 0 && (*h[m[i]])[t]) ++matched;
      d.scored += nr;
      d.miss += std::max(0, nr - nh);
      d.false_alarm += std::max(0, nh - nr);
      d.confusion += std::min(nr, nh) - matched;
    }
    const double err = d.miss + d.false_alarm + d.confusion;
    if (err < best_err) {
      best_err = err;
      best = d;
    }
  }
  for (double* x : {&best.scored, &best.miss, &best.false_alarm, &best.confusion}) *x /= 1000.0;
  return best;
}

}  // namespace oracle
