// Copyright 2026 The EEND Lab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace eend {

struct Segment {
  std::string speaker;
  double start = 0.0;  // seconds
  double end = 0.0;    // seconds, exclusive

  double length() const { return end - start; }
  friend bool operator==(const Segment&, const Segment&) = default;
};

/// Speaker segments of one recording. `duration` is the recording length;
/// annotations read from RTTM (which has no length field) use the latest
/// segment end.
struct Annotation {
  std::string recording;
  std::vector<Segment> segments;
  double duration = 0.0;

  std::vector<std::string> speakers() const {
    std::set<std::string> s;
    for (const auto& seg : segments) s.insert(seg.speaker);
    return {s.begin(), s.end()};
  }

  double max_end() const {
    double m = 0.0;
    for (const auto& seg : segments) m = std::max(m, seg.end);
    return m;
  }
};

using AnnotationMap = std::map<std::string, Annotation>;

/// Half-open interval [start, end).
struct Interval {
  double start = 0.0, end = 0.0;
  double length() const { return end - start; }
};

/// Sorted union of intervals; touching intervals are joined.
inline std::vector<Interval> merge_intervals(std::vector<Interval> v) {
  std::sort(v.begin(), v.end(), [](const Interval& a, const Interval& b) {
    return a.start < b.start || (a.start == b.start && a.end < b.end);
  });
  std::vector<Interval> out;
  for (const auto& iv : v) {
    if (iv.end <= iv.start) continue;
    if (!out.empty() && iv.start <= out.back().end) {
      out.back().end = std::max(out.back().end, iv.end);
    } else {
      out.push_back(iv);
    }
  }
  return out;
}

/// Per-speaker merged activity.
inline std::map<std::string, std::vector<Interval>> speaker_activity(const Annotation& a) {
  std::map<std::string, std::vector<Interval>> raw;
  for (const auto& s : a.segments) raw[s.speaker].push_back({s.start, s.end});
  for (auto& [spk, v] : raw) v = merge_intervals(std::move(v));
  return raw;
}

/// Piecewise-constant count of active speakers as maximal runs covering
/// [0, horizon]. Boundaries are exact segment endpoints.
struct ActivityRun {
  double start = 0.0, end = 0.0;
  int active = 0;
};

inline std::vector<ActivityRun> activity_runs(const Annotation& a, double horizon) {
  std::vector<std::pair<double, int>> events;
  for (const auto& [spk, ivs] : speaker_activity(a)) {
    for (const auto& iv : ivs) {
      events.emplace_back(iv.start, +1);
      events.emplace_back(iv.end, -1);
    }
  }
  std::sort(events.begin(), events.end());
  std::vector<ActivityRun> runs;
  double cursor = 0.0;
  int active = 0;
  auto emit = [&runs](double s, double e, int n) {
    if (e <= s) return;
    if (!runs.empty() && runs.back().active == n && runs.back().end == s) {
      runs.back().end = e;
    } else {
      runs.push_back({s, e, n});
    }
  };
  for (const auto& [t, d] : events) {
    emit(cursor, std::min(t, horizon), active);
    cursor = std::max(cursor, std::min(t, horizon));
    active += d;
  }
  emit(cursor, horizon, active);
  return runs;
}

}  // namespace eend
