#pragma once

// The five hand-crafted layout feature maps (macro region, RUDY, pin RUDY,
// cell density, congestion) plus per-task input stacks with min-max
// normalization. All functions are pure over an immutable Layout.

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "ibunet/error.hpp"
#include "ibunet/grid.hpp"

namespace ibunet {

enum class Task { rc, drc };

inline const char* task_name(Task t) { return t == Task::rc ? "rc" : "drc"; }

inline Task parse_task(const std::string& s) {
  if (s == "rc" || s == "RC") return Task::rc;
  if (s == "drc" || s == "DRC") return Task::drc;
  fail(errc::config_invalid, "unknown task: " + s);
}

struct FeatureMap {
  GridSpec grid;
  std::string name;
  std::vector<double> values;  // row-major, h rows of w columns

  static FeatureMap zeros(const GridSpec& g, std::string name) {
    FeatureMap m;
    m.grid = g;
    m.name = std::move(name);
    m.values.assign(g.tile_count(), 0.0);
    return m;
  }
  double& at(int i, int j) { return values[size_t(j) * grid.tiles_x + i]; }
  double at(int i, int j) const { return values[size_t(j) * grid.tiles_x + i]; }
};

struct FeatureStack {
  GridSpec grid;
  Task task;
  std::vector<FeatureMap> channels;
};

inline constexpr std::array<const char*, 3> kRcChannels = {"macro_region", "rudy", "pin_rudy"};
inline constexpr std::array<const char*, 9> kDrcChannels = {
    "macro_region",      "rudy",
    "pin_rudy",          "cell_density",
    "congestion_overflow", "congestion_utilization",
    "congestion_total",  "congestion_remaining",
    "congestion_demand"};

namespace detail {

/// Area of the union of rects (assumed valid) via coordinate compression.
inline double rect_union_area(std::vector<Rect>& rs) {
  if (rs.empty()) return 0.0;
  std::vector<double> xs;
  for (const Rect& r : rs) {
    xs.push_back(r.x0);
    xs.push_back(r.x1);
  }
  std::sort(xs.begin(), xs.end());
  xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
  double area = 0.0;
  std::vector<std::pair<double, double>> spans;
  for (size_t k = 0; k + 1 < xs.size(); ++k) {
    double xm = 0.5 * (xs[k] + xs[k + 1]);
    spans.clear();
    for (const Rect& r : rs)
      if (r.x0 <= xm && xm < r.x1) spans.emplace_back(r.y0, r.y1);
    if (spans.empty()) continue;
    std::sort(spans.begin(), spans.end());
    double covered = 0, lo = spans[0].first, hi = spans[0].second;
    for (size_t s = 1; s < spans.size(); ++s) {
      if (spans[s].first > hi) {
        covered += hi - lo;
        lo = spans[s].first;
        hi = spans[s].second;
      } else {
        hi = std::max(hi, spans[s].second);
      }
    }
    covered += hi - lo;
    area += covered * (xs[k + 1] - xs[k]);
  }
  return area;
}

}  // namespace detail

/// Fraction of each tile covered by the union of macros, in [0, 1].
inline FeatureMap macro_region_map(const Layout& L, const GridSpec& g) {
  FeatureMap m = FeatureMap::zeros(g, "macro_region");
  std::vector<Rect> clipped;
  for (const Rect& mac : L.macros) {
    auto s = detail::tile_span(mac, g);
    for (int j = s.j0; j <= s.j1; ++j)
      for (int i = s.i0; i <= s.i1; ++i) {
        if (m.at(i, j) >= 1.0) continue;
        double tx0 = i * g.tile, ty0 = j * g.tile;
        clipped.clear();
        for (const Rect& r : L.macros) {
          Rect c{std::max(r.x0, tx0), std::max(r.y0, ty0), std::min(r.x1, tx0 + g.tile),
                 std::min(r.y1, ty0 + g.tile)};
          if (c.x0 < c.x1 && c.y0 < c.y1) clipped.push_back(c);
        }
        m.at(i, j) = std::min(1.0, detail::rect_union_area(clipped) / (g.tile * g.tile));
      }
  }
  return m;
}

/// RUDY: each net spreads (w+h)/(w*h) uniformly over its clamped pin bounding
/// box, weighted per tile by the overlapped area fraction.
inline FeatureMap rudy_map(const Layout& L, const GridSpec& g) {
  FeatureMap m = FeatureMap::zeros(g, "rudy");
  for (const Net& n : L.nets) {
    Rect b = detail::clamp_bbox(n.bbox(), g.tile, g.layout_w, g.layout_h);
    double d = detail::net_density(b);
    auto s = detail::tile_span(b, g);
    for (int j = s.j0; j <= s.j1; ++j)
      for (int i = s.i0; i <= s.i1; ++i)
        m.at(i, j) += d * detail::tile_overlap_fraction(i, j, g, b);
  }
  return m;
}

/// Pin RUDY: the net's density deposited at the tile containing each pin.
inline FeatureMap pin_rudy_map(const Layout& L, const GridSpec& g) {
  FeatureMap m = FeatureMap::zeros(g, "pin_rudy");
  for (const Net& n : L.nets) {
    Rect b = detail::clamp_bbox(n.bbox(), g.tile, g.layout_w, g.layout_h);
    double d = detail::net_density(b);
    for (const Pin& p : n.pins) {
      auto [i, j] = tile_of(p.x, p.y, g);
      m.at(i, j) += d;
    }
  }
  return m;
}

/// Cell count per tile, by the cell's reference (lower-left) position.
inline FeatureMap cell_density_map(const Layout& L, const GridSpec& g) {
  FeatureMap m = FeatureMap::zeros(g, "cell_density");
  for (const Cell& c : L.cells) {
    auto [i, j] = tile_of(c.ref_x(), c.ref_y(), g);
    m.at(i, j) += 1.0;
  }
  return m;
}

namespace detail {

inline const CapacityReport& capacity_or_fail(const Layout& L) {
  require(L.capacity.has_value(), errc::missing_capacity, "layout carries no capacity report");
  return *L.capacity;
}

}  // namespace detail

inline FeatureMap congestion_overflow_map(const Layout& L, const GridSpec& g) {
  const CapacityReport& c = detail::capacity_or_fail(L);
  FeatureMap m = FeatureMap::zeros(g, "congestion_overflow");
  for (int j = 0; j < g.tiles_y; ++j)
    for (int i = 0; i < g.tiles_x; ++i) m.at(i, j) = c.overflow[c.idx(i, j)];
  return m;
}

inline FeatureMap congestion_utilization_map(const Layout& L, const GridSpec& g) {
  const CapacityReport& c = detail::capacity_or_fail(L);
  FeatureMap m = FeatureMap::zeros(g, "congestion_utilization");
  for (int j = 0; j < g.tiles_y; ++j)
    for (int i = 0; i < g.tiles_x; ++i) {
      size_t k = c.idx(i, j);
      m.at(i, j) = c.total[k] > 0 ? double(c.total[k] - c.remaining[k]) / c.total[k] : 0.0;
    }
  return m;
}

inline FeatureMap congestion_total_map(const Layout& L, const GridSpec& g) {
  const CapacityReport& c = detail::capacity_or_fail(L);
  FeatureMap m = FeatureMap::zeros(g, "congestion_total");
  for (int j = 0; j < g.tiles_y; ++j)
    for (int i = 0; i < g.tiles_x; ++i) m.at(i, j) = c.total[c.idx(i, j)];
  return m;
}

inline FeatureMap congestion_remaining_map(const Layout& L, const GridSpec& g) {
  const CapacityReport& c = detail::capacity_or_fail(L);
  FeatureMap m = FeatureMap::zeros(g, "congestion_remaining");
  for (int j = 0; j < g.tiles_y; ++j)
    for (int i = 0; i < g.tiles_x; ++i) m.at(i, j) = c.remaining[c.idx(i, j)];
  return m;
}

/// Demand = used tracks + overflow.
inline FeatureMap congestion_demand_map(const Layout& L, const GridSpec& g) {
  const CapacityReport& c = detail::capacity_or_fail(L);
  FeatureMap m = FeatureMap::zeros(g, "congestion_demand");
  for (int j = 0; j < g.tiles_y; ++j)
    for (int i = 0; i < g.tiles_x; ++i) {
      size_t k = c.idx(i, j);
      m.at(i, j) = double(c.total[k] - c.remaining[k]) + c.overflow[k];
    }
  return m;
}

/// Min-max normalize into [0, 1]; a constant channel becomes all zeros.
inline void normalize_minmax(FeatureMap& m) {
  if (m.values.empty()) return;
  auto [lo_it, hi_it] = std::minmax_element(m.values.begin(), m.values.end());
  double lo = *lo_it, hi = *hi_it;  // copied: the loop below mutates the vector
  double range = hi - lo;
  if (range <= 0) {
    std::fill(m.values.begin(), m.values.end(), 0.0);
    return;
  }
  for (double& v : m.values) v = (v - lo) / range;
}

/// Assemble the per-task input stack, each channel min-max normalized.
/// RC: [macro_region, rudy, pin_rudy]. DRC adds cell density and the five
/// capacity-derived congestion channels (9 total).
inline FeatureStack stack_features(Task task, const Layout& L, const GridSpec& g) {
  FeatureStack s;
  s.grid = g;
  s.task = task;
  s.channels.push_back(macro_region_map(L, g));
  s.channels.push_back(rudy_map(L, g));
  s.channels.push_back(pin_rudy_map(L, g));
  if (task == Task::drc) {
    s.channels.push_back(cell_density_map(L, g));
    s.channels.push_back(congestion_overflow_map(L, g));
    s.channels.push_back(congestion_utilization_map(L, g));
    s.channels.push_back(congestion_total_map(L, g));
    s.channels.push_back(congestion_remaining_map(L, g));
    s.channels.push_back(congestion_demand_map(L, g));
  }
  for (FeatureMap& m : s.channels) normalize_minmax(m);
  return s;
}

/// Label map for both tasks: per-tile overflow, min-max normalized to [0, 1].
/// DRC consumers binarize at > 0 for ROC ground truth.
inline FeatureMap make_label(const Layout& L, const GridSpec& g) {
  FeatureMap m = congestion_overflow_map(L, g);
  m.name = "label";
  normalize_minmax(m);
  return m;
}

}  // namespace ibunet
