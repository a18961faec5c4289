#pragma once

// Physical layout data model: grid decomposition, macros/cells/nets/pins,
// per-tile routing capacity, a seeded synthetic generator, and a line-based
// text format for layouts.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ibunet/error.hpp"
#include "ibunet/rng.hpp"

namespace ibunet {

struct GridSpec {
  double layout_w = 0;  // W
  double layout_h = 0;  // H
  double tile = 0;      // l
  int tiles_x = 0;      // w = W/l
  int tiles_y = 0;      // h = H/l
  size_t tile_count() const { return size_t(tiles_x) * size_t(tiles_y); }
};

inline GridSpec make_grid(double W, double H, double l) {
  require(W > 0 && H > 0 && l > 0, errc::non_positive, "W, H, l must all be positive");
  auto split = [l](double len, const char* name) {
    double q = len / l;
    double r = std::round(q);
    require(r >= 1 && std::abs(len - r * l) <= 1e-9 * l, errc::non_divisible,
            std::string(name) + " not divisible by tile size");
    return static_cast<int>(r);
  };
  GridSpec g;
  g.layout_w = W;
  g.layout_h = H;
  g.tile = l;
  g.tiles_x = split(W, "W");
  g.tiles_y = split(H, "H");
  return g;
}

struct Rect {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }
  bool valid() const { return x0 <= x1 && y0 <= y1; }
};

struct Pin {
  double x = 0, y = 0;
  int net_id = -1;
};

struct Net {
  int id = -1;
  std::vector<Pin> pins;

  Rect bbox() const {
    Rect b{pins[0].x, pins[0].y, pins[0].x, pins[0].y};
    for (const Pin& p : pins) {
      b.x0 = std::min(b.x0, p.x);
      b.y0 = std::min(b.y0, p.y);
      b.x1 = std::max(b.x1, p.x);
      b.y1 = std::max(b.y1, p.y);
    }
    return b;
  }
};

struct Cell {
  Rect box;
  // Reference position is the lower-left corner of the box.
  double ref_x() const { return box.x0; }
  double ref_y() const { return box.y0; }
};

/// Per-tile routing capacity: total tracks, remaining tracks, overflow.
struct CapacityReport {
  int tiles_x = 0, tiles_y = 0;
  std::vector<int> total, remaining, overflow;  // row-major, index j*tiles_x + i

  static CapacityReport zeros(int w, int h) {
    CapacityReport c;
    c.tiles_x = w;
    c.tiles_y = h;
    c.total.assign(size_t(w) * h, 0);
    c.remaining.assign(size_t(w) * h, 0);
    c.overflow.assign(size_t(w) * h, 0);
    return c;
  }
  size_t idx(int i, int j) const { return size_t(j) * tiles_x + i; }
};

struct Layout {
  GridSpec grid;
  std::vector<Rect> macros;
  std::vector<Cell> cells;
  std::vector<Net> nets;
  std::optional<CapacityReport> capacity;

  void validate() const;
};

/// (i, j) tile of a point; half-open tiling with the max boundary clamped to
/// the last tile so every in-bounds point maps to exactly one tile.
inline std::pair<int, int> tile_of(double x, double y, const GridSpec& g) {
  require(x >= 0 && x <= g.layout_w && y >= 0 && y <= g.layout_h, errc::out_of_bounds,
          "point outside layout");
  int i = std::min(static_cast<int>(std::floor(x / g.tile)), g.tiles_x - 1);
  int j = std::min(static_cast<int>(std::floor(y / g.tile)), g.tiles_y - 1);
  return {i, j};
}

inline void Layout::validate() const {
  require(grid.tiles_x > 0 && grid.tiles_y > 0 && grid.tile > 0, errc::non_positive,
          "invalid grid");
  auto in_bounds = [&](const Rect& r) {
    return r.valid() && r.x0 >= 0 && r.y0 >= 0 && r.x1 <= grid.layout_w && r.y1 <= grid.layout_h;
  };
  for (const Rect& m : macros)
    require(in_bounds(m), errc::out_of_bounds, "macro outside layout");
  for (const Cell& c : cells)
    require(in_bounds(c.box), errc::out_of_bounds, "cell outside layout");
  for (const Net& n : nets) {
    require(!n.pins.empty(), errc::out_of_bounds, "net without pins");
    for (const Pin& p : n.pins) {
      require(p.x >= 0 && p.x <= grid.layout_w && p.y >= 0 && p.y <= grid.layout_h,
              errc::out_of_bounds, "pin outside layout");
      require(p.net_id == n.id, errc::parse_error, "pin net_id mismatch");
    }
    require(n.bbox().valid(), errc::out_of_bounds, "net bbox invalid");
  }
  if (capacity) {
    const CapacityReport& c = *capacity;
    require(c.tiles_x == grid.tiles_x && c.tiles_y == grid.tiles_y, errc::shape_mismatch,
            "capacity grid mismatch");
    for (size_t k = 0; k < c.total.size(); ++k) {
      require(c.total[k] >= 0 && c.remaining[k] >= 0 && c.overflow[k] >= 0,
              errc::out_of_bounds, "negative capacity entry");
      require(c.remaining[k] <= c.total[k], errc::out_of_bounds,
              "remaining exceeds total tracks");
    }
  }
}

namespace detail {

/// RUDY bounding box clamp: each side is extended to at least one tile side l
/// (growing the max edge, shifting back inside the die if that overruns).
inline Rect clamp_bbox(Rect b, double l, double W, double H) {
  if (b.width() < l) {
    b.x1 = b.x0 + l;
    if (b.x1 > W) {
      b.x1 = W;
      b.x0 = W - l;
    }
  }
  if (b.height() < l) {
    b.y1 = b.y0 + l;
    if (b.y1 > H) {
      b.y1 = H;
      b.y0 = H - l;
    }
  }
  return b;
}

/// RUDY density of one net box: (w + h) / (w * h).
inline double net_density(const Rect& clamped) {
  return (clamped.width() + clamped.height()) / (clamped.width() * clamped.height());
}

/// Fraction of tile (i, j) covered by rect r, in [0, 1].
inline double tile_overlap_fraction(int i, int j, const GridSpec& g, const Rect& r) {
  double tx0 = i * g.tile, ty0 = j * g.tile;
  double ox = std::min(r.x1, tx0 + g.tile) - std::max(r.x0, tx0);
  double oy = std::min(r.y1, ty0 + g.tile) - std::max(r.y0, ty0);
  if (ox <= 0 || oy <= 0) return 0.0;
  return (ox * oy) / (g.tile * g.tile);
}

/// Tile index span [i0, i1] x [j0, j1] a rect touches.
struct TileSpan {
  int i0, i1, j0, j1;
};
inline TileSpan tile_span(const Rect& r, const GridSpec& g) {
  auto lo = [&](double v, int n) {
    return std::clamp(static_cast<int>(std::floor(v / g.tile)), 0, n - 1);
  };
  auto hi = [&](double v, int n) {
    return std::clamp(static_cast<int>(std::ceil(v / g.tile)) - 1, 0, n - 1);
  };
  return {lo(r.x0, g.tiles_x), hi(r.x1, g.tiles_x), lo(r.y0, g.tiles_y), hi(r.y1, g.tiles_y)};
}

}  // namespace detail

struct SynthProfile {
  double width = 64, height = 64, tile = 1;
  int macro_count = 2;
  int cell_count = 200;
  int net_count = 50;
  int pins_min = 2, pins_max = 6;
  int total_tracks = 100;         // constant per tile
  double overflow_quantile = 0.9; // demand scaled so ~this quantile of tiles overflows
};

/// Deterministic synthetic layout; pure function of (seed, profile).
inline Layout synth_layout(uint64_t seed, const SynthProfile& p) {
  require(p.macro_count >= 0 && p.cell_count >= 0 && p.net_count >= 0,
          errc::infeasible_profile, "negative element count");
  require(p.pins_min >= 1 && p.pins_min <= p.pins_max, errc::infeasible_profile,
          "bad pins-per-net range");
  require(p.total_tracks > 0, errc::infeasible_profile, "total_tracks must be positive");
  GridSpec g;
  try {
    g = make_grid(p.width, p.height, p.tile);
  } catch (const Error& e) {
    fail(errc::infeasible_profile, e.what());
  }
  Layout L;
  L.grid = g;
  Rng rng(mix64(seed));

  for (int m = 0; m < p.macro_count; ++m) {
    double mw = rng.uniform(0.10, 0.25) * p.width;
    double mh = rng.uniform(0.10, 0.25) * p.height;
    double x0 = rng.uniform(0, p.width - mw);
    double y0 = rng.uniform(0, p.height - mh);
    L.macros.push_back({x0, y0, x0 + mw, y0 + mh});
  }
  for (int c = 0; c < p.cell_count; ++c) {
    double cw = rng.uniform(0.4, 1.0) * p.tile;
    double ch = rng.uniform(0.4, 1.0) * p.tile;
    double x0 = rng.uniform(0, p.width - cw);
    double y0 = rng.uniform(0, p.height - ch);
    L.cells.push_back({Rect{x0, y0, x0 + cw, y0 + ch}});
  }
  for (int n = 0; n < p.net_count; ++n) {
    Net net;
    net.id = n;
    int k = rng.uniform_int(p.pins_min, p.pins_max);
    // pins cluster in a window so nets have varied bbox sizes
    double span = rng.uniform(0.05, 0.6);
    double cx = rng.uniform(0, p.width * (1 - span));
    double cy = rng.uniform(0, p.height * (1 - span));
    for (int q = 0; q < k; ++q) {
      Pin pin;
      pin.net_id = n;
      pin.x = cx + rng.uniform(0, span * p.width);
      pin.y = cy + rng.uniform(0, span * p.height);
      net.pins.push_back(pin);
    }
    L.nets.push_back(std::move(net));
  }

  // Capacity: constant total tracks; demand from RUDY scaled so that tiles
  // above the chosen quantile overflow (~10% by default).
  CapacityReport cap = CapacityReport::zeros(g.tiles_x, g.tiles_y);
  std::vector<double> demand(g.tile_count(), 0.0);
  for (const Net& n : L.nets) {
    Rect b = detail::clamp_bbox(n.bbox(), g.tile, g.layout_w, g.layout_h);
    double d = detail::net_density(b);
    auto s = detail::tile_span(b, g);
    for (int j = s.j0; j <= s.j1; ++j)
      for (int i = s.i0; i <= s.i1; ++i)
        demand[size_t(j) * g.tiles_x + i] += d * detail::tile_overlap_fraction(i, j, g, b);
  }
  std::vector<double> sorted = demand;
  std::sort(sorted.begin(), sorted.end());
  double pivot = sorted[static_cast<size_t>(p.overflow_quantile * (sorted.size() - 1))];
  double scale = pivot > 0 ? (p.total_tracks + 0.5) / pivot : 0.0;
  for (size_t k = 0; k < demand.size(); ++k) {
    int dem = static_cast<int>(std::llround(demand[k] * scale));
    cap.total[k] = p.total_tracks;
    cap.remaining[k] = std::max(0, p.total_tracks - dem);
    cap.overflow[k] = std::max(0, dem - p.total_tracks);
  }
  L.capacity = std::move(cap);
  L.validate();
  return L;
}

// ---- layout text format ----------------------------------------------------
// One record per line: GRID W H l | MACRO x0 y0 x1 y1 | CELL x0 y0 x1 y1 |
// NET id | PIN net_id x y | CAP i j total remaining overflow. '#' starts a
// comment line. Unknown tags are rejected.

namespace detail {

inline std::string fmt_num(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);  // shortest round-trip form
  return std::string(buf, p);
}

}  // namespace detail

inline std::string write_layout(const Layout& L) {
  std::string out;
  auto num = detail::fmt_num;
  out += "GRID " + num(L.grid.layout_w) + " " + num(L.grid.layout_h) + " " +
         num(L.grid.tile) + "\n";
  for (const Rect& m : L.macros)
    out += "MACRO " + num(m.x0) + " " + num(m.y0) + " " + num(m.x1) + " " + num(m.y1) + "\n";
  for (const Cell& c : L.cells)
    out += "CELL " + num(c.box.x0) + " " + num(c.box.y0) + " " + num(c.box.x1) + " " +
           num(c.box.y1) + "\n";
  for (const Net& n : L.nets) {
    out += "NET " + std::to_string(n.id) + "\n";
    for (const Pin& p : n.pins)
      out += "PIN " + std::to_string(p.net_id) + " " + num(p.x) + " " + num(p.y) + "\n";
  }
  if (L.capacity) {
    const CapacityReport& c = *L.capacity;
    for (int j = 0; j < c.tiles_y; ++j)
      for (int i = 0; i < c.tiles_x; ++i) {
        size_t k = c.idx(i, j);
        out += "CAP " + std::to_string(i) + " " + std::to_string(j) + " " +
               std::to_string(c.total[k]) + " " + std::to_string(c.remaining[k]) + " " +
               std::to_string(c.overflow[k]) + "\n";
      }
  }
  return out;
}

inline Layout read_layout(const std::string& text) {
  Layout L;
  bool have_grid = false;
  std::map<int, size_t> net_index;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    auto want = [&](int n, double* out) {
      for (int k = 0; k < n; ++k)
        require(static_cast<bool>(ls >> out[k]), errc::parse_error,
                "line " + std::to_string(lineno) + ": expected " + std::to_string(n) +
                    " numeric fields after " + tag);
    };
    if (tag == "GRID") {
      require(!have_grid, errc::parse_error, "duplicate GRID record");
      double f[3];
      want(3, f);
      L.grid = make_grid(f[0], f[1], f[2]);
      have_grid = true;
    } else if (tag == "MACRO") {
      double f[4];
      want(4, f);
      L.macros.push_back({f[0], f[1], f[2], f[3]});
    } else if (tag == "CELL") {
      double f[4];
      want(4, f);
      L.cells.push_back({Rect{f[0], f[1], f[2], f[3]}});
    } else if (tag == "NET") {
      double f[1];
      want(1, f);
      int id = static_cast<int>(f[0]);
      require(!net_index.count(id), errc::parse_error, "duplicate NET id");
      net_index[id] = L.nets.size();
      L.nets.push_back(Net{id, {}});
    } else if (tag == "PIN") {
      double f[3];
      want(3, f);
      int id = static_cast<int>(f[0]);
      auto it = net_index.find(id);
      require(it != net_index.end(), errc::parse_error,
              "PIN references undeclared net " + std::to_string(id));
      L.nets[it->second].pins.push_back(Pin{f[1], f[2], id});
    } else if (tag == "CAP") {
      require(have_grid, errc::parse_error, "CAP before GRID");
      double f[5];
      want(5, f);
      if (!L.capacity)
        L.capacity = CapacityReport::zeros(L.grid.tiles_x, L.grid.tiles_y);
      int i = static_cast<int>(f[0]), j = static_cast<int>(f[1]);
      require(i >= 0 && i < L.grid.tiles_x && j >= 0 && j < L.grid.tiles_y,
              errc::parse_error, "CAP tile index out of range");
      size_t k = L.capacity->idx(i, j);
      L.capacity->total[k] = static_cast<int>(f[2]);
      L.capacity->remaining[k] = static_cast<int>(f[3]);
      L.capacity->overflow[k] = static_cast<int>(f[4]);
    } else {
      fail(errc::parse_error, "line " + std::to_string(lineno) + ": unknown record tag " + tag);
    }
  }
  require(have_grid, errc::parse_error, "missing GRID record");
  L.validate();
  return L;
}

inline void save_layout(const std::string& path, const Layout& L) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), errc::io_error, "cannot open for write: " + path);
  std::string s = write_layout(L);
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
  require(f.good(), errc::io_error, "write failed: " + path);
}

inline Layout load_layout(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), errc::io_error, "cannot open: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return read_layout(ss.str());
}

}  // namespace ibunet
