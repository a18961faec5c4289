#pragma once

// Dataset manifests and CircuitNet-style sample loading. A manifest is a
// plain text file, one sample per line: id, tab, feature file paths (tab
// separated), tab, label file path. Feature files are NPY maps of shape
// (h, w) for one channel or (c, h, w) for a channel chunk; channels
// concatenate in listed order and must total the task's channel count.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ibunet/error.hpp"
#include "ibunet/features.hpp"
#include "ibunet/npy.hpp"
#include "ibunet/tensor.hpp"

namespace ibunet {

struct ManifestEntry {
  std::string id;
  std::vector<std::string> feature_paths;
  std::string label_path;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  std::string split;  // train | test (caller-assigned tag)
};

/// Relative paths in the manifest resolve against the manifest's directory.
inline Manifest read_manifest(const std::string& path, std::string split = "train") {
  std::ifstream f(path);
  require(f.good(), errc::io_error, "cannot open manifest: " + path);
  std::filesystem::path base = std::filesystem::path(path).parent_path();
  auto resolve = [&](const std::string& p) {
    std::filesystem::path fp(p);
    std::string full = fp.is_absolute() ? fp.string() : (base / fp).string();
    require(std::filesystem::exists(full), errc::io_error,
            "manifest references missing file: " + full);
    return full;
  };

  Manifest m;
  m.split = std::move(split);
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    size_t start = 0;
    while (true) {
      size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    require(fields.size() >= 3, errc::parse_error,
            "manifest line " + std::to_string(lineno) + ": need id, features, label");
    ManifestEntry e;
    e.id = fields[0];
    require(seen.insert(e.id).second, errc::parse_error, "duplicate sample id " + e.id);
    for (size_t k = 1; k + 1 < fields.size(); ++k)
      e.feature_paths.push_back(resolve(fields[k]));
    e.label_path = resolve(fields.back());
    m.entries.push_back(std::move(e));
  }
  return m;
}

inline std::string write_manifest_line(const ManifestEntry& e) {
  std::string s = e.id;
  for (const auto& p : e.feature_paths) s += "\t" + p;
  s += "\t" + e.label_path + "\n";
  return s;
}

/// One training/eval sample in tensor form (channel-first, float32).
struct Sample {
  std::string id;
  Tensor4<float> features;  // (1, C, H, W)
  Tensor4<float> label;     // (1, 1, H, W)
};

/// Loads one manifest entry. Channel count must match the task (3 RC, 9 DRC);
/// label values are clamped to [0, 1]. `normalize` applies per-channel
/// min-max normalization on load (off by default: files may already be
/// normalized).
inline Sample load_sample(const ManifestEntry& e, Task task, bool normalize = false) {
  const int want = task == Task::rc ? 3 : 9;
  Sample s;
  s.id = e.id;

  int h = -1, w = -1;
  std::vector<std::vector<float>> channels;
  for (const std::string& path : e.feature_paths) {
    NpyArray a = load_npy(path);
    int c, ah, aw;
    if (a.shape.size() == 2) {
      c = 1;
      ah = int(a.shape[0]);
      aw = int(a.shape[1]);
    } else if (a.shape.size() == 3) {
      c = int(a.shape[0]);
      ah = int(a.shape[1]);
      aw = int(a.shape[2]);
    } else {
      fail(errc::shape_mismatch, "feature file must be rank 2 or 3: " + path);
    }
    if (h < 0) {
      h = ah;
      w = aw;
    }
    require(ah == h && aw == w, errc::shape_mismatch,
            "feature map size mismatch in " + path);
    for (int ci = 0; ci < c; ++ci)
      channels.emplace_back(a.data.begin() + size_t(ci) * h * w,
                            a.data.begin() + size_t(ci + 1) * h * w);
  }
  require(int(channels.size()) == want, errc::channel_count_mismatch,
          "sample " + e.id + ": got " + std::to_string(channels.size()) +
              " channels, task needs " + std::to_string(want));

  NpyArray lab = load_npy(e.label_path);
  require(lab.shape.size() == 2, errc::shape_mismatch, "label must be rank 2");
  require(int(lab.shape[0]) == h && int(lab.shape[1]) == w, errc::shape_mismatch,
          "label shape does not match features");

  if (normalize) {
    for (auto& ch : channels) {
      auto [lo_it, hi_it] = std::minmax_element(ch.begin(), ch.end());
      float lo = *lo_it, hi = *hi_it;  // copied: the loop below mutates the vector
      float range = hi - lo;
      if (range <= 0) {
        std::fill(ch.begin(), ch.end(), 0.0f);
      } else {
        for (float& v : ch) v = (v - lo) / range;
      }
    }
  }

  s.features.n = 1;
  s.features.c = want;
  s.features.h = h;
  s.features.w = w;
  s.features.v.reserve(size_t(want) * h * w);
  for (const auto& ch : channels) s.features.v.insert(s.features.v.end(), ch.begin(), ch.end());

  s.label.n = 1;
  s.label.c = 1;
  s.label.h = h;
  s.label.w = w;
  s.label.v.assign(lab.data.begin(), lab.data.end());
  for (float& v : s.label.v) v = std::clamp(v, 0.0f, 1.0f);
  return s;
}

inline std::vector<Sample> load_dataset(const Manifest& m, Task task, bool normalize = false) {
  std::vector<Sample> out;
  out.reserve(m.entries.size());
  for (const auto& e : m.entries) out.push_back(load_sample(e, task, normalize));
  return out;
}

// ---- feature stack <-> NPY -------------------------------------------------

inline NpyArray stack_to_npy(const FeatureStack& s) {
  NpyArray a;
  a.shape = {s.channels.size(), size_t(s.grid.tiles_y), size_t(s.grid.tiles_x)};
  a.data.reserve(a.elems());
  for (const FeatureMap& m : s.channels)
    for (double v : m.values) a.data.push_back(float(v));
  return a;
}

inline NpyArray map_to_npy(const FeatureMap& m) {
  NpyArray a;
  a.shape = {size_t(m.grid.tiles_y), size_t(m.grid.tiles_x)};
  a.data.reserve(a.elems());
  for (double v : m.values) a.data.push_back(float(v));
  return a;
}

}  // namespace ibunet
