#pragma once

// Evaluation metrics: min-max-normalized RMSE, Gaussian-windowed SSIM, ROC
// curve with tie grouping, trapezoidal AUC, top-left optimal threshold, and
// confusion counts. All pure functions over double maps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "ibunet/error.hpp"

namespace ibunet {

/// NRMSE = sqrt(mean((y - yhat)^2)) / (y_max - y_min). A constant y is only
/// meaningful when the prediction matches it exactly.
inline double nrmse(const std::vector<double>& y, const std::vector<double>& yhat) {
  require(y.size() == yhat.size() && !y.empty(), errc::shape_mismatch,
          "nrmse: shape mismatch");
  double acc = 0;
  bool equal = true;
  for (size_t q = 0; q < y.size(); ++q) {
    double d = y[q] - yhat[q];
    acc += d * d;
    if (y[q] != yhat[q]) equal = false;
  }
  auto [lo, hi] = std::minmax_element(y.begin(), y.end());
  double range = *hi - *lo;
  if (range == 0) {
    if (equal) return 0.0;
    fail(errc::degenerate_range, "nrmse: constant label with non-equal prediction");
  }
  return std::sqrt(acc / double(y.size())) / range;
}

namespace detail {

/// Forces a product to stay rounded-once: defeats FMA contraction, which
/// otherwise fuses these multiplies asymmetrically and breaks the exact
/// ssim(y, y) = 1 identity.
inline double no_fuse(double x) {
#if defined(__x86_64__)
  asm volatile("" : "+x"(x));
  return x;
#else
  volatile double v = x;
  return v;
#endif
}

inline std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> w(size_t(size) * size);
  int half = size / 2;
  double sum = 0;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double dy = y - half, dx = x - half;
      double v = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      w[size_t(y) * size + x] = v;
      sum += v;
    }
  for (double& v : w) v /= sum;
  return w;
}

}  // namespace detail

/// Per-pixel local SSIM index over an 11x11 Gaussian window (sigma 1.5),
/// 'valid' placement (windows fully inside the maps). C1 = (K1*L)^2,
/// C2 = (K2*L)^2.
inline std::vector<double> ssim_map(const std::vector<double>& y,
                                    const std::vector<double>& yhat, int h, int w,
                                    double L = 1.0, int win = 11, double sigma = 1.5,
                                    double k1 = 0.01, double k2 = 0.03) {
  require(size_t(h) * w == y.size() && y.size() == yhat.size(), errc::shape_mismatch,
          "ssim: shape mismatch");
  require(h >= win && w >= win, errc::too_small,
          "ssim: maps must be at least " + std::to_string(win) + " per side");
  const auto g = detail::gaussian_window(win, sigma);
  const double c1 = (k1 * L) * (k1 * L);
  const double c2 = (k2 * L) * (k2 * L);
  const int oh = h - win + 1, ow = w - win + 1;
  std::vector<double> out(size_t(oh) * ow);
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
      for (int ky = 0; ky < win; ++ky)
        for (int kx = 0; kx < win; ++kx) {
          double wgt = g[size_t(ky) * win + kx];
          double a = y[size_t(oy + ky) * w + ox + kx];
          double b = yhat[size_t(oy + ky) * w + ox + kx];
          mx += wgt * a;
          my += wgt * b;
          mxx += wgt * a * a;
          myy += wgt * b * b;
          mxy += wgt * a * b;
        }
      // symmetric forms built from rounded-once products so that y == yhat
      // yields a bitwise-equal numerator and denominator
      double pxx = detail::no_fuse(mx * mx);
      double pyy = detail::no_fuse(my * my);
      double pxy = detail::no_fuse(mx * my);
      double vx = mxx - pxx;
      double vy = myy - pyy;
      double cov = mxy - pxy;
      out[size_t(oy) * ow + ox] =
          ((pxy + pxy + c1) * (cov + cov + c2)) / ((pxx + pyy + c1) * (vx + vy + c2));
    }
  return out;
}

/// Mean local SSIM index; symmetric in its arguments, ssim(y, y) = 1 exactly.
inline double ssim(const std::vector<double>& y, const std::vector<double>& yhat, int h,
                   int w, double L = 1.0) {
  auto m = ssim_map(y, yhat, h, w, L);
  double acc = 0;
  for (double v : m) acc += v;
  return acc / double(m.size());
}

struct RocPoint {
  double threshold;  // predict positive iff score >= threshold
  double fpr, tpr;
};

/// Thresholds swept over distinct scores, descending; tied scores flip
/// together. First point is (threshold=+inf, 0, 0), last is (min score, 1, 1).
inline std::vector<RocPoint> roc_curve(const std::vector<double>& scores,
                                       const std::vector<int>& labels) {
  require(scores.size() == labels.size() && !scores.empty(), errc::shape_mismatch,
          "roc_curve: size mismatch");
  int64_t pos = 0, neg = 0;
  for (int l : labels) (l ? pos : neg)++;
  require(pos > 0 && neg > 0, errc::single_class,
          "roc_curve: need at least one positive and one negative label");

  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return scores[a] > scores[b];
  });

  std::vector<RocPoint> pts;
  pts.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  int64_t tp = 0, fp = 0;
  size_t i = 0;
  while (i < order.size()) {
    double t = scores[order[i]];
    while (i < order.size() && scores[order[i]] == t) {
      (labels[order[i]] ? tp : fp)++;
      ++i;
    }
    pts.push_back({t, double(fp) / double(neg), double(tp) / double(pos)});
  }
  return pts;
}

/// Trapezoidal integral of the ROC curve over FPR.
inline double auc(const std::vector<RocPoint>& pts) {
  double area = 0;
  for (size_t i = 1; i < pts.size(); ++i)
    area += (pts[i].fpr - pts[i - 1].fpr) * 0.5 * (pts[i].tpr + pts[i - 1].tpr);
  return area;
}

/// Threshold of the point closest to (FPR=0, TPR=1); ties go to the higher
/// threshold (the earlier point in the sweep).
inline double optimal_threshold(const std::vector<RocPoint>& pts) {
  require(!pts.empty(), errc::shape_mismatch, "optimal_threshold: empty curve");
  double best = std::numeric_limits<double>::infinity();
  double best_t = pts[0].threshold;
  for (const RocPoint& p : pts) {
    double d2 = p.fpr * p.fpr + (1 - p.tpr) * (1 - p.tpr);
    if (d2 < best) {
      best = d2;
      best_t = p.threshold;
    }
  }
  return best_t;
}

struct ConfusionMatrix {
  int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  int64_t total() const { return tp + fp + tn + fn; }
};

inline ConfusionMatrix confusion(const std::vector<double>& scores,
                                 const std::vector<int>& labels, double threshold) {
  require(scores.size() == labels.size(), errc::shape_mismatch, "confusion: size mismatch");
  ConfusionMatrix c;
  for (size_t q = 0; q < scores.size(); ++q) {
    bool predicted = scores[q] >= threshold;
    if (predicted)
      (labels[q] ? c.tp : c.fp)++;
    else
      (labels[q] ? c.fn : c.tn)++;
  }
  return c;
}

struct MetricsReport {
  std::vector<std::string> sample_ids;
  std::vector<double> nrmse_per_sample, ssim_per_sample;
  double avg_nrmse = 0, avg_ssim = 0;
  // DRC only:
  bool has_roc = false;
  std::vector<RocPoint> roc;
  double auc_value = 0;
  double optimal_thresh = 0;
  ConfusionMatrix confusion_at_optimal;
};

}  // namespace ibunet
