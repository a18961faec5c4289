#pragma once

// Dense rank-4 (N, C, H, W) tensor engine with reverse-mode autodiff.
// The operator set is exactly what the models need: conv2d, conv_transpose2d,
// maxpool2d, bilinear 2x upsampling, PReLU, batch/instance norm, add, channel
// concat, sigmoid, and MSE loss. Ops execute eagerly; when any input is
// tracked, a backward closure is recorded on the tape. Reductions accumulate
// in double regardless of the value type.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "ibunet/error.hpp"

namespace ibunet {

template <typename T>
struct Tensor4 {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<T> v;  // values, row-major
  std::vector<T> g;  // gradient, sized only when tracked
  bool tracked = false;

  size_t size() const { return size_t(n) * c * h * w; }
  size_t idx(int in, int ic, int iy, int ix) const {
    return ((size_t(in) * c + ic) * h + iy) * w + ix;
  }
  T& at(int in, int ic, int iy, int ix) { return v[idx(in, ic, iy, ix)]; }
  T at(int in, int ic, int iy, int ix) const { return v[idx(in, ic, iy, ix)]; }

  void track() {
    tracked = true;
    g.assign(size(), T(0));
  }
  void zero_grad() {
    if (tracked) std::fill(g.begin(), g.end(), T(0));
  }
  bool same_shape(const Tensor4& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
  std::string shape_str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) +
           "," + std::to_string(w) + ")";
  }
};

template <typename T>
using TensorPtr = std::shared_ptr<Tensor4<T>>;

template <typename T>
TensorPtr<T> make_tensor(int n, int c, int h, int w, bool tracked = false) {
  auto t = std::make_shared<Tensor4<T>>();
  t->n = n;
  t->c = c;
  t->h = h;
  t->w = w;
  require(n > 0 && c > 0 && h > 0 && w > 0, errc::dim_mismatch, "nonpositive tensor dim");
  t->v.assign(t->size(), T(0));
  if (tracked) t->track();
  return t;
}

/// Global toggle: scan every op output for NaN/Inf (hard failure when found).
inline bool& finite_checks() {
  static bool on = true;
  return on;
}

template <typename T>
void check_finite(const Tensor4<T>& t, const char* where) {
  if (!finite_checks()) return;
  for (T x : t.v)
    if (!std::isfinite(double(x))) fail(errc::non_finite, std::string("in ") + where);
}

/// Ordered record of backward closures; executing them in reverse visits each
/// node exactly once in reverse-topological order.
template <typename T>
class Tape {
 public:
  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
  size_t size() const { return nodes_.size(); }

  /// Seed d(loss)/d(loss) = 1 and accumulate gradients into every tracked
  /// tensor reachable from the recorded ops.
  void backward_from(Tensor4<T>& loss) {
    require(loss.size() == 1, errc::dim_mismatch, "backward requires a scalar loss");
    require(loss.tracked, errc::dim_mismatch, "loss is not tracked");
    loss.g[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> nodes_;
};

// ---- matmul kernels (row-major, accumulate into C) --------------------------

namespace detail {

// C[MxN] += A[MxK] * B[KxN]
template <typename T>
void mm_nn(T* C, const T* A, const T* B, int M, int K, int N) {
  for (int i = 0; i < M; ++i) {
    T* c = C + size_t(i) * N;
    const T* a = A + size_t(i) * K;
    for (int k = 0; k < K; ++k) {
      T av = a[k];
      const T* b = B + size_t(k) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[MxN] += A[MxK] * B[NxK]^T
template <typename T>
void mm_nt(T* C, const T* A, const T* B, int M, int K, int N) {
  for (int i = 0; i < M; ++i) {
    const T* a = A + size_t(i) * K;
    T* c = C + size_t(i) * N;
    for (int j = 0; j < N; ++j) {
      const T* b = B + size_t(j) * K;
      T acc = T(0);
      for (int k = 0; k < K; ++k) acc += a[k] * b[k];
      c[j] += acc;
    }
  }
}

// col[(ci*K+ky)*K+kx][oy*OW+ox] = x[ci][oy*s-p+ky][ox*s-p+kx], zero padded
template <typename T>
void im2col(const T* x, int C, int H, int W, int K, int s, int p, int OH, int OW, T* col) {
  for (int ci = 0; ci < C; ++ci)
    for (int ky = 0; ky < K; ++ky)
      for (int kx = 0; kx < K; ++kx) {
        T* dst = col + (size_t((ci * K + ky) * K + kx)) * OH * OW;
        for (int oy = 0; oy < OH; ++oy) {
          int iy = oy * s - p + ky;
          if (iy < 0 || iy >= H) {
            for (int ox = 0; ox < OW; ++ox) dst[size_t(oy) * OW + ox] = T(0);
            continue;
          }
          const T* src = x + (size_t(ci) * H + iy) * W;
          for (int ox = 0; ox < OW; ++ox) {
            int ix = ox * s - p + kx;
            dst[size_t(oy) * OW + ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, int C, int H, int W, int K, int s, int p, int OH, int OW, T* x) {
  for (int ci = 0; ci < C; ++ci)
    for (int ky = 0; ky < K; ++ky)
      for (int kx = 0; kx < K; ++kx) {
        const T* src = col + (size_t((ci * K + ky) * K + kx)) * OH * OW;
        for (int oy = 0; oy < OH; ++oy) {
          int iy = oy * s - p + ky;
          if (iy < 0 || iy >= H) continue;
          T* dst = x + (size_t(ci) * H + iy) * W;
          for (int ox = 0; ox < OW; ++ox) {
            int ix = ox * s - p + kx;
            if (ix >= 0 && ix < W) dst[ix] += src[size_t(oy) * OW + ox];
          }
        }
      }
}

inline int conv_out_extent(int in, int k, int s, int p, const char* what) {
  int num = in + 2 * p - k;
  require(num >= 0 && num % s == 0, errc::dim_mismatch,
          std::string(what) + ": extent " + std::to_string(in) + " incompatible with k=" +
              std::to_string(k) + " s=" + std::to_string(s) + " p=" + std::to_string(p));
  return num / s + 1;
}

template <typename T>
bool any_tracked(const std::initializer_list<TensorPtr<T>>& ts) {
  for (const auto& t : ts)
    if (t && t->tracked) return true;
  return false;
}

}  // namespace detail

// ---- operators ---------------------------------------------------------------

/// 2-D cross-correlation with zero padding. weight (C_out, C_in, K, K),
/// bias (1, C_out, 1, 1).
template <typename T>
TensorPtr<T> conv2d(Tape<T>& tape, TensorPtr<T> x, TensorPtr<T> weight, TensorPtr<T> bias,
                    int stride, int pad) {
  require(weight->c == x->c, errc::dim_mismatch,
          "conv2d: weight expects " + std::to_string(weight->c) + " input channels, got " +
              std::to_string(x->c));
  require(weight->h == weight->w, errc::dim_mismatch, "conv2d: kernel must be square");
  require(bias->n == 1 && bias->c == weight->n && bias->h == 1 && bias->w == 1,
          errc::dim_mismatch, "conv2d: bias shape");
  const int K = weight->h, Cout = weight->n, Cin = x->c;
  const int OH = detail::conv_out_extent(x->h, K, stride, pad, "conv2d H");
  const int OW = detail::conv_out_extent(x->w, K, stride, pad, "conv2d W");
  auto out = make_tensor<T>(x->n, Cout, OH, OW);

  const int ckk = Cin * K * K;
  const int ohw = OH * OW;
  std::vector<T> col(size_t(ckk) * ohw);
  for (int in = 0; in < x->n; ++in) {
    detail::im2col(&x->v[x->idx(in, 0, 0, 0)], Cin, x->h, x->w, K, stride, pad, OH, OW,
                   col.data());
    detail::mm_nn(&out->v[out->idx(in, 0, 0, 0)], weight->v.data(), col.data(), Cout, ckk, ohw);
    for (int co = 0; co < Cout; ++co) {
      T b = bias->v[co];
      T* o = &out->v[out->idx(in, co, 0, 0)];
      for (int q = 0; q < ohw; ++q) o[q] += b;
    }
  }
  check_finite(*out, "conv2d");

  if (detail::any_tracked<T>({x, weight, bias})) {
    out->track();
    int s = stride, p = pad;
    tape.record([x, weight, bias, out, K, s, p, OH, OW]() {
      const int Cin = x->c, Cout = weight->n;
      const int ckk = Cin * K * K, ohw = OH * OW;
      std::vector<T> col(size_t(ckk) * ohw);
      std::vector<T> wt;  // weight transposed (ckk x Cout), for dX
      if (x->tracked) {
        wt.resize(size_t(ckk) * Cout);
        for (int co = 0; co < Cout; ++co)
          for (int q = 0; q < ckk; ++q) wt[size_t(q) * Cout + co] = weight->v[size_t(co) * ckk + q];
      }
      std::vector<T> dcol;
      for (int in = 0; in < x->n; ++in) {
        const T* dy = &out->g[out->idx(in, 0, 0, 0)];
        if (weight->tracked || x->tracked)
          detail::im2col(&x->v[x->idx(in, 0, 0, 0)], Cin, x->h, x->w, K, s, p, OH, OW,
                         col.data());
        if (weight->tracked)
          detail::mm_nt(weight->g.data(), dy, col.data(), Cout, ohw, ckk);
        if (bias->tracked)
          for (int co = 0; co < Cout; ++co) {
            double acc = 0;
            const T* d = dy + size_t(co) * ohw;
            for (int q = 0; q < ohw; ++q) acc += double(d[q]);
            bias->g[co] += T(acc);
          }
        if (x->tracked) {
          dcol.assign(size_t(ckk) * ohw, T(0));
          detail::mm_nn(dcol.data(), wt.data(), dy, ckk, Cout, ohw);
          detail::col2im_add(dcol.data(), Cin, x->h, x->w, K, s, p, OH, OW,
                             &x->g[x->idx(in, 0, 0, 0)]);
        }
      }
    });
  }
  return out;
}

/// Transposed convolution (the baseline's learned upsampler). weight
/// (C_in, C_out, K, K); output extent (H-1)*stride + K.
template <typename T>
TensorPtr<T> conv_transpose2d(Tape<T>& tape, TensorPtr<T> x, TensorPtr<T> weight,
                              TensorPtr<T> bias, int stride) {
  require(weight->n == x->c, errc::dim_mismatch, "conv_transpose2d: weight/input channels");
  require(weight->h == weight->w, errc::dim_mismatch, "conv_transpose2d: kernel must be square");
  const int K = weight->h, Cin = x->c, Cout = weight->c;
  require(bias->n == 1 && bias->c == Cout && bias->h == 1 && bias->w == 1, errc::dim_mismatch,
          "conv_transpose2d: bias shape");
  const int OH = (x->h - 1) * stride + K;
  const int OW = (x->w - 1) * stride + K;
  auto out = make_tensor<T>(x->n, Cout, OH, OW);

  for (int in = 0; in < x->n; ++in) {
    for (int co = 0; co < Cout; ++co) {
      T* o = &out->v[out->idx(in, co, 0, 0)];
      T b = bias->v[co];
      for (int q = 0; q < OH * OW; ++q) o[q] = b;
      for (int ci = 0; ci < Cin; ++ci) {
        const T* xs = &x->v[x->idx(in, ci, 0, 0)];
        const T* wk = &weight->v[weight->idx(ci, co, 0, 0)];
        for (int iy = 0; iy < x->h; ++iy)
          for (int ix = 0; ix < x->w; ++ix) {
            T xv = xs[size_t(iy) * x->w + ix];
            for (int ky = 0; ky < K; ++ky) {
              T* row = o + size_t(iy * stride + ky) * OW + ix * stride;
              const T* wrow = wk + size_t(ky) * K;
              for (int kx = 0; kx < K; ++kx) row[kx] += xv * wrow[kx];
            }
          }
      }
    }
  }
  check_finite(*out, "conv_transpose2d");

  if (detail::any_tracked<T>({x, weight, bias})) {
    out->track();
    int s = stride;
    tape.record([x, weight, bias, out, K, s]() {
      const int Cin = x->c, Cout = weight->c;
      const int OW = out->w;
      for (int in = 0; in < x->n; ++in) {
        if (bias->tracked)
          for (int co = 0; co < Cout; ++co) {
            double acc = 0;
            const T* d = &out->g[out->idx(in, co, 0, 0)];
            for (int q = 0; q < out->h * out->w; ++q) acc += double(d[q]);
            bias->g[co] += T(acc);
          }
        for (int ci = 0; ci < Cin; ++ci)
          for (int co = 0; co < Cout; ++co) {
            const T* dy = &out->g[out->idx(in, co, 0, 0)];
            const T* xs = &x->v[x->idx(in, ci, 0, 0)];
            const T* wk = &weight->v[weight->idx(ci, co, 0, 0)];
            T* dx = x->tracked ? &x->g[x->idx(in, ci, 0, 0)] : nullptr;
            T* dw = weight->tracked ? &weight->g[weight->idx(ci, co, 0, 0)] : nullptr;
            for (int iy = 0; iy < x->h; ++iy)
              for (int ix = 0; ix < x->w; ++ix) {
                T xv = xs[size_t(iy) * x->w + ix];
                T accx = T(0);
                for (int ky = 0; ky < K; ++ky) {
                  const T* drow = dy + size_t(iy * s + ky) * OW + ix * s;
                  const T* wrow = wk + size_t(ky) * K;
                  T* dwrow = dw ? dw + size_t(ky) * K : nullptr;
                  for (int kx = 0; kx < K; ++kx) {
                    if (dx) accx += drow[kx] * wrow[kx];
                    if (dwrow) dwrow[kx] += xv * drow[kx];
                  }
                }
                if (dx) dx[size_t(iy) * x->w + ix] += accx;
              }
          }
      }
    });
  }
  return out;
}

/// Max pooling with implicit -inf padding; gradient routes to the first
/// occurrence of the window maximum.
template <typename T>
TensorPtr<T> maxpool2d(Tape<T>& tape, TensorPtr<T> x, int k, int stride, int pad) {
  const int OH = detail::conv_out_extent(x->h, k, stride, pad, "maxpool2d H");
  const int OW = detail::conv_out_extent(x->w, k, stride, pad, "maxpool2d W");
  auto out = make_tensor<T>(x->n, x->c, OH, OW);
  auto argmax = std::make_shared<std::vector<int64_t>>(out->size());

  size_t o = 0;
  for (int in = 0; in < x->n; ++in)
    for (int ci = 0; ci < x->c; ++ci) {
      const T* xs = &x->v[x->idx(in, ci, 0, 0)];
      size_t base = x->idx(in, ci, 0, 0);
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox, ++o) {
          T best = -std::numeric_limits<T>::infinity();
          int64_t arg = -1;
          for (int ky = 0; ky < k; ++ky) {
            int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= x->h) continue;
            for (int kx = 0; kx < k; ++kx) {
              int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= x->w) continue;
              T v = xs[size_t(iy) * x->w + ix];
              if (v > best) {
                best = v;
                arg = int64_t(base) + size_t(iy) * x->w + ix;
              }
            }
          }
          out->v[o] = best;
          (*argmax)[o] = arg;
        }
    }
  check_finite(*out, "maxpool2d");

  if (x->tracked) {
    out->track();
    tape.record([x, out, argmax]() {
      for (size_t q = 0; q < out->size(); ++q) x->g[size_t((*argmax)[q])] += out->g[q];
    });
  }
  return out;
}

namespace detail {

struct LerpIdx {
  int lo, hi;
  double t;  // weight of hi
};

/// Half-pixel-center source mapping for 2x upsampling, clamped to borders.
inline std::vector<LerpIdx> up2x_index(int in_extent) {
  std::vector<LerpIdx> m(size_t(in_extent) * 2);
  for (int d = 0; d < in_extent * 2; ++d) {
    double src = (d + 0.5) / 2.0 - 0.5;
    src = std::min(std::max(src, 0.0), double(in_extent - 1));
    int lo = static_cast<int>(std::floor(src));
    int hi = std::min(lo + 1, in_extent - 1);
    m[d] = {lo, hi, src - lo};
  }
  return m;
}

}  // namespace detail

/// Bilinear 2x upsampling (half-pixel centers). Linear in x; backward is the
/// transpose map.
template <typename T>
TensorPtr<T> bilinear_upsample2x(Tape<T>& tape, TensorPtr<T> x) {
  auto out = make_tensor<T>(x->n, x->c, x->h * 2, x->w * 2);
  auto ym = detail::up2x_index(x->h);
  auto xm = detail::up2x_index(x->w);
  for (int in = 0; in < x->n; ++in)
    for (int ci = 0; ci < x->c; ++ci) {
      const T* xs = &x->v[x->idx(in, ci, 0, 0)];
      T* o = &out->v[out->idx(in, ci, 0, 0)];
      for (int oy = 0; oy < out->h; ++oy) {
        const auto& my = ym[oy];
        const T* r0 = xs + size_t(my.lo) * x->w;
        const T* r1 = xs + size_t(my.hi) * x->w;
        for (int ox = 0; ox < out->w; ++ox) {
          const auto& mx = xm[ox];
          double top = (1 - mx.t) * double(r0[mx.lo]) + mx.t * double(r0[mx.hi]);
          double bot = (1 - mx.t) * double(r1[mx.lo]) + mx.t * double(r1[mx.hi]);
          o[size_t(oy) * out->w + ox] = T((1 - my.t) * top + my.t * bot);
        }
      }
    }
  check_finite(*out, "bilinear_upsample2x");

  if (x->tracked) {
    out->track();
    tape.record([x, out]() {
      auto ym = detail::up2x_index(x->h);
      auto xm = detail::up2x_index(x->w);
      for (int in = 0; in < x->n; ++in)
        for (int ci = 0; ci < x->c; ++ci) {
          T* dx = &x->g[x->idx(in, ci, 0, 0)];
          const T* dy = &out->g[out->idx(in, ci, 0, 0)];
          for (int oy = 0; oy < out->h; ++oy) {
            const auto& my = ym[oy];
            for (int ox = 0; ox < out->w; ++ox) {
              const auto& mx = xm[ox];
              double d = double(dy[size_t(oy) * out->w + ox]);
              dx[size_t(my.lo) * x->w + mx.lo] += T((1 - my.t) * (1 - mx.t) * d);
              dx[size_t(my.lo) * x->w + mx.hi] += T((1 - my.t) * mx.t * d);
              dx[size_t(my.hi) * x->w + mx.lo] += T(my.t * (1 - mx.t) * d);
              dx[size_t(my.hi) * x->w + mx.hi] += T(my.t * mx.t * d);
            }
          }
        }
    });
  }
  return out;
}

/// PReLU with per-channel learnable slope a (1, C, 1, 1):
/// y = x if x >= 0 else a_c * x.
template <typename T>
TensorPtr<T> prelu(Tape<T>& tape, TensorPtr<T> x, TensorPtr<T> slope) {
  require(slope->n == 1 && slope->c == x->c && slope->h == 1 && slope->w == 1,
          errc::dim_mismatch, "prelu: slope must be (1,C,1,1)");
  auto out = make_tensor<T>(x->n, x->c, x->h, x->w);
  const int hw = x->h * x->w;
  for (int in = 0; in < x->n; ++in)
    for (int ci = 0; ci < x->c; ++ci) {
      T a = slope->v[ci];
      const T* xs = &x->v[x->idx(in, ci, 0, 0)];
      T* o = &out->v[out->idx(in, ci, 0, 0)];
      for (int q = 0; q < hw; ++q) o[q] = xs[q] >= T(0) ? xs[q] : a * xs[q];
    }
  check_finite(*out, "prelu");

  if (detail::any_tracked<T>({x, slope})) {
    out->track();
    tape.record([x, slope, out]() {
      const int hw = x->h * x->w;
      for (int in = 0; in < x->n; ++in)
        for (int ci = 0; ci < x->c; ++ci) {
          T a = slope->v[ci];
          const T* xs = &x->v[x->idx(in, ci, 0, 0)];
          const T* dy = &out->g[out->idx(in, ci, 0, 0)];
          if (x->tracked) {
            T* dx = &x->g[x->idx(in, ci, 0, 0)];
            for (int q = 0; q < hw; ++q) dx[q] += xs[q] >= T(0) ? dy[q] : a * dy[q];
          }
          if (slope->tracked) {
            double acc = 0;
            for (int q = 0; q < hw; ++q)
              if (xs[q] < T(0)) acc += double(dy[q]) * double(xs[q]);
            slope->g[ci] += T(acc);
          }
        }
    });
  }
  return out;
}

namespace detail {

// Per-group normalization core shared by batchnorm (group = channel over
// N,H,W) and instancenorm (group = (n,c) over H,W).
template <typename T>
struct NormStats {
  std::vector<double> mean, inv_std;  // one entry per group
};

}  // namespace detail

/// BatchNorm over (N, H, W) per channel. Train mode uses batch statistics and
/// updates running stats in place (PyTorch convention: biased variance for
/// normalization, unbiased for the running estimate); eval mode normalizes
/// with the running stats.
template <typename T>
TensorPtr<T> batchnorm(Tape<T>& tape, TensorPtr<T> x, TensorPtr<T> gamma, TensorPtr<T> beta,
                       TensorPtr<T> running_mean, TensorPtr<T> running_var, double eps,
                       double momentum, bool training) {
  const int C = x->c;
  auto chk = [&](const TensorPtr<T>& t, const char* name) {
    require(t->n == 1 && t->c == C && t->h == 1 && t->w == 1, errc::dim_mismatch,
            std::string("batchnorm: ") + name + " must be (1,C,1,1)");
  };
  chk(gamma, "gamma");
  chk(beta, "beta");
  chk(running_mean, "running_mean");
  chk(running_var, "running_var");

  auto out = make_tensor<T>(x->n, x->c, x->h, x->w);
  const int hw = x->h * x->w;
  const size_t m = size_t(x->n) * hw;
  auto stats = std::make_shared<detail::NormStats<T>>();
  stats->mean.resize(C);
  stats->inv_std.resize(C);

  for (int ci = 0; ci < C; ++ci) {
    double mu, var;
    if (training) {
      double acc = 0;
      for (int in = 0; in < x->n; ++in) {
        const T* xs = &x->v[x->idx(in, ci, 0, 0)];
        for (int q = 0; q < hw; ++q) acc += double(xs[q]);
      }
      mu = acc / double(m);
      double acc2 = 0;
      for (int in = 0; in < x->n; ++in) {
        const T* xs = &x->v[x->idx(in, ci, 0, 0)];
        for (int q = 0; q < hw; ++q) {
          double d = double(xs[q]) - mu;
          acc2 += d * d;
        }
      }
      var = acc2 / double(m);
      double unbiased = m > 1 ? acc2 / double(m - 1) : var;
      running_mean->v[ci] = T((1 - momentum) * double(running_mean->v[ci]) + momentum * mu);
      running_var->v[ci] = T((1 - momentum) * double(running_var->v[ci]) + momentum * unbiased);
    } else {
      mu = double(running_mean->v[ci]);
      var = double(running_var->v[ci]);
    }
    stats->mean[ci] = mu;
    stats->inv_std[ci] = 1.0 / std::sqrt(var + eps);
    double gm = double(gamma->v[ci]), bt = double(beta->v[ci]);
    for (int in = 0; in < x->n; ++in) {
      const T* xs = &x->v[x->idx(in, ci, 0, 0)];
      T* o = &out->v[out->idx(in, ci, 0, 0)];
      for (int q = 0; q < hw; ++q)
        o[q] = T(gm * ((double(xs[q]) - mu) * stats->inv_std[ci]) + bt);
    }
  }
  check_finite(*out, "batchnorm");

  if (detail::any_tracked<T>({x, gamma, beta})) {
    out->track();
    tape.record([x, gamma, beta, out, stats, training]() {
      const int C = x->c, hw = x->h * x->w;
      const double m = double(size_t(x->n) * hw);
      for (int ci = 0; ci < C; ++ci) {
        double mu = stats->mean[ci], is = stats->inv_std[ci];
        double gm = double(gamma->v[ci]);
        double sum_dy = 0, sum_dy_xhat = 0;
        for (int in = 0; in < x->n; ++in) {
          const T* xs = &x->v[x->idx(in, ci, 0, 0)];
          const T* dy = &out->g[out->idx(in, ci, 0, 0)];
          for (int q = 0; q < hw; ++q) {
            double xhat = (double(xs[q]) - mu) * is;
            sum_dy += double(dy[q]);
            sum_dy_xhat += double(dy[q]) * xhat;
          }
        }
        if (gamma->tracked) gamma->g[ci] += T(sum_dy_xhat);
        if (beta->tracked) beta->g[ci] += T(sum_dy);
        if (x->tracked) {
          for (int in = 0; in < x->n; ++in) {
            const T* xs = &x->v[x->idx(in, ci, 0, 0)];
            const T* dy = &out->g[out->idx(in, ci, 0, 0)];
            T* dx = &x->g[x->idx(in, ci, 0, 0)];
            if (training) {
              for (int q = 0; q < hw; ++q) {
                double xhat = (double(xs[q]) - mu) * is;
                dx[q] += T(gm * is *
                           (double(dy[q]) - sum_dy / m - xhat * sum_dy_xhat / m));
              }
            } else {
              for (int q = 0; q < hw; ++q) dx[q] += T(gm * is * double(dy[q]));
            }
          }
        }
      }
    });
  }
  return out;
}

/// InstanceNorm over (H, W) per sample and channel; no running statistics.
template <typename T>
TensorPtr<T> instancenorm(Tape<T>& tape, TensorPtr<T> x, TensorPtr<T> gamma, TensorPtr<T> beta,
                          double eps) {
  const int C = x->c;
  require(gamma->n == 1 && gamma->c == C && gamma->h == 1 && gamma->w == 1, errc::dim_mismatch,
          "instancenorm: gamma must be (1,C,1,1)");
  require(beta->n == 1 && beta->c == C && beta->h == 1 && beta->w == 1, errc::dim_mismatch,
          "instancenorm: beta must be (1,C,1,1)");
  auto out = make_tensor<T>(x->n, x->c, x->h, x->w);
  const int hw = x->h * x->w;
  auto stats = std::make_shared<detail::NormStats<T>>();
  stats->mean.resize(size_t(x->n) * C);
  stats->inv_std.resize(size_t(x->n) * C);

  for (int in = 0; in < x->n; ++in)
    for (int ci = 0; ci < C; ++ci) {
      const T* xs = &x->v[x->idx(in, ci, 0, 0)];
      double acc = 0;
      for (int q = 0; q < hw; ++q) acc += double(xs[q]);
      double mu = acc / hw;
      double acc2 = 0;
      for (int q = 0; q < hw; ++q) {
        double d = double(xs[q]) - mu;
        acc2 += d * d;
      }
      double is = 1.0 / std::sqrt(acc2 / hw + eps);
      size_t gidx = size_t(in) * C + ci;
      stats->mean[gidx] = mu;
      stats->inv_std[gidx] = is;
      double gm = double(gamma->v[ci]), bt = double(beta->v[ci]);
      T* o = &out->v[out->idx(in, ci, 0, 0)];
      for (int q = 0; q < hw; ++q) o[q] = T(gm * ((double(xs[q]) - mu) * is) + bt);
    }
  check_finite(*out, "instancenorm");

  if (detail::any_tracked<T>({x, gamma, beta})) {
    out->track();
    tape.record([x, gamma, beta, out, stats]() {
      const int C = x->c, hw = x->h * x->w;
      for (int in = 0; in < x->n; ++in)
        for (int ci = 0; ci < C; ++ci) {
          size_t gidx = size_t(in) * C + ci;
          double mu = stats->mean[gidx], is = stats->inv_std[gidx];
          double gm = double(gamma->v[ci]);
          const T* xs = &x->v[x->idx(in, ci, 0, 0)];
          const T* dy = &out->g[out->idx(in, ci, 0, 0)];
          double sum_dy = 0, sum_dy_xhat = 0;
          for (int q = 0; q < hw; ++q) {
            double xhat = (double(xs[q]) - mu) * is;
            sum_dy += double(dy[q]);
            sum_dy_xhat += double(dy[q]) * xhat;
          }
          if (gamma->tracked) gamma->g[ci] += T(sum_dy_xhat);
          if (beta->tracked) beta->g[ci] += T(sum_dy);
          if (x->tracked) {
            T* dx = &x->g[x->idx(in, ci, 0, 0)];
            for (int q = 0; q < hw; ++q) {
              double xhat = (double(xs[q]) - mu) * is;
              dx[q] += T(gm * is *
                         (double(dy[q]) - sum_dy / hw - xhat * sum_dy_xhat / hw));
            }
          }
        }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> add(Tape<T>& tape, TensorPtr<T> x, TensorPtr<T> y) {
  require(x->same_shape(*y), errc::dim_mismatch,
          "add: " + x->shape_str() + " vs " + y->shape_str());
  auto out = make_tensor<T>(x->n, x->c, x->h, x->w);
  for (size_t q = 0; q < out->size(); ++q) out->v[q] = x->v[q] + y->v[q];
  check_finite(*out, "add");
  if (detail::any_tracked<T>({x, y})) {
    out->track();
    tape.record([x, y, out]() {
      if (x->tracked)
        for (size_t q = 0; q < out->size(); ++q) x->g[q] += out->g[q];
      if (y->tracked)
        for (size_t q = 0; q < out->size(); ++q) y->g[q] += out->g[q];
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> concat_channels(Tape<T>& tape, TensorPtr<T> x, TensorPtr<T> y) {
  require(x->n == y->n && x->h == y->h && x->w == y->w, errc::dim_mismatch,
          "concat_channels: " + x->shape_str() + " vs " + y->shape_str());
  auto out = make_tensor<T>(x->n, x->c + y->c, x->h, x->w);
  const size_t plane = size_t(x->h) * x->w;
  for (int in = 0; in < x->n; ++in) {
    std::copy_n(&x->v[x->idx(in, 0, 0, 0)], size_t(x->c) * plane,
                &out->v[out->idx(in, 0, 0, 0)]);
    std::copy_n(&y->v[y->idx(in, 0, 0, 0)], size_t(y->c) * plane,
                &out->v[out->idx(in, x->c, 0, 0)]);
  }
  if (detail::any_tracked<T>({x, y})) {
    out->track();
    tape.record([x, y, out, plane]() {
      for (int in = 0; in < x->n; ++in) {
        if (x->tracked) {
          const T* src = &out->g[out->idx(in, 0, 0, 0)];
          T* dst = &x->g[x->idx(in, 0, 0, 0)];
          for (size_t q = 0; q < size_t(x->c) * plane; ++q) dst[q] += src[q];
        }
        if (y->tracked) {
          const T* src = &out->g[out->idx(in, x->c, 0, 0)];
          T* dst = &y->g[y->idx(in, 0, 0, 0)];
          for (size_t q = 0; q < size_t(y->c) * plane; ++q) dst[q] += src[q];
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> sigmoid(Tape<T>& tape, TensorPtr<T> x) {
  auto out = make_tensor<T>(x->n, x->c, x->h, x->w);
  for (size_t q = 0; q < x->size(); ++q) {
    double v = double(x->v[q]);
    double y = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    out->v[q] = T(y);
  }
  check_finite(*out, "sigmoid");
  if (x->tracked) {
    out->track();
    tape.record([x, out]() {
      for (size_t q = 0; q < x->size(); ++q) {
        double y = double(out->v[q]);
        x->g[q] += T(double(out->g[q]) * y * (1.0 - y));
      }
    });
  }
  return out;
}

/// Mean of squared elementwise differences over all N*C*H*W elements.
/// Returns a (1,1,1,1) scalar.
template <typename T>
TensorPtr<T> mse_loss(Tape<T>& tape, TensorPtr<T> pred, TensorPtr<T> label) {
  require(pred->same_shape(*label), errc::dim_mismatch,
          "mse_loss: " + pred->shape_str() + " vs " + label->shape_str());
  auto out = make_tensor<T>(1, 1, 1, 1);
  double acc = 0;
  for (size_t q = 0; q < pred->size(); ++q) {
    double d = double(pred->v[q]) - double(label->v[q]);
    acc += d * d;
  }
  out->v[0] = T(acc / double(pred->size()));
  check_finite(*out, "mse_loss");
  if (detail::any_tracked<T>({pred, label})) {
    out->track();
    tape.record([pred, label, out]() {
      double scale = 2.0 / double(pred->size()) * double(out->g[0]);
      if (pred->tracked)
        for (size_t q = 0; q < pred->size(); ++q)
          pred->g[q] += T(scale * (double(pred->v[q]) - double(label->v[q])));
      if (label->tracked)
        for (size_t q = 0; q < label->size(); ++q)
          label->g[q] -= T(scale * (double(pred->v[q]) - double(label->v[q])));
    });
  }
  return out;
}

}  // namespace ibunet
