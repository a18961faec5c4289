#pragma once

// Central-finite-difference verification of analytic gradients, always in
// double precision. Callers are responsible for picking kink-free evaluation
// points (|x| away from 0 for prelu, strict argmax margins for maxpool).

#include <functional>
#include <vector>

#include "ibunet/rng.hpp"
#include "ibunet/tensor.hpp"

namespace ibunet {

/// Builds a fresh tape and returns the scalar loss for the current values of
/// the probed tensors.
using LossFn = std::function<TensorPtr<double>(Tape<double>&)>;

struct GradCheckResult {
  double max_rel_err = 0;
  size_t checked = 0;
};

namespace detail {

inline double rel_err(double a, double n) {
  double denom = std::max({std::abs(a), std::abs(n), 1e-6});
  return std::abs(a - n) / denom;
}

inline double eval_loss(const LossFn& f) {
  Tape<double> tape;
  auto loss = f(tape);
  return loss->v[0];
}

}  // namespace detail

/// Checks d(loss)/d(inputs[k][coord]) against (f(x+h) - f(x-h)) / 2h for the
/// listed coordinates of each input (empty list = every coordinate).
inline GradCheckResult grad_check_at(const LossFn& f,
                                     const std::vector<TensorPtr<double>>& inputs,
                                     const std::vector<std::vector<size_t>>& coords,
                                     double step = 1e-5) {
  for (auto& t : inputs) {
    if (!t->tracked) t->track();
    t->zero_grad();
  }
  Tape<double> tape;
  auto loss = f(tape);
  tape.backward_from(*loss);
  std::vector<std::vector<double>> analytic(inputs.size());
  for (size_t k = 0; k < inputs.size(); ++k) analytic[k] = inputs[k]->g;

  GradCheckResult res;
  for (size_t k = 0; k < inputs.size(); ++k) {
    std::vector<size_t> all;
    const std::vector<size_t>* cs = &coords[k];
    if (cs->empty()) {
      all.resize(inputs[k]->size());
      for (size_t q = 0; q < all.size(); ++q) all[q] = q;
      cs = &all;
    }
    for (size_t q : *cs) {
      double saved = inputs[k]->v[q];
      inputs[k]->v[q] = saved + step;
      double up = detail::eval_loss(f);
      inputs[k]->v[q] = saved - step;
      double dn = detail::eval_loss(f);
      inputs[k]->v[q] = saved;
      double numeric = (up - dn) / (2 * step);
      res.max_rel_err = std::max(res.max_rel_err, detail::rel_err(analytic[k][q], numeric));
      ++res.checked;
    }
  }
  return res;
}

/// Every coordinate of every input.
inline double grad_check(const LossFn& f, const std::vector<TensorPtr<double>>& inputs,
                         double step = 1e-5) {
  return grad_check_at(f, inputs, std::vector<std::vector<size_t>>(inputs.size()), step)
      .max_rel_err;
}

/// A deterministic random subset of coordinates per input (for assembled
/// models, where probing every coordinate is prohibitive).
inline GradCheckResult grad_check_sampled(const LossFn& f,
                                          const std::vector<TensorPtr<double>>& inputs,
                                          size_t per_tensor, Rng rng, double step = 1e-5) {
  std::vector<std::vector<size_t>> coords(inputs.size());
  for (size_t k = 0; k < inputs.size(); ++k) {
    size_t n = inputs[k]->size();
    if (n <= per_tensor) {
      coords[k].resize(n);
      for (size_t q = 0; q < n; ++q) coords[k][q] = q;
    } else {
      for (size_t q = 0; q < per_tensor; ++q) coords[k].push_back(rng.below(n));
    }
  }
  return grad_check_at(f, inputs, coords, step);
}

/// Fills a tensor with well-separated values (pairwise gaps ~>= spread/2 and
/// |x| >= spread/4), keeping maxpool argmaxes strict and prelu inputs away
/// from the kink.
template <typename T>
void fill_separated(Tensor4<T>& t, Rng& rng, double spread = 0.1) {
  std::vector<size_t> perm(t.size());
  for (size_t q = 0; q < perm.size(); ++q) perm[q] = q + 1;
  rng.shuffle(perm);
  for (size_t q = 0; q < t.size(); ++q) {
    double sign = (rng.next_u64() & 1) ? 1.0 : -1.0;
    t.v[q] = T(sign * (double(perm[q]) * spread + rng.uniform(-spread / 8, spread / 8)));
  }
}

template <typename T>
void fill_uniform(Tensor4<T>& t, Rng& rng, double lo, double hi) {
  for (size_t q = 0; q < t.size(); ++q) t.v[q] = T(rng.uniform(lo, hi));
}

}  // namespace ibunet
