#pragma once

// The standard operator gradient-check battery behind cmd_gradcheck and the
// acceptance suite: every differentiable operator on seeded double-precision
// instances at kink-free points, plus an assembled-model check on a 32x32
// miniature with sampled coordinates.

#include <functional>
#include <string>
#include <vector>

#include "ibunet/gradcheck.hpp"
#include "ibunet/model.hpp"
#include "ibunet/tensor.hpp"

namespace ibunet {

struct OpCheck {
  std::string name;
  double limit;                    // max relative error allowed
  std::function<double()> run;     // returns the measured max relative error
};

inline std::vector<OpCheck> standard_op_checks(uint64_t seed) {
  std::vector<OpCheck> checks;
  auto rt = [](int n, int c, int h, int w, Rng& rng, double lo = -1, double hi = 1) {
    auto t = make_tensor<double>(n, c, h, w);
    fill_uniform(*t, rng, lo, hi);
    return t;
  };

  checks.push_back({"conv2d", 1e-4, [rt, seed]() {
    Rng rng(mix64(seed ^ 1));
    auto x = rt(2, 3, 5, 5, rng);
    auto w = rt(4, 3, 3, 3, rng, -0.5, 0.5);
    auto b = rt(1, 4, 1, 1, rng, -0.2, 0.2);
    auto tgt = rt(2, 4, 5, 5, rng);
    return grad_check(
        [&](Tape<double>& t) { return mse_loss(t, conv2d(t, x, w, b, 1, 1), tgt); },
        {x, w, b});
  }});

  checks.push_back({"conv_transpose2d", 1e-4, [rt, seed]() {
    Rng rng(mix64(seed ^ 2));
    auto x = rt(2, 3, 4, 4, rng);
    auto w = rt(3, 2, 2, 2, rng, -0.5, 0.5);
    auto b = rt(1, 2, 1, 1, rng, -0.2, 0.2);
    auto tgt = rt(2, 2, 8, 8, rng);
    return grad_check(
        [&](Tape<double>& t) { return mse_loss(t, conv_transpose2d(t, x, w, b, 2), tgt); },
        {x, w, b});
  }});

  checks.push_back({"maxpool2d", 1e-4, [rt, seed]() {
    Rng rng(mix64(seed ^ 3));
    auto x = make_tensor<double>(2, 2, 6, 6);
    fill_separated(*x, rng);  // strict argmax margins
    auto tgt = rt(2, 2, 3, 3, rng);
    return grad_check(
        [&](Tape<double>& t) { return mse_loss(t, maxpool2d(t, x, 2, 2, 0), tgt); }, {x});
  }});

  checks.push_back({"bilinear_upsample2x", 1e-4, [rt, seed]() {
    Rng rng(mix64(seed ^ 4));
    auto x = rt(2, 2, 3, 3, rng);
    auto tgt = rt(2, 2, 6, 6, rng);
    return grad_check(
        [&](Tape<double>& t) { return mse_loss(t, bilinear_upsample2x(t, x), tgt); }, {x});
  }});

  checks.push_back({"prelu", 1e-4, [rt, seed]() {
    Rng rng(mix64(seed ^ 5));
    auto x = make_tensor<double>(2, 3, 4, 4);
    fill_separated(*x, rng);  // |x| well above 10 * step
    auto a = rt(1, 3, 1, 1, rng, 0.05, 0.5);
    auto tgt = rt(2, 3, 4, 4, rng);
    return grad_check(
        [&](Tape<double>& t) { return mse_loss(t, prelu(t, x, a), tgt); }, {x, a});
  }});

  checks.push_back({"batchnorm", 1e-4, [rt, seed]() {
    Rng rng(mix64(seed ^ 6));
    auto x = rt(3, 2, 4, 4, rng, -2, 2);
    auto gamma = rt(1, 2, 1, 1, rng, 0.5, 1.5);
    auto beta = rt(1, 2, 1, 1, rng, -0.5, 0.5);
    auto rmean = rt(1, 2, 1, 1, rng, -0.5, 0.5);
    auto rvar = rt(1, 2, 1, 1, rng, 0.5, 2.0);
    auto tgt = rt(3, 2, 4, 4, rng);
    double worst = 0;
    for (bool training : {true, false})
      worst = std::max(
          worst, grad_check(
                     [&](Tape<double>& t) {
                       return mse_loss(
                           t, batchnorm(t, x, gamma, beta, rmean, rvar, 1e-5, 0.0, training),
                           tgt);
                     },
                     {x, gamma, beta}));
    return worst;
  }});

  checks.push_back({"instancenorm", 1e-4, [rt, seed]() {
    Rng rng(mix64(seed ^ 7));
    auto x = rt(2, 3, 4, 4, rng, -2, 2);
    auto gamma = rt(1, 3, 1, 1, rng, 0.5, 1.5);
    auto beta = rt(1, 3, 1, 1, rng, -0.5, 0.5);
    auto tgt = rt(2, 3, 4, 4, rng);
    return grad_check(
        [&](Tape<double>& t) {
          return mse_loss(t, instancenorm(t, x, gamma, beta, 1e-5), tgt);
        },
        {x, gamma, beta});
  }});

  checks.push_back({"add", 1e-4, [rt, seed]() {
    Rng rng(mix64(seed ^ 8));
    auto x = rt(2, 2, 3, 3, rng);
    auto y = rt(2, 2, 3, 3, rng);
    auto tgt = rt(2, 2, 3, 3, rng);
    return grad_check(
        [&](Tape<double>& t) { return mse_loss(t, add(t, x, y), tgt); }, {x, y});
  }});

  checks.push_back({"concat_channels", 1e-4, [rt, seed]() {
    Rng rng(mix64(seed ^ 9));
    auto x = rt(2, 2, 3, 3, rng);
    auto y = rt(2, 3, 3, 3, rng);
    auto tgt = rt(2, 5, 3, 3, rng);
    return grad_check(
        [&](Tape<double>& t) { return mse_loss(t, concat_channels(t, x, y), tgt); }, {x, y});
  }});

  checks.push_back({"sigmoid", 1e-4, [rt, seed]() {
    Rng rng(mix64(seed ^ 10));
    auto x = rt(2, 2, 4, 4, rng, -3, 3);
    auto tgt = rt(2, 2, 4, 4, rng, 0, 1);
    return grad_check(
        [&](Tape<double>& t) { return mse_loss(t, sigmoid(t, x), tgt); }, {x});
  }});

  checks.push_back({"mse_loss", 1e-4, [rt, seed]() {
    Rng rng(mix64(seed ^ 11));
    auto pred = rt(2, 1, 3, 3, rng);
    auto label = rt(2, 1, 3, 3, rng);
    return grad_check([&](Tape<double>& t) { return mse_loss(t, pred, label); }, {pred});
  }});

  return checks;
}

/// End-to-end check of the assembled ibUNet on a (1, 3, 32, 32) miniature.
/// Probes a deterministic random subset of coordinates from the input and
/// every learnable parameter tensor. PReLU slopes are pinned to 1 so the whole
/// network is kink-free at every point (normalized activations cluster around
/// zero, where finite differences would otherwise straddle the PReLU kink);
/// the slope gradient path itself is still exercised and checked.
inline OpCheck model_check(uint64_t seed, size_t coords_per_tensor = 6) {
  return {"ibunet_e2e_32x32", 1e-3, [seed, coords_per_tensor]() {
    ModelConfig c = default_config(ModelKind::ibunet, Task::rc);
    c.base_width = 4;
    auto model = build_ibunet<double>(c, seed);
    for (auto& p : model.params.items())
      if (p.name.ends_with(".slope"))
        std::fill(p.tensor->v.begin(), p.tensor->v.end(), 1.0);
    Rng rng(mix64(seed ^ 12));
    auto x = make_tensor<double>(1, 3, 32, 32);
    fill_uniform(*x, rng, 0.05, 0.95);
    auto tgt = make_tensor<double>(1, 1, 32, 32);
    fill_uniform(*tgt, rng, 0.1, 0.9);
    std::vector<TensorPtr<double>> inputs = {x};
    for (auto& p : model.params.items())
      if (p.learnable) inputs.push_back(p.tensor);
    LossFn fn = [&](Tape<double>& t) {
      return mse_loss(t, forward(model, t, x, /*training=*/true), tgt);
    };
    return grad_check_sampled(fn, inputs, coords_per_tensor, Rng(mix64(seed ^ 13)))
        .max_rel_err;
  }};
}

}  // namespace ibunet
