#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ibunet/gradcheck.hpp"
#include "ibunet/tensor.hpp"

using namespace ibunet;

namespace {

TensorPtr<double> randt(int n, int c, int h, int w, Rng& rng, double lo = -1, double hi = 1) {
  auto t = make_tensor<double>(n, c, h, w);
  fill_uniform(*t, rng, lo, hi);
  return t;
}

// Loss closure: MSE of the op output against a fixed random target, so output
// gradients are nonuniform.
template <typename Op>
LossFn against_target(Op op, TensorPtr<double> target) {
  return [op, target](Tape<double>& tape) {
    auto out = op(tape);
    return mse_loss(tape, out, target);
  };
}

}  // namespace

TEST_CASE("conv2d forward examples", "[tensor]") {
  Tape<double> tape;

  // 1x1 kernel, weight 1, bias 0: identity
  Rng rng(1);
  auto x = randt(1, 1, 3, 3, rng);
  auto w = make_tensor<double>(1, 1, 1, 1);
  w->v[0] = 1.0;
  auto b = make_tensor<double>(1, 1, 1, 1);
  auto y = conv2d(tape, x, w, b, 1, 0);
  CHECK(y->v == x->v);

  // hand sum
  auto x2 = make_tensor<double>(1, 1, 2, 2);
  x2->v = {1, 2, 3, 4};
  auto w2 = make_tensor<double>(1, 1, 2, 2);
  w2->v = {1, 1, 1, 1};
  auto y2 = conv2d(tape, x2, w2, b, 1, 0);
  REQUIRE(y2->h == 1);
  REQUIRE(y2->w == 1);
  CHECK(y2->v[0] == 10.0);

  // zero weights, bias only
  auto w3 = make_tensor<double>(2, 1, 3, 3);
  auto b3 = make_tensor<double>(1, 2, 1, 1);
  b3->v = {0.5, -1.5};
  auto y3 = conv2d(tape, x, w3, b3, 1, 1);
  for (int q = 0; q < 9; ++q) {
    CHECK(y3->at(0, 0, q / 3, q % 3) == 0.5);
    CHECK(y3->at(0, 1, q / 3, q % 3) == -1.5);
  }

  // incompatible extent: (3 + 0 - 2) is not divisible by stride 2
  CHECK_THROWS_MATCHES(conv2d(tape, x, w2, b, 2, 0), Error,
                       Catch::Matchers::Predicate<Error>([](const Error& e) {
                         return e.code() == errc::dim_mismatch;
                       }));
}

TEST_CASE("conv2d gradients", "[tensor][gradcheck]") {
  Rng rng(2);
  auto x = randt(2, 3, 5, 5, rng);
  auto w = randt(4, 3, 3, 3, rng, -0.5, 0.5);
  auto b = randt(1, 4, 1, 1, rng, -0.2, 0.2);
  auto target = randt(2, 4, 5, 5, rng);
  auto fn = against_target(
      [&](Tape<double>& tape) { return conv2d(tape, x, w, b, 1, 1); }, target);
  CHECK(grad_check(fn, {x, w, b}) <= 1e-6);

  // strided
  auto target2 = randt(2, 4, 2, 2, rng);
  auto fn2 = against_target(
      [&](Tape<double>& tape) { return conv2d(tape, x, w, b, 2, 0); }, target2);
  CHECK(grad_check(fn2, {x, w, b}) <= 1e-6);
}

TEST_CASE("conv_transpose2d doubles the extent and passes gradcheck", "[tensor][gradcheck]") {
  Rng rng(3);
  auto x = randt(2, 3, 4, 4, rng);
  auto w = randt(3, 2, 2, 2, rng, -0.5, 0.5);
  auto b = randt(1, 2, 1, 1, rng, -0.2, 0.2);
  Tape<double> tape;
  auto y = conv_transpose2d(tape, x, w, b, 2);
  REQUIRE(y->h == 8);
  REQUIRE(y->w == 8);
  REQUIRE(y->c == 2);

  auto target = randt(2, 2, 8, 8, rng);
  auto fn = against_target(
      [&](Tape<double>& tape) { return conv_transpose2d(tape, x, w, b, 2); }, target);
  CHECK(grad_check(fn, {x, w, b}) <= 1e-6);
}

TEST_CASE("maxpool2d forward examples", "[tensor]") {
  Tape<double> tape;
  auto c = make_tensor<double>(1, 1, 4, 4);
  std::fill(c->v.begin(), c->v.end(), 2.5);
  auto yc = maxpool2d(tape, c, 2, 2, 0);
  for (double v : yc->v) CHECK(v == 2.5);

  auto x = make_tensor<double>(1, 1, 2, 2);
  x->v = {1, 2, 3, 4};
  auto y = maxpool2d(tape, x, 2, 2, 0);
  REQUIRE(y->size() == 1);
  CHECK(y->v[0] == 4.0);

  Rng rng(4);
  auto z = randt(1, 2, 6, 6, rng);
  auto yz = maxpool2d(tape, z, 3, 1, 1);
  CHECK(yz->h == 6);
  CHECK(yz->w == 6);
}

TEST_CASE("maxpool2d routes gradient to the strict argmax", "[tensor][gradcheck]") {
  // The loss is quadratic around each argmax plateau, so the central
  // difference is exact in real arithmetic; a larger step (still far below
  // the argmax margins) only reduces roundoff. Targets sit far from the
  // outputs to keep every gradient away from zero.
  Rng rng(5);
  auto x = make_tensor<double>(2, 2, 6, 6);
  fill_separated(*x, rng);
  auto target = randt(2, 2, 3, 3, rng, 8, 10);
  auto fn = against_target(
      [&](Tape<double>& tape) { return maxpool2d(tape, x, 2, 2, 0); }, target);
  CHECK(grad_check(fn, {x}, 1e-3) <= 1e-8);

  auto target2 = randt(2, 2, 6, 6, rng, 8, 10);
  auto fn2 = against_target(
      [&](Tape<double>& tape) { return maxpool2d(tape, x, 3, 1, 1); }, target2);
  CHECK(grad_check(fn2, {x}, 1e-3) <= 1e-8);
}

TEST_CASE("bilinear upsample matches the coordinate formula", "[tensor]") {
  Tape<double> tape;
  auto x = make_tensor<double>(1, 1, 2, 2);
  x->v = {0, 1, 2, 3};
  auto y = bilinear_upsample2x(tape, x);
  REQUIRE(y->h == 4);
  REQUIRE(y->w == 4);
  // direct evaluation of src = (dst + 0.5)/2 - 0.5 clamped to [0, 1]
  auto lerp1d = [&](int d) {
    double src = std::clamp((d + 0.5) / 2.0 - 0.5, 0.0, 1.0);
    int lo = int(std::floor(src));
    int hi = std::min(lo + 1, 1);
    return std::tuple<int, int, double>(lo, hi, src - lo);
  };
  for (int oy = 0; oy < 4; ++oy)
    for (int ox = 0; ox < 4; ++ox) {
      auto [ylo, yhi, ty] = lerp1d(oy);
      auto [xlo, xhi, tx] = lerp1d(ox);
      auto px = [&](int r, int cidx) { return x->v[size_t(r) * 2 + cidx]; };
      double top = (1 - tx) * px(ylo, xlo) + tx * px(ylo, xhi);
      double bot = (1 - tx) * px(yhi, xlo) + tx * px(yhi, xhi);
      double want = (1 - ty) * top + ty * bot;
      REQUIRE(y->at(0, 0, oy, ox) == Catch::Approx(want).margin(1e-15));
    }

  // constant stays constant, and outputs stay within the input hull
  auto c = make_tensor<double>(2, 3, 3, 3);
  std::fill(c->v.begin(), c->v.end(), -0.7);
  auto yc = bilinear_upsample2x(tape, c);
  for (double v : yc->v) CHECK(v == -0.7);

  Rng rng(6);
  auto z = randt(1, 1, 5, 5, rng);
  auto yz = bilinear_upsample2x(tape, z);
  double zlo = *std::min_element(z->v.begin(), z->v.end());
  double zhi = *std::max_element(z->v.begin(), z->v.end());
  for (double v : yz->v) {
    CHECK(v >= zlo - 1e-15);
    CHECK(v <= zhi + 1e-15);
  }
}

TEST_CASE("bilinear upsample gradcheck", "[tensor][gradcheck]") {
  // linear op + quadratic loss: exact up to roundoff
  Rng rng(7);
  auto x = randt(2, 2, 3, 3, rng);
  auto target = randt(2, 2, 6, 6, rng, 8, 10);
  auto fn = against_target(
      [&](Tape<double>& tape) { return bilinear_upsample2x(tape, x); }, target);
  CHECK(grad_check(fn, {x}, 1e-3) <= 1e-10);
}

TEST_CASE("prelu definition", "[tensor]") {
  Tape<double> tape;
  auto x = make_tensor<double>(1, 1, 1, 3);
  x->v = {-1, 0, 2};
  auto a = make_tensor<double>(1, 1, 1, 1);
  a->v = {0.25};
  auto y = prelu(tape, x, a);
  CHECK(y->v[0] == -0.25);
  CHECK(y->v[1] == 0.0);
  CHECK(y->v[2] == 2.0);

  // a = 0 is ReLU
  a->v = {0.0};
  auto yr = prelu(tape, x, a);
  CHECK(yr->v == std::vector<double>{0, 0, 2});

  // all-positive input: identity regardless of slope
  auto xp = make_tensor<double>(1, 1, 1, 3);
  xp->v = {0.5, 1, 7};
  a->v = {123.0};
  CHECK(prelu(tape, xp, a)->v == xp->v);
}

TEST_CASE("prelu gradcheck away from the kink", "[tensor][gradcheck]") {
  Rng rng(8);
  auto x = make_tensor<double>(2, 3, 4, 4);
  fill_separated(*x, rng);  // |x| well above 10 * step
  auto a = randt(1, 3, 1, 1, rng, 0.05, 0.5);
  auto target = randt(2, 3, 4, 4, rng);
  auto fn =
      against_target([&](Tape<double>& tape) { return prelu(tape, x, a); }, target);
  CHECK(grad_check(fn, {x, a}) <= 1e-6);
}

namespace {

struct NormParams {
  TensorPtr<double> gamma, beta, rmean, rvar;
  explicit NormParams(int C, Rng& rng) {
    gamma = randt(1, C, 1, 1, rng, 0.5, 1.5);
    beta = randt(1, C, 1, 1, rng, -0.5, 0.5);
    rmean = randt(1, C, 1, 1, rng, -0.5, 0.5);
    rvar = randt(1, C, 1, 1, rng, 0.5, 2.0);
  }
};

}  // namespace

TEST_CASE("batchnorm normalizes per channel", "[tensor]") {
  Rng rng(9);
  const int N = 4, C = 3, H = 5, W = 5;
  auto x = randt(N, C, H, W, rng, -2, 3);
  auto gamma = make_tensor<double>(1, C, 1, 1);
  std::fill(gamma->v.begin(), gamma->v.end(), 1.0);
  auto beta = make_tensor<double>(1, C, 1, 1);
  auto rmean = make_tensor<double>(1, C, 1, 1);
  auto rvar = make_tensor<double>(1, C, 1, 1);
  Tape<double> tape;
  auto y = batchnorm(tape, x, gamma, beta, rmean, rvar, 1e-5, 0.1, true);

  for (int ci = 0; ci < C; ++ci) {
    double mean = 0, var = 0;
    for (int in = 0; in < N; ++in)
      for (int q = 0; q < H * W; ++q) mean += y->at(in, ci, q / W, q % W);
    mean /= N * H * W;
    for (int in = 0; in < N; ++in)
      for (int q = 0; q < H * W; ++q) {
        double d = y->at(in, ci, q / W, q % W) - mean;
        var += d * d;
      }
    var /= N * H * W;
    CHECK(std::abs(mean) < 1e-10);
    CHECK(var == Catch::Approx(1.0).epsilon(1e-3));  // eps shrinks variance slightly
  }
  // running stats moved toward the batch stats
  for (int ci = 0; ci < C; ++ci) CHECK(rmean->v[ci] != 0.0);

  // gamma = 0 gives beta everywhere
  auto g0 = make_tensor<double>(1, C, 1, 1);
  auto b5 = make_tensor<double>(1, C, 1, 1);
  std::fill(b5->v.begin(), b5->v.end(), 5.0);
  auto y0 = batchnorm(tape, x, g0, b5, rmean, rvar, 1e-5, 0.1, true);
  for (double v : y0->v) CHECK(v == 5.0);

  // an already zero-mean unit-variance channel passes through (up to eps)
  auto xz = make_tensor<double>(1, 1, 1, 4);
  xz->v = {-1, 1, -1, 1};
  auto g1 = make_tensor<double>(1, 1, 1, 1);
  g1->v = {1.0};
  auto b0 = make_tensor<double>(1, 1, 1, 1);
  auto rm = make_tensor<double>(1, 1, 1, 1);
  auto rv = make_tensor<double>(1, 1, 1, 1);
  auto yz = batchnorm(tape, xz, g1, b0, rm, rv, 1e-5, 0.1, true);
  for (size_t q = 0; q < 4; ++q)
    CHECK(yz->v[q] == Catch::Approx(xz->v[q]).epsilon(1e-4));
}

TEST_CASE("batchnorm eval mode uses running stats", "[tensor]") {
  Rng rng(10);
  const int C = 2;
  auto x = randt(2, C, 3, 3, rng);
  NormParams p(C, rng);
  Tape<double> tape;
  auto y = batchnorm(tape, x, p.gamma, p.beta, p.rmean, p.rvar, 1e-5, 0.1, false);
  for (int in = 0; in < 2; ++in)
    for (int ci = 0; ci < C; ++ci)
      for (int q = 0; q < 9; ++q) {
        double want = p.gamma->v[ci] * (x->at(in, ci, q / 3, q % 3) - p.rmean->v[ci]) /
                          std::sqrt(p.rvar->v[ci] + 1e-5) +
                      p.beta->v[ci];
        REQUIRE(y->at(in, ci, q / 3, q % 3) == Catch::Approx(want).epsilon(1e-12));
      }
}

TEST_CASE("batchnorm gradcheck (train and eval)", "[tensor][gradcheck]") {
  Rng rng(11);
  const int C = 2;
  auto x = randt(3, C, 4, 4, rng, -2, 2);
  NormParams p(C, rng);
  auto target = randt(3, C, 4, 4, rng);
  for (bool training : {true, false}) {
    auto fn = against_target(
        [&, training](Tape<double>& tape) {
          return batchnorm(tape, x, p.gamma, p.beta, p.rmean, p.rvar, 1e-5, 0.0, training);
        },
        target);
    CHECK(grad_check(fn, {x, p.gamma, p.beta}) <= 1e-6);
  }
}

TEST_CASE("instancenorm normalizes per sample and channel", "[tensor]") {
  Rng rng(12);
  const int N = 2, C = 2, H = 4, W = 4;
  auto x = randt(N, C, H, W, rng, -3, 1);
  auto gamma = make_tensor<double>(1, C, 1, 1);
  std::fill(gamma->v.begin(), gamma->v.end(), 1.0);
  auto beta = make_tensor<double>(1, C, 1, 1);
  Tape<double> tape;
  auto y = instancenorm(tape, x, gamma, beta, 1e-5);
  for (int in = 0; in < N; ++in)
    for (int ci = 0; ci < C; ++ci) {
      double mean = 0;
      for (int q = 0; q < H * W; ++q) mean += y->at(in, ci, q / W, q % W);
      mean /= H * W;
      CHECK(std::abs(mean) < 1e-10);
    }

  auto g0 = make_tensor<double>(1, C, 1, 1);
  auto b2 = make_tensor<double>(1, C, 1, 1);
  std::fill(b2->v.begin(), b2->v.end(), 2.0);
  auto y0 = instancenorm(tape, x, g0, b2, 1e-5);
  for (double v : y0->v) CHECK(v == 2.0);
}

TEST_CASE("instancenorm gradcheck", "[tensor][gradcheck]") {
  Rng rng(13);
  const int C = 3;
  auto x = randt(2, C, 4, 4, rng, -2, 2);
  auto gamma = randt(1, C, 1, 1, rng, 0.5, 1.5);
  auto beta = randt(1, C, 1, 1, rng, -0.5, 0.5);
  auto target = randt(2, C, 4, 4, rng);
  auto fn = against_target(
      [&](Tape<double>& tape) { return instancenorm(tape, x, gamma, beta, 1e-5); }, target);
  CHECK(grad_check(fn, {x, gamma, beta}) <= 1e-6);
}

TEST_CASE("add, concat, sigmoid forward", "[tensor]") {
  Rng rng(14);
  Tape<double> tape;
  auto x = randt(2, 3, 4, 4, rng);
  auto zero = make_tensor<double>(2, 3, 4, 4);
  CHECK(add(tape, x, zero)->v == x->v);

  auto y = randt(2, 5, 4, 4, rng);
  auto cat = concat_channels(tape, x, y);
  CHECK(cat->c == 8);
  CHECK(cat->at(1, 2, 3, 3) == x->at(1, 2, 3, 3));
  CHECK(cat->at(1, 3, 3, 3) == y->at(1, 0, 3, 3));

  auto z = make_tensor<double>(1, 1, 1, 1);
  CHECK(sigmoid(tape, z)->v[0] == 0.5);
  auto big = make_tensor<double>(1, 1, 1, 2);
  big->v = {40, -40};
  auto sb = sigmoid(tape, big);
  CHECK(sb->v[0] == Catch::Approx(1.0).margin(1e-12));
  CHECK(sb->v[1] == Catch::Approx(0.0).margin(1e-12));

  CHECK_THROWS_AS(add(tape, x, y), Error);
  auto wrong = randt(2, 3, 5, 5, rng);
  CHECK_THROWS_AS(concat_channels(tape, x, wrong), Error);
}

TEST_CASE("add is exact in backward; fan-out sums", "[tensor][gradcheck]") {
  Rng rng(15);
  auto x = randt(2, 2, 3, 3, rng);
  auto y = randt(2, 2, 3, 3, rng);
  auto target = randt(2, 2, 3, 3, rng, 8, 10);
  auto fn = against_target([&](Tape<double>& tape) { return add(tape, x, y); }, target);
  CHECK(grad_check(fn, {x, y}, 1e-3) <= 1e-10);

  // fan-out: z = x + x doubles the gradient
  x->track();
  x->zero_grad();
  Tape<double> tape;
  auto z = add(tape, x, x);
  auto loss = mse_loss(tape, z, target);
  tape.backward_from(*loss);
  for (size_t q = 0; q < x->size(); ++q) {
    double expect = 2.0 * 2.0 * (z->v[q] - target->v[q]) / double(z->size());
    REQUIRE(x->g[q] == Catch::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("concat and sigmoid gradcheck", "[tensor][gradcheck]") {
  Rng rng(16);
  auto x = randt(2, 2, 3, 3, rng);
  auto y = randt(2, 3, 3, 3, rng);
  auto target = randt(2, 5, 3, 3, rng, 8, 10);
  auto fn = against_target(
      [&](Tape<double>& tape) { return concat_channels(tape, x, y); }, target);
  CHECK(grad_check(fn, {x, y}, 1e-3) <= 1e-10);

  auto xs = randt(2, 2, 4, 4, rng, -3, 3);
  auto st = randt(2, 2, 4, 4, rng, 0, 1);
  auto fs =
      against_target([&](Tape<double>& tape) { return sigmoid(tape, xs); }, st);
  CHECK(grad_check(fs, {xs}) <= 1e-6);
}

TEST_CASE("mse_loss values and gradient", "[tensor][gradcheck]") {
  Tape<double> tape;
  auto a = make_tensor<double>(1, 1, 1, 2);
  a->v = {0, 1};
  auto b = make_tensor<double>(1, 1, 1, 2);
  b->v = {1, 1};
  CHECK(mse_loss(tape, a, a)->v[0] == 0.0);
  CHECK(mse_loss(tape, a, b)->v[0] == 0.5);

  auto c = make_tensor<double>(1, 1, 1, 2);
  c->v = {1, 2};
  CHECK(mse_loss(tape, c, b)->v[0] == 0.5);  // (0 + 1)/2

  auto one = make_tensor<double>(1, 1, 2, 2);
  one->v = {1, 1, 1, 1};
  auto zero = make_tensor<double>(1, 1, 2, 2);
  CHECK(mse_loss(tape, one, zero)->v[0] == 1.0);

  Rng rng(17);
  auto pred = randt(2, 1, 3, 3, rng);
  auto label = randt(2, 1, 3, 3, rng);
  LossFn fn = [&](Tape<double>& t) { return mse_loss(t, pred, label); };
  CHECK(grad_check(fn, {pred}) <= 1e-8);
}

TEST_CASE("four pooling stages take 256 to 16", "[tensor]") {
  Tape<double> tape;
  auto x = make_tensor<double>(1, 1, 256, 256);
  auto cur = x;
  for (int k = 0; k < 4; ++k) cur = maxpool2d(tape, cur, 2, 2, 0);
  CHECK(cur->h == 16);
  CHECK(cur->w == 16);
}

TEST_CASE("non-finite values are a hard failure", "[tensor]") {
  Tape<double> tape;
  auto x = make_tensor<double>(1, 1, 2, 2);
  x->v = {1, 2, std::nan(""), 4};
  auto a = make_tensor<double>(1, 1, 1, 1);
  CHECK_THROWS_MATCHES(prelu(tape, x, a), Error,
                       Catch::Matchers::Predicate<Error>([](const Error& e) {
                         return e.code() == errc::non_finite;
                       }));
  finite_checks() = false;
  CHECK_NOTHROW(prelu(tape, x, a));
  finite_checks() = true;
}

TEST_CASE("forward is deterministic", "[tensor]") {
  Rng rng(18);
  auto x = randt(2, 3, 8, 8, rng);
  auto w = randt(4, 3, 3, 3, rng);
  auto b = randt(1, 4, 1, 1, rng);
  Tape<double> t1, t2;
  auto y1 = conv2d(t1, x, w, b, 1, 1);
  auto y2 = conv2d(t2, x, w, b, 1, 1);
  CHECK(y1->v == y2->v);
}
