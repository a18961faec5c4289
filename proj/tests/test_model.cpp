#include <catch2/catch_amalgamated.hpp>

#include "ibunet/gradcheck.hpp"
#include "ibunet/model.hpp"

using namespace ibunet;

namespace {

TensorPtr<float> randf(int n, int c, int h, int w, Rng& rng, double lo = 0, double hi = 1) {
  auto t = make_tensor<float>(n, c, h, w);
  fill_uniform(*t, rng, lo, hi);
  return t;
}

ModelConfig small_ibunet(Task task = Task::rc, int bw = 4) {
  ModelConfig c = default_config(ModelKind::ibunet, task);
  c.base_width = bw;
  return c;
}

ModelConfig small_baseline(Task task = Task::rc, int bw = 4) {
  ModelConfig c = default_config(ModelKind::baseline, task);
  c.base_width = bw;
  return c;
}

}  // namespace

TEST_CASE("ibunet forward shape contract", "[model]") {
  auto model = build_ibunet<float>(small_ibunet(), 1);
  Rng rng(1);
  auto x = randf(2, 3, 32, 32, rng);
  Tape<float> tape;
  ForwardProbe probe;
  auto y = forward(model, tape, x, false, &probe);
  CHECK(y->n == 2);
  CHECK(y->c == 1);
  CHECK(y->h == 32);
  CHECK(y->w == 32);
  CHECK(probe.neck_h == 2);  // 32 / 2^4
  CHECK(probe.neck_w == 2);
  for (float v : y->v) {
    CHECK(v > 0.0f);
    CHECK(v < 1.0f);
  }
}

TEST_CASE("drc model expects nine input channels", "[model]") {
  auto model = build_ibunet<float>(small_ibunet(Task::drc), 1);
  CHECK(model.params.at("enc1.conv1.w")->c == 9);
  Rng rng(2);
  auto wrong = randf(1, 3, 32, 32, rng);
  Tape<float> tape;
  CHECK_THROWS_MATCHES(forward(model, tape, wrong, false), Error,
                       Catch::Matchers::Predicate<Error>([](const Error& e) {
                         return e.code() == errc::dim_mismatch;
                       }));
  auto x = randf(1, 9, 32, 32, rng);
  auto y = forward(model, tape, x, false);
  CHECK(y->c == 1);
}

TEST_CASE("input spatial size must divide by 2^scales", "[model]") {
  auto model = build_ibunet<float>(small_ibunet(), 1);
  Rng rng(3);
  auto x = randf(1, 3, 24, 24, rng);
  Tape<float> tape;
  CHECK_THROWS_AS(forward(model, tape, x, false), Error);
}

TEST_CASE("baseline shape contract and bottleneck", "[model]") {
  auto model = build_routenet_baseline<float>(small_baseline(), 1);
  Rng rng(4);
  auto x = randf(2, 3, 32, 32, rng);
  Tape<float> tape;
  ForwardProbe probe;
  auto y = forward(model, tape, x, false, &probe);
  CHECK(y->c == 1);
  CHECK(y->h == 32);
  CHECK(probe.neck_h == 4);  // 32 / 2^3

  // no inception parameters, transposed-conv upsampler present
  for (const auto& p : model.params.items())
    CHECK(p.name.find("neck.") == std::string::npos);
  CHECK(model.params.has("dec1.up.w"));
}

TEST_CASE("builders validate their configs", "[model]") {
  ModelConfig c = small_ibunet();
  c.num_scales = 3;
  CHECK_THROWS_MATCHES(build_ibunet<float>(c, 0), Error,
                       Catch::Matchers::Predicate<Error>([](const Error& e) {
                         return e.code() == errc::config_invalid;
                       }));
  c = small_ibunet();
  c.in_channels = 9;  // rc task wants 3
  CHECK_THROWS_AS(build_ibunet<float>(c, 0), Error);
  c = small_baseline();
  c.num_scales = 4;
  CHECK_THROWS_AS(build_routenet_baseline<float>(c, 0), Error);
}

TEST_CASE("inception block preserves shape and equals its branch sum", "[model]") {
  for (int C : {8, 16, 32}) {
    auto holder = build_inception_block<double>(C, NormKind::batch, Activation::prelu, 100 + C);

    Rng rng(200 + C);
    auto x = make_tensor<double>(2, C, 16, 16);
    fill_uniform(*x, rng, -1, 1);
    Tape<double> tape;
    auto fused = inception_fuse(tape, x, holder.params, "inc");
    REQUIRE(fused->n == x->n);
    REQUIRE(fused->c == C);
    REQUIRE(fused->h == 16);
    REQUIRE(fused->w == 16);

    // independent per-branch computation, summed in reverse order
    std::vector<TensorPtr<double>> branches;
    for (int k : {1, 3, 5, 7})
      branches.push_back(conv2d(tape, x, holder.params.at("inc.conv" + std::to_string(k) + ".w"),
                                holder.params.at("inc.conv" + std::to_string(k) + ".b"), 1,
                                (k - 1) / 2));
    branches.push_back(maxpool2d(tape, x, 3, 1, 1));
    branches.push_back(maxpool2d(tape, x, 5, 1, 2));
    auto want = branches.back();
    for (int k = int(branches.size()) - 2; k >= 0; --k) want = add(tape, want, branches[k]);

    for (size_t q = 0; q < fused->size(); ++q) {
      double denom = std::max({std::abs(fused->v[q]), std::abs(want->v[q]), 1e-6});
      REQUIRE(std::abs(fused->v[q] - want->v[q]) / denom <= 1e-6);
    }
  }
}

TEST_CASE("inception with zero conv weights reduces to the pool branches", "[model]") {
  const int C = 6;
  auto holder = build_inception_block<float>(C, NormKind::batch, Activation::prelu, 5);
  for (auto& p : holder.params.items())
    if (p.name.find(".conv") != std::string::npos) std::fill(p.tensor->v.begin(), p.tensor->v.end(), 0.0f);

  Rng rng(6);
  auto x = randf(1, C, 8, 8, rng, -1, 1);
  Tape<float> tape;
  auto fused = inception_fuse(tape, x, holder.params, "inc");
  auto want = add(tape, maxpool2d(tape, x, 3, 1, 1), maxpool2d(tape, x, 5, 1, 2));
  for (size_t q = 0; q < fused->size(); ++q)
    REQUIRE(fused->v[q] == Catch::Approx(want->v[q]).margin(1e-6));

  // the full block applies norm then activation after the six-way sum
  auto block_out = forward(holder, tape, x, /*training=*/true);
  auto normed = batchnorm(tape, want, holder.params.at("inc.norm.gamma"),
                          holder.params.at("inc.norm.beta"),
                          make_tensor<float>(1, C, 1, 1), make_tensor<float>(1, C, 1, 1),
                          1e-5f, 0.1f, true);
  auto acted = prelu(tape, normed, holder.params.at("inc.act.slope"));
  for (size_t q = 0; q < block_out->size(); ++q)
    REQUIRE(block_out->v[q] == Catch::Approx(acted->v[q]).margin(1e-5));
}

TEST_CASE("forward is deterministic", "[model]") {
  auto model = build_ibunet<float>(small_ibunet(), 7);
  Rng rng(7);
  auto x = randf(1, 3, 32, 32, rng);
  Tape<float> t1, t2;
  auto y1 = forward(model, t1, x, false);
  auto y2 = forward(model, t2, x, false);
  CHECK(y1->v == y2->v);
}

TEST_CASE("zeroed conv weights give spatially constant output", "[model]") {
  auto model = build_ibunet<float>(small_ibunet(), 8);
  for (auto& p : model.params.items())
    if (p.name.ends_with(".w")) std::fill(p.tensor->v.begin(), p.tensor->v.end(), 0.0f);
  Rng rng(8);
  auto x = randf(2, 3, 32, 32, rng);
  Tape<float> tape;
  auto y = forward(model, tape, x, false);
  for (int in = 0; in < y->n; ++in) {
    float first = y->at(in, 0, 0, 0);
    for (int q = 0; q < y->h * y->w; ++q) REQUIRE(y->at(in, 0, q / y->w, q % y->w) == first);
  }
}

TEST_CASE("add fusion works when widths match", "[model]") {
  ModelConfig c = small_ibunet();
  c.skip_fusion = SkipFusion::add;
  auto model = build_ibunet<float>(c, 9);
  Rng rng(9);
  auto x = randf(1, 3, 32, 32, rng);
  Tape<float> tape;
  auto y = forward(model, tape, x, false);
  CHECK(y->c == 1);
  CHECK(y->h == 32);

  ModelConfig cb = small_baseline();
  cb.skip_fusion = SkipFusion::add;
  auto base = build_routenet_baseline<float>(cb, 9);
  auto yb = forward(base, tape, x, false);
  CHECK(yb->h == 32);
}

TEST_CASE("param_count follows the shape table", "[model]") {
  // single conv1x1 C->C with bias: C^2 + C
  Model<float> holder;
  holder.spec.config = small_ibunet();
  detail::Builder<float> B{holder, Rng(10)};
  const int C = 5;
  B.conv("only", C, C, 1, 1, 0);
  for (const auto& p : holder.params.items())
    holder.spec.param_shapes.push_back(
        {p.name, {p.tensor->n, p.tensor->c, p.tensor->h, p.tensor->w}});
  CHECK(param_count(holder.spec) == size_t(C) * C + C);

  // inception block at width C: C^2*(1+9+25+49) + 4C convs, 2C norm, C slope
  auto inc = build_inception_block<float>(C, NormKind::batch, Activation::prelu, 11);
  size_t want = size_t(C) * C * (1 + 9 + 25 + 49) + 4 * C + 2 * C + C;
  CHECK(param_count(inc.spec) == want);
}

TEST_CASE("default ibunet stays within 2x of the baseline parameter count", "[model]") {
  auto ib = build_ibunet<float>(default_config(ModelKind::ibunet, Task::rc), 0);
  auto base = build_routenet_baseline<float>(default_config(ModelKind::baseline, Task::rc), 0);
  size_t pi = param_count(ib.spec);
  size_t pb = param_count(base.spec);
  INFO("ibunet " << pi << " baseline " << pb);
  CHECK(pi <= 2 * pb);
  CHECK(param_count(ib.spec) == ib.params.learnable_count());
}

TEST_CASE("model config TOML round trip", "[model]") {
  ModelConfig c = default_config(ModelKind::ibunet, Task::drc);
  c.base_width = 12;
  c.skip_fusion = SkipFusion::add;
  std::string text = write_model_config(ModelKind::ibunet, c);
  ModelKind kind = ModelKind::baseline;
  ModelConfig back = parse_model_config(text, ModelConfig{}, &kind);
  CHECK(kind == ModelKind::ibunet);
  CHECK(back.task == Task::drc);
  CHECK(back.in_channels == 9);
  CHECK(back.base_width == 12);
  CHECK(back.num_scales == 4);
  CHECK(back.norm == NormKind::instance);
  CHECK(back.skip_fusion == SkipFusion::add);

  CHECK_THROWS_MATCHES(parse_model_config("bogus = 1\n", ModelConfig{}), Error,
                       Catch::Matchers::Predicate<Error>([](const Error& e) {
                         return e.code() == errc::config_invalid;
                       }));
  CHECK_THROWS_AS(parse_model_config("base_width = \"x\"\n", ModelConfig{}), Error);
  CHECK_THROWS_AS(parse_model_config("norm = \"weird\"\n", ModelConfig{}), Error);

  ModelConfig commented = parse_model_config("# comment\nbase_width = 7 # inline\n", ModelConfig{});
  CHECK(commented.base_width == 7);
}

TEST_CASE("assembled mini ibunet passes a sampled gradcheck", "[model][gradcheck]") {
  ModelConfig c = default_config(ModelKind::ibunet, Task::rc);
  c.base_width = 2;
  auto model = build_ibunet<double>(c, 12);
  // slope 1 removes every PReLU kink (normalized activations sit near zero,
  // where central differences would straddle it) while the slope gradient
  // path remains live
  for (auto& p : model.params.items())
    if (p.name.ends_with(".slope")) std::fill(p.tensor->v.begin(), p.tensor->v.end(), 1.0);
  Rng rng(12);
  auto x = make_tensor<double>(1, 3, 16, 16);
  fill_uniform(*x, rng, 0.05, 0.95);
  auto target = make_tensor<double>(1, 1, 16, 16);
  fill_uniform(*target, rng, 0.1, 0.9);

  std::vector<TensorPtr<double>> inputs = {x};
  for (auto& p : model.params.items())
    if (p.learnable) inputs.push_back(p.tensor);

  LossFn fn = [&](Tape<double>& tape) {
    auto out = forward(model, tape, x, /*training=*/true);
    return mse_loss(tape, out, target);
  };
  auto res = grad_check_sampled(fn, inputs, 4, Rng(99), 1e-5);
  INFO("checked " << res.checked << " coords, max rel err " << res.max_rel_err);
  CHECK(res.max_rel_err <= 1e-3);
}
