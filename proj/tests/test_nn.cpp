#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "aelab/autoencoders.hpp"
#include "aelab/errors.hpp"
#include "aelab/nn.hpp"
#include "gradcheck.hpp"

namespace aelab {
namespace {

using testing::check_gradients;

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

TEST(Init, SameSeedGivesIdenticalParameters) {
  auto a = Layer<float>::conv("c", 3, 8, 4, 2, 1);
  auto b = Layer<float>::conv("c", 3, 8, 4, 2, 1);
  Rng r1(99), r2(99);
  init_parameters(a, r1);
  init_parameters(b, r2);
  EXPECT_EQ(values(a.weight()), values(b.weight()));
  EXPECT_EQ(values(a.bias()), values(b.bias()));
  for (float v : a.bias().data()) EXPECT_EQ(v, 0.0f);
}

TEST(Init, DifferentSeedsDiffer) {
  auto a = Layer<float>::linear("l", 10, 10);
  auto b = Layer<float>::linear("l", 10, 10);
  Rng r1(1), r2(2);
  init_parameters(a, r1);
  init_parameters(b, r2);
  EXPECT_NE(values(a.weight()), values(b.weight()));
}

TEST(Init, LinearBottleneckShapes) {
  const auto layer = Layer<float>::linear("fc", 80000, 64);
  EXPECT_EQ(layer.weight().shape(), (Shape{64, 80000}));
  EXPECT_EQ(layer.bias().shape(), (Shape{64}));
}

TEST(Init, FanInPerKind) {
  EXPECT_EQ(Layer<float>::linear("l", 7, 3).fan_in(), 7u);
  EXPECT_EQ(Layer<float>::conv("c", 3, 32, 4, 2, 1).fan_in(), 48u);
  EXPECT_EQ(Layer<float>::conv_transpose("d", 64, 32, 4, 2, 1).fan_in(), 512u);
}

void expect_uniform_bound(InitScheme scheme, double a) {
  // fan_in 100 and 1000 outputs -> 10^5 draws.
  auto layer = Layer<float>::linear("l", 100, 1000);
  Rng rng(5);
  init_parameters(layer, rng, scheme);
  const auto w = layer.weight().data();
  double sum = 0.0, sq = 0.0;
  for (float v : w) {
    sum += v;
    sq += static_cast<double>(v) * v;
  }
  const double n = static_cast<double>(w.size());
  const double mean = sum / n;
  const double sd = std::sqrt(sq / n - mean * mean);
  EXPECT_EQ(w.size(), 100000u);
  EXPECT_NEAR(sd, a / std::sqrt(3.0), 0.05 * a / std::sqrt(3.0));
  for (float v : w) {
    EXPECT_GE(v, -a);
    EXPECT_LE(v, a);
  }
  for (float b : layer.bias().data()) EXPECT_EQ(b, 0.0f);
}

TEST(Init, UniformStddevMatchesClosedForm) {
  expect_uniform_bound(InitScheme::kFanInUniform, std::sqrt(1.0 / 100.0));
}

TEST(Init, HeUniformStddevMatchesClosedForm) {
  expect_uniform_bound(InitScheme::kHeUniform, std::sqrt(6.0 / 100.0));
}

TEST(Init, SchemeNames) {
  EXPECT_DOUBLE_EQ(init_bound(InitScheme::kFanInUniform, 16), 0.25);
  EXPECT_DOUBLE_EQ(init_bound(InitScheme::kHeUniform, 24), 0.5);
  for (auto scheme : {InitScheme::kFanInUniform, InitScheme::kHeUniform}) {
    EXPECT_EQ(parse_init_scheme(init_scheme_name(scheme)), scheme);
  }
  EXPECT_THROW(parse_init_scheme("xavier"), ConfigError);
}

TEST(Init, InvalidGeometryRejected) {
  EXPECT_THROW(Layer<float>::linear("l", 0, 3), ConfigError);
  EXPECT_THROW(Layer<float>::conv("c", 1, 1, 3, 0, 0), ConfigError);
}

TEST(Mse, IdenticalInputsGiveZero) {
  Tensor a(Shape{3}, std::vector<float>{0.1f, 0.2f, 0.3f});
  EXPECT_EQ(mse_loss(a, a).item(), 0.0f);
}

TEST(Mse, UnitDifference) {
  Tensor p(Shape{2}, std::vector<float>{0, 0});
  Tensor t(Shape{2}, std::vector<float>{1, 1});
  EXPECT_FLOAT_EQ(mse_loss(p, t).item(), 1.0f);
}

TEST(Mse, ShapeMismatch) {
  EXPECT_THROW(mse_loss(Tensor(Shape{2}), Tensor(Shape{3})), ShapeError);
}

TEST(Mse, NonNegativeAndZeroOnlyWhenEqual) {
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    auto a = randn<float>(Shape{4, 5}, rng);
    auto b = a.detach();
    EXPECT_EQ(mse_loss(a, b).item(), 0.0f);
    b.mutable_data()[static_cast<std::size_t>(i % 20)] += 1e-3f;
    EXPECT_GT(mse_loss(a, b).item(), 0.0f);
  }
}

TEST(Mse, GradientMatchesClosedForm) {
  Tensor p(Shape{4}, std::vector<float>{0.5f, -1.0f, 2.0f, 0.0f}, true);
  Tensor t(Shape{4}, std::vector<float>{1.0f, 1.0f, 1.0f, 1.0f});
  Tape<float> tape;
  {
    Tape<float>::Recording rec(tape);
    tape.backward(mse_loss(p, t));
  }
  const auto g = p.grad();
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_FLOAT_EQ(g[i], 2.0f * (p.data()[i] - t.data()[i]) / 4.0f);
  }
}

TEST(Mse, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto p = randn<float>(Shape{3, 4}, rng);
    auto t = randn<float>(Shape{3, 4}, rng);
    auto res = check_gradients([](auto& in) { return mse_loss(in[0], in[1]); }, {p, t}, 1e-3);
    EXPECT_LT(res.max_relative_error, 1e-4) << "seed " << seed;
  }
}

TEST(Kl, ZeroForStandardNormal) {
  Tensor mean(Shape{2, 3});
  Tensor logvar(Shape{2, 3});
  EXPECT_FLOAT_EQ(kl_standard_normal(mean, logvar).item(), 0.0f);
}

TEST(Kl, ClosedFormAndGradient) {
  // One row, one dimension: KL = 0.5 (σ² + μ² - 1 - log σ²).
  Tensor mean(Shape{1, 1}, std::vector<float>{0.5f});
  Tensor logvar(Shape{1, 1}, std::vector<float>{std::log(2.0f)});
  EXPECT_NEAR(kl_standard_normal(mean, logvar).item(),
              0.5 * (2.0 + 0.25 - 1.0 - std::log(2.0)), 1e-6);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto m = randn<float>(Shape{2, 3}, rng);
    auto lv = randn<float>(Shape{2, 3}, rng);
    auto res =
        check_gradients([](auto& in) { return kl_standard_normal(in[0], in[1]); }, {m, lv}, 1e-3);
    EXPECT_LT(res.max_relative_error, 1e-4) << "seed " << seed;
  }
}

// 64-bit reference used as the oracle for the optimizer.
struct ReferenceAdam {
  double m = 0, v = 0;
  int t = 0;
  double step(double theta, double g, const AdamConfig& c) {
    ++t;
    m = c.beta1 * m + (1 - c.beta1) * g;
    v = c.beta2 * v + (1 - c.beta2) * g * g;
    const double mh = m / (1 - std::pow(c.beta1, t));
    const double vh = v / (1 - std::pow(c.beta2, t));
    return theta - c.lr * mh / (std::sqrt(vh) + c.eps);
  }
};

void set_grad(Tensor& t, std::vector<float> g) {
  t.zero_grad();
  auto dst = t.mutable_grad();
  std::copy(g.begin(), g.end(), dst.begin());
}

TEST(Adam, FirstStepClosedForm) {
  Tensor theta(Shape{1}, true);
  set_grad(theta, {1.0f});
  AdamState<float> state;
  std::vector<Tensor> params{theta};
  adam_step(std::span<const Tensor>(params), state);
  EXPECT_LT(std::abs(static_cast<double>(theta.item()) + 1e-3), 1e-8);
  EXPECT_EQ(state.step, 1);
}

TEST(Adam, ZeroGradientLeavesParameterUnchanged) {
  Tensor theta(Shape{3}, std::vector<float>{0.25f, -1.5f, 3.0f}, true);
  const auto before = values(theta);
  set_grad(theta, {0, 0, 0});
  AdamState<float> state;
  std::vector<Tensor> params{theta};
  adam_step(std::span<const Tensor>(params), state);
  EXPECT_EQ(values(theta), before);
}

TEST(Adam, FiveStepsMatchReference) {
  const std::vector<double> grads = {0.3, -1.2, 0.05, 2.5, -0.7};
  Tensor theta(Shape{1}, std::vector<float>{0.4f}, true);
  AdamState<float> state;
  ReferenceAdam ref;
  double expected = 0.4;
  std::vector<Tensor> params{theta};
  for (double g : grads) {
    set_grad(theta, {static_cast<float>(g)});
    adam_step(std::span<const Tensor>(params), state);
    expected = ref.step(expected, g, state.config);
    EXPECT_NEAR(theta.item(), expected, 1e-6);
  }
  EXPECT_EQ(state.step, 5);
}

TEST(Adam, ParametersUpdateIndependently) {
  Tensor a(Shape{2}, true), b(Shape{2}, true), c(Shape{2}, true);
  set_grad(a, {1.0f, -2.0f});
  set_grad(b, {1.0f, -2.0f});
  set_grad(c, {0.5f, 3.0f});
  AdamState<float> state;
  std::vector<Tensor> params{a, b, c};
  adam_step(std::span<const Tensor>(params), state);
  EXPECT_EQ(state.m[0], state.m[1]);
  EXPECT_EQ(state.v[0], state.v[1]);
  EXPECT_NE(state.m[0], state.m[2]);
  EXPECT_EQ(values(a), values(b));
  EXPECT_NE(values(a), values(c));
}

TEST(Adam, SecondMomentStaysNonNegative) {
  Rng rng(8);
  Tensor p = randn<float>(Shape{50}, rng).set_requires_grad(true);
  AdamState<float> state;
  std::vector<Tensor> params{p};
  for (int i = 0; i < 10; ++i) {
    auto g = randn<float>(Shape{50}, rng);
    set_grad(p, values(g));
    adam_step(std::span<const Tensor>(params), state);
    EXPECT_EQ(state.step, i + 1);
    for (float v : state.v[0]) EXPECT_GE(v, 0.0f);
  }
}

TEST(Adam, MissingGradientIsContractError) {
  Tensor p(Shape{2}, true);
  AdamState<float> state;
  std::vector<Tensor> params{p};
  EXPECT_THROW(adam_step(std::span<const Tensor>(params), state), ContractError);
}

TEST(CountParameters, SmallLinear) {
  Sequential<float> net({Layer<float>::linear("l", 2, 3)});
  EXPECT_EQ(count_parameters(net), 9u);
}

TEST(CountParameters, ConvolutionalDefault) {
  const ConvolutionalAutoencoder<float> model(ModelSpec::defaults(ModelFamily::kConvolutional));
  EXPECT_EQ(count_parameters(model), 10651139u);
}

// Sum of weight and bias sizes for a chain of linear widths.
std::size_t linear_chain_parameters(const std::vector<std::size_t>& widths) {
  std::size_t total = 0;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    total += widths[i] * widths[i + 1] + widths[i + 1];
  }
  return total;
}

TEST(CountParameters, FeedforwardDefault) {
  const FeedforwardAutoencoder<float> model(ModelSpec::defaults(ModelFamily::kFeedforward));
  const std::size_t oracle = linear_chain_parameters({120000, 512, 64, 512, 120000});
  EXPECT_EQ(count_parameters(model), oracle);
  EXPECT_EQ(count_parameters(model), 123066624u);
  EXPECT_GT(count_parameters(model), 10651139u);
}

TEST(ZeroGrad, ClearsAccumulatedGradients) {
  auto layer = Layer<float>::linear("l", 3, 2);
  Rng rng(1);
  init_parameters(layer, rng);
  auto x = randn<float>(Shape{4, 3}, rng);
  Tape<float> tape;
  {
    Tape<float>::Recording rec(tape);
    tape.backward(mean(layer.forward(x)));
  }
  const auto params = layer.parameters();
  EXPECT_TRUE(params[1].tensor.has_grad());
  zero_grad(std::span<const NamedParameter<float>>(params));
  for (const auto& p : params) {
    for (float g : p.tensor.grad()) EXPECT_EQ(g, 0.0f);
  }
}

}  // namespace
}  // namespace aelab
