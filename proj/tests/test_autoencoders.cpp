#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "aelab/autoencoders.hpp"
#include "aelab/errors.hpp"
#include "gradcheck.hpp"

namespace aelab {
namespace {

bool all_in_open_unit(const Tensor& t) {
  for (float v : t.data()) {
    if (!(v > 0.0f && v < 1.0f)) return false;
  }
  return true;
}

bool all_finite(const Tensor& t) {
  for (float v : t.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

class FamilyTest : public ::testing::TestWithParam<ModelFamily> {};

TEST_P(FamilyTest, OutputShapeAndRange) {
  const auto spec = ModelSpec::defaults(GetParam(), 32, 32);
  Rng rng(4);
  auto model = build_model<float>(spec, rng);
  auto x = rand_uniform<float>(Shape{2, 3, 32, 32}, rng, 0.0, 1.0);
  const auto out = model->forward(x, rng);
  EXPECT_EQ(out.reconstruction.shape(), x.shape());
  EXPECT_TRUE(all_in_open_unit(out.reconstruction));
  EXPECT_EQ(out.has_aux(), GetParam() == ModelFamily::kDiffusion);

  const auto rec = model->reconstruct(x);
  EXPECT_EQ(rec.shape(), x.shape());
  EXPECT_TRUE(all_in_open_unit(rec));

  auto single = rand_uniform<float>(Shape{3, 32, 32}, rng, 0.0, 1.0);
  EXPECT_EQ(model->reconstruct(single).shape(), single.shape());
  EXPECT_EQ(model->forward(single, rng).reconstruction.shape(), single.shape());
}

TEST_P(FamilyTest, ReconstructIsDeterministic) {
  const auto spec = ModelSpec::defaults(GetParam(), 16, 16);
  Rng rng(6);
  auto model = build_model<float>(spec, rng);
  auto x = rand_uniform<float>(Shape{1, 3, 16, 16}, rng, 0.0, 1.0);
  const auto a = model->reconstruct(x);
  const auto b = model->reconstruct(x);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST_P(FamilyTest, RejectsWrongInputShape) {
  const auto spec = ModelSpec::defaults(GetParam(), 16, 16);
  Rng rng(6);
  auto model = build_model<float>(spec, rng);
  EXPECT_THROW(model->reconstruct(Tensor(Shape{1, 3, 8, 8})), ShapeError);
  EXPECT_THROW(model->reconstruct(Tensor(Shape{16, 16})), ShapeError);
}

TEST_P(FamilyTest, OneAdamStepReducesReconstructionLoss) {
  const auto spec = ModelSpec::defaults(GetParam(), 32, 32);
  Rng rng(10);
  auto model = build_model<float>(spec, rng);
  auto x = rand_uniform<float>(Shape{1, 3, 32, 32}, rng, 0.0, 1.0);
  const auto before = mse_loss(model->reconstruct(x), x).item();

  const auto params = model->parameters();
  std::vector<Tensor> tensors;
  for (const auto& p : params) tensors.push_back(p.tensor);
  zero_grad(std::span<const NamedParameter<float>>(params));
  {
    Tape<float> tape;
    Tape<float>::Recording rec(tape);
    tape.backward(training_loss(model->forward(x, rng), x, LossWeights{}));
  }
  AdamState<float> state;
  adam_step(std::span<const Tensor>(tensors), state);
  EXPECT_LT(mse_loss(model->reconstruct(x), x).item(), before);
}

// Diffusion draws fixed noise so the float and double passes see the same
// sample.
template <typename T>
BasicTensor<T> fixed_loss(Autoencoder<T>& model, const BasicTensor<T>& x,
                          const DiffusionNoise<float>& noise, LossWeights weights = {1.0, 0.1}) {
  if (auto* diff = dynamic_cast<DiffusionAutoencoder<T>*>(&model)) {
    DiffusionNoise<T> n{noise.latent.template cast<T>(), noise.timesteps,
                        noise.diffusion.template cast<T>()};
    return training_loss(diff->forward(x, n), x, weights);
  }
  Rng unused(0);
  return training_loss(model.forward(x, unused), x, LossWeights{});
}

// The noise term reaches only the denoiser, so every other parameter is
// differenced against the loss without it.
template <typename T>
BasicTensor<T> stop_gradient_reference(Autoencoder<T>& model, const BasicTensor<T>& x,
                                       const DiffusionNoise<float>& noise, const std::string& name) {
  if (name.rfind("denoiser.", 0) == 0) return fixed_loss(model, x, noise);
  return fixed_loss(model, x, noise, LossWeights{0.0, 0.1});
}

TEST_P(FamilyTest, FullModelGradientMatchesFiniteDifferences) {
  std::size_t probed = 0, skipped = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto spec = ModelSpec::defaults(GetParam(), 8, 8);
    Rng rng(seed);
    auto model = build_model<float>(spec, rng);
    // Zero biases put untouched ReLU inputs exactly on the kink, where the
    // central difference sees half the slope. Probe a generic point instead.
    for (auto& p : model->parameters()) {
      if (p.tensor.rank() != 1) continue;
      auto bias = p.tensor;
      for (auto& b : bias.mutable_data()) b = static_cast<float>(rng.uniform(-0.05, 0.05));
    }
    Rng unused(0);
    auto wide = build_model<double>(spec, unused);
    copy_parameters(*model, *wide);
    auto x = rand_uniform<float>(Shape{2, 3, 8, 8}, rng, 0.0, 1.0);
    const auto noise = DiffusionNoise<float>::sample(2, spec.latent_dim,
                                                     spec.diffusion.timesteps, rng);
    auto res = testing::check_model_gradients(
        [&noise](auto& m, const auto& in) { return fixed_loss(m, in, noise); },
        [&noise](auto& m, const auto& in, const std::string& name) {
          return stop_gradient_reference(m, in, noise, name);
        },
        *model, *wide, x, 1e-5, 4, rng);
    EXPECT_LT(res.relative_error, 1e-4) << family_name(GetParam()) << " seed " << seed;
    probed += res.probed;
    skipped += res.skipped;
  }
  RecordProperty("skipped", std::to_string(skipped) + "/" + std::to_string(probed));
  EXPECT_LE(skipped * 100, probed) << skipped << " of " << probed << " stencils crossed a kink";
}

INSTANTIATE_TEST_SUITE_P(AllFamilies, FamilyTest,
                         ::testing::Values(ModelFamily::kFeedforward,
                                           ModelFamily::kConvolutional, ModelFamily::kDiffusion),
                         [](const auto& info) { return family_name(info.param); });

TEST(ModelSpec, Validation) {
  auto spec = ModelSpec::defaults(ModelFamily::kConvolutional, 30, 32);
  EXPECT_THROW(spec.validate(), ConfigError);
  spec = ModelSpec::defaults(ModelFamily::kFeedforward, 30, 30);
  EXPECT_NO_THROW(spec.validate());
  spec.latent_dim = 0;
  EXPECT_THROW(spec.validate(), ConfigError);
  EXPECT_THROW(ConvolutionalAutoencoder<float>(ModelSpec::defaults(ModelFamily::kDiffusion)),
               ConfigError);
}

TEST(ModelSpec, DefaultInitPerFamily) {
  EXPECT_EQ(ModelSpec::defaults(ModelFamily::kFeedforward).init, InitScheme::kFanInUniform);
  EXPECT_EQ(ModelSpec::defaults(ModelFamily::kConvolutional).init, InitScheme::kHeUniform);
  EXPECT_EQ(ModelSpec::defaults(ModelFamily::kDiffusion).init, InitScheme::kHeUniform);
}

TEST(ModelSpec, InitSchemeSetsWeightBound) {
  for (auto scheme : {InitScheme::kFanInUniform, InitScheme::kHeUniform}) {
    auto spec = ModelSpec::defaults(ModelFamily::kConvolutional, 16, 16);
    spec.init = scheme;
    Rng rng(3);
    const auto model = build_convolutional<float>(spec, rng);
    const auto& first = model->stack().encoder().layers().front();
    const double a = init_bound(scheme, first.fan_in());
    float peak = 0.0f;
    for (float w : first.weight().data()) peak = std::max(peak, std::abs(w));
    EXPECT_LE(peak, a);
    EXPECT_GT(peak, 0.9 * a);
  }
}

TEST(ModelSpec, ParseFamily) {
  EXPECT_EQ(parse_family("ff"), ModelFamily::kFeedforward);
  EXPECT_EQ(parse_family("convolutional"), ModelFamily::kConvolutional);
  EXPECT_EQ(parse_family("diff"), ModelFamily::kDiffusion);
  EXPECT_THROW(parse_family("gan"), ConfigError);
}

TEST(Feedforward, DefaultGeometry) {
  const auto spec = ModelSpec::defaults(ModelFamily::kFeedforward);
  EXPECT_EQ(spec.input_numel(), 120000u);
  const FeedforwardAutoencoder<float> model(spec);
  const auto& enc = model.encoder().layers();
  const auto& dec = model.decoder().layers();
  EXPECT_EQ(enc.front().geometry().in, 120000u);
  EXPECT_EQ(enc.front().geometry().out, 512u);
  EXPECT_EQ(enc.back().geometry().out, 64u);
  EXPECT_EQ(dec.front().geometry().in, 64u);
  EXPECT_EQ(dec[2].geometry().in, 512u);
  EXPECT_EQ(dec[2].geometry().out, 120000u);
  EXPECT_EQ(dec.back().activation_fn(), Activation::kSigmoid);
}

TEST(Convolutional, FullResolutionShapeChain) {
  const auto spec = ModelSpec::defaults(ModelFamily::kConvolutional);
  Rng rng(1);
  auto model = build_convolutional<float>(spec, rng);
  auto h = rand_uniform<float>(Shape{1, 3, 200, 200}, rng, 0.0, 1.0);
  std::vector<Shape> conv_shapes;
  for (const auto& layer : model->stack().encoder().layers()) {
    h = layer.forward(h);
    if (layer.kind() == LayerKind::kConv) conv_shapes.push_back(h.shape());
  }
  ASSERT_EQ(conv_shapes.size(), 3u);
  EXPECT_EQ(conv_shapes[0], (Shape{1, 32, 100, 100}));
  EXPECT_EQ(conv_shapes[1], (Shape{1, 64, 50, 50}));
  EXPECT_EQ(conv_shapes[2], (Shape{1, 128, 25, 25}));
  EXPECT_EQ(spec.encoded_features(), 80000u);
  EXPECT_EQ(flatten(h, 1).shape(), (Shape{1, 80000}));
  const auto z = model->encode(rand_uniform<float>(Shape{3, 200, 200}, rng, 0.0, 1.0));
  EXPECT_EQ(z.shape(), (Shape{1, 64}));
  EXPECT_EQ(model->decode(z).shape(), (Shape{1, 3, 200, 200}));
}

TEST(Diffusion, EncodeShapesAndDeterminism) {
  const auto spec = ModelSpec::defaults(ModelFamily::kDiffusion, 32, 32);
  Rng rng(2);
  auto model = build_diffusion<float>(spec, rng);
  auto x = rand_uniform<float>(Shape{3, 32, 32}, rng, 0.0, 1.0);
  const auto a = model->encode(x);
  const auto b = model->encode(x);
  EXPECT_EQ(a.mean.shape(), (Shape{64}));
  EXPECT_EQ(a.logvar.shape(), (Shape{64}));
  EXPECT_TRUE(std::equal(a.mean.data().begin(), a.mean.data().end(), b.mean.data().begin()));
  EXPECT_TRUE(all_finite(a.mean));
  EXPECT_TRUE(all_finite(a.logvar));
}

TEST(Diffusion, ScheduleEndpointsAndMonotonicity) {
  const auto s = NoiseSchedule::linear(100, 1e-4, 0.02);
  ASSERT_EQ(s.timesteps(), 100);
  EXPECT_NEAR(s.alpha_bar[0], 0.9999, 1e-12);
  EXPECT_DOUBLE_EQ(s.beta[99], 0.02);
  double product = 1.0;
  for (int t = 0; t < 100; ++t) {
    EXPECT_GT(s.beta[t], 0.0);
    EXPECT_LT(s.beta[t], 1.0);
    if (t > 0) {
      EXPECT_GE(s.beta[t], s.beta[t - 1]);
      EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
    }
    EXPECT_DOUBLE_EQ(s.alpha[t], 1.0 - s.beta[t]);
    product *= 1.0 - s.beta[t];
    EXPECT_NEAR(s.alpha_bar[t], product, 1e-6);
    EXPECT_GT(s.alpha_bar[t], 0.0);
    EXPECT_LT(s.alpha_bar[t], 1.0);
  }
  EXPECT_THROW(NoiseSchedule::linear(0, 1e-4, 0.02), ConfigError);
  EXPECT_THROW(NoiseSchedule::linear(10, 0.0, 0.02), ConfigError);
}

TEST(Reparameterize, ClosedFormCases) {
  Tensor mean(Shape{3}, std::vector<float>{0.5f, -1.0f, 2.0f});
  Tensor logvar(Shape{3});
  const LatentDistribution<float> dist{mean, logvar};
  const auto z0 = reparameterize(dist, Tensor(Shape{3}));
  EXPECT_TRUE(std::equal(z0.data().begin(), z0.data().end(), mean.data().begin()));
  const auto z1 = reparameterize(dist, Tensor::full(Shape{3}, 1.0f));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_FLOAT_EQ(z1.data()[i], mean.data()[i] + 1.0f);
  EXPECT_THROW(reparameterize(dist, Tensor(Shape{4})), ShapeError);
}

TEST(Reparameterize, MonteCarloMoments) {
  constexpr std::size_t n = 10000;
  const float mu = 0.7f, lv = -0.6f;
  Rng rng(17);
  const LatentDistribution<float> dist{Tensor::full(Shape{n}, mu), Tensor::full(Shape{n}, lv)};
  const auto z = reparameterize(dist, randn<float>(Shape{n}, rng));
  double sum = 0, sq = 0;
  for (float v : z.data()) {
    sum += v;
    sq += static_cast<double>(v) * v;
  }
  const double m = sum / n;
  const double var = sq / n - m * m;
  EXPECT_NEAR(var, std::exp(lv), 0.05 * std::exp(lv));
  EXPECT_NEAR(m, mu, 0.05 * std::abs(mu));
}

TEST(DiffuseForward, NoiselessScaling) {
  const auto s = NoiseSchedule::linear(100, 1e-4, 0.02);
  Tensor z0(Shape{2}, std::vector<float>{1.0f, -3.0f});
  const auto zt = diffuse_forward(z0, 40, s, Tensor(Shape{2}));
  EXPECT_FLOAT_EQ(zt.data()[0], static_cast<float>(std::sqrt(s.alpha_bar[40])));
  EXPECT_FLOAT_EQ(zt.data()[1], static_cast<float>(-3.0 * std::sqrt(s.alpha_bar[40])));
  EXPECT_THROW(diffuse_forward(z0, 100, s, Tensor(Shape{2})), ContractError);
  EXPECT_THROW(diffuse_forward(z0, -1, s, Tensor(Shape{2})), ContractError);
}

TEST(DiffuseForward, MonteCarloMomentsWithinThreeStandardErrors) {
  constexpr std::size_t n = 10000;
  const auto s = NoiseSchedule::linear(100, 1e-4, 0.02);
  const float z = 1.3f;
  Rng rng(23);
  for (int t : {0, 49, 99}) {
    const auto zt = diffuse_forward(Tensor::full(Shape{n}, z), t, s, randn<float>(Shape{n}, rng));
    double sum = 0, sq = 0;
    for (float v : zt.data()) sum += v;
    const double m = sum / n;
    for (float v : zt.data()) sq += (v - m) * (v - m);
    const double var = sq / (n - 1);
    const double expected_var = 1.0 - s.alpha_bar[t];
    const double se_mean = std::sqrt(expected_var / n);
    const double se_var = expected_var * std::sqrt(2.0 / (n - 1));
    EXPECT_LT(std::abs(m - std::sqrt(s.alpha_bar[t]) * z), 3 * se_mean) << "t=" << t;
    EXPECT_LT(std::abs(var - expected_var), 3 * se_var) << "t=" << t;
  }
}

TEST(DenoisePredict, ShapeDeterminismAndTimestepSensitivity) {
  const auto spec = ModelSpec::defaults(ModelFamily::kDiffusion, 16, 16);
  Rng rng(12);
  auto model = build_diffusion<float>(spec, rng);
  const auto z = randn<float>(Shape{64}, rng);
  const auto e0 = model->denoise_predict(z, 0);
  const auto e0b = model->denoise_predict(z, 0);
  const auto e99 = model->denoise_predict(z, 99);
  EXPECT_EQ(e0.shape(), (Shape{64}));
  EXPECT_TRUE(std::equal(e0.data().begin(), e0.data().end(), e0b.data().begin()));
  EXPECT_FALSE(std::equal(e0.data().begin(), e0.data().end(), e99.data().begin()));
  EXPECT_THROW(model->denoise_predict(z, 100), ContractError);
  EXPECT_EQ(model->denoiser_inputs(), 64u + 1u + 16u);
}

TEST(DenoisePredict, ExtraBlocksExtendTheNetwork) {
  auto spec = ModelSpec::defaults(ModelFamily::kDiffusion, 16, 16);
  const DiffusionAutoencoder<float> base(spec);
  spec.diffusion.extra_blocks = 2;
  const DiffusionAutoencoder<float> extended(spec);
  // five primary Linear+ReLU pairs plus the output layer
  EXPECT_EQ(base.denoiser().size(), 11u);
  EXPECT_EQ(extended.denoiser().size(), 15u);
  EXPECT_EQ(count_parameters(extended) - count_parameters(base), 2u * (256u * 256u + 256u));
}

TEST(ReverseDiffusion, PerfectOracleRecoversLatentAtSingleStep) {
  const auto s = NoiseSchedule::linear(1, 1e-4, 1e-4);
  Rng rng(31);
  const auto z0 = randn<float>(Shape{8}, rng);
  const auto eps = randn<float>(Shape{8}, rng);
  const auto z1 = diffuse_forward(z0, 0, s, eps);
  NoisePredictor<float> oracle = [&eps](const Tensor&, int) { return eps; };
  const auto rec = reverse_diffusion(oracle, z1, s, &rng, false);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(rec.data()[i], z0.data()[i], 1e-5);
}

TEST(ReverseDiffusion, DeterministicModeIsBitIdenticalAndFinite) {
  const auto spec = ModelSpec::defaults(ModelFamily::kDiffusion, 16, 16);
  Rng rng(13);
  auto model = build_diffusion<float>(spec, rng);
  const auto zeros = Tensor(Shape{64});
  Rng r1(1), r2(2);
  const auto a = model->reverse_diffusion(zeros, &r1, true);
  const auto b = model->reverse_diffusion(zeros, &r2, true);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  EXPECT_TRUE(all_finite(a));
  Rng r3(1);
  const auto c = model->reverse_diffusion(zeros, &r3, false);
  EXPECT_FALSE(std::equal(a.data().begin(), a.data().end(), c.data().begin()));
}

TEST(InvertReverseDiffusion, ExactForNoiseFreePredictors) {
  // With ε̂ independent of z each inverted step is undone exactly.
  const auto s = NoiseSchedule::linear(100, 1e-4, 0.02);
  Rng rng(32);
  const auto z0 = randn<double>(Shape{2, 8}, rng);
  const auto offset = randn<double>(Shape{2, 8}, rng);
  NoisePredictor<double> zero = [](const BasicTensor<double>& z, int) {
    return BasicTensor<double>(z.shape());
  };
  NoisePredictor<double> constant = [&offset](const BasicTensor<double>&, int) { return offset; };
  for (const auto& predict : {zero, constant}) {
    const auto z_T = invert_reverse_diffusion(predict, z0, s);
    const auto back = reverse_diffusion(predict, z_T, s, nullptr, true);
    for (std::size_t i = 0; i < z0.numel(); ++i) EXPECT_NEAR(back.data()[i], z0.data()[i], 1e-9);
  }
  // zero predictor: z_T is the noiseless forward marginal
  const auto z_T = invert_reverse_diffusion(zero, z0, s);
  const auto expected = diffuse_forward(z0, 99, s, BasicTensor<double>(z0.shape()));
  for (std::size_t i = 0; i < z0.numel(); ++i) {
    EXPECT_NEAR(z_T.data()[i], expected.data()[i], 1e-9);
  }
}

TEST(InvertReverseDiffusion, ShrinkingPredictorRoundTripBeatsNoiselessStart) {
  // ε̂ = 0.5·z mimics a denoiser that reads part of a clean latent as noise.
  const auto s = NoiseSchedule::linear(100, 1e-4, 0.02);
  Rng rng(33);
  const auto z0 = randn<double>(Shape{4, 16}, rng);
  NoisePredictor<double> shrink = [](const BasicTensor<double>& z, int) {
    BasicTensor<double> out(z.shape());
    auto d = out.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = 0.5 * z.data()[i];
    return out;
  };
  const auto err = [&](const BasicTensor<double>& z_T) {
    return mse_loss(reverse_diffusion(shrink, z_T, s, nullptr, true), z0).item();
  };
  const double scale = mse_loss(z0, BasicTensor<double>(z0.shape())).item();
  const double inverted = err(invert_reverse_diffusion(shrink, z0, s));
  const double naive = err(diffuse_forward(z0, 99, s, BasicTensor<double>(z0.shape())));
  EXPECT_LT(inverted, 1e-4 * scale);
  EXPECT_GT(naive, 100.0 * inverted);
}

TEST(DiffusionForward, NoiseTermTrainsOnlyTheDenoiser) {
  const auto spec = ModelSpec::defaults(ModelFamily::kDiffusion, 16, 16);
  Rng rng(16);
  auto model = build_diffusion<float>(spec, rng);
  auto x = rand_uniform<float>(Shape{2, 3, 16, 16}, rng, 0.0, 1.0);
  const auto params = model->parameters();
  zero_grad(std::span<const NamedParameter<float>>(params));
  {
    Tape<float> tape;
    Tape<float>::Recording rec(tape);
    const auto r = model->forward(x, rng);
    tape.backward(mse_loss(r.predicted_noise, r.noise));
  }
  for (const auto& p : params) {
    const auto g = p.tensor.grad();
    const bool any = std::any_of(g.begin(), g.end(), [](float v) { return v != 0.0f; });
    EXPECT_EQ(any, p.name.rfind("denoiser.", 0) == 0) << p.name;
  }
}

TEST(DiffusionForward, AuxiliaryOutputs) {
  const auto spec = ModelSpec::defaults(ModelFamily::kDiffusion, 16, 16);
  Rng rng(14);
  auto model = build_diffusion<float>(spec, rng);
  auto x = rand_uniform<float>(Shape{3, 3, 16, 16}, rng, 0.0, 1.0);
  const auto r = model->forward(x, rng);
  EXPECT_EQ(r.mean.shape(), (Shape{3, 64}));
  EXPECT_EQ(r.logvar.shape(), (Shape{3, 64}));
  EXPECT_EQ(r.z0.shape(), (Shape{3, 64}));
  EXPECT_EQ(r.noise.shape(), (Shape{3, 64}));
  EXPECT_EQ(r.predicted_noise.shape(), (Shape{3, 64}));
  ASSERT_EQ(r.timesteps.size(), 3u);
  for (int t : r.timesteps) {
    EXPECT_GE(t, 0);
    EXPECT_LT(t, 100);
  }
  const auto x_hat = model->decode(r.z0);
  EXPECT_TRUE(std::equal(x_hat.data().begin(), x_hat.data().end(),
                         r.reconstruction.data().begin()));
}

TEST(DiffusionForward, TimestepsAreUniform) {
  constexpr int n = 10000, T = 100;
  Rng rng(41);
  const auto noise = DiffusionNoise<float>::sample(n, 1, T, rng);
  std::vector<int> counts(T, 0);
  for (int t : noise.timesteps) ++counts.at(static_cast<std::size_t>(t));
  const double expected = static_cast<double>(n) / T;
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  // 99 degrees of freedom, upper 0.001 quantile
  EXPECT_LT(chi2, 148.23);
}

TEST(TrainingLoss, AddsNoiseAndKlTerms) {
  const auto spec = ModelSpec::defaults(ModelFamily::kDiffusion, 16, 16);
  Rng rng(15);
  auto model = build_diffusion<float>(spec, rng);
  auto x = rand_uniform<float>(Shape{2, 3, 16, 16}, rng, 0.0, 1.0);
  const auto r = model->forward(x, rng);
  const double rec = mse_loss(r.reconstruction, x).item();
  const double noise = mse_loss(r.predicted_noise, r.noise).item();
  const double kl = kl_standard_normal(r.mean, r.logvar).item();
  EXPECT_NEAR(training_loss(r, x, LossWeights{1.0, 0.0}).item(), rec + noise, 1e-5);
  EXPECT_NEAR(training_loss(r, x, LossWeights{0.5, 2.0}).item(), rec + 0.5 * noise + 2.0 * kl,
              1e-4);
}

}  // namespace
}  // namespace aelab
