#include "aelab/autoencoders.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace aelab {

std::string family_name(ModelFamily family) {
  switch (family) {
    case ModelFamily::kFeedforward:
      return "feedforward";
    case ModelFamily::kConvolutional:
      return "convolutional";
    case ModelFamily::kDiffusion:
      return "diffusion";
  }
  return "unknown";
}

ModelFamily parse_family(std::string_view text) {
  if (text == "ff" || text == "feedforward") return ModelFamily::kFeedforward;
  if (text == "conv" || text == "convolutional") return ModelFamily::kConvolutional;
  if (text == "diff" || text == "diffusion") return ModelFamily::kDiffusion;
  throw ConfigError("unknown model family '" + std::string(text) + "' (expected ff, conv or diff)");
}

// ---------------------------------------------------------------------------
// ModelSpec

ModelSpec ModelSpec::defaults(ModelFamily family, std::size_t height, std::size_t width) {
  ModelSpec spec;
  spec.family = family;
  spec.height = height;
  spec.width = width;
  if (family != ModelFamily::kFeedforward) spec.init = InitScheme::kHeUniform;
  return spec;
}

void ModelSpec::validate() const {
  if (channels == 0 || height == 0 || width == 0) {
    throw ConfigError("model spec: input dimensions must be positive");
  }
  if (latent_dim < 1) throw ConfigError("model spec: latent_dim must be >= 1");
  if (family == ModelFamily::kFeedforward) {
    for (auto h : hidden) {
      if (h == 0) throw ConfigError("model spec: hidden widths must be positive");
    }
    return;
  }
  if (channel_chain.empty()) throw ConfigError("model spec: channel_chain must not be empty");
  for (auto c : channel_chain) {
    if (c == 0) throw ConfigError("model spec: channel_chain entries must be positive");
  }
  const std::size_t factor = std::size_t{1} << channel_chain.size();
  if (height % factor != 0 || width % factor != 0) {
    throw ConfigError("model spec: height and width must be divisible by " +
                      std::to_string(factor) + " for " + std::to_string(channel_chain.size()) +
                      " stride-2 layers, got " + std::to_string(height) + "x" +
                      std::to_string(width));
  }
  if (family == ModelFamily::kDiffusion) {
    const auto& d = diffusion;
    if (d.timesteps < 1) throw ConfigError("model spec: diffusion timesteps must be >= 1");
    if (!(d.beta_start > 0.0) || !(d.beta_end < 1.0) || d.beta_start > d.beta_end) {
      throw ConfigError("model spec: beta range must satisfy 0 < beta_start <= beta_end < 1");
    }
    if (d.denoiser_width == 0) throw ConfigError("model spec: denoiser_width must be positive");
    if (d.time_features % 2 != 0) throw ConfigError("model spec: time_features must be even");
  }
}

std::size_t ModelSpec::encoded_height() const { return height >> channel_chain.size(); }
std::size_t ModelSpec::encoded_width() const { return width >> channel_chain.size(); }
std::size_t ModelSpec::encoded_features() const {
  return channel_chain.back() * encoded_height() * encoded_width();
}

// ---------------------------------------------------------------------------
// Noise schedule and latent sampling

NoiseSchedule NoiseSchedule::linear(int timesteps, double beta_start, double beta_end) {
  if (timesteps < 1) throw ConfigError("noise schedule: timesteps must be >= 1");
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end) {
    throw ConfigError("noise schedule: need 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  const auto n = static_cast<std::size_t>(timesteps);
  s.beta.resize(n);
  s.alpha.resize(n);
  s.alpha_bar.resize(n);
  double running = 1.0;
  for (std::size_t t = 0; t < n; ++t) {
    const double frac = n == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(n - 1);
    s.beta[t] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[t] = 1.0 - s.beta[t];
    running *= s.alpha[t];
    s.alpha_bar[t] = running;
  }
  return s;
}

template <typename T>
BasicTensor<T> reparameterize(const LatentDistribution<T>& dist, const BasicTensor<T>& noise) {
  if (dist.mean.shape() != dist.logvar.shape() || noise.shape() != dist.mean.shape()) {
    throw ShapeError("reparameterize: mean " + shape_str(dist.mean.shape()) + ", logvar " +
                     shape_str(dist.logvar.shape()) + " and noise " + shape_str(noise.shape()) +
                     " must share a shape");
  }
  const auto stddev = exp(scale(dist.logvar, T{0.5}));
  return add(dist.mean, mul(stddev, noise));
}

namespace {

void check_timestep(int t, const NoiseSchedule& schedule) {
  if (t < 0 || t >= schedule.timesteps()) {
    throw ContractError("timestep " + std::to_string(t) + " outside [0, " +
                        std::to_string(schedule.timesteps()) + ")");
  }
}

}  // namespace

template <typename T>
BasicTensor<T> diffuse_forward(const BasicTensor<T>& z0, int t, const NoiseSchedule& schedule,
                               const BasicTensor<T>& noise) {
  check_timestep(t, schedule);
  if (z0.shape() != noise.shape()) {
    throw ShapeError("diffuse_forward: z0 " + shape_str(z0.shape()) + " vs noise " +
                     shape_str(noise.shape()));
  }
  const auto ab = schedule.alpha_bar[static_cast<std::size_t>(t)];
  return add(scale(z0, static_cast<T>(std::sqrt(ab))),
             scale(noise, static_cast<T>(std::sqrt(1.0 - ab))));
}

template <typename T>
BasicTensor<T> diffuse_forward(const BasicTensor<T>& z0, std::span<const int> timesteps,
                               const NoiseSchedule& schedule, const BasicTensor<T>& noise) {
  if (z0.rank() != 2 || z0.shape() != noise.shape() || timesteps.size() != z0.dim(0)) {
    throw ShapeError("diffuse_forward: z0 " + shape_str(z0.shape()) + ", noise " +
                     shape_str(noise.shape()) + " and " + std::to_string(timesteps.size()) +
                     " timesteps are inconsistent");
  }
  const std::size_t rows = z0.dim(0), cols = z0.dim(1);
  BasicTensor<T> signal(z0.shape());
  BasicTensor<T> scaled_noise(z0.shape());
  auto sd = signal.mutable_data();
  auto nd = scaled_noise.mutable_data();
  const auto src = noise.data();
  for (std::size_t r = 0; r < rows; ++r) {
    check_timestep(timesteps[r], schedule);
    const double ab = schedule.alpha_bar[static_cast<std::size_t>(timesteps[r])];
    const auto a = static_cast<T>(std::sqrt(ab));
    const auto b = static_cast<T>(std::sqrt(1.0 - ab));
    for (std::size_t c = 0; c < cols; ++c) {
      sd[r * cols + c] = a;
      nd[r * cols + c] = b * src[r * cols + c];
    }
  }
  return add(mul(z0, signal), scaled_noise);
}

template <typename T>
BasicTensor<T> reverse_diffusion(const NoisePredictor<T>& predict, const BasicTensor<T>& z_T,
                                 const NoiseSchedule& schedule, Rng* rng, bool deterministic) {
  typename Tape<T>::Recording no_grad(nullptr);
  BasicTensor<T> z = z_T.detach();
  for (int t = schedule.timesteps() - 1; t >= 0; --t) {
    const auto eps_hat = predict(z, t);
    if (eps_hat.shape() != z.shape()) {
      throw ShapeError("reverse_diffusion: predictor returned " + shape_str(eps_hat.shape()) +
                       " for latent " + shape_str(z.shape()));
    }
    const auto ti = static_cast<std::size_t>(t);
    const double coef = schedule.beta[ti] / std::sqrt(1.0 - schedule.alpha_bar[ti]);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha[ti]);
    const bool inject = t > 0 && !deterministic && rng != nullptr;
    const double sigma = std::sqrt(schedule.beta[ti]);
    BasicTensor<T> next(z.shape());
    auto nd = next.mutable_data();
    const auto zd = z.data();
    const auto ed = eps_hat.data();
    for (std::size_t i = 0; i < nd.size(); ++i) {
      double v = inv_sqrt_alpha * (static_cast<double>(zd[i]) - coef * static_cast<double>(ed[i]));
      if (inject) v += sigma * rng->normal();
      nd[i] = static_cast<T>(v);
    }
    z = next;
  }
  return z;
}

template <typename T>
BasicTensor<T> invert_reverse_diffusion(const NoisePredictor<T>& predict, const BasicTensor<T>& z0,
                                        const NoiseSchedule& schedule) {
  typename Tape<T>::Recording no_grad(nullptr);
  BasicTensor<T> z = z0.detach();
  for (int t = 0; t < schedule.timesteps(); ++t) {
    const auto ti = static_cast<std::size_t>(t);
    const double coef = schedule.beta[ti] / std::sqrt(1.0 - schedule.alpha_bar[ti]);
    const double sqrt_alpha = std::sqrt(schedule.alpha[ti]);
    const auto eps_hat = predict(z, t);
    if (eps_hat.shape() != z.shape()) {
      throw ShapeError("invert_reverse_diffusion: predictor returned " +
                       shape_str(eps_hat.shape()) + " for latent " + shape_str(z.shape()));
    }
    BasicTensor<T> next(z.shape());
    auto nd = next.mutable_data();
    const auto zd = z.data();
    const auto ed = eps_hat.data();
    for (std::size_t i = 0; i < nd.size(); ++i) {
      nd[i] = static_cast<T>(sqrt_alpha * static_cast<double>(zd[i]) +
                             coef * static_cast<double>(ed[i]));
    }
    z = next;
  }
  return z;
}

// ---------------------------------------------------------------------------
// Shared helpers

namespace {

template <typename T>
struct BatchView {
  BasicTensor<T> x;  // B×C×H×W
  bool batched;
};

template <typename T>
BatchView<T> as_batch(const BasicTensor<T>& x, const ModelSpec& spec) {
  const Shape image{spec.channels, spec.height, spec.width};
  if (x.rank() == 3 && x.shape() == image) {
    return {reshape(x, Shape{1, spec.channels, spec.height, spec.width}), false};
  }
  if (x.rank() == 4 && Shape(x.shape().begin() + 1, x.shape().end()) == image) {
    return {x, true};
  }
  throw ShapeError("model input " + shape_str(x.shape()) + " does not match " + shape_str(image) +
                   " (optionally batched)");
}

template <typename T>
BasicTensor<T> restore_rank(const BasicTensor<T>& y, bool batched, const ModelSpec& spec) {
  if (batched) return y;
  return reshape(y, Shape{spec.channels, spec.height, spec.width});
}

template <typename T>
void append(std::vector<NamedParameter<T>>& out, const std::vector<NamedParameter<T>>& more) {
  out.insert(out.end(), more.begin(), more.end());
}

template <typename T>
std::vector<NamedParameter<T>> layer_params(const Layer<T>& layer) {
  return layer.parameters();
}

}  // namespace

template <typename T>
BasicTensor<T> training_loss(const ForwardResult<T>& result, const BasicTensor<T>& x,
                             const LossWeights& weights) {
  auto loss = mse_loss(result.reconstruction, x);
  if (!result.has_aux()) return loss;
  if (weights.noise != 0.0) {
    loss = add(loss, scale(mse_loss(result.predicted_noise, result.noise),
                           static_cast<T>(weights.noise)));
  }
  if (weights.kl != 0.0) {
    loss = add(loss, scale(kl_standard_normal(result.mean, result.logvar),
                           static_cast<T>(weights.kl)));
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Feedforward

template <typename T>
FeedforwardAutoencoder<T>::FeedforwardAutoencoder(ModelSpec spec) : spec_(std::move(spec)) {
  if (spec_.family != ModelFamily::kFeedforward) {
    throw ConfigError("feedforward autoencoder built from a " + family_name(spec_.family) + " spec");
  }
  spec_.validate();
  std::vector<std::size_t> widths{spec_.input_numel()};
  widths.insert(widths.end(), spec_.hidden.begin(), spec_.hidden.end());
  widths.push_back(spec_.latent_dim);

  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    encoder_.push_back(Layer<T>::linear("encoder." + std::to_string(i), widths[i], widths[i + 1]));
    if (i + 2 < widths.size()) encoder_.push_back(Layer<T>::activation(Activation::kRelu));
  }
  std::vector<std::size_t> back(widths.rbegin(), widths.rend());
  for (std::size_t i = 0; i + 1 < back.size(); ++i) {
    decoder_.push_back(Layer<T>::linear("decoder." + std::to_string(i), back[i], back[i + 1]));
    decoder_.push_back(Layer<T>::activation(i + 2 < back.size() ? Activation::kRelu
                                                                 : Activation::kSigmoid));
  }
}

template <typename T>
std::vector<NamedParameter<T>> FeedforwardAutoencoder<T>::parameters() const {
  auto out = encoder_.parameters();
  append(out, decoder_.parameters());
  return out;
}

template <typename T>
void FeedforwardAutoencoder<T>::init_parameters(Rng& rng) {
  encoder_.init_parameters(rng, spec_.init);
  decoder_.init_parameters(rng, spec_.init);
}

template <typename T>
BasicTensor<T> FeedforwardAutoencoder<T>::encode(const BasicTensor<T>& x) const {
  const auto view = as_batch(x, spec_);
  return encoder_.forward(flatten(view.x, 1));
}

template <typename T>
BasicTensor<T> FeedforwardAutoencoder<T>::decode(const BasicTensor<T>& z) const {
  const auto flat = decoder_.forward(z);
  return reshape(flat, Shape{z.dim(0), spec_.channels, spec_.height, spec_.width});
}

template <typename T>
ForwardResult<T> FeedforwardAutoencoder<T>::forward(const BasicTensor<T>& x, Rng&) const {
  const auto view = as_batch(x, spec_);
  ForwardResult<T> result;
  result.reconstruction = restore_rank(decode(encode(view.x)), view.batched, spec_);
  return result;
}

template <typename T>
BasicTensor<T> FeedforwardAutoencoder<T>::reconstruct(const BasicTensor<T>& x) const {
  typename Tape<T>::Recording no_grad(nullptr);
  const auto view = as_batch(x, spec_);
  return restore_rank(decode(encode(view.x)), view.batched, spec_);
}

// ---------------------------------------------------------------------------
// Convolutional stack

namespace {
constexpr std::size_t kKernel = 4;
constexpr int kStride = 2;
constexpr int kPad = 1;
}  // namespace

template <typename T>
ConvStack<T>::ConvStack(const ModelSpec& spec)
    : spec_(spec),
      decoder_fc_(Layer<T>::linear("decoder.fc", spec.latent_dim, spec.encoded_features())) {
  const auto& chain = spec_.channel_chain;
  std::size_t in = spec_.channels;
  for (std::size_t i = 0; i < chain.size(); ++i) {
    encoder_.push_back(
        Layer<T>::conv("encoder.conv" + std::to_string(i), in, chain[i], kKernel, kStride, kPad));
    encoder_.push_back(Layer<T>::activation(Activation::kRelu));
    in = chain[i];
  }
  for (std::size_t i = chain.size(); i-- > 0;) {
    const std::size_t out = i == 0 ? spec_.channels : chain[i - 1];
    const std::size_t index = chain.size() - 1 - i;
    decoder_.push_back(Layer<T>::conv_transpose("decoder.deconv" + std::to_string(index), chain[i],
                                                out, kKernel, kStride, kPad));
    decoder_.push_back(
        Layer<T>::activation(i == 0 ? Activation::kSigmoid : Activation::kRelu));
  }
}

template <typename T>
BasicTensor<T> ConvStack<T>::encode_features(const BasicTensor<T>& x) const {
  return flatten(encoder_.forward(x), 1);
}

template <typename T>
BasicTensor<T> ConvStack<T>::decode(const BasicTensor<T>& z) const {
  const auto h = decoder_fc_.forward(z);
  const auto maps = reshape(h, Shape{z.dim(0), spec_.channel_chain.back(), spec_.encoded_height(),
                                     spec_.encoded_width()});
  return decoder_.forward(maps);
}

template <typename T>
std::vector<NamedParameter<T>> ConvStack<T>::decoder_parameters() const {
  auto out = decoder_fc_.parameters();
  append(out, decoder_.parameters());
  return out;
}

template <typename T>
void ConvStack<T>::init_decoder(Rng& rng) {
  aelab::init_parameters(decoder_fc_, rng, spec_.init);
  decoder_.init_parameters(rng, spec_.init);
}

// ---------------------------------------------------------------------------
// Convolutional autoencoder

template <typename T>
ConvolutionalAutoencoder<T>::ConvolutionalAutoencoder(ModelSpec spec)
    : spec_((spec.validate(), std::move(spec))),
      stack_(spec_),
      encoder_fc_(Layer<T>::linear("encoder.fc", spec_.encoded_features(), spec_.latent_dim)) {
  if (spec_.family != ModelFamily::kConvolutional) {
    throw ConfigError("convolutional autoencoder built from a " + family_name(spec_.family) +
                      " spec");
  }
}

template <typename T>
std::vector<NamedParameter<T>> ConvolutionalAutoencoder<T>::parameters() const {
  auto out = stack_.encoder_parameters();
  append(out, layer_params(encoder_fc_));
  append(out, stack_.decoder_parameters());
  return out;
}

template <typename T>
void ConvolutionalAutoencoder<T>::init_parameters(Rng& rng) {
  stack_.init_encoder(rng);
  aelab::init_parameters(encoder_fc_, rng, spec_.init);
  stack_.init_decoder(rng);
}

template <typename T>
BasicTensor<T> ConvolutionalAutoencoder<T>::encode(const BasicTensor<T>& x) const {
  const auto view = as_batch(x, spec_);
  return encoder_fc_.forward(stack_.encode_features(view.x));
}

template <typename T>
BasicTensor<T> ConvolutionalAutoencoder<T>::decode(const BasicTensor<T>& z) const {
  return stack_.decode(z);
}

template <typename T>
ForwardResult<T> ConvolutionalAutoencoder<T>::forward(const BasicTensor<T>& x, Rng&) const {
  const auto view = as_batch(x, spec_);
  ForwardResult<T> result;
  result.reconstruction = restore_rank(decode(encode(view.x)), view.batched, spec_);
  return result;
}

template <typename T>
BasicTensor<T> ConvolutionalAutoencoder<T>::reconstruct(const BasicTensor<T>& x) const {
  typename Tape<T>::Recording no_grad(nullptr);
  const auto view = as_batch(x, spec_);
  return restore_rank(decode(encode(view.x)), view.batched, spec_);
}

// ---------------------------------------------------------------------------
// Diffusion autoencoder

template <typename T>
DiffusionNoise<T> DiffusionNoise<T>::sample(std::size_t batch, std::size_t latent_dim,
                                            int timesteps, Rng& rng) {
  DiffusionNoise noise;
  noise.latent = randn<T>(Shape{batch, latent_dim}, rng);
  noise.timesteps.resize(batch);
  for (auto& t : noise.timesteps) {
    t = static_cast<int>(rng.below(static_cast<std::uint64_t>(timesteps)));
  }
  noise.diffusion = randn<T>(Shape{batch, latent_dim}, rng);
  return noise;
}

template <typename T>
DiffusionAutoencoder<T>::DiffusionAutoencoder(ModelSpec spec)
    : spec_((spec.validate(), std::move(spec))),
      schedule_(NoiseSchedule::linear(spec_.diffusion.timesteps, spec_.diffusion.beta_start,
                                      spec_.diffusion.beta_end)),
      stack_(spec_),
      mean_head_(Layer<T>::linear("encoder.mean", spec_.encoded_features(), spec_.latent_dim)),
      logvar_head_(
          Layer<T>::linear("encoder.logvar", spec_.encoded_features(), spec_.latent_dim)) {
  if (spec_.family != ModelFamily::kDiffusion) {
    throw ConfigError("diffusion autoencoder built from a " + family_name(spec_.family) + " spec");
  }
  constexpr std::size_t kPrimaryLayers = 5;
  const std::size_t width = spec_.diffusion.denoiser_width;
  std::size_t in = denoiser_inputs();
  std::size_t index = 0;
  for (std::size_t i = 0; i < kPrimaryLayers + spec_.diffusion.extra_blocks; ++i) {
    denoiser_.push_back(Layer<T>::linear("denoiser." + std::to_string(index++), in, width));
    denoiser_.push_back(Layer<T>::activation(Activation::kRelu));
    in = width;
  }
  denoiser_.push_back(
      Layer<T>::linear("denoiser." + std::to_string(index), width, spec_.latent_dim));
}

template <typename T>
std::size_t DiffusionAutoencoder<T>::denoiser_inputs() const {
  return spec_.latent_dim + 1 + spec_.diffusion.time_features;
}

template <typename T>
std::vector<NamedParameter<T>> DiffusionAutoencoder<T>::parameters() const {
  auto out = stack_.encoder_parameters();
  append(out, layer_params(mean_head_));
  append(out, layer_params(logvar_head_));
  append(out, stack_.decoder_parameters());
  append(out, denoiser_.parameters());
  return out;
}

template <typename T>
void DiffusionAutoencoder<T>::init_parameters(Rng& rng) {
  stack_.init_encoder(rng);
  aelab::init_parameters(mean_head_, rng, spec_.init);
  aelab::init_parameters(logvar_head_, rng, spec_.init);
  stack_.init_decoder(rng);
  denoiser_.init_parameters(rng, spec_.init);
}

template <typename T>
void DiffusionAutoencoder<T>::check_timestep(int t) const {
  aelab::check_timestep(t, schedule_);
}

template <typename T>
BasicTensor<T> DiffusionAutoencoder<T>::timestep_features(std::span<const int> timesteps) const {
  const std::size_t half = spec_.diffusion.time_features / 2;
  const std::size_t cols = 1 + 2 * half;
  const double total = static_cast<double>(spec_.diffusion.timesteps);
  BasicTensor<T> out(Shape{timesteps.size(), cols});
  auto d = out.mutable_data();
  for (std::size_t r = 0; r < timesteps.size(); ++r) {
    check_timestep(timesteps[r]);
    const double t = static_cast<double>(timesteps[r]);
    d[r * cols] = static_cast<T>(t / total);
    for (std::size_t k = 0; k < half; ++k) {
      const double freq =
          std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
      d[r * cols + 1 + k] = static_cast<T>(std::sin(t * freq));
      d[r * cols + 1 + half + k] = static_cast<T>(std::cos(t * freq));
    }
  }
  return out;
}

template <typename T>
LatentDistribution<T> DiffusionAutoencoder<T>::encode(const BasicTensor<T>& x) const {
  const auto view = as_batch(x, spec_);
  const auto features = stack_.encode_features(view.x);
  LatentDistribution<T> dist{mean_head_.forward(features), logvar_head_.forward(features)};
  if (!view.batched) {
    dist.mean = reshape(dist.mean, Shape{spec_.latent_dim});
    dist.logvar = reshape(dist.logvar, Shape{spec_.latent_dim});
  }
  return dist;
}

template <typename T>
BasicTensor<T> DiffusionAutoencoder<T>::denoise_predict(const BasicTensor<T>& z_t,
                                                        std::span<const int> timesteps) const {
  if (z_t.rank() != 2 || z_t.dim(1) != spec_.latent_dim || z_t.dim(0) != timesteps.size()) {
    throw ShapeError("denoise_predict: latent " + shape_str(z_t.shape()) + " with " +
                     std::to_string(timesteps.size()) + " timesteps, expected B×" +
                     std::to_string(spec_.latent_dim));
  }
  const auto input = concat_columns(z_t, timestep_features(timesteps));
  return denoiser_.forward(input);
}

template <typename T>
BasicTensor<T> DiffusionAutoencoder<T>::denoise_predict(const BasicTensor<T>& z_t, int t) const {
  check_timestep(t);
  if (z_t.rank() == 1) {
    const int ts[1] = {t};
    const auto out = denoise_predict(reshape(z_t, Shape{1, z_t.dim(0)}), std::span<const int>(ts));
    return reshape(out, Shape{spec_.latent_dim});
  }
  if (z_t.rank() != 2) {
    throw ShapeError("denoise_predict: latent must be D or B×D, got " + shape_str(z_t.shape()));
  }
  const std::vector<int> ts(z_t.dim(0), t);
  return denoise_predict(z_t, std::span<const int>(ts));
}

template <typename T>
BasicTensor<T> DiffusionAutoencoder<T>::reverse_diffusion(const BasicTensor<T>& z_T, Rng* rng,
                                                          bool deterministic) const {
  if (z_T.shape().back() != spec_.latent_dim) {
    throw ShapeError("reverse_diffusion: latent " + shape_str(z_T.shape()) +
                     " does not end in latent width " + std::to_string(spec_.latent_dim));
  }
  NoisePredictor<T> predict = [this](const BasicTensor<T>& z, int t) {
    return denoise_predict(z, t);
  };
  return aelab::reverse_diffusion(predict, z_T, schedule_, rng, deterministic);
}

template <typename T>
BasicTensor<T> DiffusionAutoencoder<T>::decode(const BasicTensor<T>& z) const {
  return stack_.decode(z);
}

template <typename T>
ForwardResult<T> DiffusionAutoencoder<T>::forward(const BasicTensor<T>& x,
                                                  const DiffusionNoise<T>& noise) const {
  const auto view = as_batch(x, spec_);
  const std::size_t batch = view.x.dim(0);
  if (noise.timesteps.size() != batch) {
    throw ShapeError("diffusion forward: " + std::to_string(noise.timesteps.size()) +
                     " timesteps for a batch of " + std::to_string(batch));
  }
  const auto features = stack_.encode_features(view.x);
  ForwardResult<T> r;
  r.mean = mean_head_.forward(features);
  r.logvar = logvar_head_.forward(features);
  r.z0 = reparameterize(LatentDistribution<T>{r.mean, r.logvar}, noise.latent);
  r.timesteps = noise.timesteps;
  r.noise = noise.diffusion;
  // The noise term trains the denoiser only; the encoder learns from the
  // reconstruction (and KL) terms.
  const auto z_t = aelab::diffuse_forward(r.z0.detach(), std::span<const int>(r.timesteps),
                                          schedule_, noise.diffusion);
  r.predicted_noise = denoise_predict(z_t, std::span<const int>(r.timesteps));
  r.reconstruction = restore_rank(decode(r.z0), view.batched, spec_);
  return r;
}

template <typename T>
ForwardResult<T> DiffusionAutoencoder<T>::forward(const BasicTensor<T>& x, Rng& rng) const {
  const std::size_t batch = x.rank() == 4 ? x.dim(0) : 1;
  return forward(x, DiffusionNoise<T>::sample(batch, spec_.latent_dim, schedule_.timesteps(), rng));
}

template <typename T>
BasicTensor<T> DiffusionAutoencoder<T>::reconstruct(const BasicTensor<T>& x) const {
  typename Tape<T>::Recording no_grad(nullptr);
  const auto view = as_batch(x, spec_);
  const auto features = stack_.encode_features(view.x);
  const auto mean = mean_head_.forward(features);
  // The posterior mean is mapped to z_T by inverting the deterministic reverse
  // chain, then decoded after running that chain forward again.
  NoisePredictor<T> predict = [this](const BasicTensor<T>& z, int t) { return denoise_predict(z, t); };
  const auto z_T = invert_reverse_diffusion(predict, mean, schedule_);
  const auto z0 = reverse_diffusion(z_T, nullptr, true);
  return restore_rank(decode(z0), view.batched, spec_);
}

// ---------------------------------------------------------------------------
// Factories

template <typename T>
std::unique_ptr<FeedforwardAutoencoder<T>> build_feedforward(const ModelSpec& spec, Rng& rng) {
  auto model = std::make_unique<FeedforwardAutoencoder<T>>(spec);
  model->init_parameters(rng);
  return model;
}

template <typename T>
std::unique_ptr<ConvolutionalAutoencoder<T>> build_convolutional(const ModelSpec& spec, Rng& rng) {
  auto model = std::make_unique<ConvolutionalAutoencoder<T>>(spec);
  model->init_parameters(rng);
  return model;
}

template <typename T>
std::unique_ptr<DiffusionAutoencoder<T>> build_diffusion(const ModelSpec& spec, Rng& rng) {
  auto model = std::make_unique<DiffusionAutoencoder<T>>(spec);
  model->init_parameters(rng);
  return model;
}

template <typename T>
std::unique_ptr<Autoencoder<T>> build_model(const ModelSpec& spec, Rng& rng) {
  switch (spec.family) {
    case ModelFamily::kFeedforward:
      return build_feedforward<T>(spec, rng);
    case ModelFamily::kConvolutional:
      return build_convolutional<T>(spec, rng);
    case ModelFamily::kDiffusion:
      return build_diffusion<T>(spec, rng);
  }
  throw ConfigError("unknown model family");
}

#define AELAB_INSTANTIATE(T)                                                                    \
  template BasicTensor<T> reparameterize<T>(const LatentDistribution<T>&, const BasicTensor<T>&); \
  template BasicTensor<T> diffuse_forward<T>(const BasicTensor<T>&, int, const NoiseSchedule&,  \
                                             const BasicTensor<T>&);                            \
  template BasicTensor<T> diffuse_forward<T>(const BasicTensor<T>&, std::span<const int>,       \
                                             const NoiseSchedule&, const BasicTensor<T>&);      \
  template BasicTensor<T> reverse_diffusion<T>(const NoisePredictor<T>&, const BasicTensor<T>&, \
                                               const NoiseSchedule&, Rng*, bool);               \
  template BasicTensor<T> invert_reverse_diffusion<T>(const NoisePredictor<T>&,                 \
                                                      const BasicTensor<T>&, const NoiseSchedule&); \
  template BasicTensor<T> training_loss<T>(const ForwardResult<T>&, const BasicTensor<T>&,      \
                                           const LossWeights&);                                 \
  template class FeedforwardAutoencoder<T>;                                                     \
  template class ConvStack<T>;                                                                  \
  template class ConvolutionalAutoencoder<T>;                                                   \
  template struct DiffusionNoise<T>;                                                            \
  template class DiffusionAutoencoder<T>;                                                       \
  template std::unique_ptr<Autoencoder<T>> build_model<T>(const ModelSpec&, Rng&);              \
  template std::unique_ptr<FeedforwardAutoencoder<T>> build_feedforward<T>(const ModelSpec&,    \
                                                                           Rng&);               \
  template std::unique_ptr<ConvolutionalAutoencoder<T>> build_convolutional<T>(                 \
      const ModelSpec&, Rng&);                                                                  \
  template std::unique_ptr<DiffusionAutoencoder<T>> build_diffusion<T>(const ModelSpec&, Rng&);

AELAB_INSTANTIATE(float)
AELAB_INSTANTIATE(double)

#undef AELAB_INSTANTIATE

}  // namespace aelab
