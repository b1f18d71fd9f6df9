#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aelab/nn.hpp"
#include "aelab/random.hpp"
#include "aelab/tensor.hpp"

namespace aelab {

enum class ModelFamily { kFeedforward, kConvolutional, kDiffusion };

/// "feedforward", "convolutional" or "diffusion".
std::string family_name(ModelFamily family);
/// Accepts the long names and the short forms ff, conv, diff.
ModelFamily parse_family(std::string_view text);

struct DiffusionSettings {
  int timesteps = 100;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::size_t denoiser_width = 256;
  std::size_t extra_blocks = 0;   // hidden blocks appended after the five primary ones
  std::size_t time_features = 16; // sinusoidal features; t/T is always included

  bool operator==(const DiffusionSettings&) const = default;
};

/// Architecture descriptor. All shape arithmetic derives from these fields.
struct ModelSpec {
  ModelFamily family = ModelFamily::kConvolutional;
  std::size_t channels = 3;
  std::size_t height = 200;
  std::size_t width = 200;
  std::size_t latent_dim = 64;
  std::vector<std::size_t> hidden = {512};                // feedforward
  std::vector<std::size_t> channel_chain = {32, 64, 128}; // convolutional, diffusion
  DiffusionSettings diffusion;
  InitScheme init = InitScheme::kFanInUniform;

  static ModelSpec defaults(ModelFamily family, std::size_t height = 200, std::size_t width = 200);

  /// Throws ConfigError describing the first violated constraint.
  void validate() const;

  std::size_t input_numel() const { return channels * height * width; }
  /// Spatial size after the strided encoder convolutions.
  std::size_t encoded_height() const;
  std::size_t encoded_width() const;
  /// Width of the flattened encoder feature map.
  std::size_t encoded_features() const;

  bool operator==(const ModelSpec&) const = default;
};

/// beta, alpha = 1 - beta and alpha_bar = cumulative product of alpha over T
/// timesteps, indexed 0..T-1.
struct NoiseSchedule {
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  static NoiseSchedule linear(int timesteps, double beta_start, double beta_end);
  int timesteps() const { return static_cast<int>(beta.size()); }
};

template <typename T>
struct LatentDistribution {
  BasicTensor<T> mean;
  BasicTensor<T> logvar;
};

/// z = mean + exp(0.5 · logvar) · noise
template <typename T>
BasicTensor<T> reparameterize(const LatentDistribution<T>& dist, const BasicTensor<T>& noise);

/// z_t = sqrt(alpha_bar_t) · z0 + sqrt(1 - alpha_bar_t) · noise
template <typename T>
BasicTensor<T> diffuse_forward(const BasicTensor<T>& z0, int t, const NoiseSchedule& schedule,
                               const BasicTensor<T>& noise);
/// Row-wise variant: z0 is B×D and row b is diffused to timesteps[b].
template <typename T>
BasicTensor<T> diffuse_forward(const BasicTensor<T>& z0, std::span<const int> timesteps,
                               const NoiseSchedule& schedule, const BasicTensor<T>& noise);

template <typename T>
using NoisePredictor = std::function<BasicTensor<T>(const BasicTensor<T>& z_t, int t)>;

/// Ancestral sampling from t = T-1 down to 0 with sigma_t² = beta_t. With
/// `deterministic` (or a null rng) no noise is injected.
template <typename T>
BasicTensor<T> reverse_diffusion(const NoisePredictor<T>& predict, const BasicTensor<T>& z_T,
                                 const NoiseSchedule& schedule, Rng* rng, bool deterministic);

/// Runs the deterministic reverse update backwards, from z0 up to a z_T that
/// the deterministic chain maps back to approximately z0. Step t uses
/// z_{t+1} = sqrt(alpha_t)·z_t + coef_t·ε̂(z_t, t), i.e. the noise estimate
/// is taken at the known end of the step.
template <typename T>
BasicTensor<T> invert_reverse_diffusion(const NoisePredictor<T>& predict, const BasicTensor<T>& z0,
                                        const NoiseSchedule& schedule);

/// Intermediate values of one forward pass. Only the diffusion family fills
/// the auxiliary fields.
template <typename T>
struct ForwardResult {
  BasicTensor<T> reconstruction;
  BasicTensor<T> mean;
  BasicTensor<T> logvar;
  BasicTensor<T> z0;
  std::vector<int> timesteps;
  BasicTensor<T> noise;
  BasicTensor<T> predicted_noise;

  bool has_aux() const { return mean.defined(); }
};

struct LossWeights {
  double noise = 1.0;
  double kl = 0.0;
};

/// Common interface of the three families. Inputs are C×H×W or B×C×H×W and
/// outputs keep the input's rank.
template <typename T>
class Autoencoder {
 public:
  virtual ~Autoencoder() = default;

  virtual const ModelSpec& spec() const = 0;
  virtual std::vector<NamedParameter<T>> parameters() const = 0;
  virtual void init_parameters(Rng& rng) = 0;

  /// Training-time pass; may draw noise from rng.
  virtual ForwardResult<T> forward(const BasicTensor<T>& x, Rng& rng) const = 0;
  /// Deterministic reconstruction used for evaluation. Never records.
  virtual BasicTensor<T> reconstruct(const BasicTensor<T>& x) const = 0;
};

/// mse(x̂, x) plus, for diffusion results, λ_noise·mse(ε̂, ε) + λ_KL·KL.
template <typename T>
BasicTensor<T> training_loss(const ForwardResult<T>& result, const BasicTensor<T>& x,
                             const LossWeights& weights);

template <typename T>
class FeedforwardAutoencoder final : public Autoencoder<T> {
 public:
  explicit FeedforwardAutoencoder(ModelSpec spec);

  const ModelSpec& spec() const override { return spec_; }
  std::vector<NamedParameter<T>> parameters() const override;
  void init_parameters(Rng& rng) override;
  ForwardResult<T> forward(const BasicTensor<T>& x, Rng& rng) const override;
  BasicTensor<T> reconstruct(const BasicTensor<T>& x) const override;

  BasicTensor<T> encode(const BasicTensor<T>& x) const;
  BasicTensor<T> decode(const BasicTensor<T>& z) const;
  const Sequential<T>& encoder() const { return encoder_; }
  const Sequential<T>& decoder() const { return decoder_; }

 private:
  ModelSpec spec_;
  Sequential<T> encoder_;
  Sequential<T> decoder_;
};

/// Strided conv encoder and mirrored transposed-conv decoder shared by the
/// convolutional and diffusion families.
template <typename T>
class ConvStack {
 public:
  explicit ConvStack(const ModelSpec& spec);

  /// B×C×H×W -> B×features
  BasicTensor<T> encode_features(const BasicTensor<T>& x) const;
  /// B×latent -> B×C×H×W in (0, 1)
  BasicTensor<T> decode(const BasicTensor<T>& z) const;

  std::vector<NamedParameter<T>> encoder_parameters() const { return encoder_.parameters(); }
  std::vector<NamedParameter<T>> decoder_parameters() const;
  void init_encoder(Rng& rng) { encoder_.init_parameters(rng, spec_.init); }
  void init_decoder(Rng& rng);

  const Sequential<T>& encoder() const { return encoder_; }
  const Sequential<T>& decoder() const { return decoder_; }

 private:
  ModelSpec spec_;
  Sequential<T> encoder_;
  Layer<T> decoder_fc_;
  Sequential<T> decoder_;
};

template <typename T>
class ConvolutionalAutoencoder final : public Autoencoder<T> {
 public:
  explicit ConvolutionalAutoencoder(ModelSpec spec);

  const ModelSpec& spec() const override { return spec_; }
  std::vector<NamedParameter<T>> parameters() const override;
  void init_parameters(Rng& rng) override;
  ForwardResult<T> forward(const BasicTensor<T>& x, Rng& rng) const override;
  BasicTensor<T> reconstruct(const BasicTensor<T>& x) const override;

  /// B×C×H×W (or C×H×W) -> B×latent
  BasicTensor<T> encode(const BasicTensor<T>& x) const;
  BasicTensor<T> decode(const BasicTensor<T>& z) const;
  const ConvStack<T>& stack() const { return stack_; }

 private:
  ModelSpec spec_;
  ConvStack<T> stack_;
  Layer<T> encoder_fc_;
};

/// Noise consumed by one diffusion forward pass.
template <typename T>
struct DiffusionNoise {
  BasicTensor<T> latent;     // ε for reparameterization, B×D
  std::vector<int> timesteps;
  BasicTensor<T> diffusion;  // ε for the forward process, B×D

  static DiffusionNoise sample(std::size_t batch, std::size_t latent_dim, int timesteps, Rng& rng);
};

template <typename T>
class DiffusionAutoencoder final : public Autoencoder<T> {
 public:
  explicit DiffusionAutoencoder(ModelSpec spec);

  const ModelSpec& spec() const override { return spec_; }
  std::vector<NamedParameter<T>> parameters() const override;
  void init_parameters(Rng& rng) override;
  ForwardResult<T> forward(const BasicTensor<T>& x, Rng& rng) const override;
  ForwardResult<T> forward(const BasicTensor<T>& x, const DiffusionNoise<T>& noise) const;
  BasicTensor<T> reconstruct(const BasicTensor<T>& x) const override;

  /// Mean and log-variance heads. For a C×H×W input the results are rank 1.
  LatentDistribution<T> encode(const BasicTensor<T>& x) const;
  /// ε̂ for z_t (D or B×D) at timestep t.
  BasicTensor<T> denoise_predict(const BasicTensor<T>& z_t, int t) const;
  BasicTensor<T> denoise_predict(const BasicTensor<T>& z_t, std::span<const int> timesteps) const;
  BasicTensor<T> reverse_diffusion(const BasicTensor<T>& z_T, Rng* rng, bool deterministic) const;
  BasicTensor<T> decode(const BasicTensor<T>& z) const;

  const NoiseSchedule& schedule() const { return schedule_; }
  const Sequential<T>& denoiser() const { return denoiser_; }
  /// Number of input features of the denoiser: latent + 1 + time_features.
  std::size_t denoiser_inputs() const;

 private:
  BasicTensor<T> timestep_features(std::span<const int> timesteps) const;
  void check_timestep(int t) const;

  ModelSpec spec_;
  NoiseSchedule schedule_;
  ConvStack<T> stack_;
  Layer<T> mean_head_;
  Layer<T> logvar_head_;
  Sequential<T> denoiser_;
};

/// Builds the family named by `spec` with parameters drawn from `rng`.
template <typename T>
std::unique_ptr<Autoencoder<T>> build_model(const ModelSpec& spec, Rng& rng);

template <typename T>
std::unique_ptr<FeedforwardAutoencoder<T>> build_feedforward(const ModelSpec& spec, Rng& rng);
template <typename T>
std::unique_ptr<ConvolutionalAutoencoder<T>> build_convolutional(const ModelSpec& spec, Rng& rng);
template <typename T>
std::unique_ptr<DiffusionAutoencoder<T>> build_diffusion(const ModelSpec& spec, Rng& rng);

/// Copies parameter values by name between models of the same spec,
/// converting precision as needed.
template <typename From, typename To>
void copy_parameters(const Autoencoder<From>& src, Autoencoder<To>& dst) {
  const auto from = src.parameters();
  const auto to = dst.parameters();
  if (from.size() != to.size()) throw ContractError("copy_parameters: parameter count differs");
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i].name != to[i].name || from[i].tensor.shape() != to[i].tensor.shape()) {
      throw ContractError("copy_parameters: parameter mismatch at " + from[i].name);
    }
    auto dst_tensor = to[i].tensor;
    auto out = dst_tensor.mutable_data();
    const auto in = from[i].tensor.data();
    for (std::size_t j = 0; j < in.size(); ++j) out[j] = static_cast<To>(in[j]);
  }
}

}  // namespace aelab
