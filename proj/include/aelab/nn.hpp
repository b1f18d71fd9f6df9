#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aelab/random.hpp"
#include "aelab/tensor.hpp"

namespace aelab {

template <typename T>
struct NamedParameter {
  std::string name;
  BasicTensor<T> tensor;
};

enum class LayerKind { kLinear, kConv, kConvTranspose, kActivation };
enum class Activation { kRelu, kSigmoid };

/// Sizes that fully determine a layer's parameter shapes.
struct LayerGeometry {
  std::size_t in = 0;   // features or input channels
  std::size_t out = 0;  // features or output channels
  std::size_t kernel = 0;
  int stride = 1;
  int pad = 0;
};

/// One stage of a network. Parameterized kinds own `<name>.weight` and
/// `<name>.bias`; activations own nothing.
template <typename T>
class Layer {
 public:
  static Layer linear(std::string name, std::size_t in, std::size_t out);
  static Layer conv(std::string name, std::size_t in_channels, std::size_t out_channels,
                    std::size_t kernel, int stride, int pad);
  static Layer conv_transpose(std::string name, std::size_t in_channels,
                              std::size_t out_channels, std::size_t kernel, int stride, int pad);
  static Layer activation(Activation fn);

  LayerKind kind() const { return kind_; }
  Activation activation_fn() const { return activation_; }
  const LayerGeometry& geometry() const { return geometry_; }
  const std::string& name() const { return name_; }

  /// Fan-in used for initialization: `in` for linear, in·k² for conv and
  /// out·k² for transposed conv (the weight's second axis times kernel area).
  std::size_t fan_in() const;

  BasicTensor<T> forward(const BasicTensor<T>& x) const;
  std::vector<NamedParameter<T>> parameters() const;

  const BasicTensor<T>& weight() const { return weight_; }
  const BasicTensor<T>& bias() const { return bias_; }

 private:
  Layer() = default;

  LayerKind kind_ = LayerKind::kActivation;
  Activation activation_ = Activation::kRelu;
  LayerGeometry geometry_;
  std::string name_;
  BasicTensor<T> weight_;
  BasicTensor<T> bias_;
};

/// Weight bound a for U(-a, a); biases are always zero.
enum class InitScheme {
  kFanInUniform,  // a = sqrt(1 / fan_in)
  kHeUniform,     // a = sqrt(6 / fan_in), variance-preserving under ReLU
};

double init_bound(InitScheme scheme, std::size_t fan_in);
std::string init_scheme_name(InitScheme scheme);  // "fan-in-uniform" | "he-uniform"
/// Throws ConfigError for anything but the two names above.
InitScheme parse_init_scheme(std::string_view text);

template <typename T>
void init_parameters(Layer<T>& layer, Rng& rng, InitScheme scheme = InitScheme::kFanInUniform);

template <typename T>
class Sequential {
 public:
  Sequential() = default;
  explicit Sequential(std::vector<Layer<T>> layers) : layers_(std::move(layers)) {}

  void push_back(Layer<T> layer) { layers_.push_back(std::move(layer)); }
  BasicTensor<T> forward(const BasicTensor<T>& x) const;
  std::vector<NamedParameter<T>> parameters() const;
  void init_parameters(Rng& rng, InitScheme scheme = InitScheme::kFanInUniform);

  const std::vector<Layer<T>>& layers() const { return layers_; }
  std::size_t size() const { return layers_.size(); }

 private:
  std::vector<Layer<T>> layers_;
};

/// Mean over all elements of (pred - target)². Differentiable in both
/// arguments.
template <typename T>
BasicTensor<T> mse_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target);

/// KL(N(mean, exp(logvar)) || N(0, I)) summed over the latent axis and
/// averaged over rows. Inputs are B×D.
template <typename T>
BasicTensor<T> kl_standard_normal(const BasicTensor<T>& mean, const BasicTensor<T>& logvar);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::int64_t step = 0;
  std::vector<std::vector<T>> m;  // first moments, one per parameter
  std::vector<std::vector<T>> v;  // second moments
};

/// One bias-corrected Adam update. Every parameter must carry a gradient.
template <typename T>
void adam_step(std::span<const BasicTensor<T>> params, AdamState<T>& state);

template <typename T>
std::size_t count_parameters(std::span<const NamedParameter<T>> params) {
  std::size_t total = 0;
  for (const auto& p : params) total += p.tensor.numel();
  return total;
}

template <typename Model>
std::size_t count_parameters(const Model& model) {
  const auto params = model.parameters();
  return count_parameters(std::span(params));
}

/// Zeroes (allocating if needed) the gradient of every parameter.
template <typename T>
void zero_grad(std::span<const NamedParameter<T>> params) {
  for (auto p : params) p.tensor.zero_grad();
}

}  // namespace aelab
