#include "aelab/nn.hpp"

#include <cmath>

#include "op_support.hpp"

namespace aelab {

template <typename T>
Layer<T> Layer<T>::linear(std::string name, std::size_t in, std::size_t out) {
  if (in == 0 || out == 0) throw ConfigError("linear layer '" + name + "' needs positive sizes");
  Layer layer;
  layer.kind_ = LayerKind::kLinear;
  layer.geometry_ = {in, out, 0, 1, 0};
  layer.weight_ = BasicTensor<T>(Shape{out, in}, true);
  layer.bias_ = BasicTensor<T>(Shape{out}, true);
  layer.name_ = std::move(name);
  return layer;
}

template <typename T>
Layer<T> Layer<T>::conv(std::string name, std::size_t in_channels, std::size_t out_channels,
                        std::size_t kernel, int stride, int pad) {
  if (in_channels == 0 || out_channels == 0 || kernel == 0 || stride < 1 || pad < 0) {
    throw ConfigError("conv layer '" + name + "' has invalid geometry");
  }
  Layer layer;
  layer.kind_ = LayerKind::kConv;
  layer.geometry_ = {in_channels, out_channels, kernel, stride, pad};
  layer.weight_ = BasicTensor<T>(Shape{out_channels, in_channels, kernel, kernel}, true);
  layer.bias_ = BasicTensor<T>(Shape{out_channels}, true);
  layer.name_ = std::move(name);
  return layer;
}

template <typename T>
Layer<T> Layer<T>::conv_transpose(std::string name, std::size_t in_channels,
                                  std::size_t out_channels, std::size_t kernel, int stride,
                                  int pad) {
  if (in_channels == 0 || out_channels == 0 || kernel == 0 || stride < 1 || pad < 0) {
    throw ConfigError("conv_transpose layer '" + name + "' has invalid geometry");
  }
  Layer layer;
  layer.kind_ = LayerKind::kConvTranspose;
  layer.geometry_ = {in_channels, out_channels, kernel, stride, pad};
  layer.weight_ = BasicTensor<T>(Shape{in_channels, out_channels, kernel, kernel}, true);
  layer.bias_ = BasicTensor<T>(Shape{out_channels}, true);
  layer.name_ = std::move(name);
  return layer;
}

template <typename T>
Layer<T> Layer<T>::activation(Activation fn) {
  Layer layer;
  layer.kind_ = LayerKind::kActivation;
  layer.activation_ = fn;
  return layer;
}

template <typename T>
std::size_t Layer<T>::fan_in() const {
  const auto area = geometry_.kernel * geometry_.kernel;
  switch (kind_) {
    case LayerKind::kLinear:
      return geometry_.in;
    case LayerKind::kConv:
      return geometry_.in * area;
    case LayerKind::kConvTranspose:
      return geometry_.out * area;
    case LayerKind::kActivation:
      return 0;
  }
  return 0;
}

template <typename T>
BasicTensor<T> Layer<T>::forward(const BasicTensor<T>& x) const {
  switch (kind_) {
    case LayerKind::kLinear:
      return aelab::linear(x, weight_, bias_);
    case LayerKind::kConv:
      return conv2d(x, weight_, bias_, geometry_.stride, geometry_.pad);
    case LayerKind::kConvTranspose:
      return conv_transpose2d(x, weight_, bias_, geometry_.stride, geometry_.pad);
    case LayerKind::kActivation:
      return activation_ == Activation::kRelu ? relu(x) : sigmoid(x);
  }
  return x;
}

template <typename T>
std::vector<NamedParameter<T>> Layer<T>::parameters() const {
  if (kind_ == LayerKind::kActivation) return {};
  return {{name_ + ".weight", weight_}, {name_ + ".bias", bias_}};
}

double init_bound(InitScheme scheme, std::size_t fan_in) {
  const double numerator = scheme == InitScheme::kHeUniform ? 6.0 : 1.0;
  return std::sqrt(numerator / static_cast<double>(fan_in));
}

std::string init_scheme_name(InitScheme scheme) {
  return scheme == InitScheme::kHeUniform ? "he-uniform" : "fan-in-uniform";
}

InitScheme parse_init_scheme(std::string_view text) {
  if (text == "he-uniform") return InitScheme::kHeUniform;
  if (text == "fan-in-uniform") return InitScheme::kFanInUniform;
  throw ConfigError("unknown init scheme '" + std::string(text) +
                    "' (expected he-uniform or fan-in-uniform)");
}

template <typename T>
void init_parameters(Layer<T>& layer, Rng& rng, InitScheme scheme) {
  if (layer.kind() == LayerKind::kActivation) return;
  const double a = init_bound(scheme, layer.fan_in());
  auto weight = layer.weight();
  for (auto& w : weight.mutable_data()) w = static_cast<T>(rng.uniform(-a, a));
  auto bias = layer.bias();
  for (auto& b : bias.mutable_data()) b = T{0};
}

template <typename T>
BasicTensor<T> Sequential<T>::forward(const BasicTensor<T>& x) const {
  BasicTensor<T> h = x;
  for (const auto& layer : layers_) h = layer.forward(h);
  return h;
}

template <typename T>
std::vector<NamedParameter<T>> Sequential<T>::parameters() const {
  std::vector<NamedParameter<T>> out;
  for (const auto& layer : layers_) {
    auto p = layer.parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

template <typename T>
void Sequential<T>::init_parameters(Rng& rng, InitScheme scheme) {
  for (auto& layer : layers_) aelab::init_parameters(layer, rng, scheme);
}

template <typename T>
BasicTensor<T> mse_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("mse_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                     shape_str(target.shape()));
  }
  const auto pd = pred.data(), td = target.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < pd.size(); ++i) {
    const double d = static_cast<double>(pd[i]) - static_cast<double>(td[i]);
    acc += d * d;
  }
  auto out = BasicTensor<T>::scalar(static_cast<T>(acc / static_cast<double>(pd.size())));
  detail::record(out, {&pred, &target},
                 [o = out.node().get(), pn = pred.node().get(), tn = target.node().get()] {
                   const T k = T{2} * o->grad[0] / static_cast<T>(pn->data.size());
                   if (pn->requires_grad) {
                     pn->ensure_grad();
                     for (std::size_t i = 0; i < pn->data.size(); ++i) {
                       pn->grad[i] += k * (pn->data[i] - tn->data[i]);
                     }
                   }
                   if (tn->requires_grad) {
                     tn->ensure_grad();
                     for (std::size_t i = 0; i < tn->data.size(); ++i) {
                       tn->grad[i] -= k * (pn->data[i] - tn->data[i]);
                     }
                   }
                 });
  return out;
}

template <typename T>
BasicTensor<T> kl_standard_normal(const BasicTensor<T>& mean, const BasicTensor<T>& logvar) {
  if (mean.shape() != logvar.shape() || mean.rank() != 2) {
    throw ShapeError("kl_standard_normal: expected equal B×D shapes, got " +
                     shape_str(mean.shape()) + " and " + shape_str(logvar.shape()));
  }
  // -0.5 · Σ (1 + logvar - mean² - exp(logvar)), averaged over rows.
  auto terms = sub(sub(add_scalar(logvar, T{1}), mul(mean, mean)), exp(logvar));
  const T factor = T{-0.5} / static_cast<T>(mean.dim(0));
  return scale(sum(terms), factor);
}

template <typename T>
void adam_step(std::span<const BasicTensor<T>> params, AdamState<T>& state) {
  if (state.m.empty() && state.step == 0) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), T{0});
      state.v.emplace_back(p.numel(), T{0});
    }
  }
  if (state.m.size() != params.size()) {
    throw ContractError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) +
                        " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) {
      throw ContractError("adam_step: parameter " + std::to_string(i) + " has no gradient");
    }
    if (state.m[i].size() != params[i].numel()) {
      throw ContractError("adam_step: parameter " + std::to_string(i) + " changed size");
    }
  }

  const auto& c = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(c.beta1, t);
  const double bias2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto param = params[i];
    auto theta = param.mutable_data();
    const auto g = param.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = c.beta1 * static_cast<double>(m[j]) + (1.0 - c.beta1) * gj;
      const double vj = c.beta2 * static_cast<double>(v[j]) + (1.0 - c.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double m_hat = mj / bias1;
      const double v_hat = vj / bias2;
      theta[j] = static_cast<T>(static_cast<double>(theta[j]) -
                                c.lr * m_hat / (std::sqrt(v_hat) + c.eps));
    }
  }
}

#define AELAB_INSTANTIATE(T)                                                              \
  template class Layer<T>;                                                                \
  template class Sequential<T>;                                                           \
  template void init_parameters<T>(Layer<T>&, Rng&, InitScheme);                          \
  template BasicTensor<T> mse_loss<T>(const BasicTensor<T>&, const BasicTensor<T>&);      \
  template BasicTensor<T> kl_standard_normal<T>(const BasicTensor<T>&, const BasicTensor<T>&); \
  template void adam_step<T>(std::span<const BasicTensor<T>>, AdamState<T>&);

AELAB_INSTANTIATE(float)
AELAB_INSTANTIATE(double)

#undef AELAB_INSTANTIATE

}  // namespace aelab
