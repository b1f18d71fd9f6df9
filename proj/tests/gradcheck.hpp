#pragma once

// Central finite-difference oracle. The analytic gradient comes from the
// float32 tape; the numeric one re-evaluates the same expression in float64
// with no tape involved.

#include <algorithm>
#include <cmath>
#include <vector>

#include "aelab/autoencoders.hpp"
#include "aelab/random.hpp"
#include "aelab/tensor.hpp"

namespace aelab::testing {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::vector<double> per_input;
};

/// ‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, floor)
inline double relative_error(const std::vector<double>& analytic,
                             const std::vector<double>& numeric, double floor = 1e-10) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
}

/// `fn` is a generic callable taking `std::vector<BasicTensor<T>>&` and
/// returning a scalar BasicTensor<T>; it is instantiated for float and double.
/// At most `max_coords` coordinates per input are probed (chosen by `rng`).
template <typename Fn>
GradCheckResult check_gradients(Fn&& fn, const std::vector<Tensor>& inputs, double h,
                                std::size_t max_coords = 10000, Rng* rng = nullptr) {
  std::vector<Tensor> leaves;
  for (const auto& in : inputs) leaves.push_back(in.detach().set_requires_grad(true));
  {
    Tape<float> tape;
    Tape<float>::Recording rec(tape);
    auto loss = fn(leaves);
    tape.backward(loss);
  }

  std::vector<BasicTensor<double>> wide;
  for (const auto& in : inputs) wide.push_back(in.cast<double>());

  GradCheckResult result;
  for (std::size_t i = 0; i < wide.size(); ++i) {
    const std::size_t n = wide[i].numel();
    std::vector<std::size_t> coords(n);
    for (std::size_t j = 0; j < n; ++j) coords[j] = j;
    if (n > max_coords && rng != nullptr) {
      rng->shuffle(coords);
      coords.resize(max_coords);
    } else if (n > max_coords) {
      coords.resize(max_coords);
    }
    std::vector<double> analytic, numeric;
    const auto grad = leaves[i].has_grad() ? leaves[i].grad() : std::span<const float>();
    for (auto j : coords) {
      auto data = wide[i].mutable_data();
      const double saved = data[j];
      data[j] = saved + h;
      const double plus = fn(wide).item();
      data[j] = saved - h;
      const double minus = fn(wide).item();
      data[j] = saved;
      numeric.push_back((plus - minus) / (2.0 * h));
      analytic.push_back(grad.empty() ? 0.0 : static_cast<double>(grad[j]));
    }
    const double err = relative_error(analytic, numeric);
    result.per_input.push_back(err);
    result.max_relative_error = std::max(result.max_relative_error, err);
  }
  return result;
}

/// Full-model variant. `fn(model, x)` returns the scalar loss and is
/// instantiated for both precisions; `wide` must hold the same parameter
/// values as `model`. Every parameter tensor contributes `per_tensor` probed
/// coordinates and the error is taken over the concatenated gradient.
///
/// A coordinate whose stencil straddles a ReLU kink has no derivative to
/// compare against. Those are detected by disagreeing one-sided slopes,
/// skipped, and counted in `skipped`.
struct ModelGradCheckResult {
  double relative_error = 0.0;
  std::vector<double> per_tensor;
  std::size_t probed = 0;
  std::size_t skipped = 0;
};

/// `reference(wide, x, name)` is the float64 function differenced for the
/// parameter called `name`. It differs from `fn` only where `fn` stops a
/// gradient on purpose.
template <typename Fn, typename Ref>
ModelGradCheckResult check_model_gradients(Fn&& fn, Ref&& reference, Autoencoder<float>& model,
                                           Autoencoder<double>& wide, const Tensor& x, double h,
                                           std::size_t per_tensor, Rng& rng) {
  const auto params = model.parameters();
  for (auto p : params) p.tensor.zero_grad();
  {
    Tape<float> tape;
    Tape<float>::Recording rec(tape);
    tape.backward(fn(model, x));
  }
  const auto xd = x.cast<double>();
  const auto wide_params = wide.parameters();
  std::vector<double> analytic, numeric;
  ModelGradCheckResult result;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params[i].name;
    const double centre = reference(wide, xd, name).item();
    auto target = wide_params[i].tensor;
    const auto grad = params[i].tensor.grad();
    std::vector<double> a, n;
    for (std::size_t k = 0; k < per_tensor && k < target.numel(); ++k) {
      const auto j = static_cast<std::size_t>(rng.below(target.numel()));
      auto data = target.mutable_data();
      const double saved = data[j];
      data[j] = saved + h;
      const double plus = reference(wide, xd, name).item();
      data[j] = saved - h;
      const double minus = reference(wide, xd, name).item();
      data[j] = saved;
      ++result.probed;
      const double forward = (plus - centre) / h, backward = (centre - minus) / h;
      const double central = (plus - minus) / (2.0 * h);
      if (std::abs(forward - backward) > 1e-2 * std::abs(central) + 1e-7) {
        ++result.skipped;
        continue;
      }
      n.push_back(central);
      a.push_back(static_cast<double>(grad[j]));
    }
    result.per_tensor.push_back(relative_error(a, n));
    analytic.insert(analytic.end(), a.begin(), a.end());
    numeric.insert(numeric.end(), n.begin(), n.end());
  }
  result.relative_error = relative_error(analytic, numeric);
  return result;
}

template <typename Fn>
ModelGradCheckResult check_model_gradients(Fn&& fn, Autoencoder<float>& model,
                                           Autoencoder<double>& wide, const Tensor& x, double h,
                                           std::size_t per_tensor, Rng& rng) {
  return check_model_gradients(
      fn, [&fn](auto& m, const auto& in, const std::string&) { return fn(m, in); }, model, wide, x,
      h, per_tensor, rng);
}

/// Values uniform in ±[margin, 1], keeping inputs away from ReLU kinks.
inline Tensor away_from_zero(Shape shape, Rng& rng, double margin = 0.05) {
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) {
    const double mag = rng.uniform(margin, 1.0);
    v = static_cast<float>(rng.uniform() < 0.5 ? -mag : mag);
  }
  return t;
}

}  // namespace aelab::testing
