#include "aftune/optimizer.hpp"

#include <cmath>

namespace aftune {

std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::adamw ? "adamw" : "sgd";
}

OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "sgd" || s == "sgd-momentum") return OptimizerKind::sgd_momentum;
  if (s == "adamw") return OptimizerKind::adamw;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd or adamw)");
}

template <typename Real>
void LayerOptState<Real>::unflatten(const BasicTensor<Real>& flat) {
  if (flat.size() != element_count()) {
    throw ConfigError("flat optimizer state has " + std::to_string(flat.size()) +
                      " elements, expected " + std::to_string(element_count()));
  }
  std::size_t off = 0;
  for (auto& s : slots) {
    std::copy_n(flat.data.begin() + static_cast<std::ptrdiff_t>(off), s.size(), s.data.begin());
    off += s.size();
  }
}

template <typename Real>
std::size_t LayerOptState<Real>::element_count() const {
  std::size_t n = 0;
  for (const auto& s : slots) n += s.size();
  return n;
}

template <typename Real>
LayerOptState<Real> init_layer_opt_state(const OptimizerConfig& cfg, const Layer<Real>& layer) {
  LayerOptState<Real> st;
  for (const auto& p : layer.params) {
    for (std::size_t k = 0; k < cfg.slots_per_param(); ++k) {
      st.slots.emplace_back(p.value.shape);
    }
  }
  return st;
}

template <typename Real>
void optimizer_update_layer(const OptimizerConfig& cfg, std::uint64_t step_before,
                            Layer<Real>& layer, LayerOptState<Real>& state,
                            const std::vector<BasicTensor<Real>>& grads, std::size_t layer_index) {
  if (grads.size() != layer.params.size()) {
    throw ShapeError(layer_index, "expected " + std::to_string(layer.params.size()) +
                                      " parameter gradients, got " + std::to_string(grads.size()));
  }
  if (state.slots.size() != layer.params.size() * cfg.slots_per_param()) {
    throw ShapeError(layer_index, "optimizer state does not cover the layer parameters");
  }
  for (std::size_t p = 0; p < grads.size(); ++p) {
    if (grads[p].shape != layer.params[p].value.shape) {
      throw ShapeError(layer_index, "gradient for '" + layer.params[p].name + "' has shape " +
                                        shape_string(grads[p].shape));
    }
    if (!all_finite(grads[p])) {
      throw NonFiniteError("non-finite gradient for layer " + std::to_string(layer_index) +
                           " parameter '" + layer.params[p].name + "'");
    }
  }

  Layer<Real> next_layer = layer;
  LayerOptState<Real> next_state = state;
  const Real lr = static_cast<Real>(cfg.lr);
  const Real wd = static_cast<Real>(cfg.weight_decay);

  for (std::size_t p = 0; p < grads.size(); ++p) {
    auto& theta = next_layer.params[p].value.data;
    const auto& g = grads[p].data;
    if (cfg.kind == OptimizerKind::sgd_momentum) {
      auto& vel = next_state.slots[p].data;
      const Real mu = static_cast<Real>(cfg.momentum);
      for (std::size_t k = 0; k < theta.size(); ++k) {
        const Real gk = g[k] + wd * theta[k];
        vel[k] = mu * vel[k] + gk;
        theta[k] = theta[k] - lr * vel[k];
      }
    } else {
      auto& m = next_state.slots[2 * p].data;
      auto& v = next_state.slots[2 * p + 1].data;
      const Real b1 = static_cast<Real>(cfg.beta1);
      const Real b2 = static_cast<Real>(cfg.beta2);
      const Real eps = static_cast<Real>(cfg.eps);
      const Real t = static_cast<Real>(step_before + 1);
      const Real c1 = Real{1} - std::pow(b1, t);
      const Real c2 = Real{1} - std::pow(b2, t);
      for (std::size_t k = 0; k < theta.size(); ++k) {
        m[k] = b1 * m[k] + (Real{1} - b1) * g[k];
        v[k] = b2 * v[k] + (Real{1} - b2) * g[k] * g[k];
        const Real mhat = m[k] / c1;
        const Real vhat = v[k] / c2;
        theta[k] = theta[k] - lr * (mhat / (std::sqrt(vhat) + eps) + wd * theta[k]);
      }
    }
    if (!all_finite(next_layer.params[p].value)) {
      throw NonFiniteError("update produced non-finite values in layer " +
                           std::to_string(layer_index) + " parameter '" +
                           layer.params[p].name + "'");
    }
  }
  layer = std::move(next_layer);
  state = std::move(next_state);
}

template struct LayerOptState<float>;
template struct LayerOptState<double>;
template LayerOptState<float> init_layer_opt_state(const OptimizerConfig&, const Layer<float>&);
template LayerOptState<double> init_layer_opt_state(const OptimizerConfig&, const Layer<double>&);
template void optimizer_update_layer(const OptimizerConfig&, std::uint64_t, Layer<float>&,
                                     LayerOptState<float>&, const std::vector<Tensor>&,
                                     std::size_t);
template void optimizer_update_layer(const OptimizerConfig&, std::uint64_t, Layer<double>&,
                                     LayerOptState<double>&, const std::vector<Tensor64>&,
                                     std::size_t);

}  // namespace aftune
