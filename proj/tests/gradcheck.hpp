#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "aftune/model.hpp"
#include "aftune/rng.hpp"

namespace aftune::testing {

inline double rel(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0, n = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    d += (a[k] - b[k]) * (a[k] - b[k]);
    n += b[k] * b[k];
  }
  return n == 0 ? std::sqrt(d) : std::sqrt(d / n);
}

// Random small instance of a layer kind; every dimension is at most 8.
struct Instance {
  Layer<double> layer;
  Tensor64 x;
  std::optional<Tensor64> labels;
};

inline Instance random_instance(LayerKind kind, CounterRng& rng) {
  auto dim = [&](std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); };
  const std::size_t rows = dim(1, 3);
  LayerSpec spec;
  switch (kind) {
    case LayerKind::linear: spec = LayerSpec::linear(dim(1, 8), dim(1, 8)); break;
    case LayerKind::relu: spec = LayerSpec::relu(dim(1, 8)); break;
    case LayerKind::layer_norm: spec = LayerSpec::layer_norm(dim(2, 8)); break;
    case LayerKind::attention: spec = LayerSpec::attention(dim(1, 4), dim(1, 4)); break;
    case LayerKind::softmax_xent: spec = LayerSpec::softmax_xent(dim(2, 8)); break;
  }
  Instance inst;
  inst.layer = init_layer<double>(spec, rng.next_u64(), 0);
  for (auto& p : inst.layer.params) {
    for (auto& v : p.value.data) v = rng.normal() * 0.7;
  }
  inst.x = Tensor64({rows, spec.input_width()});
  for (auto& v : inst.x.data) {
    v = rng.normal();
    // keep relu inputs away from the kink so central differences are smooth
    if (kind == LayerKind::relu) v = (v < 0 ? -1.0 : 1.0) * (0.05 + std::abs(v));
  }
  if (kind == LayerKind::softmax_xent && rng.below(2) == 0) {
    Tensor64 y({rows});
    for (auto& v : y.data) v = static_cast<double>(rng.below(spec.classes));
    inst.labels = y;
  }
  return inst;
}

// Scalar objective: <r, f(x)>, or the loss itself when the head has labels.
inline double objective(const Instance& inst, const Layer<double>& layer, const Tensor64& x, const Tensor64& r) {
  const auto y = layer_forward<double>(layer, 0, x, inst.labels ? &*inst.labels : nullptr, nullptr);
  double s = 0;
  for (std::size_t k = 0; k < y.size(); ++k) s += y[k] * r[k];
  return s;
}

// h = 1e-3 leaves O(h^2) truncation near 1e-3 on two-feature layer norms, where
// the curvature is large; a smaller step keeps the oracle itself accurate.
// Largest relative error over the input gradient and every parameter gradient.
inline double worst_gradient_error(const Instance& inst, CounterRng& rng) {
  constexpr double h = 1e-5;
  LayerCache<double> cache;
  const auto y = layer_forward<double>(inst.layer, 0, inst.x, inst.labels ? &*inst.labels : nullptr, &cache);
  Tensor64 r(y.shape);
  for (auto& v : r.data) v = inst.labels ? 1.0 : rng.normal();
  const auto g = layer_backward<double>(inst.layer, 0, cache, r);

  std::vector<double> fd(inst.x.size());
  for (std::size_t k = 0; k < inst.x.size(); ++k) {
    auto xp = inst.x, xm = inst.x;
    xp[k] += h;
    xm[k] -= h;
    fd[k] = (objective(inst, inst.layer, xp, r) - objective(inst, inst.layer, xm, r)) / (2 * h);
  }
  double worst = rel(g.input_grad.data, fd);
  if (g.param_grads.size() != inst.layer.params.size()) return INFINITY;
  for (std::size_t p = 0; p < inst.layer.params.size(); ++p) {
    const auto n = inst.layer.params[p].value.size();
    std::vector<double> fdp(n);
    for (std::size_t k = 0; k < n; ++k) {
      auto lp = inst.layer, lm = inst.layer;
      lp.params[p].value[k] += h;
      lm.params[p].value[k] -= h;
      fdp[k] = (objective(inst, lp, inst.x, r) - objective(inst, lm, inst.x, r)) / (2 * h);
    }
    worst = std::max(worst, rel(g.param_grads[p].data, fdp));
  }
  return worst;
}

}  // namespace aftune::testing
