#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aftune/layers.hpp"

namespace aftune {

enum class OptimizerKind : std::uint8_t { sgd_momentum, adamw };

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& s);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd_momentum;
  double lr = 0.05;
  double momentum = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  /// State tensors kept per parameter tensor (sgd: velocity; adamw: m, v).
  std::size_t slots_per_param() const { return kind == OptimizerKind::adamw ? 2 : 1; }

  bool operator==(const OptimizerConfig&) const = default;
};

/// Optimizer state of one layer. Slots are ordered per parameter:
/// sgd  -> [p0.velocity, p1.velocity, ...]
/// adamw -> [p0.m, p0.v, p1.m, p1.v, ...]
template <typename Real>
struct LayerOptState {
  std::vector<BasicTensor<Real>> slots;

  BasicTensor<Real> flatten() const { return flatten_concat<Real>(slots); }
  void unflatten(const BasicTensor<Real>& flat);
  std::size_t element_count() const;
};

template <typename Real>
struct OptimizerState {
  OptimizerConfig config;
  /// Number of updates applied so far; AdamW bias correction uses step + 1.
  std::uint64_t step = 0;
  std::vector<LayerOptState<Real>> layers;
};

template <typename Real>
LayerOptState<Real> init_layer_opt_state(const OptimizerConfig& cfg, const Layer<Real>& layer);

/// Updates one layer in place. `step_before` is the number of updates already
/// applied. Throws NonFiniteError on a non-finite gradient or result; the
/// layer is left untouched in that case.
template <typename Real>
void optimizer_update_layer(const OptimizerConfig& cfg, std::uint64_t step_before,
                            Layer<Real>& layer, LayerOptState<Real>& state,
                            const std::vector<BasicTensor<Real>>& grads, std::size_t layer_index);

}  // namespace aftune
