#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "aftune/layers.hpp"
#include "aftune/optimizer.hpp"

namespace aftune {

struct ModelSpec {
  std::vector<LayerSpec> layers;
  std::uint64_t init_seed = 1;

  std::size_t num_layers() const { return layers.size(); }
  std::vector<std::size_t> nondeterministic_layers() const;

  /// in -> [linear, relu] x depth -> linear -> softmax-xent. L = 2 * depth + 2.
  static ModelSpec mlp(std::size_t in, std::size_t hidden, std::size_t depth, std::size_t classes,
                       std::uint64_t seed);

  bool operator==(const ModelSpec&) const = default;
};

template <typename Real>
struct ModelState {
  std::vector<Layer<Real>> layers;
  OptimizerState<Real> opt;

  std::size_t num_layers() const { return layers.size(); }
  std::uint64_t step() const { return opt.step; }
};

template <typename Real>
ModelState<Real> init_model(const ModelSpec& spec, const OptimizerConfig& opt);

/// Throws ConfigError when any single parameter tensor exceeds `budget_bytes`.
template <typename Real>
void check_memory_budget(const ModelState<Real>& state, std::uint64_t budget_bytes);

template <typename Real>
struct Batch {
  BasicTensor<Real> inputs;
  BasicTensor<Real> labels;
  std::uint64_t step = 0;
};

template <typename Real>
struct ForwardTrace {
  std::vector<BasicTensor<Real>> outputs;  // one per layer
  std::vector<LayerCache<Real>> caches;

  const BasicTensor<Real>& final_output() const { return outputs.back(); }
};

/// Composes f_l left to right over `layers`, whose first element is model layer
/// `first_index`. Labels reach only a softmax-cross-entropy head.
template <typename Real>
ForwardTrace<Real> forward_block(std::span<const Layer<Real>> layers, std::size_t first_index,
                                 const BasicTensor<Real>& input,
                                 const BasicTensor<Real>* labels = nullptr);

template <typename Real>
struct BackwardTrace {
  /// Gradient w.r.t. the input of each layer in the block; front() is the block input grad.
  std::vector<BasicTensor<Real>> input_grads;
  std::vector<std::vector<BasicTensor<Real>>> param_grads;

  const BasicTensor<Real>& input_grad() const { return input_grads.front(); }
};

template <typename Real>
BackwardTrace<Real> backward_block(std::span<const Layer<Real>> layers, std::size_t first_index,
                                   const ForwardTrace<Real>& forward,
                                   const BasicTensor<Real>& upstream_grad);

/// Applies one optimizer update to a contiguous run of layers. All gradients are
/// checked for finiteness before anything is modified.
template <typename Real>
void optimizer_step(std::span<Layer<Real>> layers, std::span<LayerOptState<Real>> states,
                    const OptimizerConfig& cfg, std::uint64_t step_before,
                    const std::vector<std::vector<BasicTensor<Real>>>& grads,
                    std::size_t first_index);

/// Whole-model update; advances the step counter.
template <typename Real>
void optimizer_step(ModelState<Real>& state,
                    const std::vector<std::vector<BasicTensor<Real>>>& grads);

/// Boundary tensors of one training step: activations[l] is the input of layer l
/// and activations[L] the model output (the loss); gradients[l] is ∂loss/∂activations[l].
template <typename Real>
struct StepTrace {
  std::vector<BasicTensor<Real>> activations;
  std::vector<BasicTensor<Real>> gradients;
  double loss = 0.0;
};

template <typename Real>
StepTrace<Real> train_step(ModelState<Real>& state, const Batch<Real>& batch);

/// Result of replaying one training step restricted to a block of layers.
template <typename Real>
struct BlockStep {
  BasicTensor<Real> output;
  BasicTensor<Real> input_grad;
};

/// Forward from the recorded block input, backward from the recorded output
/// gradient, then update the block's parameters. This is exactly the work the
/// full training step performs on these layers, so it is bitwise reproducible.
template <typename Real>
BlockStep<Real> block_train_step(std::span<Layer<Real>> layers,
                                 std::span<LayerOptState<Real>> states,
                                 const OptimizerConfig& cfg, std::uint64_t step_before,
                                 std::size_t first_index, const BasicTensor<Real>& input,
                                 const BasicTensor<Real>& output_grad,
                                 const BasicTensor<Real>* labels);

}  // namespace aftune
