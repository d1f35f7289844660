#include "aftune/model.hpp"

namespace aftune {

std::vector<std::size_t> ModelSpec::nondeterministic_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (!layers[l].deterministic) out.push_back(l);
  }
  return out;
}

ModelSpec ModelSpec::mlp(std::size_t in, std::size_t hidden, std::size_t depth,
                         std::size_t classes, std::uint64_t seed) {
  ModelSpec spec;
  spec.init_seed = seed;
  std::size_t width = in;
  for (std::size_t d = 0; d < depth; ++d) {
    spec.layers.push_back(LayerSpec::linear(width, hidden));
    spec.layers.push_back(LayerSpec::relu(hidden));
    width = hidden;
  }
  spec.layers.push_back(LayerSpec::linear(width, classes));
  spec.layers.push_back(LayerSpec::softmax_xent(classes));
  return spec;
}

template <typename Real>
ModelState<Real> init_model(const ModelSpec& spec, const OptimizerConfig& opt) {
  if (spec.layers.empty()) throw ConfigError("a model needs at least one layer");
  ModelState<Real> state;
  state.opt.config = opt;
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    state.layers.push_back(init_layer<Real>(spec.layers[l], spec.init_seed, l));
    state.opt.layers.push_back(init_layer_opt_state(opt, state.layers.back()));
  }
  return state;
}

template <typename Real>
void check_memory_budget(const ModelState<Real>& state, std::uint64_t budget_bytes) {
  for (std::size_t l = 0; l < state.layers.size(); ++l) {
    for (const auto& p : state.layers[l].params) {
      const std::uint64_t bytes = p.value.size() * sizeof(Real);
      if (bytes > budget_bytes) {
        throw ConfigError("parameter '" + p.name + "' of layer " + std::to_string(l) + " needs " +
                          std::to_string(bytes) + " bytes, over the verifier budget of " +
                          std::to_string(budget_bytes));
      }
    }
  }
}

template <typename Real>
ForwardTrace<Real> forward_block(std::span<const Layer<Real>> layers, std::size_t first_index,
                                 const BasicTensor<Real>& input, const BasicTensor<Real>* labels) {
  ForwardTrace<Real> trace;
  trace.outputs.reserve(layers.size());
  trace.caches.resize(layers.size());
  const BasicTensor<Real>* x = &input;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    trace.outputs.push_back(
        layer_forward(layers[k], first_index + k, *x, labels, &trace.caches[k]));
    x = &trace.outputs.back();
  }
  return trace;
}

template <typename Real>
BackwardTrace<Real> backward_block(std::span<const Layer<Real>> layers, std::size_t first_index,
                                   const ForwardTrace<Real>& forward,
                                   const BasicTensor<Real>& upstream_grad) {
  if (forward.caches.size() != layers.size()) {
    throw ShapeError(first_index, "forward cache covers " + std::to_string(forward.caches.size()) +
                                      " layers, block has " + std::to_string(layers.size()));
  }
  BackwardTrace<Real> trace;
  trace.input_grads.resize(layers.size());
  trace.param_grads.resize(layers.size());
  const BasicTensor<Real>* dy = &upstream_grad;
  for (std::size_t k = layers.size(); k-- > 0;) {
    auto g = layer_backward(layers[k], first_index + k, forward.caches[k], *dy);
    trace.input_grads[k] = std::move(g.input_grad);
    trace.param_grads[k] = std::move(g.param_grads);
    dy = &trace.input_grads[k];
  }
  return trace;
}

template <typename Real>
void optimizer_step(std::span<Layer<Real>> layers, std::span<LayerOptState<Real>> states,
                    const OptimizerConfig& cfg, std::uint64_t step_before,
                    const std::vector<std::vector<BasicTensor<Real>>>& grads,
                    std::size_t first_index) {
  if (grads.size() != layers.size() || states.size() != layers.size()) {
    throw ShapeError(first_index, "gradient/state count does not match the block");
  }
  for (std::size_t k = 0; k < grads.size(); ++k) {
    for (const auto& g : grads[k]) {
      if (!all_finite(g)) {
        throw NonFiniteError("non-finite gradient in layer " + std::to_string(first_index + k));
      }
    }
  }
  for (std::size_t k = 0; k < layers.size(); ++k) {
    optimizer_update_layer(cfg, step_before, layers[k], states[k], grads[k], first_index + k);
  }
}

template <typename Real>
void optimizer_step(ModelState<Real>& state,
                    const std::vector<std::vector<BasicTensor<Real>>>& grads) {
  optimizer_step<Real>(state.layers, state.opt.layers, state.opt.config, state.opt.step, grads, 0);
  ++state.opt.step;
}

template <typename Real>
StepTrace<Real> train_step(ModelState<Real>& state, const Batch<Real>& batch) {
  const std::span<const Layer<Real>> layers(state.layers);
  auto fwd = forward_block(layers, 0, batch.inputs, &batch.labels);
  const auto& loss = fwd.final_output();
  if (loss.size() != 1) {
    throw ShapeError(state.layers.size() - 1, "training requires a loss head as the last layer");
  }
  if (!all_finite(loss)) throw NonFiniteError("non-finite loss at step " + std::to_string(batch.step));

  StepTrace<Real> trace;
  trace.loss = static_cast<double>(loss[0]);
  trace.activations.reserve(layers.size() + 1);
  trace.activations.push_back(batch.inputs);
  for (auto& out : fwd.outputs) trace.activations.push_back(out);

  BasicTensor<Real> seed({1}, {Real{1}});
  auto bwd = backward_block(layers, 0, fwd, seed);
  trace.gradients = bwd.input_grads;
  trace.gradients.push_back(std::move(seed));

  optimizer_step(state, bwd.param_grads);
  return trace;
}

template <typename Real>
BlockStep<Real> block_train_step(std::span<Layer<Real>> layers,
                                 std::span<LayerOptState<Real>> states,
                                 const OptimizerConfig& cfg, std::uint64_t step_before,
                                 std::size_t first_index, const BasicTensor<Real>& input,
                                 const BasicTensor<Real>& output_grad,
                                 const BasicTensor<Real>* labels) {
  const std::span<const Layer<Real>> view(layers.data(), layers.size());
  auto fwd = forward_block(view, first_index, input, labels);
  auto bwd = backward_block(view, first_index, fwd, output_grad);
  optimizer_step(layers, states, cfg, step_before, bwd.param_grads, first_index);
  return {std::move(fwd.outputs.back()), std::move(bwd.input_grads.front())};
}

#define AFTUNE_INSTANTIATE(Real)                                                                 \
  template ModelState<Real> init_model<Real>(const ModelSpec&, const OptimizerConfig&);          \
  template void check_memory_budget<Real>(const ModelState<Real>&, std::uint64_t);               \
  template ForwardTrace<Real> forward_block<Real>(std::span<const Layer<Real>>, std::size_t,     \
                                                  const BasicTensor<Real>&,                      \
                                                  const BasicTensor<Real>*);                     \
  template BackwardTrace<Real> backward_block<Real>(std::span<const Layer<Real>>, std::size_t,   \
                                                    const ForwardTrace<Real>&,                   \
                                                    const BasicTensor<Real>&);                   \
  template void optimizer_step<Real>(std::span<Layer<Real>>, std::span<LayerOptState<Real>>,     \
                                     const OptimizerConfig&, std::uint64_t,                      \
                                     const std::vector<std::vector<BasicTensor<Real>>>&,         \
                                     std::size_t);                                               \
  template void optimizer_step<Real>(ModelState<Real>&,                                          \
                                     const std::vector<std::vector<BasicTensor<Real>>>&);        \
  template StepTrace<Real> train_step<Real>(ModelState<Real>&, const Batch<Real>&);              \
  template BlockStep<Real> block_train_step<Real>(                                               \
      std::span<Layer<Real>>, std::span<LayerOptState<Real>>, const OptimizerConfig&,            \
      std::uint64_t, std::size_t, const BasicTensor<Real>&, const BasicTensor<Real>&,            \
      const BasicTensor<Real>*);

AFTUNE_INSTANTIATE(float)
AFTUNE_INSTANTIATE(double)

#undef AFTUNE_INSTANTIATE

}  // namespace aftune
