#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "aftune/tensor.hpp"

namespace aftune {

enum class LayerKind : std::uint8_t { linear, relu, layer_norm, attention, softmax_xent };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& s);

struct ParamSpec {
  std::string name;
  Shape shape;
};

/// Static description of one layer. Which size fields are meaningful depends on `kind`.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t in = 0;        // linear
  std::size_t out = 0;       // linear
  std::size_t features = 0;  // relu (0 = any width), layer_norm
  std::size_t seq = 0;       // attention: tokens per row
  std::size_t dim = 0;       // attention: model width per token
  std::size_t classes = 0;   // softmax_xent
  bool deterministic = true;

  static LayerSpec linear(std::size_t in, std::size_t out);
  static LayerSpec relu(std::size_t features = 0);
  static LayerSpec layer_norm(std::size_t features);
  static LayerSpec attention(std::size_t seq, std::size_t dim);
  static LayerSpec softmax_xent(std::size_t classes);

  /// Width of the last input dimension, or 0 when any width is accepted.
  std::size_t input_width() const;
  std::vector<ParamSpec> param_specs() const;
  bool has_params() const { return !param_specs().empty(); }

  bool operator==(const LayerSpec&) const = default;
};

template <typename Real>
struct NamedTensor {
  std::string name;
  BasicTensor<Real> value;
};

template <typename Real>
struct Layer {
  LayerSpec spec;
  std::vector<NamedTensor<Real>> params;

  std::size_t param_count() const;
};

/// Values saved by a forward call for the matching backward call.
template <typename Real>
struct LayerCache {
  bool valid = false;
  BasicTensor<Real> input;
  BasicTensor<Real> labels;
  std::vector<BasicTensor<Real>> saved;
};

template <typename Real>
struct LayerGrads {
  BasicTensor<Real> input_grad;
  std::vector<BasicTensor<Real>> param_grads;  // same order as Layer::params
};

/// Draws initial parameters from the counter RNG keyed by (seed, layer index).
template <typename Real>
Layer<Real> init_layer(const LayerSpec& spec, std::uint64_t seed, std::size_t layer_index);

/// y = f(x; θ). `labels` is consulted only by the softmax-cross-entropy head: with
/// labels it emits the mean loss as a [1] tensor, without labels the class
/// probabilities. `index` is the layer's position in the model, for diagnostics.
template <typename Real>
BasicTensor<Real> layer_forward(const Layer<Real>& layer, std::size_t index,
                                const BasicTensor<Real>& x, const BasicTensor<Real>* labels,
                                LayerCache<Real>* cache);

template <typename Real>
LayerGrads<Real> layer_backward(const Layer<Real>& layer, std::size_t index,
                                const LayerCache<Real>& cache, const BasicTensor<Real>& dy);

/// All parameter tensors of a layer flattened in declaration order.
template <typename Real>
BasicTensor<Real> flatten_params(const Layer<Real>& layer);

template <typename Real>
void unflatten_params(Layer<Real>& layer, const BasicTensor<Real>& flat);

/// When set, layers flagged non-deterministic behave deterministically.
void set_force_deterministic(bool on);
bool force_deterministic();

class ScopedForceDeterministic {
 public:
  explicit ScopedForceDeterministic(bool on = true) : previous_(force_deterministic()) {
    set_force_deterministic(on);
  }
  ~ScopedForceDeterministic() { set_force_deterministic(previous_); }
  ScopedForceDeterministic(const ScopedForceDeterministic&) = delete;
  ScopedForceDeterministic& operator=(const ScopedForceDeterministic&) = delete;

 private:
  bool previous_;
};

}  // namespace aftune
