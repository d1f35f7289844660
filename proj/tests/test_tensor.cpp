#include <cmath>

#include "aftune/dataset.hpp"
#include "aftune/hash.hpp"
#include "aftune/model.hpp"
#include "aftune/rng.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace aftune;
using namespace aftune::testing;

namespace {

template <typename Real>
Layer<Real> make_layer(LayerSpec spec, std::vector<std::vector<Real>> values) {
  auto layer = init_layer<Real>(spec, 1, 0);
  for (std::size_t k = 0; k < values.size(); ++k) layer.params[k].value.data = values[k];
  return layer;
}

template <typename Real>
BasicTensor<Real> fwd(const Layer<Real>& layer, const BasicTensor<Real>& x) {
  return layer_forward<Real>(layer, 0, x, nullptr, nullptr);
}

ModelSpec tiny_classifier() {
  ModelSpec s;
  s.layers = {LayerSpec::linear(2, 3), LayerSpec::softmax_xent(3)};
  s.init_seed = 4;
  return s;
}

Batch<float> fixed_batch() {
  DatasetSpec ds;
  ds.samples = 32;
  return batch_for_step(make_dataset<float>(ds), 5, 0, 8);
}

}  // namespace

TEST_CASE("identity linear layer passes its input through") {
  auto layer = make_layer<float>(LayerSpec::linear(3, 3), {{1, 0, 0, 0, 1, 0, 0, 0, 1}, {0, 0, 0}});
  const Tensor v({1, 3}, {0.5f, -2.0f, 7.25f});
  CHECK(fwd(layer, v) == v);
}

TEST_CASE("relu forward and backward by definition") {
  auto relu = init_layer<float>(LayerSpec::relu(), 1, 0);
  CHECK(fwd(relu, Tensor({3}, {-1, 0, 2})).data == std::vector<float>{0, 0, 2});
  LayerCache<float> cache;
  layer_forward<float>(relu, 0, Tensor({2}, {-1, 2}), nullptr, &cache);
  CHECK(layer_backward<float>(relu, 0, cache, Tensor({2}, {5, 5})).input_grad.data == std::vector<float>{0, 5});
}

TEST_CASE("linear input gradient is W^T times upstream") {
  auto layer = make_layer<float>(LayerSpec::linear(1, 1), {{2}, {0}});
  LayerCache<float> cache;
  layer_forward<float>(layer, 0, Tensor({1, 1}, {1}), nullptr, &cache);
  CHECK(layer_backward<float>(layer, 0, cache, Tensor({1, 1}, {3})).input_grad.data == std::vector<float>{6});
}

TEST_CASE("two-layer MLP matches a hand-unrolled scalar reimplementation bitwise") {
  ModelSpec spec;
  spec.layers = {LayerSpec::linear(3, 4), LayerSpec::relu(4), LayerSpec::linear(4, 2)};
  spec.init_seed = 21;
  const auto model = init_model<float>(spec, {});
  Tensor x({2, 3});
  CounterRng rng(9, RngPurpose::test);
  for (auto& v : x.data) v = static_cast<float>(rng.normal());

  const auto out = forward_block<float>(model.layers, 0, x).final_output();

  const auto& w1 = model.layers[0].params[0].value.data;
  const auto& b1 = model.layers[0].params[1].value.data;
  const auto& w2 = model.layers[2].params[0].value.data;
  const auto& b2 = model.layers[2].params[1].value.data;
  std::vector<float> ref;
  for (int n = 0; n < 2; ++n) {
    float h[4];
    for (int o = 0; o < 4; ++o) {
      float acc = b1[o];
      for (int i = 0; i < 3; ++i) acc += x[n * 3 + i] * w1[o * 3 + i];
      h[o] = acc > 0.0f ? acc : 0.0f;
    }
    for (int o = 0; o < 2; ++o) {
      float acc = b2[o];
      for (int i = 0; i < 4; ++i) acc += h[i] * w2[o * 4 + i];
      ref.push_back(acc);
    }
  }
  const Tensor oracle({2, 2}, ref);
  CHECK(chunked_hash(out, 4096, HashAlgo::blake3) == chunked_hash(oracle, 4096, HashAlgo::blake3));
}

TEST_CASE("analytic gradients match central finite differences for every layer kind") {
  CounterRng rng(2024, RngPurpose::test);
  for (auto kind : {LayerKind::linear, LayerKind::relu, LayerKind::layer_norm, LayerKind::attention,
                    LayerKind::softmax_xent}) {
    for (int n = 0; n < 100; ++n) {
      INFO(to_string(kind) << " instance " << n);
      CHECK(worst_gradient_error(random_instance(kind, rng), rng) <= 1e-3);
    }
  }
}

TEST_CASE("toy MLP parameter gradients match finite differences in binary64") {
  auto model = init_model<double>(ModelSpec::mlp(2, 5, 2, 3, 8), {});
  const Tensor64 x({4, 2}, {0.3, -1.2, 0.8, 0.1, -0.5, 0.9, 1.4, -0.7});
  const Tensor64 y({4}, {0, 1, 2, 1});
  auto loss = [&](const ModelState<double>& m) {
    return forward_block<double>(m.layers, 0, x, &y).final_output()[0];
  };
  const auto f = forward_block<double>(model.layers, 0, x, &y);
  const auto b = backward_block<double>(model.layers, 0, f, Tensor64({1}, {1.0}));
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    for (std::size_t p = 0; p < model.layers[l].params.size(); ++p) {
      const auto n = model.layers[l].params[p].value.size();
      std::vector<double> fd(n);
      for (std::size_t k = 0; k < n; ++k) {
        auto up = model, dn = model;
        up.layers[l].params[p].value[k] += 1e-3;
        dn.layers[l].params[p].value[k] -= 1e-3;
        fd[k] = (loss(up) - loss(dn)) / 2e-3;
      }
      INFO("layer " << l << " param " << p);
      CHECK(rel(b.param_grads[l][p].data, fd) <= 1e-3);
    }
  }
}

TEST_CASE("sgd and adamw single-step identities") {
  auto layer = make_layer<float>(LayerSpec::linear(1, 1), {{1.0f}, {0.0f}});
  OptimizerConfig sgd;
  sgd.lr = 0.1;
  auto st = init_layer_opt_state(sgd, layer);
  optimizer_update_layer(sgd, 0, layer, st, {Tensor({1, 1}, {2.0f}), Tensor({1}, {0.0f})}, 0);
  CHECK(layer.params[0].value[0] == doctest::Approx(0.8));

  auto a = make_layer<double>(LayerSpec::linear(1, 1), {{0.0}, {0.0}});
  OptimizerConfig adam;
  adam.kind = OptimizerKind::adamw;
  adam.lr = 0.1;
  auto sa = init_layer_opt_state(adam, a);
  optimizer_update_layer(adam, 0, a, sa, {Tensor64({1, 1}, {1.0}), Tensor64({1}, {0.0})}, 0);
  CHECK(a.params[0].value[0] == doctest::Approx(-0.1).epsilon(1e-6));
  CHECK(sa.slots.size() == 4);
  CHECK(sa.slots[0].shape == a.params[0].value.shape);
}

TEST_CASE("non-finite gradient aborts the update and leaves parameters alone") {
  auto model = init_model<float>(tiny_classifier(), {});
  const auto before = model.layers[0].params[0].value;
  auto grads = std::vector<std::vector<Tensor>>{{Tensor({3, 2}), Tensor({3})}, {}};
  grads[0][1][2] = std::nanf("");
  CHECK_THROWS_AS(optimizer_step(model, grads), NonFiniteError);
  CHECK(model.layers[0].params[0].value == before);
  CHECK(model.step() == 0);
}

TEST_CASE("shape mismatch names the layer") {
  auto model = init_model<float>(ModelSpec::mlp(2, 4, 1, 3, 1), {});
  try {
    forward_block<float>(std::span<const Layer<float>>(model.layers).subspan(2), 2, Tensor({1, 2}));
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(e.layer() == 2);
  }
  LayerCache<float> empty;
  CHECK_THROWS_AS(layer_backward<float>(model.layers[0], 0, empty, Tensor({1, 4})), ShapeError);
}

TEST_CASE("train step: loss goes down, zero lr is a no-op, L+1 boundaries") {
  OptimizerConfig opt;
  opt.lr = 0.05;
  auto model = init_model<float>(tiny_classifier(), opt);
  const auto batch = fixed_batch();
  const auto trace = train_step(model, batch);
  CHECK(trace.activations.size() == model.num_layers() + 1);
  CHECK(trace.gradients.size() == model.num_layers() + 1);
  CHECK(model.step() == 1);
  const double after = forward_block<float>(model.layers, 0, batch.inputs, &batch.labels).final_output()[0];
  CHECK(after < trace.loss);

  opt.lr = 0.0;
  auto frozen = init_model<float>(tiny_classifier(), opt);
  const auto theta = frozen.layers;
  train_step(frozen, batch);
  for (std::size_t l = 0; l < theta.size(); ++l) {
    for (std::size_t p = 0; p < theta[l].params.size(); ++p) CHECK(frozen.layers[l].params[p].value == theta[l].params[p].value);
  }
}

TEST_CASE("ten-step runs are bitwise reproducible") {
  auto run = [] {
    OptimizerConfig opt;
    opt.kind = OptimizerKind::adamw;
    opt.lr = 0.01;
    auto model = init_model<float>(ModelSpec::mlp(2, 6, 2, 3, 3), opt);
    DatasetSpec ds;
    ds.samples = 40;
    const auto data = make_dataset<float>(ds);
    for (std::uint64_t t = 0; t < 10; ++t) train_step(model, batch_for_step(data, 1, t, 8));
    std::vector<Tensor> all;
    for (const auto& l : model.layers) all.push_back(flatten_params(l));
    return chunked_hash(flatten_concat<float>(all), 64, HashAlgo::blake3);
  };
  CHECK(run() == run());
}

TEST_CASE("forward is pure in its input and parameters") {
  auto model = init_model<float>(ModelSpec::mlp(2, 6, 2, 3, 3), {});
  auto other = init_model<float>(ModelSpec::mlp(2, 6, 2, 3, 4), {});
  const Tensor x({2, 2}, {0.1f, 0.2f, -0.3f, 0.4f});
  const auto first = forward_block<float>(model.layers, 0, x).final_output();
  other.layers[0].params[0].value[0] = 99.0f;
  forward_block<float>(other.layers, 0, x);
  train_step(other, fixed_batch());
  CHECK(forward_block<float>(model.layers, 0, x).final_output() == first);
}

TEST_CASE("non-deterministic layers vary unless forced") {
  auto spec = LayerSpec::relu();
  spec.deterministic = false;
  auto layer = init_layer<float>(spec, 1, 0);
  const Tensor x({4}, {1.0f, 2.0f, 3.0f, 4.0f});
  bool differs = false;
  for (int k = 0; k < 8 && !differs; ++k) differs = fwd(layer, x) != fwd(layer, x);
  CHECK(differs);
  ScopedForceDeterministic pin;
  CHECK(fwd(layer, x) == fwd(layer, x));
}

TEST_CASE("memory budget check") {
  auto model = init_model<float>(ModelSpec::mlp(2, 16, 2, 3, 1), {});
  CHECK_NOTHROW(check_memory_budget(model, 16 * 16 * 4));
  CHECK_THROWS_AS(check_memory_budget(model, 16 * 16 * 4 - 1), ConfigError);
}
