#include "aftune/adversary.hpp"

#include "doctest.h"
#include "support.hpp"

using namespace aftune;
using namespace aftune::testing;

namespace {

// L = 8 with B_L = 2: four layer blocks, each holding a linear layer.
Manifest scenario_manifest(RunMode mode) {
  auto m = toy_manifest(3, 16, 2, 4, 1);
  if (mode == RunMode::inference) {
    m.grid.steps = 8;
    m.grid.step_block = 1;
  }
  return m;
}

TamperedRun tamper(ScenarioKind kind) {
  const auto m = scenario_manifest(scenario_mode(kind));
  const auto grid = BlockGrid::partition(m.grid);
  return apply_scenario(m, default_scenario(kind, grid, m.layer_has_params()), {});
}

}  // namespace

TEST_CASE("every scenario fails exactly on its predicted blocks") {
  for (auto kind : all_scenario_kinds()) {
    auto run = tamper(kind);
    INFO(to_string(kind));
    VerificationOracle oracle(run.ledger, run.store);
    const auto failing = oracle.failing_blocks();
    CHECK(!run.compromised.empty());
    CHECK(failing == run.compromised);
  }
}

TEST_CASE("under-train skipping steps 8-15 fails rows 2 and 3") {
  auto run = tamper(ScenarioKind::under_train);
  for (const auto& id : run.compromised) CHECK(id.j >= 2);
  CHECK(run.compromised.size() == 8);
  auto plan = documented_plan(run.ledger.grid(), run.scenario, 4, 9);
  CHECK(predicted_detection(plan, run.compromised) == doctest::Approx(1.0));
}

TEST_CASE("substitution at step 0 breaks the base anchor in row 0") {
  auto m = scenario_manifest(RunMode::training);
  Scenario s;
  s.kind = ScenarioKind::model_substitution;
  s.at_boundary = 0;
  auto run = apply_scenario(m, s, {});
  VerificationOracle oracle(run.ledger, run.store);
  for (std::uint32_t i = 0; i < 4; ++i) {
    const auto& rep = oracle.report({i, 0});
    REQUIRE(rep.cause());
    CHECK(rep.cause()->kind == FailureKind::hash_mismatch);
    CHECK(rep.cause()->key.kind == BoundaryKind::parameter);
  }
}

TEST_CASE("backdoor batches break the input anchor") {
  auto run = tamper(ScenarioKind::backdoor_poison);
  VerificationOracle oracle(run.ledger, run.store);
  for (const auto& id : run.compromised) {
    if (id.i != 0) continue;
    const auto& rep = oracle.report(id);
    REQUIRE(rep.cause());
    CHECK(rep.cause()->kind == FailureKind::hash_mismatch);
    CHECK(rep.cause()->key.kind == BoundaryKind::activation);
  }
}

TEST_CASE("poisoned checkpoint fails the parameter update check") {
  auto run = tamper(ScenarioKind::parameter_poison);
  VerificationOracle oracle(run.ledger, run.store);
  REQUIRE(run.compromised.size() == 1);
  const auto& rep = oracle.report(*run.compromised.begin());
  REQUIRE(rep.cause());
  CHECK(rep.cause()->kind == FailureKind::numerical_mismatch);
  CHECK(rep.cause()->key.kind == BoundaryKind::parameter);
}

TEST_CASE("documented strategies detect at the predicted rate") {
  for (auto kind : all_scenario_kinds()) {
    auto run = tamper(kind);
    auto plan = documented_plan(run.ledger.grid(), run.scenario, 2, 17);
    VerificationOracle oracle(run.ledger, run.store);
    auto rep = run_campaign(plan, [&](BlockId id) { return oracle(id); }, run.compromised, 2000);
    INFO(to_string(kind) << ": " << rep.summary());
    CHECK(rep.predicted > 0.0);
    CHECK(rep.within_ci());
  }
}

TEST_CASE("scenario json round trip and validation") {
  auto m = scenario_manifest(RunMode::training);
  const auto grid = BlockGrid::partition(m.grid);
  for (auto kind : all_scenario_kinds()) {
    auto s = default_scenario(kind, grid, m.layer_has_params());
    auto back = Scenario::from_json(s.to_json());
    CHECK(back.to_json() == s.to_json());
  }
  Scenario bad;
  bad.kind = ScenarioKind::activation_perturbation;
  bad.steps = {1};
  bad.boundary = 0;
  CHECK_THROWS_AS(bad.validate(grid), ConfigError);
  CHECK_THROWS_AS(scenario_kind_from_string("nope"), ConfigError);
}

TEST_CASE("scenario application is deterministic") {
  auto a = tamper(ScenarioKind::activation_perturbation);
  auto b = tamper(ScenarioKind::activation_perturbation);
  CHECK(a.ledger.ledger_digest() == b.ledger.ledger_digest());
}

TEST_CASE("activation attack on the toy classifier") {
  const auto toy = train_toy_classifier<float>();
  MESSAGE("toy accuracy " << toy.accuracy);
  CHECK(toy.accuracy > 0.9);
  const auto r = most_confident_sample(toy.model, toy.data);
  const Tensor x({1, 2}, {toy.data.inputs[2 * r], toy.data.inputs[2 * r + 1]});

  SUBCASE("zero budget leaves the prediction alone") {
    AttackConfig cfg;
    cfg.max_relative = 0.0;
    auto res = pgd_activation_attack(toy.model, x, std::nullopt, {2}, cfg);
    CHECK(!res.success);
    CHECK(res.max_relative == 0.0);
  }
  SUBCASE("successful perturbations flip the class and sit far above tolerance") {
    auto res = pgd_activation_attack(toy.model, x, std::nullopt, attack_layers(8, 1));
    REQUIRE(res.success);
    MESSAGE("min " << res.min_relative << " max " << res.max_relative);
    CHECK(res.min_relative >= 1e2 * default_tolerance(Precision::f32));
    // Replay the strongest boundary by hand: the class must differ.
    const auto& b = res.boundaries.front();
    std::span<const Layer<float>> layers(toy.model.layers);
    auto head = forward_block<float>(layers.subspan(0, b.layer), 0, x, nullptr).final_output();
    for (std::size_t k = 0; k < head.size(); ++k) head[k] += static_cast<float>(b.delta[k]);
    auto z = forward_block<float>(layers.subspan(b.layer, 7 - b.layer), b.layer, head, nullptr).final_output();
    const auto label = predict(toy.model, x)[0];
    const auto flipped = static_cast<std::size_t>(std::max_element(z.data.begin(), z.data.end()) - z.data.begin());
    CHECK(flipped != label);
  }
  SUBCASE("targeted and joint modes") {
    const auto label = predict(toy.model, x)[0];
    AttackConfig cfg;
    cfg.joint = true;
    auto res = pgd_activation_attack(toy.model, x, (label + 1) % 3, attack_layers(8, 2), cfg);
    CHECK(res.success);
    CHECK(res.boundaries.size() == 3);
  }
  SUBCASE("B_L trend") {
    auto rows = activation_trend(toy.model, x, std::nullopt, {1, 2, 4});
    for (const auto& row : rows) {
      MESSAGE("B_L=" << row.layer_block << " min " << row.min_relative << " max " << row.max_relative
                     << " at layer " << row.argmax_layer);
    }
    CHECK(trend_holds(rows));
  }
}

TEST_CASE("parameter poisoning on the toy classifier") {
  const auto toy = train_toy_classifier<float>();
  const auto r = most_confident_sample(toy.model, toy.data);
  const std::vector<double> sample{toy.data.inputs[2 * r], toy.data.inputs[2 * r + 1]};
  const auto label = static_cast<std::size_t>(toy.data.labels[r]);

  PoisonObjective same;
  same.kind = PoisonObjective::Kind::identity;
  same.samples = {sample};
  auto none = parameter_poison_attack(toy.model, same);
  CHECK(none.success);
  CHECK(none.relative_l2 == 0.0);

  PoisonObjective backdoor;
  backdoor.samples = {sample};
  backdoor.trigger = {1.0, 1.0};
  backdoor.target_label = (label + 1) % 3;
  auto res = parameter_poison_attack(toy.model, backdoor);
  REQUIRE(res.success);
  MESSAGE("backdoor relative dtheta " << res.relative_l2);
  CHECK(res.relative_l2 >= 1e2 * default_tolerance(Precision::f32));

  PoisonObjective targeted;
  targeted.kind = PoisonObjective::Kind::targeted;
  targeted.samples = {sample};
  targeted.labels = {(label + 2) % 3};
  CHECK(parameter_poison_attack(toy.model, targeted).success);
}
