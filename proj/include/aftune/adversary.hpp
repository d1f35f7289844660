#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aftune/auditor.hpp"
#include "aftune/dataset.hpp"
#include "aftune/recorder.hpp"

namespace aftune {

enum class ScenarioKind : std::uint8_t {
  under_train,
  model_substitution,
  backdoor_poison,
  serve_wrong_model,
  fabricate_output,
  activation_perturbation,
  parameter_poison,
};

std::string to_string(ScenarioKind k);
ScenarioKind scenario_kind_from_string(const std::string& s);
const std::vector<ScenarioKind>& all_scenario_kinds();
RunMode scenario_mode(ScenarioKind k);

struct Scenario {
  ScenarioKind kind = ScenarioKind::under_train;
  /// Steps (or inference requests) the attack touches: skipped steps, poisoned
  /// batches, perturbed steps, wrongly served or fabricated requests.
  std::vector<std::size_t> steps;
  /// Substitution / parameter poison: the step-block boundary where the state is swapped.
  std::size_t at_boundary = 0;
  std::uint64_t substitute_seed = 0x5eed;
  /// Parameter poison / serve-wrong-model: the tampered layer (nullopt = every layer).
  std::optional<std::size_t> layer;
  /// Activation perturbation: boundary index b, 0 < b < number of layer blocks.
  std::size_t boundary = 1;
  /// Relative L2 size of injected activation or parameter perturbations.
  double budget = 1e-2;
  std::size_t trigger_samples = 4;
  double trigger_offset = 1.5;
  std::size_t target_label = 0;
  std::uint64_t seed = 1;

  void validate(const BlockGrid& grid) const;
  nlohmann::json to_json() const;
  static Scenario from_json(const nlohmann::json& j);
};

/// A sensible instance of each scenario kind for a grid.
Scenario default_scenario(ScenarioKind kind, const BlockGrid& grid,
                          const std::vector<bool>& layer_has_params);

struct TamperedRun {
  Scenario scenario;
  RunLedger ledger;
  TensorStore store;
  /// Blocks whose verification must fail, derived from the attack structure.
  std::set<BlockId> compromised;
};

/// Blocks a scenario corrupts, from the grid alone.
std::set<BlockId> expected_compromised(const BlockGrid& grid, const Scenario& s,
                                       const std::vector<bool>& layer_has_params);

/// Re-executes the honest run described by `manifest` with the scenario's
/// tampering. Hashes of everything the provider records stay self-consistent.
template <typename Real>
TamperedRun apply_training_scenario(const Manifest& manifest, const Scenario& s,
                                    const RecordOptions& opts);

/// `model` is the model the provider committed to serve.
template <typename Real>
TamperedRun apply_inference_scenario(const Manifest& manifest, const ModelState<Real>& model,
                                     const Scenario& s, const RecordOptions& opts);

/// Dispatches on mode and precision; inference serves the manifest's initial model.
TamperedRun apply_scenario(const Manifest& manifest, const Scenario& s, const RecordOptions& opts);

/// The audit strategy that targets a scenario (fabricated output: every last-block cell).
AuditPlan documented_plan(const BlockGrid& grid, const Scenario& s, std::size_t m,
                          std::uint64_t seed);

// ---- tolerance-exploitation attacks ----

struct AttackConfig {
  std::size_t steps = 100;        // PGD iterations per radius
  double step_size = 0.1;         // fraction of the radius per iteration
  std::size_t bisections = 24;
  double max_relative = 4.0;      // largest radius tried, relative to ‖x_b‖ or ‖θ‖
  double margin = 1e-3;           // required logit gap for success
  bool joint = false;             // activation attack: one shared scale over all boundaries
};

struct BoundaryPerturbation {
  std::size_t layer = 0;  // model layer whose input is perturbed
  double relative_l2 = 0.0;  // ‖δ‖ / ‖x + δ‖, what a verifier replay would measure
  double absolute_l2 = 0.0;
  bool success = false;
  std::vector<double> delta;
};

struct PerturbationResult {
  bool success = false;
  std::size_t iterations = 0;
  std::vector<BoundaryPerturbation> boundaries;  // activation attacks
  std::vector<double> delta_theta;               // parameter attacks, flattened over layers
  double relative_l2 = 0.0;  // parameter attacks: ‖Δθ‖ / ‖θ‖
  double min_relative = 0.0;
  double max_relative = 0.0;

  nlohmann::json to_json() const;
};

/// Predicted class of each row of `x` (logits from every layer but the loss head).
template <typename Real>
std::vector<std::size_t> predict(const ModelState<Real>& model, const BasicTensor<Real>& x);

/// Row index of the sample with the largest logit margin for its own label
/// among correctly classified samples.
template <typename Real>
std::size_t most_confident_sample(const ModelState<Real>& model, const Dataset<Real>& data);

/// Minimal L2 perturbations of the activations at `layers` (each a model layer
/// index in (0, L-1]) that change the prediction of the single-row `input`.
/// Untargeted unless `target` is set. Singleton mode attacks each boundary on
/// its own; joint mode perturbs all of them at once.
template <typename Real>
PerturbationResult pgd_activation_attack(const ModelState<Real>& model,
                                         const BasicTensor<Real>& input,
                                         std::optional<std::size_t> target,
                                         const std::vector<std::size_t>& layers,
                                         const AttackConfig& cfg = {});

struct PoisonObjective {
  enum class Kind : std::uint8_t { backdoor, targeted, identity } kind = Kind::backdoor;
  /// backdoor: clean sample(s) and a trigger added to them; targeted: samples and wrong labels.
  std::vector<std::vector<double>> samples;
  std::vector<double> trigger;
  std::size_t target_label = 0;
  std::vector<std::size_t> labels;
};

template <typename Real>
PerturbationResult parameter_poison_attack(const ModelState<Real>& model,
                                           const PoisonObjective& objective,
                                           const AttackConfig& cfg = {});

/// The shipped attack target: a 4-layer-block MLP (L = 8) trained on 2-D rings.
template <typename Real>
struct ToyClassifier {
  ModelSpec spec;
  DatasetSpec data_spec;
  Dataset<Real> data;
  ModelState<Real> model;
  double accuracy = 0.0;
};

template <typename Real>
ToyClassifier<Real> train_toy_classifier(std::size_t steps = 600, std::uint64_t seed = 3);

/// Interior recorded boundaries of a training grid with this B_L, as layer indices.
std::vector<std::size_t> attack_layers(std::size_t num_layers, std::size_t layer_block);

struct TrendRow {
  std::size_t layer_block = 0;
  std::vector<std::size_t> layers;
  double min_relative = 0.0;
  double max_relative = 0.0;
  std::size_t argmax_layer = 0;
  bool success = false;
};

/// Per-B_L min/max of the per-boundary minimal perturbations. Rows are computed
/// from one set of singleton attacks so nested boundary sets compare exactly.
template <typename Real>
std::vector<TrendRow> activation_trend(const ModelState<Real>& model,
                                       const BasicTensor<Real>& input,
                                       std::optional<std::size_t> target,
                                       const std::vector<std::size_t>& layer_blocks,
                                       const AttackConfig& cfg = {});

/// Max non-increasing and min non-decreasing along increasing B_L.
bool trend_holds(const std::vector<TrendRow>& rows);

}  // namespace aftune
