#include "aftune/adversary.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "aftune/rng.hpp"

namespace aftune {

namespace {

const std::map<ScenarioKind, std::string>& kind_names() {
  static const std::map<ScenarioKind, std::string> names{
      {ScenarioKind::under_train, "under-train"},
      {ScenarioKind::model_substitution, "model-substitution"},
      {ScenarioKind::backdoor_poison, "backdoor-poison"},
      {ScenarioKind::serve_wrong_model, "serve-wrong-model"},
      {ScenarioKind::fabricate_output, "fabricate-output"},
      {ScenarioKind::activation_perturbation, "activation-perturbation"},
      {ScenarioKind::parameter_poison, "parameter-poison"},
  };
  return names;
}

bool block_has_params(const BlockGrid& grid, std::size_t i, const std::vector<bool>& has) {
  const auto& lb = grid.layer_block(i);
  for (std::size_t l = lb.first; l <= lb.last; ++l) {
    if (has[l]) return true;
  }
  return false;
}

std::set<std::size_t> tampered_layers(const Scenario& s, const std::vector<bool>& has) {
  std::set<std::size_t> out;
  for (std::size_t l = 0; l < has.size(); ++l) {
    if (has[l] && (!s.layer || *s.layer == l)) out.insert(l);
  }
  return out;
}

/// Row whose replay sees a state swapped at step-block boundary j.
std::size_t row_for_boundary(std::size_t j) { return j == 0 ? 0 : j - 1; }

template <typename Real>
void add_relative_noise(BasicTensor<Real>& t, double relative, CounterRng& rng) {
  std::vector<double> d(t.size());
  double n = 0.0;
  for (auto& v : d) {
    v = rng.normal();
    n += v * v;
  }
  n = std::sqrt(n);
  const double scale = n > 0 ? relative * l2_norm(t) / n : 0.0;
  for (std::size_t k = 0; k < t.size(); ++k) t[k] = static_cast<Real>(t[k] + scale * d[k]);
}

template <typename Real>
class TrainingTamper final : public RecordingHooks<Real> {
 public:
  TrainingTamper(const Scenario& s, const Manifest& m, const BlockGrid& grid)
      : s_(s), m_(m), grid_(grid), steps_(s.steps.begin(), s.steps.end()) {}

  void on_boundary(std::size_t j, ModelState<Real>& state) override {
    if (j != s_.at_boundary) return;
    if (s_.kind == ScenarioKind::model_substitution) {
      ModelSpec other = m_.model;
      other.init_seed = s_.substitute_seed;
      auto fresh = init_model<Real>(other, m_.optimizer);
      fresh.opt.step = state.opt.step;
      state = std::move(fresh);
    } else if (s_.kind == ScenarioKind::parameter_poison) {
      CounterRng rng(s_.seed, RngPurpose::scenario, j);
      for (std::size_t l : tampered_layers(s_, m_.layer_has_params())) {
        auto flat = flatten_params(state.layers[l]);
        add_relative_noise(flat, s_.budget, rng);
        unflatten_params(state.layers[l], flat);
      }
    }
  }

  void on_batch(std::size_t step, Batch<Real>& batch) override {
    if (s_.kind != ScenarioKind::backdoor_poison || !steps_.count(step)) return;
    const std::size_t n = std::min(s_.trigger_samples, batch.labels.size());
    const std::size_t d = batch.inputs.last_dim();
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < d; ++c) {
        batch.inputs[r * d + c] = static_cast<Real>(batch.inputs[r * d + c] + s_.trigger_offset);
      }
      batch.labels[r] = static_cast<Real>(s_.target_label);
    }
  }

  bool skip_step(std::size_t step) override {
    return s_.kind == ScenarioKind::under_train && steps_.count(step);
  }

  std::optional<StepTrace<Real>> custom_step(std::size_t step, ModelState<Real>& state,
                                             const Batch<Real>& batch) override {
    if (s_.kind != ScenarioKind::activation_perturbation || !steps_.count(step)) return std::nullopt;
    const std::size_t l = grid_.boundary_layer(s_.boundary);
    const std::span<const Layer<Real>> all(state.layers);
    auto head = forward_block<Real>(all.subspan(0, l), 0, batch.inputs, nullptr);
    auto x = head.final_output();
    CounterRng rng(s_.seed, RngPurpose::scenario, step, s_.boundary);
    add_relative_noise(x, s_.budget, rng);
    auto tail = forward_block<Real>(all.subspan(l), l, x, &batch.labels);

    StepTrace<Real> trace;
    trace.loss = static_cast<double>(tail.final_output()[0]);
    trace.activations.push_back(batch.inputs);
    for (std::size_t k = 0; k + 1 < head.outputs.size(); ++k) trace.activations.push_back(head.outputs[k]);
    trace.activations.push_back(x);
    for (auto& o : tail.outputs) trace.activations.push_back(o);

    BasicTensor<Real> seed({1}, {Real{1}});
    auto tail_b = backward_block<Real>(all.subspan(l), l, tail, seed);
    auto head_b = backward_block<Real>(all.subspan(0, l), 0, head, tail_b.input_grad());
    trace.gradients = head_b.input_grads;
    for (auto& g : tail_b.input_grads) trace.gradients.push_back(g);
    trace.gradients.push_back(seed);

    auto grads = head_b.param_grads;
    for (auto& g : tail_b.param_grads) grads.push_back(g);
    optimizer_step(state, grads);
    return trace;
  }

 private:
  const Scenario& s_;
  const Manifest& m_;
  const BlockGrid& grid_;
  std::set<std::size_t> steps_;
};

template <typename Real>
class InferenceTamper final : public InferenceHooks<Real> {
 public:
  InferenceTamper(const Scenario& s, const Manifest& m)
      : s_(s), m_(m), steps_(s.steps.begin(), s.steps.end()) {}

  void before_request(std::size_t r, ModelState<Real>& served) override {
    if (s_.kind != ScenarioKind::serve_wrong_model || !steps_.count(r)) return;
    ModelSpec other = m_.model;
    other.init_seed = s_.substitute_seed;
    const auto wrong = init_model<Real>(other, m_.optimizer);
    for (std::size_t l : tampered_layers(s_, m_.layer_has_params())) served.layers[l] = wrong.layers[l];
  }

  void on_outputs(std::size_t r, std::vector<BasicTensor<Real>>& acts) override {
    if (s_.kind != ScenarioKind::fabricate_output || !steps_.count(r)) return;
    // A plausible-looking answer: a confident vote for the target class.
    auto& out = acts.back();
    const std::size_t c = out.last_dim();
    for (std::size_t k = 0; k < out.size(); ++k) {
      out[k] = static_cast<Real>(k % c == s_.target_label % c ? 0.9 : 0.1 / static_cast<double>(c - 1));
    }
  }

 private:
  const Scenario& s_;
  const Manifest& m_;
  std::set<std::size_t> steps_;
};

}  // namespace

std::string to_string(ScenarioKind k) { return kind_names().at(k); }

ScenarioKind scenario_kind_from_string(const std::string& s) {
  for (const auto& [k, name] : kind_names()) {
    if (name == s) return k;
  }
  throw ConfigError("unknown scenario '" + s + "'");
}

const std::vector<ScenarioKind>& all_scenario_kinds() {
  static const std::vector<ScenarioKind> kinds{
      ScenarioKind::under_train,       ScenarioKind::model_substitution,
      ScenarioKind::backdoor_poison,   ScenarioKind::serve_wrong_model,
      ScenarioKind::fabricate_output,  ScenarioKind::activation_perturbation,
      ScenarioKind::parameter_poison};
  return kinds;
}

RunMode scenario_mode(ScenarioKind k) {
  return k == ScenarioKind::serve_wrong_model || k == ScenarioKind::fabricate_output
             ? RunMode::inference
             : RunMode::training;
}

void Scenario::validate(const BlockGrid& grid) const {
  const auto& cfg = grid.config();
  for (auto t : steps) {
    if (t >= cfg.steps) throw ConfigError("scenario step " + std::to_string(t) + " is outside the run");
  }
  const bool needs_steps = kind != ScenarioKind::model_substitution && kind != ScenarioKind::parameter_poison;
  if (needs_steps && steps.empty()) throw ConfigError(to_string(kind) + " needs at least one step");
  if (layer && *layer >= cfg.layers) throw ConfigError("scenario layer is outside the model");
  if (at_boundary > grid.num_step_blocks()) throw ConfigError("scenario boundary is past the last step block");
  if (kind == ScenarioKind::activation_perturbation &&
      (boundary == 0 || boundary >= grid.num_layer_blocks())) {
    throw ConfigError("activation perturbation needs an interior boundary 0 < b < " +
                      std::to_string(grid.num_layer_blocks()));
  }
  if (!(budget >= 0.0)) throw ConfigError("perturbation budget must be non-negative");
}

nlohmann::json Scenario::to_json() const {
  nlohmann::json j{{"kind", to_string(kind)},
                   {"steps", steps},
                   {"at_boundary", at_boundary},
                   {"substitute_seed", substitute_seed},
                   {"boundary", boundary},
                   {"budget", budget},
                   {"trigger_samples", trigger_samples},
                   {"trigger_offset", trigger_offset},
                   {"target_label", target_label},
                   {"seed", seed}};
  j["layer"] = layer ? nlohmann::json(*layer) : nlohmann::json(nullptr);
  return j;
}

Scenario Scenario::from_json(const nlohmann::json& j) {
  Scenario s;
  s.kind = scenario_kind_from_string(j.at("kind").get<std::string>());
  s.steps = j.value("steps", std::vector<std::size_t>{});
  s.at_boundary = j.value("at_boundary", s.at_boundary);
  s.substitute_seed = j.value("substitute_seed", s.substitute_seed);
  if (j.contains("layer") && !j["layer"].is_null()) s.layer = j["layer"].get<std::size_t>();
  s.boundary = j.value("boundary", s.boundary);
  s.budget = j.value("budget", s.budget);
  s.trigger_samples = j.value("trigger_samples", s.trigger_samples);
  s.trigger_offset = j.value("trigger_offset", s.trigger_offset);
  s.target_label = j.value("target_label", s.target_label);
  s.seed = j.value("seed", s.seed);
  return s;
}

Scenario default_scenario(ScenarioKind kind, const BlockGrid& grid, const std::vector<bool>& has) {
  Scenario s;
  s.kind = kind;
  const std::size_t T = grid.config().steps;
  const std::size_t nsb = grid.num_step_blocks();
  const std::size_t nlb = grid.num_layer_blocks();
  const std::size_t mid_row = nsb / 2;
  const auto& row = grid.step_block(std::min(mid_row, nsb - 1));
  // First parameterised layer at or after the middle layer block.
  std::optional<std::size_t> mid_layer;
  for (std::size_t l = grid.layer_block(nlb / 2).first; l < grid.config().layers && !mid_layer; ++l) {
    if (has[l]) mid_layer = l;
  }
  switch (kind) {
    case ScenarioKind::under_train:
      for (std::size_t t = T / 2; t < T; ++t) s.steps.push_back(t);
      break;
    case ScenarioKind::model_substitution:
      s.at_boundary = std::max<std::size_t>(mid_row, 1);
      break;
    case ScenarioKind::backdoor_poison:
      for (std::size_t t = row.first; t <= row.last; ++t) s.steps.push_back(t);
      break;
    case ScenarioKind::serve_wrong_model:
      for (std::size_t t = 0; t < T; ++t) s.steps.push_back(t);
      s.layer = mid_layer;
      break;
    case ScenarioKind::fabricate_output:
      for (std::size_t t = 0; t < T; t += 2) s.steps.push_back(t);
      break;
    case ScenarioKind::activation_perturbation:
      s.boundary = std::max<std::size_t>(nlb / 2, 1);
      s.steps = {row.first};
      break;
    case ScenarioKind::parameter_poison:
      s.at_boundary = std::max<std::size_t>(mid_row, 1);
      s.layer = mid_layer;
      break;
  }
  return s;
}

std::set<BlockId> expected_compromised(const BlockGrid& grid, const Scenario& s,
                                       const std::vector<bool>& has) {
  std::set<BlockId> out;
  const std::size_t nlb = grid.num_layer_blocks();
  const auto id = [](std::size_t i, std::size_t j) {
    return BlockId{static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j)};
  };
  std::set<std::size_t> rows;
  for (auto t : s.steps) rows.insert(grid.locate(0, t).j);
  const auto layers = tampered_layers(s, has);
  const auto block_of = [&](std::size_t l) { return grid.locate(l, 0).i; };

  switch (s.kind) {
    case ScenarioKind::under_train: {
      // A skipped step leaves the block's parameters stale; a reused trace also
      // breaks the input anchor and the loss. Step 0 has no trace to reuse.
      std::set<std::size_t> stale;
      for (auto t : s.steps) {
        if (t > 0) stale.insert(grid.locate(0, t).j);
      }
      for (auto j : rows) {
        for (std::size_t i = 0; i < nlb; ++i) {
          const bool edge = stale.count(j) && (i == 0 || i + 1 == nlb);
          if (edge || block_has_params(grid, i, has)) out.insert(id(i, j));
        }
      }
      break;
    }
    case ScenarioKind::model_substitution:
      for (std::size_t i = 0; i < nlb; ++i) {
        if (block_has_params(grid, i, has)) out.insert(id(i, row_for_boundary(s.at_boundary)));
      }
      break;
    case ScenarioKind::parameter_poison:
      for (auto l : layers) out.insert(id(block_of(l), row_for_boundary(s.at_boundary)));
      break;
    case ScenarioKind::backdoor_poison:
      for (auto j : rows) {
        out.insert(id(0, j));
        out.insert(id(nlb - 1, j));
      }
      break;
    case ScenarioKind::activation_perturbation:
      for (auto j : rows) out.insert(id(s.boundary - 1, j));
      break;
    case ScenarioKind::serve_wrong_model:
    case ScenarioKind::fabricate_output:
      for (std::size_t i = 0; i < nlb; ++i) {
        const auto seg = grid.inference_segment(i);
        bool hit = false;
        if (s.kind == ScenarioKind::fabricate_output) {
          hit = seg.last == nlb;
        } else {
          for (auto l : layers) {
            hit = hit || (l >= grid.boundary_layer(seg.first) && l < grid.boundary_layer(seg.last));
          }
        }
        if (!hit) continue;
        for (auto j : rows) out.insert(id(i, j));
      }
      break;
  }
  return out;
}

template <typename Real>
TamperedRun apply_training_scenario(const Manifest& manifest, const Scenario& s,
                                    const RecordOptions& opts) {
  if (scenario_mode(s.kind) != RunMode::training) {
    throw ConfigError(to_string(s.kind) + " is an inference scenario");
  }
  // Anchors come from the client's honest view, computed before any tampering.
  const Manifest m = prepare_training_manifest<Real>(manifest, opts.auto_isolate);
  const auto grid = BlockGrid::partition(m.grid);
  s.validate(grid);
  TrainingTamper<Real> hooks(s, m, grid);
  auto rec = record_training<Real>(m, opts, &hooks);
  auto expected = expected_compromised(rec.ledger.grid(), s, m.layer_has_params());
  return {s, std::move(rec.ledger), std::move(rec.store), std::move(expected)};
}

template <typename Real>
TamperedRun apply_inference_scenario(const Manifest& manifest, const ModelState<Real>& model,
                                     const Scenario& s, const RecordOptions& opts) {
  if (scenario_mode(s.kind) != RunMode::inference) {
    throw ConfigError(to_string(s.kind) + " is a training scenario");
  }
  s.validate(BlockGrid::partition(manifest.grid));
  InferenceTamper<Real> hooks(s, manifest);
  auto rec = record_inference<Real>(manifest, model, opts, &hooks);
  auto expected = expected_compromised(rec.ledger.grid(), s, rec.ledger.manifest().layer_has_params());
  return {s, std::move(rec.ledger), std::move(rec.store), std::move(expected)};
}

TamperedRun apply_scenario(const Manifest& manifest, const Scenario& s, const RecordOptions& opts) {
  const bool f64 = manifest.grid.precision == Precision::f64;
  if (scenario_mode(s.kind) == RunMode::training) {
    return f64 ? apply_training_scenario<double>(manifest, s, opts)
               : apply_training_scenario<float>(manifest, s, opts);
  }
  if (f64) {
    return apply_inference_scenario<double>(manifest, init_model<double>(manifest.model, manifest.optimizer), s, opts);
  }
  return apply_inference_scenario<float>(manifest, init_model<float>(manifest.model, manifest.optimizer), s, opts);
}

AuditPlan documented_plan(const BlockGrid& grid, const Scenario& s, std::size_t m, std::uint64_t seed) {
  Strategy st = Strategy::uniform;
  switch (s.kind) {
    case ScenarioKind::under_train:
    case ScenarioKind::backdoor_poison: st = Strategy::input_row; break;
    case ScenarioKind::model_substitution:
    case ScenarioKind::parameter_poison: st = Strategy::per_step; break;
    case ScenarioKind::fabricate_output: st = Strategy::list; break;
    case ScenarioKind::serve_wrong_model:
    case ScenarioKind::activation_perturbation: st = Strategy::uniform; break;
  }
  auto plan = AuditPlan::for_grid(grid, st, m, seed);
  if (st == Strategy::list) {
    const auto last = static_cast<std::uint32_t>(grid.num_layer_blocks() - 1);
    for (std::size_t j = 0; j < grid.num_step_blocks(); ++j) {
      plan.explicit_ids.push_back({last, static_cast<std::uint32_t>(j)});
    }
    plan.m = plan.explicit_ids.size();
  }
  plan.m = std::min(plan.m, plan.pool_size());
  return plan;
}

// ---- tolerance-exploitation attacks ----

namespace {

/// Per-row goal: push `label` above (targeted) or below (untargeted) every other class.
struct Goal {
  std::size_t label = 0;
  bool targeted = true;
};

template <typename Real>
struct MarginEval {
  bool satisfied = true;
  BasicTensor<Real> dz;
};

template <typename Real>
MarginEval<Real> margin_eval(const BasicTensor<Real>& z, const std::vector<Goal>& goals, double margin) {
  const std::size_t c = z.last_dim();
  MarginEval<Real> ev;
  ev.dz = BasicTensor<Real>(z.shape);
  for (std::size_t r = 0; r < goals.size(); ++r) {
    const Real* row = z.data.data() + r * c;
    const std::size_t y = goals[r].label;
    std::size_t other = y == 0 ? 1 : 0;
    for (std::size_t k = 0; k < c; ++k) {
      if (k != y && row[k] > row[other]) other = k;
    }
    const double gap = static_cast<double>(row[y]) - static_cast<double>(row[other]);
    // Loss to minimise: targeted wants gap > margin, untargeted wants gap < -margin.
    const double loss = goals[r].targeted ? margin - gap : gap + margin;
    if (loss <= 0.0) continue;
    ev.satisfied = false;
    const Real s = goals[r].targeted ? Real{-1} : Real{1};
    ev.dz[r * c + y] += s;
    ev.dz[r * c + other] -= s;
  }
  return ev;
}

template <typename Real>
std::span<const Layer<Real>> logit_layers(const ModelState<Real>& model) {
  if (model.layers.empty() || model.layers.back().spec.kind != LayerKind::softmax_xent) {
    throw ConfigError("attacks need a classifier ending in a softmax-cross-entropy head");
  }
  return std::span<const Layer<Real>>(model.layers).subspan(0, model.layers.size() - 1);
}

template <typename Real>
BasicTensor<Real> run_forward(std::span<const Layer<Real>> layers, std::size_t first,
                              const BasicTensor<Real>& x, ForwardTrace<Real>* keep = nullptr) {
  if (layers.empty()) return x;
  auto fwd = forward_block<Real>(layers, first, x, nullptr);
  auto out = fwd.final_output();
  if (keep) *keep = std::move(fwd);
  return out;
}

double norm2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

template <typename Real>
BasicTensor<Real> plus(const BasicTensor<Real>& x, const std::vector<double>& d) {
  auto y = x;
  for (std::size_t k = 0; k < y.size(); ++k) y[k] = static_cast<Real>(static_cast<double>(y[k]) + d[k]);
  return y;
}

/// One normalised gradient step followed by projection onto the ball of radius r.
void pgd_update(std::vector<double>& d, const std::vector<double>& g, double alpha, double r) {
  const double gn = norm2(g);
  if (gn > 0.0) {
    for (std::size_t k = 0; k < d.size(); ++k) d[k] -= alpha * g[k] / gn;
  }
  const double dn = norm2(d);
  if (dn > r) {
    for (auto& v : d) v *= r / dn;
  }
}

/// Step length as a fraction of the radius, decayed linearly to a tenth.
double decay(const AttackConfig& cfg, std::size_t it) {
  const double frac = cfg.steps ? static_cast<double>(it) / static_cast<double>(cfg.steps) : 0.0;
  return cfg.step_size * (1.0 - 0.9 * frac);
}

template <typename Real>
std::vector<double> to_doubles(const BasicTensor<Real>& t) {
  return {t.data.begin(), t.data.end()};
}

/// Perturbations at sorted layer indices, one shared relative radius.
template <typename Real>
struct ActivationProblem {
  std::span<const Layer<Real>> layers;  // logit layers
  BasicTensor<Real> input;
  std::vector<std::size_t> at;
  std::vector<BasicTensor<Real>> clean;  // clean activation at each injection point
  std::vector<Goal> goals;
  double margin = 0.0;

  /// Runs PGD at relative radius eps; returns success and leaves deltas in `d`.
  bool solve(double eps, const AttackConfig& cfg, std::vector<std::vector<double>>& d,
             std::size_t& iterations) const {
    d.assign(at.size(), {});
    std::vector<double> radius(at.size());
    for (std::size_t b = 0; b < at.size(); ++b) {
      d[b].assign(clean[b].size(), 0.0);
      radius[b] = eps * l2_norm(clean[b]);
    }
    for (std::size_t it = 0;; ++it) {
      // Segments [at[b], at[b+1]) run on perturbed inputs; the prefix is fixed.
      std::vector<ForwardTrace<Real>> traces(at.size());
      BasicTensor<Real> x;
      for (std::size_t b = 0; b < at.size(); ++b) {
        const std::size_t end = b + 1 < at.size() ? at[b + 1] : layers.size();
        x = run_forward(layers.subspan(at[b], end - at[b]), at[b], plus(clean_or(b, x), d[b]), &traces[b]);
      }
      const auto ev = margin_eval(x, goals, margin);
      if (ev.satisfied) return true;
      if (it == cfg.steps || eps == 0.0) return false;
      ++iterations;
      auto up = ev.dz;
      for (std::size_t b = at.size(); b-- > 0;) {
        const std::size_t end = b + 1 < at.size() ? at[b + 1] : layers.size();
        if (end > at[b]) up = backward_block<Real>(layers.subspan(at[b], end - at[b]), at[b], traces[b], up).input_grad();
        pgd_update(d[b], to_doubles(up), decay(cfg, it) * radius[b], radius[b]);
      }
    }
  }

  /// Injection b sees the clean activation for b = 0 and the running output after that.
  BasicTensor<Real> clean_or(std::size_t b, const BasicTensor<Real>& running) const {
    return b == 0 ? clean[0] : running;
  }
};

template <typename Real>
BoundaryPerturbation describe(std::size_t layer, const BasicTensor<Real>& x, std::vector<double> d, bool ok) {
  BoundaryPerturbation p;
  p.layer = layer;
  p.absolute_l2 = norm2(d);
  p.relative_l2 = relative_l2_error(x, plus(x, d));
  p.success = ok;
  p.delta = std::move(d);
  return p;
}

/// Smallest relative radius in [0, cfg.max_relative] at which `solve` succeeds.
/// Radii grow geometrically first: PGD converges far better on small balls, so
/// a success found on the way up gives a tight upper end for the bisection.
template <typename Solve>
bool bisect(const AttackConfig& cfg, Solve&& solve) {
  if (cfg.max_relative <= 0.0) return solve(0.0);
  double lo = 0.0, hi = cfg.max_relative * 0x1.0p-24;
  while (!solve(hi)) {
    if (hi >= cfg.max_relative) return false;
    lo = hi;
    hi = std::min(2.0 * hi, cfg.max_relative);
  }
  for (std::size_t k = 0; k < cfg.bisections; ++k) {
    const double mid = 0.5 * (lo + hi);
    if (solve(mid)) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  solve(hi);  // leave the smallest successful solution in place
  return true;
}

void summarise(PerturbationResult& r) {
  if (r.boundaries.empty()) {
    r.min_relative = r.max_relative = r.relative_l2;
    return;
  }
  r.min_relative = INFINITY;
  r.max_relative = 0.0;
  for (const auto& b : r.boundaries) {
    r.min_relative = std::min(r.min_relative, b.relative_l2);
    r.max_relative = std::max(r.max_relative, b.relative_l2);
  }
}

}  // namespace

nlohmann::json PerturbationResult::to_json() const {
  nlohmann::json j{{"success", success},
                   {"iterations", iterations},
                   {"min_relative_l2", min_relative},
                   {"max_relative_l2", max_relative}};
  if (!boundaries.empty()) {
    auto arr = nlohmann::json::array();
    for (const auto& b : boundaries) {
      arr.push_back({{"layer", b.layer},
                     {"relative_l2", b.relative_l2},
                     {"absolute_l2", b.absolute_l2},
                     {"success", b.success}});
    }
    j["boundaries"] = arr;
  } else {
    j["relative_l2"] = relative_l2;
    j["delta_theta_l2"] = norm2(delta_theta);
  }
  return j;
}

template <typename Real>
std::vector<std::size_t> predict(const ModelState<Real>& model, const BasicTensor<Real>& x) {
  const auto z = run_forward(logit_layers(model), 0, x);
  const std::size_t c = z.last_dim();
  std::vector<std::size_t> out(z.rows());
  for (std::size_t r = 0; r < out.size(); ++r) {
    const auto* row = z.data.data() + r * c;
    out[r] = static_cast<std::size_t>(std::max_element(row, row + c) - row);
  }
  return out;
}

template <typename Real>
std::size_t most_confident_sample(const ModelState<Real>& model, const Dataset<Real>& data) {
  const auto z = run_forward(logit_layers(model), 0, data.inputs);
  const std::size_t c = z.last_dim();
  std::size_t best = 0;
  double best_gap = -INFINITY;
  for (std::size_t r = 0; r < z.rows(); ++r) {
    const auto y = static_cast<std::size_t>(data.labels[r]);
    double other = -INFINITY;
    for (std::size_t k = 0; k < c; ++k) {
      if (k != y) other = std::max(other, static_cast<double>(z[r * c + k]));
    }
    const double gap = static_cast<double>(z[r * c + y]) - other;
    if (gap > best_gap) {
      best_gap = gap;
      best = r;
    }
  }
  return best;
}

template <typename Real>
PerturbationResult pgd_activation_attack(const ModelState<Real>& model, const BasicTensor<Real>& input,
                                         std::optional<std::size_t> target,
                                         const std::vector<std::size_t>& layers,
                                         const AttackConfig& cfg) {
  const auto logits = logit_layers(model);
  if (input.rows() != 1) throw ConfigError("activation attacks take a single sample");
  std::vector<std::size_t> at(layers);
  std::sort(at.begin(), at.end());
  at.erase(std::unique(at.begin(), at.end()), at.end());
  if (at.empty()) throw ConfigError("no boundaries to attack");
  for (auto l : at) {
    if (l == 0 || l > logits.size()) {
      throw ConfigError("attack boundary " + std::to_string(l) + " is not an interior activation");
    }
  }
  const std::size_t label = predict(model, input)[0];
  std::vector<Goal> goals{target ? Goal{*target, true} : Goal{label, false}};

  // Clean activation entering each layer.
  std::vector<BasicTensor<Real>> acts{input};
  {
    auto fwd = forward_block<Real>(logits, 0, input, nullptr);
    for (auto& o : fwd.outputs) acts.push_back(std::move(o));
  }

  PerturbationResult res;
  auto attack = [&](const std::vector<std::size_t>& where) {
    ActivationProblem<Real> p{logits, input, where, {}, goals, cfg.margin};
    for (auto l : where) p.clean.push_back(acts[l]);
    std::vector<std::vector<double>> d;
    const bool ok = bisect(cfg, [&](double eps) { return p.solve(eps, cfg, d, res.iterations); });
    for (std::size_t b = 0; b < where.size(); ++b) {
      res.boundaries.push_back(describe(where[b], acts[where[b]], d[b], ok));
    }
    return ok;
  };

  if (cfg.joint) {
    res.success = attack(at);
  } else {
    res.success = true;
    for (auto l : at) res.success = attack({l}) && res.success;
  }
  summarise(res);
  return res;
}

template <typename Real>
PerturbationResult parameter_poison_attack(const ModelState<Real>& model, const PoisonObjective& obj,
                                           const AttackConfig& cfg) {
  const auto logits = logit_layers(model);
  if (obj.samples.empty()) throw ConfigError("poisoning needs at least one sample");
  const std::size_t d = obj.samples.front().size();
  std::vector<double> rows;
  std::vector<Goal> goals;
  const auto push = [&](const std::vector<double>& x) {
    if (x.size() != d) throw ConfigError("poison samples disagree on input width");
    rows.insert(rows.end(), x.begin(), x.end());
  };
  for (const auto& x : obj.samples) push(x);
  BasicTensor<Real> clean({obj.samples.size(), d});
  for (std::size_t k = 0; k < rows.size(); ++k) clean[k] = static_cast<Real>(rows[k]);
  const auto current = predict(model, clean);

  switch (obj.kind) {
    case PoisonObjective::Kind::identity:
      for (auto y : current) goals.push_back({y, true});
      break;
    case PoisonObjective::Kind::targeted:
      if (obj.labels.size() != obj.samples.size()) throw ConfigError("one wrong label per sample");
      for (auto y : obj.labels) goals.push_back({y, true});
      break;
    case PoisonObjective::Kind::backdoor:
      if (obj.trigger.size() != d) throw ConfigError("trigger width must match the input");
      for (auto y : current) goals.push_back({y, true});  // clean behaviour preserved
      for (const auto& x : obj.samples) {
        std::vector<double> t(x);
        for (std::size_t k = 0; k < d; ++k) t[k] += obj.trigger[k];
        push(t);
        goals.push_back({obj.target_label, true});
      }
      break;
  }
  BasicTensor<Real> X({goals.size(), d});
  for (std::size_t k = 0; k < rows.size(); ++k) X[k] = static_cast<Real>(rows[k]);

  std::vector<double> theta;
  for (const auto& layer : logits) {
    for (const auto& p : layer.params) theta.insert(theta.end(), p.value.data.begin(), p.value.data.end());
  }
  const double theta_norm = norm2(theta);

  ModelState<Real> work = model;
  const auto load = [&](const std::vector<double>& delta) {
    std::size_t k = 0;
    for (std::size_t l = 0; l < logits.size(); ++l) {
      for (std::size_t q = 0; q < work.layers[l].params.size(); ++q) {
        auto& dst = work.layers[l].params[q].value;
        const auto& src = model.layers[l].params[q].value;
        for (std::size_t e = 0; e < dst.size(); ++e, ++k) dst[e] = static_cast<Real>(src[e] + delta[k]);
      }
    }
  };

  PerturbationResult res;
  std::vector<double> delta(theta.size(), 0.0);
  const auto solve = [&](double eps) {
    const double r = eps * theta_norm;
    std::fill(delta.begin(), delta.end(), 0.0);
    for (std::size_t it = 0;; ++it) {
      load(delta);
      const auto wl = logit_layers(work);
      auto fwd = forward_block<Real>(wl, 0, X, nullptr);
      const auto ev = margin_eval(fwd.final_output(), goals, cfg.margin);
      if (ev.satisfied) return true;
      if (it == cfg.steps || r == 0.0) return false;
      ++res.iterations;
      const auto bwd = backward_block<Real>(wl, 0, fwd, ev.dz);
      std::vector<double> g;
      g.reserve(theta.size());
      for (const auto& layer_grads : bwd.param_grads) {
        for (const auto& t : layer_grads) g.insert(g.end(), t.data.begin(), t.data.end());
      }
      pgd_update(delta, g, decay(cfg, it) * r, r);
    }
  };

  if (solve(0.0)) {
    res.success = true;  // the objective already holds: Δθ = 0
  } else {
    res.success = bisect(cfg, solve);
  }
  res.delta_theta = delta;
  res.relative_l2 = theta_norm > 0 ? norm2(delta) / theta_norm : 0.0;
  summarise(res);
  return res;
}

template <typename Real>
ToyClassifier<Real> train_toy_classifier(std::size_t steps, std::uint64_t seed) {
  ToyClassifier<Real> toy;
  toy.spec = ModelSpec::mlp(2, 16, 3, 3, seed);
  toy.data_spec.kind = DatasetKind::rings;
  toy.data_spec.samples = 384;
  toy.data_spec.classes = 3;
  toy.data_spec.noise = 0.08;
  toy.data_spec.seed = seed + 100;
  toy.data = make_dataset<Real>(toy.data_spec);
  OptimizerConfig opt;
  opt.kind = OptimizerKind::adamw;
  opt.lr = 0.01;
  toy.model = init_model<Real>(toy.spec, opt);
  for (std::size_t t = 0; t < steps; ++t) {
    train_step(toy.model, batch_for_step(toy.data, seed, t, 32));
  }
  const auto pred = predict(toy.model, toy.data.inputs);
  std::size_t ok = 0;
  for (std::size_t r = 0; r < pred.size(); ++r) ok += pred[r] == static_cast<std::size_t>(toy.data.labels[r]);
  toy.accuracy = static_cast<double>(ok) / static_cast<double>(pred.size());
  return toy;
}

std::vector<std::size_t> attack_layers(std::size_t num_layers, std::size_t layer_block) {
  if (layer_block == 0) throw ConfigError("B_L must be positive");
  std::vector<std::size_t> out;
  for (std::size_t l = layer_block; l < num_layers; l += layer_block) out.push_back(l);
  return out;
}

template <typename Real>
std::vector<TrendRow> activation_trend(const ModelState<Real>& model, const BasicTensor<Real>& input,
                                       std::optional<std::size_t> target,
                                       const std::vector<std::size_t>& layer_blocks,
                                       const AttackConfig& cfg) {
  std::set<std::size_t> all;
  for (auto bl : layer_blocks) {
    for (auto l : attack_layers(model.num_layers(), bl)) all.insert(l);
  }
  AttackConfig single = cfg;
  single.joint = false;
  const auto res = pgd_activation_attack(model, input, target, {all.begin(), all.end()}, single);
  std::map<std::size_t, const BoundaryPerturbation*> by_layer;
  for (const auto& b : res.boundaries) by_layer[b.layer] = &b;

  std::vector<TrendRow> rows;
  for (auto bl : layer_blocks) {
    TrendRow row;
    row.layer_block = bl;
    row.layers = attack_layers(model.num_layers(), bl);
    row.min_relative = INFINITY;
    row.success = !row.layers.empty();
    for (auto l : row.layers) {
      const auto* b = by_layer.at(l);
      row.success = row.success && b->success;
      row.min_relative = std::min(row.min_relative, b->relative_l2);
      if (b->relative_l2 > row.max_relative) {
        row.max_relative = b->relative_l2;
        row.argmax_layer = l;
      }
    }
    rows.push_back(row);
  }
  return rows;
}

bool trend_holds(const std::vector<TrendRow>& rows) {
  std::vector<TrendRow> sorted(rows);
  std::sort(sorted.begin(), sorted.end(),
            [](const TrendRow& a, const TrendRow& b) { return a.layer_block < b.layer_block; });
  for (std::size_t k = 1; k < sorted.size(); ++k) {
    if (sorted[k].max_relative > sorted[k - 1].max_relative) return false;
    if (sorted[k].min_relative < sorted[k - 1].min_relative) return false;
  }
  return true;
}

#define AFTUNE_INSTANTIATE(Real)                                                                  \
  template TamperedRun apply_training_scenario<Real>(const Manifest&, const Scenario&,            \
                                                     const RecordOptions&);                       \
  template TamperedRun apply_inference_scenario<Real>(const Manifest&, const ModelState<Real>&,   \
                                                      const Scenario&, const RecordOptions&);     \
  template std::vector<std::size_t> predict<Real>(const ModelState<Real>&, const BasicTensor<Real>&); \
  template std::size_t most_confident_sample<Real>(const ModelState<Real>&, const Dataset<Real>&);  \
  template PerturbationResult pgd_activation_attack<Real>(                                        \
      const ModelState<Real>&, const BasicTensor<Real>&, std::optional<std::size_t>,              \
      const std::vector<std::size_t>&, const AttackConfig&);                                      \
  template PerturbationResult parameter_poison_attack<Real>(                                      \
      const ModelState<Real>&, const PoisonObjective&, const AttackConfig&);                      \
  template ToyClassifier<Real> train_toy_classifier<Real>(std::size_t, std::uint64_t);            \
  template std::vector<TrendRow> activation_trend<Real>(                                          \
      const ModelState<Real>&, const BasicTensor<Real>&, std::optional<std::size_t>,              \
      const std::vector<std::size_t>&, const AttackConfig&);

AFTUNE_INSTANTIATE(float)
AFTUNE_INSTANTIATE(double)

#undef AFTUNE_INSTANTIATE

}  // namespace aftune
