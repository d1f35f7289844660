// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>

#include "aftune/adversary.hpp"
#include "aftune/rng.hpp"
#include "gradcheck.hpp"
#include "support.hpp"

using namespace aftune;
using namespace aftune::testing;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& why) {
    if (!ok && pass) detail << "[" << why << "] ";
    pass = pass && ok;
  }
};

int failures = 0;

void criterion(const char* name, double limit_s, const std::function<void(Outcome&)>& body) {
  Outcome out;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(out);
  } catch (const std::exception& e) {
    out.require(false, std::string("exception: ") + e.what());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (limit_s > 0) out.require(secs < limit_s, "runtime over " + std::to_string(limit_s) + " s");
  failures += !out.pass;
  std::printf("%s %s  %s(%.2f s)\n", name, out.pass ? "PASS" : "FAIL", out.detail.str().c_str(), secs);
  std::fflush(stdout);
}

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

// Random toy training configs inside the L <= 12, T <= 24 envelope.
std::vector<Manifest> random_configs(std::size_t n, std::uint64_t seed) {
  CounterRng rng(seed, RngPurpose::test);
  std::vector<Manifest> out;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t depth = 1 + rng.below(5);  // L = 2*depth + 2 in [4, 12]
    const std::size_t L = 2 * depth + 2;
    const std::size_t T = 1 + rng.below(24);
    const std::size_t bl = 1 + rng.below(L);
    const std::size_t bs = 1 + rng.below(T);
    const std::uint32_t ics[] = {1, 2, 3, 0};
    const auto ic = ics[rng.below(4)];
    const auto opt = rng.below(2) ? OptimizerKind::adamw : OptimizerKind::sgd_momentum;
    auto m = toy_manifest(depth, T, bl, bs, ic ? std::optional<std::uint32_t>(ic) : std::nullopt, opt);
    m.data_seed = rng.next_u64();
    m.model.init_seed = rng.next_u64();
    out.push_back(m);
  }
  return out;
}

template <typename Real>
Digest state_digest(const ModelState<Real>& s, const Manifest& m) {
  std::vector<BasicTensor<Real>> parts;
  for (std::size_t l = 0; l < s.num_layers(); ++l) {
    parts.push_back(flatten_params(s.layers[l]));
    parts.push_back(s.opt.layers[l].flatten());
  }
  return chunked_hash(flatten_concat<Real>(parts), m.grid.chunk_size, m.algo);
}

// L = 8 with B_L = 2: four layer blocks; inference uses one request per step block.
Manifest scenario_manifest(RunMode mode) {
  auto m = toy_manifest(3, 16, 2, 4, 1);
  if (mode == RunMode::inference) {
    m.grid.steps = 8;
    m.grid.step_block = 1;
  }
  return m;
}

}  // namespace

int main() {
  const double tau = default_tolerance(Precision::f32);

  criterion("AC1 detection probability", 60, [](Outcome& o) {
    const double exact = 1.0 - static_cast<double>(p_evade_exact(1000, 100, 10));
    o.detail << "P_detect(1000,100,10)=" << exact << " ";
    o.require(std::fabs(exact - 0.653) < 5e-4, "closed form");

    // 3x3 grid, one perturbed activation boundary: exactly one bad block.
    auto m = toy_manifest(2, 6, 2, 2, 1);
    const auto grid = BlockGrid::partition(m.grid);
    Scenario s;
    s.kind = ScenarioKind::activation_perturbation;
    s.steps = {3};
    s.boundary = 2;
    auto run = apply_scenario(m, s, {});
    o.require(grid.num_blocks() == 9 && run.compromised.size() == 1, "grid shape");
    VerificationOracle oracle(run.ledger, run.store);
    o.require(oracle.failing_blocks() == run.compromised, "oracle disagrees with the attack structure");
    auto rep = run_campaign(AuditPlan::for_grid(run.ledger.grid(), Strategy::uniform, 3, 2024),
                            [&](BlockId id) { return oracle(id); }, run.compromised, 10'000);
    o.detail << "campaign " << rep.empirical << " vs 1/3 ";
    o.require(std::fabs(rep.predicted - 1.0 / 3.0) < 1e-12, "prediction");
    o.require(std::fabs(rep.empirical - 1.0 / 3.0) <= 0.03, "campaign off by more than 3 points");
  });

  criterion("AC2 honest-run completeness", 300, [](Outcome& o) {
    std::size_t blocks = 0, passed = 0;
    const auto configs = random_configs(24, 11);
    for (const auto& m : configs) {
      auto rec = record_training<float>(m, {});
      for (const auto& id : rec.ledger.grid().blocks()) {
        ++blocks;
        passed += verify_block(prepare_request(rec.ledger, rec.store, id)).passed();
      }
    }
    o.detail << configs.size() << " configs, " << passed << "/" << blocks << " blocks pass ";
    o.require(passed == blocks, "honest block failed");
  });

  criterion("AC3 tamper soundness", 0, [tau](Outcome& o) {
    CounterRng rng(31, RngPurpose::test);
    auto rec = record_training<float>(toy_manifest(2, 8, 2, 2, 1), {});
    const auto& grid = rec.ledger.grid();
    const auto has = rec.ledger.manifest().layer_has_params();
    const auto keys = rec.store.keys();
    std::size_t flips = 0, caught = 0;
    for (int n = 0; n < 200; ++n) {
      const auto key = keys[rng.below(keys.size())];
      BlockId target{};
      for (const auto& id : grid.blocks()) {
        const auto ks = block_keys(grid, id, RunMode::training, has);
        if (std::find(ks.begin(), ks.end(), key) != ks.end()) {
          target = id;
          break;
        }
      }
      const auto original = rec.store.raw(key);
      auto raw = original;
      const auto bit = rng.below(raw.size() * 8);
      raw[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
      rec.store.overwrite_raw(key, raw);
      const auto rep = verify_block(prepare_request(rec.ledger, rec.store, target));
      ++flips;
      caught += rep.cause() && rep.cause()->kind == FailureKind::hash_mismatch;
      rec.store.overwrite_raw(key, original);
    }
    o.detail << "bit flips " << caught << "/" << flips << " hash-mismatch; ";
    o.require(caught == flips, "bit flip missed");

    // self-consistent perturbations, relative L2 log-uniform in [10 tau, 100 tau]
    const auto m = toy_manifest(2, 8, 2, 2, 1);
    const auto g = BlockGrid::partition(m.grid);
    std::size_t runs = 0, numerical = 0;
    for (int n = 0; n < 30; ++n) {
      Scenario s;
      s.budget = tau * std::pow(10.0, 1.0 + rng.uniform());
      s.seed = rng.next_u64();
      if (n % 3 == 2) {
        s.kind = ScenarioKind::parameter_poison;
        s.at_boundary = 1 + rng.below(g.num_step_blocks() - 1);
        s.layer = 2 * rng.below(3);  // linear layers 0, 2, 4
      } else {
        s.kind = ScenarioKind::activation_perturbation;
        s.steps = {rng.below(m.grid.steps)};
        s.boundary = 1 + rng.below(g.num_layer_blocks() - 1);
      }
      auto run = apply_scenario(m, s, {});
      VerificationOracle oracle(run.ledger, run.store);
      for (const auto& id : run.compromised) {
        ++runs;
        const auto& rep = oracle.report(id);
        numerical += rep.cause() && rep.cause()->kind == FailureKind::numerical_mismatch;
      }
      o.require(oracle.failing_blocks() == run.compromised, "failing set differs from the tampered set");
    }
    o.detail << "perturbations " << numerical << "/" << runs << " numerical-mismatch ";
    o.require(runs > 0 && numerical == runs, "perturbation missed");
  });

  criterion("AC4 boundary dedup", 0, [](Outcome& o) {
    std::size_t steps_checked = 0;
    auto configs = random_configs(24, 11);
    for (std::size_t bl : {1, 3, 5, 12}) configs.push_back(toy_manifest(5, 6, bl, 2, 1));
    for (const auto& m : configs) {
      const auto grid = BlockGrid::partition(m.grid);
      const auto want = ceil_div(m.grid.layers, m.grid.layer_block) + 1;
      for (const auto& s : boundary_schedule(grid, RunMode::training, m.layer_has_params())) {
        if (s.step == m.grid.steps) continue;  // the exit state has no forward pass
        std::set<BoundaryKey> acts;
        for (const auto& k : s.keys) {
          if (k.key.kind == BoundaryKind::activation) acts.insert(k.key);
        }
        o.require(acts.size() == want, "schedule count");
        ++steps_checked;
      }
      // committed digests agree: one activation digest per boundary per step
      auto rec = record_training<float>(m, {});
      std::map<std::uint32_t, std::size_t> per_step;
      for (const auto& [key, d] : rec.digests) per_step[key.step] += key.kind == BoundaryKind::activation;
      for (std::uint32_t t = 0; t < m.grid.steps; ++t) o.require(per_step[t] == want, "recorded count");
    }
    o.detail << steps_checked << " steps over " << configs.size() << " configs ";
  });

  criterion("AC5 sparse reconstruction", 0, [](Outcome& o) {
    std::size_t compared = 0;
    for (auto opt : {OptimizerKind::sgd_momentum, OptimizerKind::adamw}) {
      const auto dense_m = toy_manifest(2, 32, 2, 2, 1, opt);
      auto dense = record_training<float>(dense_m, {});
      for (std::uint32_t ic : {2u, 4u, 8u}) {
        auto sparse = record_training<float>(toy_manifest(2, 32, 2, 2, ic, opt), {});
        for (std::size_t j = 0; j <= sparse.ledger.grid().num_step_blocks(); ++j) {
          const auto a = reconstruct_state<float>(sparse.ledger, sparse.store, j);
          const auto b = reconstruct_state<float>(dense.ledger, dense.store, j);
          o.require(state_digest(a, dense_m) == state_digest(b, dense_m), "digest differs");
          ++compared;
        }
      }
    }
    o.detail << compared << " boundaries digest-equal ";
  });

  criterion("AC6 storage formula", 0, [](Outcome& o) {
    std::vector<Manifest> configs{
        toy_manifest(3, 16, 4, 4, 2),  toy_manifest(2, 9, 2, 3, 1, OptimizerKind::adamw),
        toy_manifest(1, 5, 1, 5, 1),   toy_manifest(4, 20, 3, 2, 3),
        toy_manifest(2, 12, 6, 4, 4),  toy_manifest(5, 7, 12, 1, 2, OptimizerKind::adamw),
        toy_manifest(2, 24, 1, 8, 1),  toy_manifest(3, 10, 2, 3, 1, OptimizerKind::sgd_momentum, Precision::f64),
        toy_manifest(2, 8, 2, 2, std::nullopt), toy_manifest(3, 11, 4, 3, std::nullopt, OptimizerKind::adamw)};
    auto zero = toy_manifest(2, 6, 2, 2, std::nullopt);
    zero.grid.zero_storage = true;
    configs.push_back(zero);
    std::size_t equal = 0;
    for (const auto& m : configs) {
      auto store = m.grid.precision == Precision::f64 ? std::move(record_training<double>(m, {}).store)
                                                      : std::move(record_training<float>(m, {}).store);
      const auto grid = BlockGrid::partition(m.grid);
      const auto est = storage_estimate(grid, measured_storage_sizes(m));
      equal += store.logical_bytes() == est.total;
      if (!m.grid.checkpoint_interval) {
        o.require(est.checkpoint_bytes == 0 && est.continuous_checkpoint_term == 0.0, "checkpoint term");
      }
      if (m.grid.zero_storage) o.require(est.total == 0 && store.keys().empty(), "zero storage");
    }
    o.detail << equal << "/" << configs.size() << " configs exact ";
    o.require(equal == configs.size(), "bytes differ from estimate");
  });

  criterion("AC7 hash schedule independence", 0, [](Outcome& o) {
    CounterRng rng(7, RngPurpose::test);
    std::vector<std::unique_ptr<WorkerPool>> pools;
    for (std::size_t w : {1, 2, 4, 8}) pools.push_back(std::make_unique<WorkerPool>(w));
    std::size_t same = 0;
    for (int n = 0; n < 500; ++n) {
      const std::size_t c = 1 + rng.below(64);
      const std::size_t k = 1 + rng.below(40);
      std::size_t len = 0;
      switch (n % 5) {
        case 0: len = rng.below(c); break;  // N < C (including empty)
        case 1: len = c; break;
        case 2: len = k * c; break;
        case 3: len = k * c + 1; break;
        default: len = rng.below(5000); break;
      }
      Tensor t({len});
      for (auto& v : t.data) v = static_cast<float>(rng.normal());
      const auto algo = n % 2 ? HashAlgo::sha256 : HashAlgo::blake3;
      const auto ref = chunked_hash(t, c, algo);
      bool all = true;
      for (auto& p : pools) all = all && chunked_hash(t, c, algo, p.get()) == ref;
      same += all;
    }
    o.detail << same << "/500 tensors identical across {1,2,4,8} workers ";
    o.require(same == 500, "digest depends on worker count");
  });

  criterion("AC8 gradient correctness", 0, [](Outcome& o) {
    CounterRng rng(2024, RngPurpose::test);
    for (auto kind : {LayerKind::linear, LayerKind::relu, LayerKind::layer_norm, LayerKind::attention,
                      LayerKind::softmax_xent}) {
      double worst = 0;
      for (int n = 0; n < 100; ++n) worst = std::max(worst, worst_gradient_error(random_instance(kind, rng), rng));
      o.detail << to_string(kind) << " " << worst << "; ";
      o.require(worst <= 1e-3, to_string(kind));
    }
  });

  criterion("AC9 attack separation", 600, [tau](Outcome& o) {
    const auto toy = train_toy_classifier<float>();
    o.require(toy.accuracy > 0.9, "toy classifier accuracy");
    const auto r = most_confident_sample(toy.model, toy.data);
    const Tensor x({1, 2}, {toy.data.inputs[2 * r], toy.data.inputs[2 * r + 1]});

    // honest binary32 replay error on a recorded run of the same architecture
    double honest = 0;
    auto m = toy_manifest(3, 8, 2, 2, 1);
    m.model = toy.spec;
    m.grid.layers = toy.spec.num_layers();
    auto rec = record_training<float>(m, {});
    for (const auto& id : rec.ledger.grid().blocks()) {
      honest = std::max(honest, verify_block(prepare_request(rec.ledger, rec.store, id)).max_error);
    }
    const double floor = std::max(honest, tau);

    const auto act = pgd_activation_attack(toy.model, x, std::nullopt, attack_layers(8, 1));
    o.require(act.success, "activation attack failed");
    o.detail << "honest " << honest << ", activation min " << act.min_relative;
    o.require(act.min_relative >= 1e2 * floor, "activation separation");

    PoisonObjective backdoor;
    backdoor.samples = {{toy.data.inputs[2 * r], toy.data.inputs[2 * r + 1]}};
    backdoor.trigger = {1.0, 1.0};
    backdoor.target_label = (static_cast<std::size_t>(toy.data.labels[r]) + 1) % 3;
    const auto poison = parameter_poison_attack(toy.model, backdoor);
    o.require(poison.success, "poison attack failed");
    o.detail << ", poison " << poison.relative_l2;
    o.require(poison.relative_l2 >= 1e2 * floor, "poison separation");

    const auto rows = activation_trend(toy.model, x, std::nullopt, {1, 2, 4});
    o.detail << ", B_L trend";
    for (const auto& row : rows) o.detail << " [" << row.layer_block << ": " << row.min_relative << ".." << row.max_relative << "]";
    o.detail << " ";
    o.require(trend_holds(rows), "B_L trend");
  });

  criterion("AC10 scenario detection", 0, [](Outcome& o) {
    for (auto kind : all_scenario_kinds()) {
      const auto m = scenario_manifest(scenario_mode(kind));
      const auto grid = BlockGrid::partition(m.grid);
      auto run = apply_scenario(m, default_scenario(kind, grid, m.layer_has_params()), {});
      VerificationOracle oracle(run.ledger, run.store);
      const bool exact = oracle.failing_blocks() == run.compromised;
      auto plan = documented_plan(run.ledger.grid(), run.scenario, 2, 17);
      auto rep = run_campaign(plan, [&](BlockId id) { return oracle(id); }, run.compromised, 2000);
      o.detail << to_string(kind) << " " << rep.empirical << "/" << rep.predicted << "; ";
      o.require(exact, to_string(kind) + " failing set");
      o.require(rep.predicted > 0.0 && rep.within_ci(), to_string(kind) + " outside CI");
    }
  });

  std::printf("%d criterion(s) failed\n", failures);
  return failures == 0 ? 0 : 1;
}
