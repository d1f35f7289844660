#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <fstream>
#include <sstream>

#include "aftune/adversary.hpp"
#include "aftune/auditor.hpp"
#include "aftune/isolation.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace aftune;

namespace {

// JSON crosses the boundary as text; the Python package turns it into dicts.
std::string dump(const nlohmann::json& j) { return j.dump(); }

struct Run {
  RunLedger ledger;
  TensorStore store;
};

Run open_run(const std::string& dir) {
  const RunPaths paths{dir};
  if (!fs::exists(paths.ledger())) throw ConfigError(dir + " holds no ledger.bin");
  return {RunLedger::load(paths.ledger()), TensorStore::open(paths.root)};
}

Manifest parse_manifest(const std::string& text) { return Manifest::from_json_text(text); }

std::string example_manifest(std::size_t depth, std::size_t steps, std::size_t layer_block,
                             std::size_t step_block) {
  Manifest m;
  m.model = ModelSpec::mlp(2, 16, depth, 3, 1);
  m.grid.layers = m.model.num_layers();
  m.grid.steps = steps;
  m.grid.layer_block = layer_block;
  m.grid.step_block = step_block;
  m.grid.checkpoint_interval = 1;
  m.grid.chunk_size = 256;
  m.optimizer.momentum = 0.9;
  m.dataset.samples = 128;
  return dump(to_json(m));
}

std::string record_train(const std::string& manifest, const std::string& run_dir) {
  const auto m = parse_manifest(manifest);
  auto go = [&](auto tag) {
    using Real = decltype(tag);
    auto rec = record_training<Real>(m, RecordOptions{run_dir});
    return dump({{"ledger_digest", rec.ledger.ledger_digest().hex()},
                 {"blocks", rec.ledger.grid().num_blocks()},
                 {"stored_bytes", rec.store.logical_bytes()},
                 {"losses", rec.losses}});
  };
  return m.grid.precision == Precision::f64 ? go(double{}) : go(float{});
}

std::string record_infer(const std::string& manifest, const std::string& run_dir) {
  auto m = parse_manifest(manifest);
  m.mode = RunMode::inference;
  auto go = [&](auto tag) {
    using Real = decltype(tag);
    auto rec = record_inference<Real>(m, init_model<Real>(m.model, m.optimizer), RecordOptions{run_dir});
    return dump({{"ledger_digest", rec.ledger.ledger_digest().hex()},
                 {"blocks", rec.ledger.grid().num_blocks()},
                 {"stored_bytes", rec.store.logical_bytes()}});
  };
  return m.grid.precision == Precision::f64 ? go(double{}) : go(float{});
}

VerificationReport verify_prepared(const Run& run, BlockId id, bool full_scan, const std::string& verifier) {
  PrepareOptions opts;
  opts.full_scan = full_scan;
  try {
    const auto req = prepare_request(run.ledger, run.store, id, opts);
    return verifier.empty() ? verify_block(req) : verify_isolated(req, verifier);
  } catch (const EvidenceReleased& e) {
    VerificationReport rep;
    rep.id = id;
    rep.verdict = Verdict::evidence_released;
    rep.message = e.what();
    return rep;
  } catch (const RefusedError& e) {
    VerificationReport rep;
    rep.id = id;
    rep.verdict = Verdict::refused;
    rep.message = e.what();
    return rep;
  }
}

std::string verify(const std::string& run_dir, const std::string& block, bool full_scan,
                   const std::string& verifier) {
  const auto run = open_run(run_dir);
  const auto id = parse_block_id(block);
  if (!run.ledger.grid().contains(id)) throw ConfigError("no block " + block + " in this run");
  return dump(verify_prepared(run, id, full_scan, verifier).to_json());
}

std::string verify_all(const std::string& run_dir) {
  const auto run = open_run(run_dir);
  auto out = nlohmann::json::array();
  for (const auto& id : run.ledger.grid().blocks()) out.push_back(verify_prepared(run, id, false, "").to_json());
  return dump(out);
}

std::vector<std::pair<std::uint32_t, std::uint32_t>> sample_blocks(std::size_t layer_blocks,
                                                                    std::size_t step_blocks,
                                                                    const std::string& strategy,
                                                                    std::size_t m, std::uint64_t seed,
                                                                    std::uint64_t round) {
  AuditPlan plan;
  plan.layer_blocks = layer_blocks;
  plan.step_blocks = step_blocks;
  plan.strategy = strategy_from_string(strategy);
  plan.m = m;
  plan.seed = seed;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> out;
  for (const auto& id : sample(plan, round)) out.emplace_back(id.i, id.j);
  return out;
}

template <typename Real>
std::string hash_array(py::array_t<Real, py::array::c_style | py::array::forcecast> a, std::size_t chunk,
                       const std::string& algo, std::size_t workers) {
  BasicTensor<Real> t({static_cast<std::size_t>(a.size())});
  std::copy(a.data(), a.data() + a.size(), t.data.begin());
  std::optional<WorkerPool> pool;
  if (workers > 1) pool.emplace(workers);
  return chunked_hash(t, chunk, hash_algo_from_string(algo), pool ? &*pool : nullptr).hex();
}

std::string apply_attack(const std::string& from_dir, const std::string& scenario_json, const std::string& out_dir) {
  const auto src = open_run(from_dir);
  const auto& m = src.ledger.manifest();
  auto j = nlohmann::json::parse(scenario_json);
  const auto kind = scenario_kind_from_string(j.at("kind").get<std::string>());
  auto base = default_scenario(kind, src.ledger.grid(), m.layer_has_params()).to_json();
  base.merge_patch(j);
  const auto s = Scenario::from_json(base);
  if (scenario_mode(kind) != m.mode) throw ConfigError(to_string(kind) + " does not match the run mode");
  auto run = apply_scenario(m, s, RecordOptions{out_dir});
  std::vector<std::string> ids;
  for (const auto& id : run.compromised) ids.push_back(to_string(id));
  return dump({{"scenario", s.to_json()},
               {"compromised", ids},
               {"ledger_digest", run.ledger.ledger_digest().hex()}});
}

std::string toy_attack(std::vector<std::size_t> layer_blocks, std::size_t train_steps) {
  const auto toy = train_toy_classifier<float>(train_steps);
  const auto r = most_confident_sample(toy.model, toy.data);
  const Tensor x({1, 2}, {toy.data.inputs[2 * r], toy.data.inputs[2 * r + 1]});
  auto rows = nlohmann::json::array();
  const auto trend = activation_trend(toy.model, x, std::nullopt, layer_blocks);
  for (const auto& row : trend) {
    rows.push_back({{"layer_block", row.layer_block},
                    {"min_relative", row.min_relative},
                    {"max_relative", row.max_relative},
                    {"success", row.success}});
  }
  PoisonObjective backdoor;
  backdoor.samples = {{toy.data.inputs[2 * r], toy.data.inputs[2 * r + 1]}};
  backdoor.trigger = {1.0, 1.0};
  backdoor.target_label = (static_cast<std::size_t>(toy.data.labels[r]) + 1) % 3;
  return dump({{"accuracy", toy.accuracy},
               {"trend", rows},
               {"trend_holds", trend_holds(trend)},
               {"backdoor", parameter_poison_attack(toy.model, backdoor).to_json()}});
}

}  // namespace

PYBIND11_MODULE(_aftune, m) {
  m.doc() = "Auditable fine-tuning and inference: recording, verification, audits, attacks";

  // Translators run most-recent first, so the subclass goes last.
  py::register_exception<Error>(m, "AftuneError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def("example_manifest", &example_manifest, py::arg("depth") = 3, py::arg("steps") = 16,
        py::arg("layer_block") = 2, py::arg("step_block") = 4);
  m.def("record_train", &record_train, py::arg("manifest"), py::arg("run_dir"),
        py::call_guard<py::gil_scoped_release>());
  m.def("record_infer", &record_infer, py::arg("manifest"), py::arg("run_dir"),
        py::call_guard<py::gil_scoped_release>());
  m.def("verify", &verify, py::arg("run_dir"), py::arg("block"), py::arg("full_scan") = false,
        py::arg("verifier") = "", py::call_guard<py::gil_scoped_release>());
  m.def("verify_all", &verify_all, py::arg("run_dir"), py::call_guard<py::gil_scoped_release>());
  m.def("ledger_digest", [](const std::string& dir) { return open_run(dir).ledger.ledger_digest().hex(); });
  m.def("export_ledger", [](const std::string& dir) { return dump(open_run(dir).ledger.export_json()); });

  m.def("p_evade_exact", [](std::uint64_t n, std::uint64_t k, std::uint64_t mm) {
    return static_cast<double>(p_evade_exact(n, k, mm));
  }, py::arg("n"), py::arg("k"), py::arg("m"));
  m.def("p_detect_approx", [](double rho, std::uint64_t mm) {
    const auto a = p_detect_approx(rho, mm);
    return std::make_pair(a.binomial, a.exponential);
  }, py::arg("rho"), py::arg("m"));
  m.def("sample", &sample_blocks, py::arg("layer_blocks"), py::arg("step_blocks"),
        py::arg("strategy") = "uniform", py::arg("m") = 1, py::arg("seed") = 0, py::arg("round") = 0);
  m.def("commit_seed", [](std::uint64_t seed) { return commit_seed(seed).hex(); }, py::arg("seed"));

  m.def("chunked_hash", &hash_array<float>, py::arg("array"), py::arg("chunk") = 4096,
        py::arg("algo") = "blake3", py::arg("workers") = 1);
  m.def("chunked_hash64", &hash_array<double>, py::arg("array"), py::arg("chunk") = 4096,
        py::arg("algo") = "blake3", py::arg("workers") = 1);

  m.def("apply_attack", &apply_attack, py::arg("from_dir"), py::arg("scenario"), py::arg("out_dir"),
        py::call_guard<py::gil_scoped_release>());
  m.def("toy_attack", &toy_attack, py::arg("layer_blocks") = std::vector<std::size_t>{1, 2, 4},
        py::arg("train_steps") = 600, py::call_guard<py::gil_scoped_release>());
}
