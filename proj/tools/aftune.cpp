// aftune: record, commit, verify, audit and attack auditable training runs.
//
// Exit status: 0 all requested checks pass, 1 a check failed (tampering found,
// evidence released, verification refused), 2 usage error, 3 operational error.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "aftune/adversary.hpp"
#include "aftune/auditor.hpp"
#include "aftune/isolation.hpp"
#include "aftune/rng.hpp"

namespace fs = std::filesystem;
using namespace aftune;

namespace {

constexpr int kPass = 0;
constexpr int kFail = 1;
constexpr int kUsage = 2;
constexpr int kOperational = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Relative run paths resolve against $AFTUNE_RUN_ROOT when it is set.
fs::path run_path(const std::string& p) {
  fs::path path(p);
  if (path.is_relative()) {
    if (const char* root = std::getenv("AFTUNE_RUN_ROOT"); root && *root) return fs::path(root) / path;
  }
  return path;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << text;
  if (!f) throw Error("cannot write " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot read " + path.string());
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

/// Dual-emitted report: canonical JSON plus a plain-text summary.
void write_report(const fs::path& root, const std::string& name, const nlohmann::json& j,
                  const std::string& text) {
  const RunPaths paths{root};
  write_file(paths.reports() / (name + ".json"), j.dump(2) + "\n");
  write_file(paths.reports() / (name + ".txt"), text);
}

struct Run {
  fs::path root;
  RunLedger ledger;
  TensorStore store;
};

Run open_run(const std::string& dir) {
  const RunPaths paths{run_path(dir)};
  if (!fs::exists(paths.manifest()) || !fs::exists(paths.ledger())) {
    throw UsageError(paths.root.string() + " is not a run directory (manifest.json and ledger.bin required)");
  }
  Manifest on_disk;
  try {
    on_disk = Manifest::from_json_text(read_file(paths.manifest()));
  } catch (const ConfigError& e) {
    throw UsageError(std::string("manifest rejected: ") + e.what());
  }
  auto ledger = RunLedger::load(paths.ledger());
  if (!(ledger.manifest() == on_disk)) {
    throw UsageError("manifest.json does not match the manifest committed in ledger.bin");
  }
  return {paths.root, std::move(ledger), TensorStore::open(paths.root)};
}

std::vector<std::size_t> parse_list(const std::string& text) {
  // "1,3,5" or "8-15" or a mix: "0,4-6".
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part.empty()) continue;
    const auto dash = part.find('-');
    try {
      if (dash == std::string::npos) {
        out.push_back(std::stoull(part));
      } else {
        const auto a = std::stoull(part.substr(0, dash)), b = std::stoull(part.substr(dash + 1));
        if (b < a) throw UsageError("empty range " + part);
        for (auto k = a; k <= b; ++k) out.push_back(k);
      }
    } catch (const std::logic_error&) {
      throw UsageError("cannot parse list element '" + part + "'");
    }
  }
  return out;
}

std::vector<BlockId> parse_blocks(const std::vector<std::string>& items, const BlockGrid& grid) {
  std::vector<BlockId> out;
  for (const auto& item : items) {
    std::stringstream ss(item);
    std::string one;
    while (std::getline(ss, one, ';')) {
      if (one.empty()) continue;
      BlockId id;
      try {
        id = parse_block_id(one);
      } catch (const Error& e) {
        throw UsageError(e.what());
      }
      if (!grid.contains(id)) {
        throw UsageError("no block " + to_string(id) + " in a " + std::to_string(grid.num_layer_blocks()) +
                         "x" + std::to_string(grid.num_step_blocks()) + " grid");
      }
      out.push_back(id);
    }
  }
  return out;
}

// ---- record ----

struct ModelFlags {
  std::string manifest_file;
  std::size_t input_dim = 2, hidden = 16, depth = 3, classes = 3;
  std::uint64_t model_seed = 1;
  std::size_t steps = 16, layer_block = 2, step_block = 4;
  std::string checkpoint_interval = "1";
  std::size_t activation_interval = 1;
  std::size_t chunk_size = 4096;
  std::string precision = "f32";
  std::optional<double> tolerance;
  bool zero_storage = false;
  std::string optimizer = "sgd";
  double lr = 0.05, momentum = 0.9, weight_decay = 0.0;
  std::string dataset = "rings";
  std::size_t samples = 256, batch = 16;
  double noise = 0.1;
  std::uint64_t dataset_seed = 7, data_seed = 11;
  std::string algo = "blake3";
  std::vector<std::size_t> nondeterministic;

  void add(CLI::App* c, bool inference) {
    c->add_option("--manifest", manifest_file, "Load the run manifest from JSON instead of flags");
    c->add_option("--input-dim", input_dim, "MLP input width")->capture_default_str();
    c->add_option("--hidden", hidden, "MLP hidden width")->capture_default_str();
    c->add_option("--depth", depth, "Hidden [linear, relu] pairs (L = 2*depth + 2)")->capture_default_str();
    c->add_option("--classes", classes, "Output classes")->capture_default_str();
    c->add_option("--model-seed", model_seed, "Parameter initialisation seed")->capture_default_str();
    c->add_option(inference ? "--requests" : "--steps", steps,
                  inference ? "Inference requests (T)" : "Training steps (T)")->capture_default_str();
    c->add_option("--layer-block,--bl", layer_block, "Layers per layer block (B_L)")->capture_default_str();
    if (!inference) {
      c->add_option("--step-block,--bs", step_block, "Steps per step block (B_S)")->capture_default_str();
      c->add_option("--checkpoint-interval,--ic", checkpoint_interval,
                    "Step blocks between stored checkpoints (I_C), or 'inf'")->capture_default_str();
      c->add_option("--optimizer", optimizer, "sgd or adamw")->capture_default_str();
      c->add_option("--lr", lr, "Learning rate")->capture_default_str();
      c->add_option("--momentum", momentum, "SGD momentum")->capture_default_str();
      c->add_option("--weight-decay", weight_decay, "AdamW weight decay")->capture_default_str();
      c->add_option("--nondeterministic", nondeterministic,
                    "Layer indices to mark non-deterministic (isolated automatically)");
    } else {
      c->add_option("--activation-interval,--ia", activation_interval,
                    "Layer blocks between recorded activations (I_A)")->capture_default_str();
    }
    c->add_option("--chunk-size", chunk_size, "Elements per hash chunk (C)")->capture_default_str();
    c->add_option("--precision", precision, "f32 or f64")->capture_default_str();
    c->add_option("--tolerance", tolerance, "Relative L2 tolerance (default 1e-5 f32, 1e-12 f64)");
    c->add_flag("--zero-storage", zero_storage, "Commit hashes only; verification re-runs training");
    c->add_option("--dataset", dataset, "rings or gaussian")->capture_default_str();
    c->add_option("--samples", samples, "Dataset size")->capture_default_str();
    c->add_option("--noise", noise, "Dataset noise")->capture_default_str();
    c->add_option("--dataset-seed", dataset_seed, "Dataset seed")->capture_default_str();
    c->add_option("--batch", batch, "Batch size")->capture_default_str();
    c->add_option("--data-seed", data_seed, "Batch sampling seed")->capture_default_str();
    c->add_option("--algo", algo, "blake3 or sha256")->capture_default_str();
  }

  Manifest build(bool inference) const {
    if (!manifest_file.empty()) {
      try {
        return Manifest::from_json_text(read_file(manifest_file));
      } catch (const ConfigError& e) {
        throw UsageError(std::string("manifest rejected: ") + e.what());
      }
    }
    Manifest m;
    m.mode = inference ? RunMode::inference : RunMode::training;
    m.model = ModelSpec::mlp(input_dim, hidden, depth, classes, model_seed);
    for (auto l : nondeterministic) {
      if (l >= m.model.layers.size()) throw UsageError("no layer " + std::to_string(l));
      m.model.layers[l].deterministic = false;
    }
    m.grid.layers = m.model.num_layers();
    m.grid.steps = steps;
    m.grid.layer_block = layer_block;
    m.grid.step_block = inference ? 1 : step_block;
    if (checkpoint_interval == "inf" || checkpoint_interval == "none") {
      m.grid.checkpoint_interval = std::nullopt;
    } else {
      try {
        m.grid.checkpoint_interval = static_cast<std::uint32_t>(std::stoul(checkpoint_interval));
      } catch (const std::logic_error&) {
        throw UsageError("--checkpoint-interval takes a positive integer or 'inf'");
      }
    }
    m.grid.activation_interval = activation_interval;
    m.grid.chunk_size = chunk_size;
    m.grid.precision = precision_from_string(precision);
    m.grid.tolerance = tolerance.value_or(default_tolerance(m.grid.precision));
    m.grid.zero_storage = zero_storage;
    m.optimizer.kind = optimizer_kind_from_string(optimizer);
    m.optimizer.lr = lr;
    m.optimizer.momentum = m.optimizer.kind == OptimizerKind::adamw ? 0.0 : momentum;
    m.optimizer.weight_decay = weight_decay;
    m.dataset.kind = dataset_kind_from_string(dataset);
    m.dataset.samples = samples;
    m.dataset.input_dim = input_dim;
    m.dataset.classes = classes;
    m.dataset.noise = noise;
    m.dataset.seed = dataset_seed;
    m.batch_size = batch;
    m.data_seed = data_seed;
    m.algo = hash_algo_from_string(algo);
    return m;
  }
};

std::string human_bytes(std::uint64_t b) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(1);
  if (b >= (1u << 20)) {
    o << static_cast<double>(b) / (1 << 20) << " MiB";
  } else if (b >= 1024) {
    o << static_cast<double>(b) / 1024 << " KiB";
  } else {
    o << b << " B";
  }
  return o.str();
}

template <typename Real>
int record_train(const fs::path& root, const Manifest& m, std::size_t workers) {
  std::optional<WorkerPool> pool;
  if (workers > 1) pool.emplace(workers);
  RecordOptions opts{root, pool ? &*pool : nullptr};
  const auto t0 = std::chrono::steady_clock::now();
  auto rec = record_training<Real>(m, opts);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto& grid = rec.ledger.grid();
  const auto est = storage_estimate(grid, measured_storage_sizes(rec.ledger.manifest()));
  nlohmann::json j{{"blocks", grid.num_blocks()},
                   {"layer_blocks", grid.num_layer_blocks()},
                   {"step_blocks", grid.num_step_blocks()},
                   {"ledger_digest", rec.ledger.ledger_digest().hex()},
                   {"stored_bytes", rec.store.logical_bytes()},
                   {"estimated_bytes", est.total},
                   {"final_loss", rec.losses.empty() ? 0.0 : rec.losses.back()},
                   {"losses", rec.losses},
                   {"seconds", secs}};
  std::ostringstream t;
  t << "recorded " << grid.num_layer_blocks() << "x" << grid.num_step_blocks() << " blocks, "
    << human_bytes(rec.store.logical_bytes()) << " of evidence (estimate " << human_bytes(est.total)
    << "), final loss " << std::setprecision(6) << (rec.losses.empty() ? 0.0 : rec.losses.back()) << "\n"
    << "ledger " << rec.ledger.ledger_digest().hex() << "\n";
  write_report(root, "record", j, t.str());
  std::cout << t.str();
  return kPass;
}

/// Model committed by an inference run, rebuilt from its stored parameters.
template <typename Real>
ModelState<Real> committed_model(const RunLedger& ledger, const TensorStore& store) {
  const auto& m = ledger.manifest();
  auto model = init_model<Real>(m.model, m.optimizer);
  const auto has = m.layer_has_params();
  for (std::size_t l = 0; l < has.size(); ++l) {
    if (!has[l]) continue;
    const BoundaryKey key{BoundaryKind::parameter, static_cast<std::uint32_t>(l), 0};
    unflatten_params(model.layers[l], convert<Real>(store.get(key)));
  }
  return model;
}

template <typename Real>
int record_infer(const fs::path& root, Manifest m, const std::string& serve_from) {
  ModelState<Real> model = init_model<Real>(m.model, m.optimizer);
  if (!serve_from.empty()) {
    auto src = open_run(serve_from);
    if (src.ledger.manifest().mode != RunMode::training || !(src.ledger.manifest().model == m.model)) {
      throw UsageError("--serve-from must be a training run of the same model");
    }
    model = reconstruct_state<Real>(src.ledger, src.store, src.ledger.grid().num_step_blocks());
    m.optimizer = src.ledger.manifest().optimizer;
  }
  auto rec = record_inference<Real>(m, model, RecordOptions{root});
  const auto& grid = rec.ledger.grid();
  nlohmann::json j{{"requests", rec.outputs.size()},
                   {"blocks", grid.num_blocks()},
                   {"recorded_boundaries", grid.recorded_boundaries(RunMode::inference)},
                   {"ledger_digest", rec.ledger.ledger_digest().hex()},
                   {"stored_bytes", rec.store.logical_bytes()}};
  std::ostringstream t;
  t << "served " << rec.outputs.size() << " requests over " << grid.num_layer_blocks()
    << " layer blocks, " << human_bytes(rec.store.logical_bytes()) << " of evidence\n"
    << "ledger " << rec.ledger.ledger_digest().hex() << "\n";
  write_report(root, "record", j, t.str());
  std::cout << t.str();
  return kPass;
}

// ---- verify ----

struct VerifyFlags {
  bool full_scan = false;
  std::string precision;
  std::optional<double> tolerance;
  double replay_noise = 0.0;
  std::uint64_t noise_seed = 0;
  bool in_process = false;
  std::uint64_t memory_budget = 256ull << 20;

  void add(CLI::App* c) {
    c->add_flag("--full-scan", full_scan, "Report every mismatch, not just the first");
    c->add_option("--precision", precision, "Replay precision f32|f64 (default: run precision)");
    c->add_option("--tolerance", tolerance, "Override the relative L2 tolerance");
    c->add_option("--replay-noise", replay_noise,
                  "Relative noise injected into replay inputs (simulated device divergence)")
        ->capture_default_str();
    c->add_option("--noise-seed", noise_seed, "Seed for --replay-noise")->capture_default_str();
    c->add_flag("--in-process", in_process, "Verify in this process instead of an isolated child");
    c->add_option("--memory-budget", memory_budget, "Verifier payload limit in bytes")->capture_default_str();
  }

  PrepareOptions prepare() const {
    PrepareOptions p;
    p.tolerance = tolerance;
    if (!precision.empty()) p.replay_precision = precision_from_string(precision);
    p.full_scan = full_scan;
    p.replay_noise = replay_noise;
    p.noise_seed = noise_seed;
    return p;
  }
};

VerificationReport verify_one(const Run& run, BlockId id, const VerifyFlags& f) {
  try {
    const auto req = prepare_request(run.ledger, run.store, id, f.prepare());
    const VerifierConfig cfg{f.memory_budget};
    return f.in_process ? verify_block(req, cfg) : verify_isolated(req, self_executable(), cfg);
  } catch (const EvidenceReleased& e) {
    VerificationReport rep;
    rep.id = id;
    rep.mode = run.ledger.manifest().mode;
    rep.verdict = Verdict::evidence_released;
    rep.message = e.what();
    return rep;
  } catch (const RefusedError& e) {
    VerificationReport rep;
    rep.id = id;
    rep.mode = run.ledger.manifest().mode;
    rep.verdict = Verdict::refused;
    rep.message = e.what();
    return rep;
  }
}

/// Verifies blocks with up to `jobs` verifier processes in flight.
std::vector<VerificationReport> verify_many(const Run& run, const std::vector<BlockId>& ids,
                                            const VerifyFlags& f, std::size_t jobs) {
  std::vector<VerificationReport> out(ids.size());
  std::vector<std::string> errors(ids.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t k; (k = next.fetch_add(1)) < ids.size();) {
      try {
        out[k] = verify_one(run, ids[k], f);
      } catch (const std::exception& e) {
        errors[k] = e.what();
      }
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t t = 1; t < std::max<std::size_t>(jobs, 1) && t < ids.size(); ++t) threads.emplace_back(work);
  work();
  for (auto& t : threads) t.join();
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (!errors[k].empty()) throw Error("block " + to_string(ids[k]) + ": " + errors[k]);
  }
  return out;
}

nlohmann::json stable_json(const VerificationReport& rep) {
  auto j = rep.to_json();
  j.erase("replay_seconds");  // keeps re-runs byte-identical
  return j;
}

std::string block_name(BlockId id) { return std::to_string(id.i) + "_" + std::to_string(id.j); }

// ---- bench ----

int bench_hash(const std::vector<std::size_t>& sizes, const std::vector<std::size_t>& chunks,
               const std::vector<std::string>& algos, const std::vector<std::size_t>& workers,
               std::size_t repeats, const std::string& csv_path) {
  std::ostringstream csv;
  csv << "elements,chunk,algo,workers,seconds,digest,matches_single_worker\n";
  std::cout << std::left << std::setw(10) << "elements" << std::setw(8) << "chunk" << std::setw(8) << "algo"
            << std::setw(8) << "workers" << std::setw(12) << "ms" << "digest\n";
  bool consistent = true;
  std::map<std::size_t, WorkerPool*> pools;
  std::vector<std::unique_ptr<WorkerPool>> owned;
  for (auto w : workers) {
    if (w > 1 && !pools.count(w)) {
      owned.push_back(std::make_unique<WorkerPool>(w));
      pools[w] = owned.back().get();
    }
  }
  for (auto n : sizes) {
    CounterRng rng(1, RngPurpose::test, n);
    Tensor t({n});
    for (auto& v : t.data) v = static_cast<float>(rng.normal());
    const auto bytes = to_le_bytes(t);
    for (const auto& a : algos) {
      const auto algo = hash_algo_from_string(a);
      for (auto c : chunks) {
        const Digest single = chunked_hash(bytes, sizeof(float), c, algo, nullptr);
        for (auto w : workers) {
          WorkerPool* pool = w > 1 ? pools[w] : nullptr;
          std::vector<double> times;
          Digest d;
          for (std::size_t r = 0; r < std::max<std::size_t>(repeats, 1); ++r) {
            const auto t0 = std::chrono::steady_clock::now();
            d = chunked_hash(bytes, sizeof(float), c, algo, pool);
            times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
          }
          std::sort(times.begin(), times.end());
          const double median = times[times.size() / 2];
          const bool same = d == single;
          consistent = consistent && same;
          csv << n << ',' << c << ',' << a << ',' << w << ',' << median << ',' << d.hex() << ',' << same << '\n';
          std::cout << std::left << std::setw(10) << n << std::setw(8) << c << std::setw(8) << a << std::setw(8)
                    << w << std::setw(12) << std::fixed << std::setprecision(3) << median * 1e3
                    << d.hex().substr(0, 16) << (same ? "" : "  MISMATCH") << "\n";
        }
      }
    }
  }
  if (!csv_path.empty()) write_file(csv_path, csv.str());
  std::cout << (consistent ? "all digests match the single-worker digest\n"
                           : "digest mismatch across worker counts\n");
  return consistent ? kPass : kFail;
}

// ---- attack statistics ----

template <typename Real>
int attack_stats(std::size_t train_steps, std::uint64_t seed, const std::vector<std::size_t>& layer_blocks,
                 const AttackConfig& cfg, bool targeted, const std::string& json_path) {
  const auto toy = train_toy_classifier<Real>(train_steps, seed);
  const auto r = most_confident_sample(toy.model, toy.data);
  const std::size_t d = toy.data.inputs.last_dim();
  BasicTensor<Real> x({1, d});
  std::vector<double> sample(d);
  for (std::size_t k = 0; k < d; ++k) sample[k] = x[k] = toy.data.inputs[r * d + k];
  const auto label = predict(toy.model, x)[0];
  const std::optional<std::size_t> target =
      targeted ? std::optional<std::size_t>((label + 1) % toy.spec.layers.back().classes) : std::nullopt;
  const double tau = default_tolerance(precision_of<Real>());

  // Honest baseline: the largest replay error over an honest recorded run of the same shape.
  Manifest hm;
  hm.model = toy.spec;
  hm.grid.layers = toy.spec.num_layers();
  hm.grid.steps = 8;
  hm.grid.layer_block = 2;
  hm.grid.step_block = 2;
  hm.grid.checkpoint_interval = 1;
  hm.grid.precision = precision_of<Real>();
  hm.grid.tolerance = tau;
  hm.dataset = toy.data_spec;
  auto honest = record_training<Real>(hm, {});
  double baseline = 0.0;
  for (const auto& id : honest.ledger.grid().blocks()) {
    baseline = std::max(baseline, verify_block(prepare_request(honest.ledger, honest.store, id)).max_error);
  }
  const double floor = std::max(tau, baseline);

  std::ostringstream t;
  t << std::scientific << std::setprecision(3);
  t << "toy classifier: L=" << toy.spec.num_layers() << ", accuracy " << std::fixed << toy.accuracy
    << std::scientific << ", sample " << r << " (label " << label << ")"
    << (target ? ", target " + std::to_string(*target) : std::string(", untargeted")) << "\n";
  t << "tolerance " << tau << ", honest replay error " << baseline << "\n\n";
  t << "activation perturbations (relative L2 at each recorded boundary)\n";
  t << "  B_L  boundaries        min          max          argmax  min/floor\n";
  const auto rows = activation_trend(toy.model, x, target, layer_blocks, cfg);
  nlohmann::json jrows = nlohmann::json::array();
  double min_act = INFINITY;
  for (const auto& row : rows) {
    std::ostringstream b;
    for (auto l : row.layers) b << l << ' ';
    t << "  " << std::setw(3) << row.layer_block << "  " << std::left << std::setw(16) << b.str() << std::right
      << "  " << row.min_relative << "  " << row.max_relative << "  " << std::setw(6) << row.argmax_layer
      << "  " << row.min_relative / floor << (row.success ? "" : "  (attack failed)") << "\n";
    min_act = std::min(min_act, row.min_relative);
    jrows.push_back({{"layer_block", row.layer_block},
                     {"layers", row.layers},
                     {"min_relative", row.min_relative},
                     {"max_relative", row.max_relative},
                     {"argmax_layer", row.argmax_layer},
                     {"success", row.success}});
  }
  const bool trend = trend_holds(rows);
  t << "  trend (max non-increasing, min non-decreasing in B_L): " << (trend ? "holds" : "violated") << "\n\n";

  AttackConfig joint = cfg;
  joint.joint = true;
  const auto jres = pgd_activation_attack(toy.model, x, target, attack_layers(toy.spec.num_layers(), 1), joint);
  t << "joint attack over all boundaries: min " << jres.min_relative << ", max " << jres.max_relative
    << (jres.success ? "" : " (failed)") << "\n\n";

  PoisonObjective backdoor;
  backdoor.samples = {sample};
  backdoor.trigger.assign(d, 1.0);
  backdoor.target_label = (label + 1) % toy.spec.layers.back().classes;
  const auto bres = parameter_poison_attack(toy.model, backdoor, cfg);
  PoisonObjective wrong;
  wrong.kind = PoisonObjective::Kind::targeted;
  wrong.samples = {sample};
  wrong.labels = {(label + 2) % toy.spec.layers.back().classes};
  const auto tres = parameter_poison_attack(toy.model, wrong, cfg);
  t << "parameter poisoning (relative L2 of delta theta)\n";
  t << "  backdoor  " << bres.relative_l2 << "  min/floor " << bres.relative_l2 / floor
    << (bres.success ? "" : "  (failed)") << "\n";
  t << "  targeted  " << tres.relative_l2 << "  min/floor " << tres.relative_l2 / floor
    << (tres.success ? "" : "  (failed)") << "\n";
  const double min_all = std::min({min_act, bres.relative_l2, tres.relative_l2});
  t << "\nseparation: smallest successful perturbation / max(tolerance, honest error) = " << min_all / floor
    << "\n";

  nlohmann::json j{{"accuracy", toy.accuracy},
                   {"sample", r},
                   {"tolerance", tau},
                   {"honest_error", baseline},
                   {"trend", jrows},
                   {"trend_holds", trend},
                   {"joint", jres.to_json()},
                   {"backdoor", bres.to_json()},
                   {"targeted", tres.to_json()},
                   {"separation", min_all / floor}};
  if (!json_path.empty()) write_file(json_path, j.dump(2) + "\n");
  std::cout << t.str();
  return kPass;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Auditable fine-tuning and inference: record, commit, verify, audit, attack"};
  app.require_subcommand(1);
  int result = kPass;

  // record-train
  auto* rt = app.add_subcommand("record-train", "Train with boundary recording into a run directory");
  std::string rt_run;
  std::size_t rt_workers = 1;
  ModelFlags rt_flags;
  rt->add_option("--run", rt_run, "Run directory to create")->required();
  rt->add_option("--workers", rt_workers, "Hashing threads")->capture_default_str();
  rt_flags.add(rt, false);
  rt->callback([&] {
    auto m = rt_flags.build(false);
    m.mode = RunMode::training;
    const auto root = run_path(rt_run);
    result = m.grid.precision == Precision::f64 ? record_train<double>(root, m, rt_workers)
                                                : record_train<float>(root, m, rt_workers);
  });

  // record-infer
  auto* ri = app.add_subcommand("record-infer", "Serve inference requests with boundary recording");
  std::string ri_run, ri_from;
  ModelFlags ri_flags;
  ri->add_option("--run", ri_run, "Run directory to create")->required();
  ri->add_option("--serve-from", ri_from, "Serve the final model of this training run");
  ri_flags.add(ri, true);
  ri->callback([&] {
    auto m = ri_flags.build(true);
    m.mode = RunMode::inference;
    const auto root = run_path(ri_run);
    result = m.grid.precision == Precision::f64 ? record_infer<double>(root, m, ri_from)
                                                : record_infer<float>(root, m, ri_from);
  });

  // commit
  auto* cm = app.add_subcommand("commit", "Show or export a run's commitments and check the trust chain");
  std::string cm_run, cm_export;
  cm->add_option("--run", cm_run, "Run directory")->required();
  cm->add_option("--export", cm_export, "Write the ledger as JSON to this file");
  cm->callback([&] {
    auto run = open_run(cm_run);
    const auto& m = run.ledger.manifest();
    // The client recomputes anchors from its own data rather than trusting the provider's copy.
    TrustAnchors client = m.anchors;
    if (m.mode == RunMode::training) {
      client = m.grid.precision == Precision::f64 ? compute_training_anchors<double>(m)
                                                  : compute_training_anchors<float>(m);
    }
    const bool anchors_ok = client == m.anchors;
    const auto chain = check_trust_chain(run.ledger, client, run.ledger.grid().blocks());
    nlohmann::json j{{"ledger_digest", run.ledger.ledger_digest().hex()},
                     {"entries", run.ledger.entries().size()},
                     {"complete", run.ledger.complete()},
                     {"anchors_match_client", anchors_ok},
                     {"trust_chain", chain.to_json()}};
    std::ostringstream t;
    t << "ledger " << run.ledger.ledger_digest().hex() << "\n"
      << run.ledger.entries().size() << "/" << run.ledger.grid().num_blocks() << " blocks sealed\n"
      << "anchors " << (anchors_ok ? "match" : "DO NOT match") << " the client's data\n"
      << "trust chain: " << chain.digests_checked << " digests over " << chain.blocks_checked << " blocks, "
      << chain.issues.size() << " issue(s)\n";
    for (const auto& is : chain.issues) {
      t << "  " << to_string(is.block) << " " << to_string(is.key) << ": " << is.reason << "\n";
    }
    if (!cm_export.empty()) write_file(cm_export, run.ledger.export_json().dump(2) + "\n");
    write_report(run.root, "commit", j, t.str());
    std::cout << t.str();
    result = anchors_ok && chain.ok() && run.ledger.complete() ? kPass : kFail;
  });

  // verify
  auto* vf = app.add_subcommand("verify", "Verify block cells in isolated verifier processes");
  std::string vf_run;
  std::vector<std::string> vf_blocks;
  bool vf_all = false;
  std::size_t vf_jobs = 1;
  VerifyFlags vf_flags;
  vf->add_option("--run", vf_run, "Run directory")->required();
  vf->add_option("--block", vf_blocks, "Block id i,j (repeatable, or ';'-separated)");
  vf->add_flag("--all", vf_all, "Verify every block");
  vf->add_option("--jobs", vf_jobs, "Verifier processes in flight")->capture_default_str();
  vf_flags.add(vf);
  vf->callback([&] {
    auto run = open_run(vf_run);
    auto ids = vf_all ? run.ledger.grid().blocks() : parse_blocks(vf_blocks, run.ledger.grid());
    if (ids.empty()) throw UsageError("give --block or --all");
    const auto reps = verify_many(run, ids, vf_flags, vf_jobs);
    std::ostringstream t;
    nlohmann::json all = nlohmann::json::array();
    std::size_t passed = 0;
    for (const auto& rep : reps) {
      const auto j = stable_json(rep);
      write_file(RunPaths{run.root}.reports() / ("verify_" + block_name(rep.id) + ".json"), j.dump(2) + "\n");
      all.push_back(j);
      passed += rep.passed();
      t << rep.summary() << "\n";
    }
    t << passed << "/" << reps.size() << " blocks passed\n";
    write_report(run.root, "verify", {{"passed", passed}, {"blocks", reps.size()}, {"reports", all}}, t.str());
    std::cout << t.str();
    result = passed == reps.size() ? kPass : kFail;
  });

  // audit
  auto* au = app.add_subcommand("audit", "Sample blocks with a committed seed and verify them");
  std::string au_run, au_strategy = "uniform", au_reveal, au_csv, au_svg;
  std::size_t au_m = 3, au_trials = 1, au_rounds = 1, au_jobs = 1;
  std::optional<std::uint64_t> au_seed;
  std::vector<std::string> au_blocks;
  bool au_commit_only = false;
  VerifyFlags au_flags;
  au->add_option("--run", au_run, "Run directory")->required();
  au->add_option("--strategy", au_strategy, "uniform | input-row | per-step | list")->capture_default_str();
  au->add_option("--m", au_m, "Blocks per audit")->capture_default_str();
  au->add_option("--seed", au_seed, "Audit seed (default: fresh random)");
  au->add_option("--block", au_blocks, "Block ids for --strategy list");
  au->add_option("--trials", au_trials, "Independent audits for a detection-rate campaign")->capture_default_str();
  au->add_option("--rounds", au_rounds, "Audit rounds per trial")->capture_default_str();
  au->add_option("--jobs", au_jobs, "Verifier processes in flight")->capture_default_str();
  au->add_flag("--commit-seed", au_commit_only, "Only print the seed commitment");
  au->add_option("--reveal", au_reveal, "Check --seed against this earlier commitment (hex)");
  au->add_option("--curve-csv", au_csv, "Write the detection curve over m as CSV");
  au->add_option("--curve-svg", au_svg, "Write the detection curve over m as SVG");
  au_flags.add(au);
  au->callback([&] {
    auto run = open_run(au_run);
    const auto& grid = run.ledger.grid();
    const std::uint64_t seed = au_seed ? *au_seed : std::random_device{}() * 0x100000000ull + std::random_device{}();
    const auto commitment = commit_seed(seed, run.ledger.manifest().algo);
    if (au_commit_only) {
      std::cout << "seed commitment " << commitment.hex() << "\n";
      if (!au_seed) std::cout << "seed " << seed << " (keep secret until the audit)\n";
      result = kPass;
      return;
    }
    if (!au_reveal.empty() && !reveal_matches(Digest::from_hex(run.ledger.manifest().algo, au_reveal), seed)) {
      throw UsageError("seed does not match the published commitment");
    }
    auto plan = AuditPlan::for_grid(grid, strategy_from_string(au_strategy), au_m, seed);
    if (plan.strategy == Strategy::list) {
      plan.explicit_ids = parse_blocks(au_blocks, grid);
      plan.m = plan.explicit_ids.size();
    }
    try {
      plan.validate();
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
    std::ostringstream t;
    nlohmann::json j{{"seed_commitment", commitment.hex()}, {"strategy", to_string(plan.strategy)}, {"m", plan.m}};
    if (au_trials <= 1 && au_rounds <= 1) {
      const auto ids = sample(plan);
      const auto reps = verify_many(run, ids, au_flags, au_jobs);
      nlohmann::json arr = nlohmann::json::array();
      std::size_t bad = 0;
      for (const auto& rep : reps) {
        arr.push_back(stable_json(rep));
        bad += !rep.passed();
        t << rep.summary() << "\n";
      }
      t << "audit of " << ids.size() << " block(s) with " << to_string(plan.strategy) << ": "
        << (bad ? std::to_string(bad) + " failed" : std::string("all passed")) << "\n";
      j["reports"] = arr;
      j["failed"] = bad;
      result = bad ? kFail : kPass;
    } else {
      VerificationOracle oracle(run.ledger, run.store, au_flags.prepare(), VerifierConfig{au_flags.memory_budget});
      const auto failing = oracle.failing_blocks();
      const auto rep = run_campaign(plan, [&](BlockId id) { return oracle(id); }, failing, au_trials, au_rounds);
      t << rep.summary() << "\n"
        << failing.size() << " of " << grid.num_blocks() << " blocks fail verification; "
        << oracle.verifications() << " verifications run\n";
      j["campaign"] = rep.to_json();
      std::vector<std::string> fl;
      for (const auto& id : failing) fl.push_back(to_string(id));
      j["failing_blocks"] = fl;
      result = rep.detected ? kFail : kPass;
      if (!au_csv.empty() || !au_svg.empty()) {
        std::vector<std::size_t> ms;
        for (std::size_t m = 0; m <= grid.num_blocks(); ++m) ms.push_back(m);
        const auto curve = detection_curve(grid.num_blocks(), failing.size(), ms);
        if (!au_csv.empty()) write_file(au_csv, curve_csv(curve));
        if (!au_svg.empty()) {
          write_file(au_svg, curve_svg(curve, "P(detect), N=" + std::to_string(grid.num_blocks()) +
                                                  ", k=" + std::to_string(failing.size())));
        }
      }
    }
    write_report(run.root, "audit", j, t.str());
    std::cout << t.str();
  });

  // attack
  auto* at = app.add_subcommand("attack", "Re-record a run with an attack scenario applied");
  std::string at_scenario, at_from, at_out, at_steps;
  std::optional<std::size_t> at_boundary, at_at, at_layer, at_target, at_trigger_samples;
  std::optional<double> at_budget, at_offset;
  std::optional<std::uint64_t> at_seed, at_sub_seed;
  at->add_option("--scenario", at_scenario,
                 "under-train | model-substitution | backdoor-poison | serve-wrong-model | "
                 "fabricate-output | activation-perturbation | parameter-poison")
      ->required();
  at->add_option("--from", at_from, "Honest run whose configuration is replayed")->required();
  at->add_option("--out", at_out, "Run directory for the tampered run")->required();
  at->add_option("--steps", at_steps, "Affected steps or requests, e.g. 8-15 or 1,3");
  at->add_option("--at-boundary", at_at, "Step-block boundary for substitution / parameter poison");
  at->add_option("--layer", at_layer, "Layer to tamper with (parameter poison, serve-wrong-model)");
  at->add_option("--boundary", at_boundary, "Layer-block boundary for activation perturbation");
  at->add_option("--budget", at_budget, "Relative L2 of injected perturbations");
  at->add_option("--target", at_target, "Target label (backdoor, fabricated output)");
  at->add_option("--trigger-offset", at_offset, "Backdoor trigger offset");
  at->add_option("--trigger-samples", at_trigger_samples, "Poisoned samples per batch");
  at->add_option("--seed", at_seed, "Scenario seed");
  at->add_option("--substitute-seed", at_sub_seed, "Seed of the substituted model");
  at->callback([&] {
    auto src = open_run(at_from);
    const auto& m = src.ledger.manifest();
    ScenarioKind kind;
    try {
      kind = scenario_kind_from_string(at_scenario);
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
    if (scenario_mode(kind) != m.mode) {
      throw UsageError(at_scenario + " needs a " + to_string(scenario_mode(kind)) + " run");
    }
    auto s = default_scenario(kind, src.ledger.grid(), m.layer_has_params());
    if (!at_steps.empty()) s.steps = parse_list(at_steps);
    if (at_at) s.at_boundary = *at_at;
    if (at_layer) s.layer = *at_layer;
    if (at_boundary) s.boundary = *at_boundary;
    if (at_budget) s.budget = *at_budget;
    if (at_target) s.target_label = *at_target;
    if (at_offset) s.trigger_offset = *at_offset;
    if (at_trigger_samples) s.trigger_samples = *at_trigger_samples;
    if (at_seed) s.seed = *at_seed;
    if (at_sub_seed) s.substitute_seed = *at_sub_seed;
    try {
      s.validate(src.ledger.grid());
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
    const auto out = run_path(at_out);
    TamperedRun tampered = [&] {
      if (m.mode == RunMode::training) return apply_scenario(m, s, RecordOptions{out});
      if (m.grid.precision == Precision::f64) {
        return apply_inference_scenario<double>(m, committed_model<double>(src.ledger, src.store), s, {out});
      }
      return apply_inference_scenario<float>(m, committed_model<float>(src.ledger, src.store), s, {out});
    }();
    std::vector<std::string> ids;
    for (const auto& id : tampered.compromised) ids.push_back(to_string(id));
    const auto plan = documented_plan(tampered.ledger.grid(), s, 1, 0);
    nlohmann::json j{{"scenario", s.to_json()},
                     {"compromised", ids},
                     {"documented_strategy", to_string(plan.strategy)},
                     {"ledger_digest", tampered.ledger.ledger_digest().hex()}};
    std::ostringstream t;
    t << "applied " << to_string(kind) << " to a copy of " << src.root.string() << "\n"
      << ids.size() << " compromised block(s):";
    for (const auto& id : ids) t << " " << id;
    t << "\ndocumented audit strategy: " << to_string(plan.strategy) << "\n";
    write_report(out, "scenario", j, t.str());
    std::cout << t.str();
    result = kPass;
  });

  // attack-stats
  auto* as = app.add_subcommand("attack-stats", "Minimal successful perturbations on the toy classifier");
  std::string as_precision = "f32", as_json, as_bls = "1,2,4";
  std::size_t as_train = 600;
  std::uint64_t as_seed = 3;
  bool as_targeted = false;
  AttackConfig as_cfg;
  as->add_option("--precision", as_precision, "f32 or f64")->capture_default_str();
  as->add_option("--train-steps", as_train, "Training steps for the toy classifier")->capture_default_str();
  as->add_option("--seed", as_seed, "Toy classifier seed")->capture_default_str();
  as->add_option("--layer-blocks", as_bls, "B_L values to compare")->capture_default_str();
  as->add_option("--pgd-steps", as_cfg.steps, "PGD iterations per radius")->capture_default_str();
  as->add_option("--step-size", as_cfg.step_size, "PGD step as a fraction of the radius")->capture_default_str();
  as->add_option("--max-relative", as_cfg.max_relative, "Largest relative radius tried")->capture_default_str();
  as->add_option("--bisections", as_cfg.bisections, "Radius bisection steps")->capture_default_str();
  as->add_flag("--targeted", as_targeted, "Targeted instead of untargeted activation attack");
  as->add_option("--json", as_json, "Write the statistics as JSON");
  as->callback([&] {
    const auto bls = parse_list(as_bls);
    result = precision_from_string(as_precision) == Precision::f64
                 ? attack_stats<double>(as_train, as_seed, bls, as_cfg, as_targeted, as_json)
                 : attack_stats<float>(as_train, as_seed, bls, as_cfg, as_targeted, as_json);
  });

  // bench-hash
  auto* bh = app.add_subcommand("bench-hash", "Time chunked hashing over sizes, chunk sizes, algorithms, workers");
  std::string bh_sizes = "1048576,4194304", bh_chunks = "1024,2048,3072,4096,5120,6144,7168,8192,9216,10240",
              bh_workers = "1,2,4,8", bh_csv;
  std::vector<std::string> bh_algos{"blake3", "sha256"};
  std::size_t bh_repeats = 3;
  bh->add_option("--sizes", bh_sizes, "Tensor sizes in elements")->capture_default_str();
  bh->add_option("--chunks", bh_chunks, "Chunk sizes in elements")->capture_default_str();
  bh->add_option("--algos", bh_algos, "Hash algorithms")->capture_default_str();
  bh->add_option("--workers", bh_workers, "Worker counts")->capture_default_str();
  bh->add_option("--repeats", bh_repeats, "Timed repeats per cell (median reported)")->capture_default_str();
  bh->add_option("--csv", bh_csv, "Write the table as CSV");
  bh->callback([&] {
    result = bench_hash(parse_list(bh_sizes), parse_list(bh_chunks), bh_algos, parse_list(bh_workers), bh_repeats,
                        bh_csv);
  });

  // prune
  auto* pr = app.add_subcommand("prune", "Release evidence of verified blocks no other block needs");
  std::string pr_run;
  std::vector<std::string> pr_verified, pr_requested;
  pr->add_option("--run", pr_run, "Run directory")->required();
  pr->add_option("--verified", pr_verified, "Verified block ids")->required();
  pr->add_option("--requested", pr_requested, "Blocks still to be verified (kept)");
  pr->callback([&] {
    auto run = open_run(pr_run);
    const auto verified = parse_blocks(pr_verified, run.ledger.grid());
    const auto requested = parse_blocks(pr_requested, run.ledger.grid());
    const auto before = run.store.logical_bytes();
    try {
      prune_after_verification(run.store, run.ledger, {verified.begin(), verified.end()},
                               {requested.begin(), requested.end()});
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
    std::cout << "evidence " << human_bytes(before) << " -> " << human_bytes(run.store.logical_bytes()) << "\n";
    result = kPass;
  });

  // verifier-serve: the isolated verifier side, fed by `verify`
  auto* vs = app.add_subcommand("verifier-serve", "");
  vs->group("");  // hidden
  std::uint64_t vs_budget = 256ull << 20;
  vs->add_option("--memory-budget", vs_budget);
  vs->callback([&] { result = serve_verifier(std::cin, std::cout, VerifierConfig{vs_budget}); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kPass : kUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOperational;
  }
  return result;
}
