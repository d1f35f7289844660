#include "aftune/dataset.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace aftune;
using namespace aftune::testing;

namespace {

std::size_t stored(const TensorStore& s, BoundaryKind kind) {
  std::size_t n = 0;
  for (const auto& k : s.keys()) n += k.kind == kind;
  return n;
}

std::set<std::uint32_t> stored_param_steps(const TensorStore& s) {
  std::set<std::uint32_t> out;
  for (const auto& k : s.keys()) {
    if (k.kind == BoundaryKind::parameter) out.insert(k.step);
  }
  return out;
}

template <typename Real>
Digest state_digest(const ModelState<Real>& m) {
  std::vector<BasicTensor<Real>> parts;
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    parts.push_back(flatten_params(m.layers[l]));
    parts.push_back(m.opt.layers[l].flatten());
  }
  return chunked_hash(flatten_concat<Real>(parts), 64, HashAlgo::blake3);
}

}  // namespace

TEST_CASE("schedule arithmetic of a recorded run") {
  // L = 8, T = 16, B_L = 4, B_S = 4, I_C = 2
  auto rec = record_training<float>(toy_manifest(3, 16, 4, 4, 2), {});
  CHECK(stored(rec.store, BoundaryKind::activation) == 3 * 16);
  CHECK(stored(rec.store, BoundaryKind::gradient) == 3 * 16);
  CHECK(stored_param_steps(rec.store) == std::set<std::uint32_t>{0, 8, 16});
  CHECK(rec.ledger.complete());
  CHECK(rec.losses.size() == 16);
}

TEST_CASE("recording does not disturb training") {
  for (auto opt : {OptimizerKind::sgd_momentum, OptimizerKind::adamw}) {
    const auto m = toy_manifest(2, 12, 3, 4, 2, opt);
    auto rec = record_training<float>(m, {});

    auto plain = init_model<float>(m.model, m.optimizer);
    const auto data = make_dataset<float>(m.dataset);
    std::vector<double> losses;
    for (std::uint64_t t = 0; t < m.grid.steps; ++t) {
      losses.push_back(train_step(plain, batch_for_step(data, m.data_seed, t, m.batch_size)).loss);
    }
    CHECK(state_digest(rec.final_state) == state_digest(plain));
    CHECK(rec.losses == losses);
    CHECK(rec.final_state.step() == plain.step());
  }
}

TEST_CASE("stored keys equal the schedule and rehash to their digests") {
  for (auto m : {toy_manifest(3, 10, 3, 3, 2), toy_manifest(2, 6, 1, 2, std::nullopt),
                 toy_manifest(2, 8, 2, 4, 1, OptimizerKind::adamw, Precision::f64)}) {
    auto run = [&](auto tag) {
      auto r = record_training<decltype(tag)>(m, {});
      return std::make_pair(std::move(r.ledger), std::move(r.store));
    };
    auto [ledger, rec] = m.grid.precision == Precision::f64 ? run(double{}) : run(float{});
    const auto& grid = ledger.grid();
    std::set<BoundaryKey> expect;
    for (const auto& s : boundary_schedule(grid, RunMode::training, ledger.manifest().layer_has_params())) {
      for (const auto& k : s.keys) {
        if (k.stored) expect.insert(k.key);
      }
    }
    const auto keys = rec.keys();
    CHECK(std::set<BoundaryKey>(keys.begin(), keys.end()) == expect);
    for (const auto& k : keys) {
      CHECK(chunked_hash(rec.get(k), m.grid.chunk_size, m.algo) == rec.entry(k).digest);
    }
  }
}

TEST_CASE("bytes written equal the storage estimate") {
  for (auto m : {toy_manifest(3, 16, 4, 4, 2), toy_manifest(2, 9, 2, 3, 1, OptimizerKind::adamw),
                 toy_manifest(1, 5, 1, 5, std::nullopt)}) {
    auto rec = record_training<float>(m, {});
    const auto est = storage_estimate(rec.ledger.grid(), measured_storage_sizes(rec.ledger.manifest()));
    CHECK(rec.store.logical_bytes() == est.total);
  }
}

TEST_CASE("run directory round trip") {
  TempDir dir("rec");
  const RunPaths paths{dir.path / "run"};
  auto rec = record_training<float>(toy_manifest(2, 4, 2, 2, 1), {paths.root});
  CHECK(std::filesystem::exists(paths.manifest()));
  auto store = TensorStore::open(paths.root);
  CHECK(store.keys() == rec.store.keys());
  for (const auto& k : store.keys()) {
    CHECK(store.raw(k) == rec.store.raw(k));
    CHECK(std::filesystem::exists(store.blob_path(k)));
    CHECK(store.blob_path(k).filename() == store.entry(k).digest.hex());
  }
  // content addressing: equal tensors share one blob
  CHECK(store.physical_bytes() <= store.logical_bytes());
  CHECK_THROWS_AS(record_training<float>(toy_manifest(2, 4, 2, 2, 1), {paths.root}), ConfigError);
}

TEST_CASE("inference recording follows I_A") {
  auto m = toy_manifest(3, 3, 1, 1, 1);  // L = 8, eight layer blocks
  m.mode = RunMode::inference;
  const auto model = init_model<float>(m.model, m.optimizer);
  auto dense = record_inference<float>(m, model, {});
  CHECK(stored(dense.store, BoundaryKind::activation) == 9 * 3);
  CHECK(stored(dense.store, BoundaryKind::gradient) == 0);

  m.grid.activation_interval = 4;
  auto sparse = record_inference<float>(m, model, {});
  std::set<std::uint32_t> bounds;
  for (const auto& k : sparse.store.keys()) {
    if (k.kind == BoundaryKind::activation) bounds.insert(k.index);
  }
  CHECK(bounds == std::set<std::uint32_t>{0, 4, 8});
  for (std::uint32_t r = 0; r < 3; ++r) {
    const auto last = convert<float>(sparse.store.get({BoundaryKind::activation, 8, r}));
    CHECK(last == sparse.outputs[r]);
  }
  // the committed model is bound by its parameter digests
  CHECK(sparse.ledger.manifest().anchors.base_params.size() == m.model.num_layers());
}

TEST_CASE("zero-storage mode keeps only the ledger") {
  auto m = toy_manifest(2, 6, 2, 2, std::nullopt);
  m.grid.zero_storage = true;
  auto rec = record_training<float>(m, {});
  CHECK(rec.store.keys().empty());
  CHECK(rec.ledger.complete());
  CHECK(storage_estimate(rec.ledger.grid(), measured_storage_sizes(rec.ledger.manifest())).total == 0);
}

TEST_CASE("prune after verification") {
  TempDir dir("prune");
  auto rec = record_training<float>(toy_manifest(2, 8, 2, 2, 2), {dir.path / "run"});
  const auto& grid = rec.ledger.grid();
  const auto has = rec.ledger.manifest().layer_has_params();
  std::set<BlockId> others;
  for (const auto& id : grid.blocks()) {
    if (id != BlockId{0, 0}) others.insert(id);
  }
  CHECK_THROWS_AS(prune_after_verification(rec.store, rec.ledger, {{0, 0}}, {{0, 0}}), ConfigError);

  const auto before = rec.store.keys();
  prune_after_verification(rec.store, rec.ledger, others, {{0, 0}});
  const auto closure = evidence_closure(grid, {0, 0}, RunMode::training, has);
  for (const auto& k : rec.store.keys()) CHECK(closure.count(k));
  for (const auto& k : before) {
    if (closure.count(k)) CHECK(rec.store.contains(k));
  }
  CHECK(rec.store.keys().size() < before.size());

  // the ledger is untouched, the requested block still verifies
  auto rep = verify_block(prepare_request(rec.ledger, rec.store, {0, 0}));
  CHECK(rep.passed());
  CHECK_THROWS_AS(prepare_request(rec.ledger, rec.store, {1, 1}), EvidenceReleased);
  // and the pruned state survives a reopen
  auto reopened = TensorStore::open(dir.path / "run");
  CHECK_THROWS_AS(prepare_request(rec.ledger, reopened, {1, 1}), EvidenceReleased);
  CHECK(verify_block(prepare_request(rec.ledger, reopened, {0, 0})).passed());
}
