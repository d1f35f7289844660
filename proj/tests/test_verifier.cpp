#include "aftune/isolation.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace aftune;
using namespace aftune::testing;

namespace {

template <typename Real>
Digest param_digest(const Layer<Real>& layer, const Manifest& m) {
  return layer_param_digest(layer, m.grid.chunk_size, m.algo);
}

// Provider that records a scaled copy of one boundary activation with a matching hash.
struct ScaleActivation : RecordingHooks<float> {
  std::size_t step, layer;
  double rel;
  ScaleActivation(std::size_t s, std::size_t l, double r) : step(s), layer(l), rel(r) {}
  void on_trace(std::size_t t, StepTrace<float>& tr) override {
    if (t != step) return;
    for (auto& v : tr.activations[layer].data) v = static_cast<float>(v * (1.0 + rel));
  }
};

}  // namespace

TEST_CASE("honest blocks pass with zero measured error") {
  for (auto m : {toy_manifest(3, 8, 3, 4, 2), toy_manifest(2, 6, 2, 3, 1, OptimizerKind::adamw)}) {
    auto rec = record_training<float>(m, {});
    for (const auto& id : rec.ledger.grid().blocks()) {
      auto rep = verify_block(prepare_request(rec.ledger, rec.store, id));
      INFO(rep.summary());
      CHECK(rep.passed());
      CHECK(rep.max_error <= 1e-6);
      CHECK(!rep.checks.empty());
      for (const auto& c : rep.checks) CHECK(c.relative_error >= 0.0);
    }
  }
}

TEST_CASE("self-consistent activation perturbation is a numerical mismatch") {
  const auto m = toy_manifest(3, 4, 2, 2, 1);  // L = 8, boundary 2 is layer 4
  for (double rel : {1e-4, 1e-3, 1e-2}) {
    ScaleActivation hook(1, 4, rel);
    auto rec = record_training<float>(m, {}, &hook);
    auto rep = verify_block(prepare_request(rec.ledger, rec.store, {1, 0}));
    INFO(rep.summary());
    REQUIRE(rep.cause());
    CHECK(rep.cause()->kind == FailureKind::numerical_mismatch);
    CHECK(rep.cause()->measured > rep.cause()->tolerance);
    // the perturbed step's output is untouched everywhere else
    CHECK(verify_block(prepare_request(rec.ledger, rec.store, {0, 1})).passed());
  }
}

TEST_CASE("replay noise below tolerance passes, above fails") {
  auto rec = record_training<float>(toy_manifest(2, 4, 2, 2, 1), {});
  PrepareOptions quiet;
  quiet.replay_noise = 1e-7;
  quiet.noise_seed = 3;
  auto ok = verify_block(prepare_request(rec.ledger, rec.store, {1, 1}, quiet));
  INFO(ok.summary());
  CHECK(ok.passed());
  CHECK(ok.max_error > 0.0);
  CHECK(ok.max_error <= ok.tolerance);

  PrepareOptions loud = quiet;
  loud.replay_noise = 1e-3;
  auto bad = verify_block(prepare_request(rec.ledger, rec.store, {1, 1}, loud));
  REQUIRE(bad.cause());
  CHECK(bad.cause()->kind == FailureKind::numerical_mismatch);
}

TEST_CASE("binary64 shadow replay of a binary32 run") {
  auto rec = record_training<float>(toy_manifest(2, 4, 2, 2, 1), {});
  PrepareOptions f64;
  f64.replay_precision = Precision::f64;
  for (const auto& id : rec.ledger.grid().blocks()) {
    auto rep = verify_block(prepare_request(rec.ledger, rec.store, id, f64));
    INFO(rep.summary());
    CHECK(rep.passed());
    CHECK(rep.tolerance == doctest::Approx(1e-5));
  }
}

TEST_CASE("full scan reports more than the first failure") {
  auto rec = record_training<float>(toy_manifest(2, 4, 2, 2, 1), {});
  for (std::uint32_t t : {0u, 1u}) {
    const BoundaryKey key{BoundaryKind::gradient, 1, t};
    auto raw = rec.store.raw(key);
    raw[0] ^= 1;
    rec.store.overwrite_raw(key, raw);
  }
  PrepareOptions first, all;
  all.full_scan = true;
  CHECK(verify_block(prepare_request(rec.ledger, rec.store, {0, 0}, first)).failures.size() == 1);
  CHECK(verify_block(prepare_request(rec.ledger, rec.store, {0, 0}, all)).failures.size() >= 2);
}

TEST_CASE("sparse checkpoints reconstruct the dense states bitwise") {
  auto dense = record_training<float>(toy_manifest(2, 16, 2, 2, 1), {});
  for (std::uint32_t ic : {2u, 4u}) {
    auto sparse = record_training<float>(toy_manifest(2, 16, 2, 2, ic), {});
    const auto& m = sparse.ledger.manifest();
    const auto& grid = sparse.ledger.grid();
    for (std::size_t j = 0; j <= grid.num_step_blocks(); ++j) {
      auto a = reconstruct_state<float>(sparse.ledger, sparse.store, j);
      auto b = reconstruct_state<float>(dense.ledger, dense.store, j);
      CHECK(a.step() == grid.boundary_step(j));
      for (std::size_t l = 0; l < a.num_layers(); ++l) {
        CHECK(param_digest(a.layers[l], m) == param_digest(b.layers[l], m));
        CHECK(a.opt.layers[l].flatten() == b.opt.layers[l].flatten());
      }
    }
    for (const auto& id : grid.blocks()) CHECK(verify_block(prepare_request(sparse.ledger, sparse.store, id)).passed());
  }
  // at a checkpoint boundary the stored state comes back unchanged
  auto st = reconstruct_block_state<float>(dense.ledger, dense.store, 0, 3);
  const auto stored = convert<float>(dense.store.get({BoundaryKind::parameter, 0, 6}));
  CHECK(flatten_params(st.layers[0]) == stored);
}

TEST_CASE("non-deterministic layers need isolation") {
  auto m = toy_manifest(3, 8, 2, 2, 4);
  m.model.layers[2].deterministic = false;  // a linear layer in layer block 1

  auto isolated = record_training<float>(m, {});
  CHECK(isolated.ledger.grid().num_layer_blocks() > 4);
  for (const auto& id : isolated.ledger.grid().blocks()) {
    auto rep = verify_block(prepare_request(isolated.ledger, isolated.store, id));
    INFO(rep.summary());
    CHECK(rep.passed());
  }
  CHECK_NOTHROW(reconstruct_state<float>(isolated.ledger, isolated.store, 3));

  RecordOptions no_iso;
  no_iso.auto_isolate = false;
  auto bare = record_training<float>(m, no_iso);
  CHECK_THROWS_AS(prepare_request(bare.ledger, bare.store, {1, 2}), RefusedError);
}

TEST_CASE("zero-storage verification reruns training") {
  auto m = toy_manifest(2, 6, 2, 2, std::nullopt);
  m.grid.zero_storage = true;
  auto rec = record_training<float>(m, {});
  for (const auto& id : rec.ledger.grid().blocks()) CHECK(verify_block(prepare_request(rec.ledger, rec.store, id)).passed());
}

TEST_CASE("inference: substituted layer fails at the next recorded boundary") {
  auto m = toy_manifest(3, 3, 2, 1, 1);  // L = 8, four layer blocks
  m.mode = RunMode::inference;
  const auto model = init_model<float>(m.model, m.optimizer);
  struct Swap : InferenceHooks<float> {
    void before_request(std::size_t, ModelState<float>& served) override {
      for (auto& v : served.layers[2].params[0].value.data) v *= 1.01f;
    }
  } swap;
  for (std::uint32_t ia : {1u, 2u}) {
    m.grid.activation_interval = ia;
    auto rec = record_inference<float>(m, model, {}, &swap);
    auto rep = verify_block(prepare_request(rec.ledger, rec.store, {1, 0}));
    INFO(rep.summary());
    REQUIRE(rep.cause());
    CHECK(rep.cause()->key.kind == BoundaryKind::activation);
    CHECK(rep.cause()->key.index == 2);
    CHECK(verify_block(prepare_request(rec.ledger, rec.store, {3, 0})).passed());
  }
}

TEST_CASE("trust chain") {
  auto rec = record_training<float>(toy_manifest(2, 6, 2, 2, 1), {});
  const auto& grid = rec.ledger.grid();
  const auto blocks = grid.blocks();
  const auto& anchors = rec.ledger.manifest().anchors;
  auto honest = check_trust_chain(rec.ledger, anchors, blocks);
  CHECK(honest.ok());
  CHECK(honest.blocks_checked == blocks.size());
  CHECK(honest.digests_checked > 0);

  auto no_base = anchors;
  for (auto& d : no_base.base_params) d.bytes[0] ^= 0xff;
  auto r = check_trust_chain(rec.ledger, no_base, blocks);
  std::set<BlockId> flagged;
  for (const auto& issue : r.issues) {
    flagged.insert(issue.block);
    CHECK(issue.key.kind == BoundaryKind::parameter);
  }
  std::set<BlockId> row0;
  for (std::uint32_t i = 0; i < grid.num_layer_blocks(); ++i) row0.insert({i, 0});
  CHECK(flagged == row0);

  // rewrite the exit parameter digest of block (0,1) in its sealed entry
  RunLedger forged(rec.ledger.manifest());
  for (const auto& e : rec.ledger.entries()) {
    if (e.id() != BlockId{0, 1}) {
      forged.append(e);
      continue;
    }
    auto ds = e.digests();
    const BoundaryKey exit{BoundaryKind::parameter, 0, static_cast<std::uint32_t>(grid.boundary_step(2))};
    REQUIRE(ds.count(exit));
    ds[exit].bytes[5] ^= 1;
    forged.append(CommitmentSet::sealed_from(e.id(), ds));
  }
  auto f = check_trust_chain(forged, anchors, blocks);
  REQUIRE(!f.ok());
  for (const auto& issue : f.issues) CHECK(issue.block == BlockId{0, 2});
}

TEST_CASE("memory budget refusal and malformed requests") {
  auto rec = record_training<float>(toy_manifest(2, 4, 2, 2, 1), {});
  const auto req = prepare_request(rec.ledger, rec.store, {0, 0});
  VerifierConfig tiny;
  tiny.memory_budget = req.payload_bytes() - 1;
  auto rep = verify_block(req, tiny);
  CHECK(rep.verdict == Verdict::refused);
  CHECK(rep.failures.empty());

  auto bytes = req.serialize();
  auto back = VerificationRequest::deserialize(bytes);
  CHECK(back.serialize() == bytes);
  bytes[0] ^= 0xff;
  CHECK_THROWS_AS(VerificationRequest::deserialize(bytes), RefusedError);
  bytes = req.serialize();
  bytes.pop_back();
  CHECK_THROWS_AS(VerificationRequest::deserialize(bytes), RefusedError);

  auto j = verify_block(req).to_json();
  CHECK(VerificationReport::from_json(j).to_json() == j);
}

TEST_CASE("isolated verifier process") {
  auto rec = record_training<float>(toy_manifest(2, 4, 2, 2, 1), {});
  const std::filesystem::path exe = AFTUNE_CLI;
  const auto ok = verify_isolated(prepare_request(rec.ledger, rec.store, {1, 1}), exe);
  CHECK(ok.passed());
  CHECK(ok.id == BlockId{1, 1});

  const BoundaryKey key{BoundaryKind::activation, 1, 2};
  auto raw = rec.store.raw(key);
  raw[2] ^= 4;
  rec.store.overwrite_raw(key, raw);
  const auto bad = verify_isolated(prepare_request(rec.ledger, rec.store, {1, 1}), exe);
  REQUIRE(bad.cause());
  CHECK(bad.cause()->kind == FailureKind::hash_mismatch);

  VerifierConfig tiny;
  tiny.memory_budget = 64;
  CHECK(verify_isolated(prepare_request(rec.ledger, rec.store, {0, 0}), exe, tiny).verdict == Verdict::refused);
}
