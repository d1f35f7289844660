#include <fstream>

#include "aftune/ledger.hpp"
#include "aftune/rng.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace aftune;
using namespace aftune::testing;

namespace {

std::vector<std::uint8_t> text(const std::string& s) { return {s.begin(), s.end()}; }

Tensor random_tensor(CounterRng& rng, std::size_t n) {
  Tensor t({n});
  for (auto& v : t.data) v = static_cast<float>(rng.normal());
  return t;
}

std::vector<std::uint8_t> concat(const std::vector<Digest>& ds) {
  std::vector<std::uint8_t> out;
  for (const auto& d : ds) out.insert(out.end(), d.bytes.begin(), d.bytes.end());
  return out;
}

}  // namespace

TEST_CASE("hash primitives match published vectors") {
  CHECK(hash_bytes(HashAlgo::blake3, {}).hex() == "af1349b9f5f9a1a6a0404dea36dcc9499bcb25c9adc112b7cc9a93cae41f3262");
  CHECK(hash_bytes(HashAlgo::blake3, text("abc")).hex() ==
        "6437b3ac38465133ffb63b75273a8db548c558465d79db03fd359c6cd5bd9d85");
  std::vector<std::uint8_t> ramp(1025);
  for (std::size_t k = 0; k < ramp.size(); ++k) ramp[k] = static_cast<std::uint8_t>(k % 251);
  CHECK(hash_bytes(HashAlgo::blake3, ramp).hex() == "d00278ae47eb27b34faecf67b4fe263f82d5412916c1ffd97c8cb7fb814b8444");
  CHECK(hash_bytes(HashAlgo::sha256, {}).hex() == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(hash_bytes(HashAlgo::sha256, text("abc")).hex() ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");

  for (auto algo : {HashAlgo::blake3, HashAlgo::sha256}) {
    Hasher h(algo);
    h.update(std::span<const std::uint8_t>(ramp).subspan(0, 500));
    h.update(std::span<const std::uint8_t>(ramp).subspan(500));
    CHECK(h.finish() == hash_bytes(algo, ramp));
  }
  const auto d = hash_bytes(HashAlgo::sha256, ramp);
  CHECK(Digest::from_hex(HashAlgo::sha256, d.hex()) == d);
  CHECK_THROWS_AS(Digest::from_hex(HashAlgo::blake3, "abc"), ConfigError);
  CHECK_THROWS_AS(hash_algo_from_string("md5"), ConfigError);
}

TEST_CASE("chunked hash matches an independent reference") {
  // Digests from a separate implementation (Python blake3/hashlib) of the
  // little-endian chunk-then-aggregate rule, C = 4 elements.
  Tensor x({10});
  Tensor64 x64({10});
  for (int k = 0; k < 10; ++k) x[k] = static_cast<float>(x64[k] = k * 0.5 - 1.0);
  CHECK(chunked_hash(x, 4, HashAlgo::blake3).hex() == "cfa51c7256de3fe01b9e875f6c9d4dd8227863b295b10e24f1de9b684bad93cb");
  CHECK(chunked_hash(x, 4, HashAlgo::sha256).hex() == "83ca04a9311afb511468407aaa6b157e577a78f029cb15f7622444363a527ffd");
  CHECK(chunked_hash(x64, 3, HashAlgo::blake3).hex() == "858ab3c012cd1b28fb1635dbaa328b7a5b575c7d3c6de1140cf17b55fe67889a");
}

TEST_CASE("chunk count edge cases") {
  CounterRng rng(1, RngPurpose::test);
  for (auto algo : {HashAlgo::blake3, HashAlgo::sha256}) {
    const auto small = random_tensor(rng, 5);
    const auto bytes = to_le_bytes(small);
    // N <= C: one chunk, H(H(bytes))
    const auto inner = hash_bytes(algo, bytes);
    CHECK(chunked_hash(small, 5, algo) == hash_bytes(algo, concat({inner})));
    CHECK(chunked_hash(small, 4096, algo) == hash_bytes(algo, concat({inner})));

    // N = 2C + 1: three chunks, the last holding one element
    const auto t = random_tensor(rng, 9);
    const auto b = to_le_bytes(t);
    std::span<const std::uint8_t> s(b);
    const auto expect = hash_bytes(algo, concat({hash_bytes(algo, s.subspan(0, 16)), hash_bytes(algo, s.subspan(16, 16)),
                                                 hash_bytes(algo, s.subspan(32, 4))}));
    CHECK(chunked_hash(t, 4, algo) == expect);

    CHECK(chunked_hash(Tensor({0}), 4, algo) == hash_bytes(algo, {}));
  }
}

TEST_CASE("swapping elements across chunks changes the digest") {
  CounterRng rng(2, RngPurpose::test);
  for (int n = 0; n < 1000; ++n) {
    const std::size_t c = 1 + rng.below(16);
    auto t = random_tensor(rng, c + 1 + rng.below(4 * c));
    const auto before = chunked_hash(t, c, HashAlgo::blake3);
    const std::size_t a = rng.below(c);
    const std::size_t b = c + rng.below(t.size() - c);
    if (t[a] == t[b]) continue;
    std::swap(t[a], t[b]);
    CHECK(chunked_hash(t, c, HashAlgo::blake3) != before);
  }
}

TEST_CASE("single bit flips always change the digest") {
  CounterRng rng(3, RngPurpose::test);
  for (int n = 0; n < 300; ++n) {
    const auto t = random_tensor(rng, 1 + rng.below(200));
    auto bytes = to_le_bytes(t);
    const std::size_t c = 1 + rng.below(64);
    const auto before = chunked_hash(bytes, 4, c, HashAlgo::blake3);
    const std::size_t bit = rng.below(bytes.size() * 8);
    bytes[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
    CHECK(chunked_hash(bytes, 4, c, HashAlgo::blake3) != before);
  }
}

TEST_CASE("worker pool runs every index once and the digest ignores scheduling") {
  WorkerPool pool(4);
  std::vector<std::atomic<int>> hits(1000);
  pool.parallel_for(hits.size(), [&](std::size_t k) { hits[k]++; });
  for (auto& h : hits) CHECK(h.load() == 1);

  CounterRng rng(4, RngPurpose::test);
  const auto t = random_tensor(rng, 12345);
  const auto one = chunked_hash(t, 100, HashAlgo::sha256);
  for (std::size_t w : {2, 3, 8}) {
    WorkerPool p(w);
    CHECK(chunked_hash(t, 100, HashAlgo::sha256, &p) == one);
  }
}

TEST_CASE("sealed sets: self-consistency, dedup, contract") {
  auto rec = record_training<float>(toy_manifest(2, 4, 2, 2, 1), {});
  const auto& grid = rec.ledger.grid();
  const auto& m = rec.ledger.manifest();
  for (const auto& key : rec.store.keys()) {
    CHECK(chunked_hash(rec.store.get(key), m.grid.chunk_size, m.algo) == rec.digests.at(key));
  }
  for (const auto& set : rec.ledger.entries()) {
    CHECK(set.sealed());
    for (const auto& [key, d] : set.digests()) CHECK(rec.digests.at(key) == d);
  }
  // boundary 1 at step 0 is shared by blocks (0,0) and (1,0)
  const BoundaryKey shared{BoundaryKind::activation, 1, 0};
  CHECK(rec.ledger.at({0, 0}).at(shared) == rec.ledger.at({1, 0}).at(shared));

  auto set = seal_block(grid, {0, 0}, RunMode::training, m.layer_has_params(), rec.digests);
  CHECK(set == rec.ledger.at({0, 0}));
  CHECK_THROWS_AS(set.seal(block_keys(grid, {0, 0}, RunMode::training, m.layer_has_params())), LedgerError);
  CHECK_THROWS_AS(set.add({BoundaryKind::activation, 9, 9}, Digest{}), LedgerError);

  auto partial = rec.digests;
  partial.erase(shared);
  try {
    seal_block(grid, {0, 0}, RunMode::training, m.layer_has_params(), partial);
    FAIL("expected missing-boundary error");
  } catch (const LedgerError& e) {
    CHECK(std::string(e.what()).find(to_string(shared)) != std::string::npos);
  }
}

TEST_CASE("ledger row order, digest sensitivity and reload") {
  TempDir dir("ledger");
  RecordOptions opts{dir.path / "run"};
  auto rec = record_training<float>(toy_manifest(1, 4, 2, 2, 1), opts);
  REQUIRE(rec.ledger.grid().num_layer_blocks() == 2);
  REQUIRE(rec.ledger.grid().num_step_blocks() == 2);
  const auto& m = rec.ledger.manifest();

  RunLedger ok(m);
  ok.append(rec.ledger.at({0, 0}));
  ok.append(rec.ledger.at({1, 0}));
  ok.append(rec.ledger.at({0, 1}));
  CHECK(!ok.complete());
  CHECK_THROWS_AS(ok.append(rec.ledger.at({0, 1})), LedgerError);
  ok.append(rec.ledger.at({1, 1}));
  CHECK(ok.complete());
  CHECK(ok.ledger_digest() == rec.ledger.ledger_digest());

  RunLedger bad(m);
  bad.append(rec.ledger.at({0, 0}));
  CHECK_THROWS_AS(bad.append(rec.ledger.at({0, 1})), LedgerError);
  CommitmentSet open({1, 0});
  CHECK_THROWS_AS(bad.append(open), LedgerError);

  // flip one bit of one digest: the ledger digest must change
  auto digests = rec.ledger.at({1, 1}).digests();
  digests.begin()->second.bytes[7] ^= 0x01;
  RunLedger flipped(m);
  for (const auto& e : rec.ledger.entries()) {
    flipped.append(e.id() == BlockId{1, 1} ? CommitmentSet::sealed_from({1, 1}, digests) : e);
  }
  CHECK(flipped.ledger_digest() != rec.ledger.ledger_digest());

  // reload from disk is byte-identical; bytes round-trip too
  auto loaded = RunLedger::load(RunPaths{opts.run_dir}.ledger());
  CHECK(loaded.to_bytes() == rec.ledger.to_bytes());
  CHECK(RunLedger::from_bytes(loaded.to_bytes()).to_bytes() == loaded.to_bytes());
  CHECK(loaded.manifest() == m);
  CHECK_THROWS_AS(RunLedger::create(RunPaths{opts.run_dir}.ledger(), m), LedgerError);

  auto raw = loaded.to_bytes();
  raw[0] = 'X';
  CHECK_THROWS_AS(RunLedger::from_bytes(raw), LedgerError);
  raw = loaded.to_bytes();
  raw.resize(raw.size() - 3);
  CHECK_THROWS_AS(RunLedger::from_bytes(raw), LedgerError);

  const auto exported = loaded.export_json();
  CHECK(exported.dump().find(rec.ledger.at({0, 0}).digests().begin()->second.hex()) != std::string::npos);
}
