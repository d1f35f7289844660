#include <map>
#include <set>

#include "aftune/grid.hpp"
#include "doctest.h"

using namespace aftune;

namespace {

GridConfig cfg(std::size_t L, std::size_t T, std::size_t bl, std::size_t bs,
               std::optional<std::uint32_t> ic = 1) {
  GridConfig c;
  c.layers = L;
  c.steps = T;
  c.layer_block = bl;
  c.step_block = bs;
  c.checkpoint_interval = ic;
  return c;
}

std::vector<bool> all_params(std::size_t L) { return std::vector<bool>(L, true); }

std::size_t count_kind(const StepSchedule& s, BoundaryKind k) {
  std::size_t n = 0;
  for (const auto& e : s.keys) n += e.key.kind == k;
  return n;
}

std::set<std::uint32_t> param_steps(const std::vector<StepSchedule>& sched, bool stored_only) {
  std::set<std::uint32_t> out;
  for (const auto& s : sched) {
    for (const auto& e : s.keys) {
      if (e.key.kind == BoundaryKind::parameter && (!stored_only || e.stored)) out.insert(e.key.step);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("layer and step partitions, including ragged tails") {
  auto g = BlockGrid::partition(cfg(8, 4, 4, 1));
  CHECK(g.layer_blocks() == std::vector<IndexRange>{{0, 3}, {4, 7}});

  auto h = BlockGrid::partition(cfg(10, 20, 4, 8));
  CHECK(h.layer_blocks() == std::vector<IndexRange>{{0, 3}, {4, 7}, {8, 9}});
  CHECK(h.step_blocks() == std::vector<IndexRange>{{0, 7}, {8, 15}, {16, 19}});
  CHECK(h.num_blocks() == 9);
  CHECK(h.blocks().front() == BlockId{0, 0});
  CHECK(h.blocks()[1] == BlockId{1, 0});
}

TEST_CASE("every (layer, step) cell belongs to exactly one block") {
  for (auto c : {cfg(10, 20, 4, 8), cfg(7, 9, 3, 2), cfg(5, 5, 5, 5), cfg(6, 11, 1, 4)}) {
    auto g = BlockGrid::partition(c);
    std::map<BlockId, std::size_t> cells;
    for (std::size_t l = 0; l < c.layers; ++l) {
      for (std::size_t t = 0; t < c.steps; ++t) {
        const auto id = g.locate(l, t);
        CHECK(g.layer_block(id.i).contains(l));
        CHECK(g.step_block(id.j).contains(t));
        std::size_t owners = 0;
        for (const auto& b : g.blocks()) owners += g.layer_block(b.i).contains(l) && g.step_block(b.j).contains(t);
        CHECK(owners == 1);
        ++cells[id];
      }
    }
    CHECK(cells.size() == g.num_blocks());
  }
}

TEST_CASE("invalid grid configs are rejected") {
  CHECK_THROWS_AS(BlockGrid::partition(cfg(8, 4, 0, 1)), ConfigError);
  CHECK_THROWS_AS(BlockGrid::partition(cfg(8, 4, 9, 1)), ConfigError);
  CHECK_THROWS_AS(BlockGrid::partition(cfg(8, 4, 2, 5)), ConfigError);
  CHECK_THROWS_AS(BlockGrid::partition(cfg(8, 4, 2, 1, 0)), ConfigError);
  auto c = cfg(8, 4, 2, 1);
  c.chunk_size = 0;
  CHECK_THROWS_AS(BlockGrid::partition(c), ConfigError);
  c = cfg(8, 4, 2, 1);
  c.tolerance = 0;
  CHECK_THROWS_AS(BlockGrid::partition(c), ConfigError);
  c = cfg(8, 4, 2, 1);
  c.activation_interval = 0;
  CHECK_THROWS_AS(BlockGrid::partition(c), ConfigError);
}

TEST_CASE("one activation key per boundary per step, shared across neighbors") {
  auto g = BlockGrid::partition(cfg(8, 2, 4, 1));
  const auto sched = boundary_schedule(g, RunMode::training, all_params(8));
  CHECK(count_kind(sched[0], BoundaryKind::activation) == 3);
  CHECK(count_kind(sched[0], BoundaryKind::gradient) == 3);

  for (auto c : {cfg(10, 6, 4, 2), cfg(9, 4, 2, 3), cfg(12, 3, 1, 1)}) {
    auto grid = BlockGrid::partition(c);
    const auto n = grid.num_layer_blocks();
    for (const auto& s : boundary_schedule(grid, RunMode::training, all_params(c.layers))) {
      if (s.step == c.steps) continue;
      CHECK(count_kind(s, BoundaryKind::activation) == n + 1);
    }
    // output boundary of LB_i is the input boundary of LB_{i+1}
    for (std::uint32_t i = 0; i + 1 < n; ++i) {
      const auto left = block_keys(grid, {i, 0}, RunMode::training, all_params(c.layers));
      const auto right = block_keys(grid, {i + 1, 0}, RunMode::training, all_params(c.layers));
      const BoundaryKey shared{BoundaryKind::activation, i + 1, 0};
      CHECK(std::count(left.begin(), left.end(), shared) == 1);
      CHECK(std::count(right.begin(), right.end(), shared) == 1);
    }
  }
}

TEST_CASE("checkpoints follow j mod I_C plus the final state") {
  auto g = BlockGrid::partition(cfg(4, 12, 2, 2, 4));
  const auto sched = boundary_schedule(g, RunMode::training, all_params(4));
  // step blocks j = 0..5; stored at j = 0, 4 and the exit boundary j = 6
  CHECK(param_steps(sched, true) == std::set<std::uint32_t>{0, 8, 12});
  // every step-block boundary is still committed by hash
  CHECK(param_steps(sched, false) == std::set<std::uint32_t>{0, 2, 4, 6, 8, 10, 12});
  CHECK(g.prior_checkpoint(0, 3) == 0u);
  CHECK(g.prior_checkpoint(0, 5) == 4u);

  auto never = BlockGrid::partition(cfg(4, 12, 2, 2, std::nullopt));
  CHECK(param_steps(boundary_schedule(never, RunMode::training, all_params(4)), true).empty());
}

TEST_CASE("parameterless layers get no state keys") {
  auto g = BlockGrid::partition(cfg(4, 2, 2, 1));
  const std::vector<bool> has{true, false, true, false};
  for (const auto& s : boundary_schedule(g, RunMode::training, has)) {
    for (const auto& e : s.keys) {
      if (e.key.kind == BoundaryKind::parameter || e.key.kind == BoundaryKind::optimizer) CHECK(has[e.key.index]);
    }
  }
  CHECK_THROWS_AS(boundary_schedule(g, RunMode::training, {true}), ConfigError);
}

TEST_CASE("inference records every I_A-th boundary plus input and output") {
  auto c = cfg(8, 3, 1, 1);
  c.activation_interval = 4;
  auto g = BlockGrid::partition(c);
  CHECK(g.recorded_boundaries(RunMode::inference) == std::vector<std::size_t>{0, 4, 8});
  const auto sched = boundary_schedule(g, RunMode::inference, all_params(8));
  REQUIRE(sched.size() == 3);
  for (const auto& s : sched) {
    CHECK(s.keys.size() == 3);
    CHECK(count_kind(s, BoundaryKind::gradient) == 0);
    CHECK(count_kind(s, BoundaryKind::parameter) == 0);
  }
  CHECK(g.inference_segment(5) == IndexRange{4, 8});
  CHECK(g.inference_segment(0) == IndexRange{0, 4});

  c.activation_interval = 1;
  auto dense = BlockGrid::partition(c);
  CHECK(dense.recorded_boundaries(RunMode::inference).size() == 9);
  // training ignores I_A
  c.activation_interval = 4;
  CHECK(BlockGrid::partition(c).recorded_boundaries(RunMode::training).size() == 9);
}

TEST_CASE("neighbors and trust anchors") {
  auto g = BlockGrid::partition(cfg(5, 5, 1, 1));
  auto n = neighbors({2, 3}, g);
  CHECK(std::get<BlockId>(n.left) == BlockId{1, 3});
  CHECK(std::get<BlockId>(n.right) == BlockId{3, 3});
  CHECK(std::get<BlockId>(n.above) == BlockId{2, 2});

  auto corner = neighbors({0, 0}, g);
  CHECK(std::get<Anchor>(corner.left) == Anchor::client_input);
  CHECK(std::get<Anchor>(corner.above) == Anchor::base_model);
  CHECK(std::get<Anchor>(neighbors({4, 2}, g).right) == Anchor::labels);
  CHECK_THROWS_AS(neighbors({5, 0}, g), ConfigError);
}

TEST_CASE("storage estimate structure") {
  auto est = [](std::optional<std::uint32_t> ic) {
    auto g = BlockGrid::partition(cfg(8, 32, 4, 4, ic));
    return storage_estimate(g, StorageSizes::uniform(g, 1000, 2000, 10, 20));
  };
  const auto e1 = est(1), e2 = est(2), e4 = est(4), inf = est(std::nullopt);
  // 8 step blocks: boundaries 0..8 stored with I_C = 1
  CHECK(e1.checkpoint_bytes == 9 * 3000);
  CHECK(e1.boundary_bytes == 3 * 32 * 30);
  CHECK(e2.continuous_checkpoint_term == doctest::Approx(e1.continuous_checkpoint_term / 2));
  CHECK(e4.continuous_checkpoint_term == doctest::Approx(e2.continuous_checkpoint_term / 2));
  CHECK(e2.boundary_bytes == e1.boundary_bytes);
  CHECK(e4.boundary_bytes == e1.boundary_bytes);
  CHECK(e4.checkpoint_bytes == 3 * 3000);  // j = 0, 4, 8
  CHECK(inf.checkpoint_bytes == 0);
  CHECK(inf.continuous_checkpoint_term == 0.0);
  CHECK(inf.total == inf.boundary_bytes);
}

TEST_CASE("block id text round trip") {
  CHECK(parse_block_id("3,7") == BlockId{3, 7});
  CHECK(to_string(BlockId{3, 7}) == "3,7");
  CHECK_THROWS_AS(parse_block_id("3"), ConfigError);
  CHECK_THROWS_AS(parse_block_id("a,b"), ConfigError);
}
