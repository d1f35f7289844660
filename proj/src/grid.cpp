#include "aftune/grid.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace aftune {

std::string to_string(RunMode mode) {
  return mode == RunMode::training ? "training" : "inference";
}

void GridConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("grid: " + msg); };
  if (layers < 1) fail("L must be at least 1");
  if (steps < 1) fail("T must be at least 1");
  if (layer_block < 1 || layer_block > layers) fail("B_L must be in [1, L]");
  if (step_block < 1 || step_block > steps) fail("B_S must be in [1, T]");
  if (checkpoint_interval && *checkpoint_interval < 1) fail("I_C must be >= 1 or infinite");
  if (activation_interval < 1) fail("I_A must be >= 1");
  if (chunk_size < 1) fail("chunk size must be >= 1");
  if (!(tolerance > 0.0)) fail("tolerance must be positive");
  if (zero_storage && checkpoint_interval) fail("zero-storage mode requires I_C = inf");
  std::set<std::size_t> seen;
  for (std::size_t l : isolated_layers) {
    if (l >= layers) fail("isolated layer " + std::to_string(l) + " out of range");
    if (!seen.insert(l).second) fail("isolated layer " + std::to_string(l) + " listed twice");
  }
}

double default_tolerance(Precision p) { return p == Precision::f64 ? 1e-12 : 1e-5; }

std::string to_string(BlockId id) {
  return std::to_string(id.i) + "," + std::to_string(id.j);
}

BlockId parse_block_id(const std::string& text) {
  std::istringstream in(text);
  long long i = -1, j = -1;
  char comma = 0;
  if (!(in >> i >> comma >> j) || comma != ',' || i < 0 || j < 0 || !(in >> std::ws).eof()) {
    throw ConfigError("block id must look like 'i,j', got '" + text + "'");
  }
  return {static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j)};
}

std::string to_string(BoundaryKind kind) {
  switch (kind) {
    case BoundaryKind::activation: return "act";
    case BoundaryKind::gradient: return "grad";
    case BoundaryKind::parameter: return "param";
    case BoundaryKind::optimizer: return "opt";
  }
  return "?";
}

std::string to_string(const BoundaryKey& key) {
  const char* idx = key.kind == BoundaryKind::activation || key.kind == BoundaryKind::gradient
                        ? "/b"
                        : "/l";
  return to_string(key.kind) + idx + std::to_string(key.index) + "/t" + std::to_string(key.step);
}

std::string to_string(Anchor a) {
  switch (a) {
    case Anchor::client_input: return "client-input";
    case Anchor::labels: return "labels";
    case Anchor::base_model: return "base-model";
  }
  return "?";
}

BlockGrid BlockGrid::partition(const GridConfig& config) {
  config.validate();
  BlockGrid g;
  g.config_ = config;
  const std::set<std::size_t> iso(config.isolated_layers.begin(), config.isolated_layers.end());
  std::size_t start = 0;
  bool open = false;
  for (std::size_t l = 0; l < config.layers; ++l) {
    if (iso.count(l)) {
      if (open) {
        g.layer_blocks_.push_back({start, l - 1});
        g.isolated_.push_back(false);
        open = false;
      }
      g.layer_blocks_.push_back({l, l});
      g.isolated_.push_back(true);
      continue;
    }
    if (!open) {
      start = l;
      open = true;
    }
    if (l - start + 1 == config.layer_block) {
      g.layer_blocks_.push_back({start, l});
      g.isolated_.push_back(false);
      open = false;
    }
  }
  if (open) {
    g.layer_blocks_.push_back({start, config.layers - 1});
    g.isolated_.push_back(false);
  }
  for (std::size_t t = 0; t < config.steps; t += config.step_block) {
    g.step_blocks_.push_back({t, std::min(t + config.step_block, config.steps) - 1});
  }
  return g;
}

std::vector<BlockId> BlockGrid::blocks() const {
  std::vector<BlockId> out;
  out.reserve(num_blocks());
  for (std::size_t j = 0; j < num_step_blocks(); ++j) {
    for (std::size_t i = 0; i < num_layer_blocks(); ++i) {
      out.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j)});
    }
  }
  return out;
}

BlockId BlockGrid::locate(std::size_t layer, std::size_t step) const {
  if (layer >= config_.layers || step >= config_.steps) {
    throw ConfigError("(layer " + std::to_string(layer) + ", step " + std::to_string(step) +
                      ") is outside the grid");
  }
  BlockId id;
  for (std::size_t i = 0; i < layer_blocks_.size(); ++i) {
    if (layer_blocks_[i].contains(layer)) id.i = static_cast<std::uint32_t>(i);
  }
  id.j = static_cast<std::uint32_t>(step / config_.step_block);
  return id;
}

std::size_t BlockGrid::boundary_step(std::size_t j) const {
  if (j > num_step_blocks()) throw ConfigError("step-block boundary out of range");
  return j == num_step_blocks() ? config_.steps : step_blocks_[j].first;
}

std::size_t BlockGrid::boundary_layer(std::size_t b) const {
  if (b > num_layer_blocks()) throw ConfigError("layer-block boundary out of range");
  return b == num_layer_blocks() ? config_.layers : layer_blocks_[b].first;
}

bool BlockGrid::isolated(std::size_t i) const { return isolated_.at(i); }

std::optional<std::uint32_t> BlockGrid::checkpoint_interval(std::size_t i) const {
  if (config_.zero_storage) return std::nullopt;
  if (isolated(i)) return 1;
  return config_.checkpoint_interval;
}

bool BlockGrid::checkpoint_stored(std::size_t i, std::size_t j) const {
  if (j > num_step_blocks()) return false;
  const auto ic = checkpoint_interval(i);
  if (!ic) return false;
  return j % *ic == 0 || j == num_step_blocks();
}

std::optional<std::size_t> BlockGrid::prior_checkpoint(std::size_t i, std::size_t j) const {
  for (std::size_t k = j + 1; k-- > 0;) {
    if (checkpoint_stored(i, k)) return k;
  }
  return std::nullopt;
}

std::vector<std::size_t> BlockGrid::recorded_boundaries(RunMode mode) const {
  std::vector<std::size_t> out;
  const std::size_t n = num_layer_blocks();
  for (std::size_t b = 0; b <= n; ++b) {
    if (mode == RunMode::training || b % config_.activation_interval == 0 || b == n) {
      out.push_back(b);
    }
  }
  return out;
}

IndexRange BlockGrid::inference_segment(std::size_t i) const {
  if (i >= num_layer_blocks()) throw ConfigError("layer block out of range");
  const auto rec = recorded_boundaries(RunMode::inference);
  IndexRange seg{0, num_layer_blocks()};
  for (std::size_t b : rec) {
    if (b <= i) seg.first = b;
  }
  for (std::size_t b : rec) {
    if (b >= i + 1) {
      seg.last = b;
      break;
    }
  }
  return seg;
}

namespace {

void check_param_flags(const BlockGrid& grid, const std::vector<bool>& has_params) {
  if (has_params.size() != grid.config().layers) {
    throw ConfigError("parameter flags cover " + std::to_string(has_params.size()) +
                      " layers, grid has " + std::to_string(grid.config().layers));
  }
}

void append_state_keys(const BlockGrid& grid, std::size_t i, std::size_t j, std::size_t step,
                       const std::vector<bool>& has_params, std::vector<ScheduledKey>& out) {
  const bool stored = grid.checkpoint_stored(i, j);
  const auto& lb = grid.layer_block(i);
  for (std::size_t l = lb.first; l <= lb.last; ++l) {
    if (!has_params[l]) continue;
    const auto idx = static_cast<std::uint32_t>(l);
    const auto t = static_cast<std::uint32_t>(step);
    out.push_back({{BoundaryKind::parameter, idx, t}, stored});
    out.push_back({{BoundaryKind::optimizer, idx, t}, stored});
  }
}

}  // namespace

std::vector<StepSchedule> boundary_schedule(const BlockGrid& grid, RunMode mode,
                                            const std::vector<bool>& layer_has_params) {
  check_param_flags(grid, layer_has_params);
  const auto& cfg = grid.config();
  const bool blobs = !cfg.zero_storage;
  const auto bounds = grid.recorded_boundaries(mode);
  std::vector<StepSchedule> out;
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    StepSchedule s;
    s.step = t;
    const auto ts = static_cast<std::uint32_t>(t);
    for (std::size_t b : bounds) {
      s.keys.push_back({{BoundaryKind::activation, static_cast<std::uint32_t>(b), ts}, blobs});
    }
    if (mode == RunMode::training) {
      for (std::size_t b : bounds) {
        s.keys.push_back({{BoundaryKind::gradient, static_cast<std::uint32_t>(b), ts}, blobs});
      }
      if (t % cfg.step_block == 0) {
        const std::size_t j = t / cfg.step_block;
        for (std::size_t i = 0; i < grid.num_layer_blocks(); ++i) {
          append_state_keys(grid, i, j, t, layer_has_params, s.keys);
        }
      }
    }
    out.push_back(std::move(s));
  }
  if (mode == RunMode::training) {
    StepSchedule last;
    last.step = cfg.steps;
    for (std::size_t i = 0; i < grid.num_layer_blocks(); ++i) {
      append_state_keys(grid, i, grid.num_step_blocks(), cfg.steps, layer_has_params, last.keys);
    }
    out.push_back(std::move(last));
  }
  return out;
}

std::vector<BoundaryKey> block_keys(const BlockGrid& grid, BlockId id, RunMode mode,
                                    const std::vector<bool>& layer_has_params) {
  check_param_flags(grid, layer_has_params);
  if (!grid.contains(id)) throw ConfigError("block " + to_string(id) + " is outside the grid");
  std::vector<BoundaryKey> keys;
  const auto& sb = grid.step_block(id.j);
  if (mode == RunMode::inference) {
    const auto seg = grid.inference_segment(id.i);
    for (std::size_t t = sb.first; t <= sb.last; ++t) {
      for (std::size_t b : {seg.first, seg.last}) {
        keys.push_back({BoundaryKind::activation, static_cast<std::uint32_t>(b),
                        static_cast<std::uint32_t>(t)});
      }
    }
    return keys;
  }
  for (std::size_t t = sb.first; t <= sb.last; ++t) {
    for (BoundaryKind kind : {BoundaryKind::activation, BoundaryKind::gradient}) {
      for (std::size_t b : {std::size_t{id.i}, std::size_t{id.i} + 1}) {
        keys.push_back({kind, static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(t)});
      }
    }
  }
  std::vector<ScheduledKey> state;
  append_state_keys(grid, id.i, id.j, grid.boundary_step(id.j), layer_has_params, state);
  append_state_keys(grid, id.i, id.j + 1, grid.boundary_step(id.j + 1), layer_has_params, state);
  for (const auto& s : state) keys.push_back(s.key);
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
  return keys;
}

Neighbors neighbors(BlockId id, const BlockGrid& grid) {
  if (!grid.contains(id)) throw ConfigError("block " + to_string(id) + " is outside the grid");
  Neighbors n;
  n.left = id.i == 0 ? Neighbor{Anchor::client_input} : Neighbor{BlockId{id.i - 1, id.j}};
  n.right = id.i + 1 == grid.num_layer_blocks() ? Neighbor{Anchor::labels}
                                                 : Neighbor{BlockId{id.i + 1, id.j}};
  n.above = id.j == 0 ? Neighbor{Anchor::base_model} : Neighbor{BlockId{id.i, id.j - 1}};
  return n;
}

StorageSizes StorageSizes::uniform(const BlockGrid& grid, std::uint64_t theta,
                                   std::uint64_t state, std::uint64_t activation,
                                   std::uint64_t gradient) {
  if (!grid.config().isolated_layers.empty()) {
    throw ConfigError("uniform storage sizes cannot describe isolated layer blocks");
  }
  StorageSizes s;
  // Every layer block shares one checkpoint schedule, so attributing the whole
  // model to block 0 gives the same total.
  s.checkpoint_bytes.assign(grid.num_layer_blocks(), 0);
  s.checkpoint_bytes[0] = theta + state;
  s.activation_bytes.assign(grid.num_layer_blocks() + 1, activation);
  s.gradient_bytes.assign(grid.num_layer_blocks() + 1, gradient);
  return s;
}

StorageEstimate storage_estimate(const BlockGrid& grid, const StorageSizes& sizes) {
  const std::size_t n = grid.num_layer_blocks();
  if (sizes.checkpoint_bytes.size() != n || sizes.activation_bytes.size() != n + 1 ||
      sizes.gradient_bytes.size() != n + 1) {
    throw ConfigError("storage sizes do not match the grid's layer blocks");
  }
  const auto& cfg = grid.config();
  StorageEstimate est;
  est.checkpoint_counts.assign(n, 0);
  if (cfg.zero_storage) return est;

  std::uint64_t all_ckpt = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= grid.num_step_blocks(); ++j) {
      if (grid.checkpoint_stored(i, j)) ++est.checkpoint_counts[i];
    }
    est.checkpoint_bytes += est.checkpoint_counts[i] * sizes.checkpoint_bytes[i];
    all_ckpt += sizes.checkpoint_bytes[i];
  }
  std::uint64_t per_step = 0;
  for (std::size_t b = 0; b <= n; ++b) per_step += sizes.activation_bytes[b] + sizes.gradient_bytes[b];
  est.boundary_bytes = per_step * cfg.steps;
  est.total = est.checkpoint_bytes + est.boundary_bytes;
  if (cfg.checkpoint_interval) {
    est.continuous_checkpoint_term = static_cast<double>(grid.num_step_blocks()) /
                                     static_cast<double>(*cfg.checkpoint_interval) *
                                     static_cast<double>(all_ckpt);
  }
  return est;
}

}  // namespace aftune
