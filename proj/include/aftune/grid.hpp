#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "aftune/tensor.hpp"

namespace aftune {

enum class RunMode : std::uint8_t { training, inference };

std::string to_string(RunMode mode);

/// Block-structure parameters of a run.
struct GridConfig {
  std::size_t layers = 1;       // L
  std::size_t steps = 1;        // T
  std::size_t layer_block = 1;  // B_L
  std::size_t step_block = 1;   // B_S
  /// I_C in step blocks; nullopt means no checkpoints at all (I_C = ∞).
  std::optional<std::uint32_t> checkpoint_interval = 1;
  /// I_A in layer blocks; inference only, training always records every edge.
  std::uint32_t activation_interval = 1;
  std::size_t chunk_size = 4096;  // C, in elements
  double tolerance = 1e-5;        // τ
  Precision precision = Precision::f32;
  /// Layers placed in their own layer block, checkpointed every step block.
  std::vector<std::size_t> isolated_layers;
  /// Ledger only: no checkpoints and no boundary blobs.
  bool zero_storage = false;

  void validate() const;
  bool operator==(const GridConfig&) const = default;
};

/// Default τ for a replay precision.
double default_tolerance(Precision p);

struct BlockId {
  std::uint32_t i = 0;  // layer block
  std::uint32_t j = 0;  // step block
  auto operator<=>(const BlockId&) const = default;
};

std::string to_string(BlockId id);
BlockId parse_block_id(const std::string& text);

/// Inclusive index range.
struct IndexRange {
  std::size_t first = 0;
  std::size_t last = 0;
  std::size_t size() const { return last - first + 1; }
  bool contains(std::size_t k) const { return k >= first && k <= last; }
  bool operator==(const IndexRange&) const = default;
};

enum class BoundaryKind : std::uint8_t { activation = 0, gradient = 1, parameter = 2, optimizer = 3 };

std::string to_string(BoundaryKind kind);

/// Names one recordable tensor. Activation/gradient keys are indexed by layer-block
/// boundary b in [0, ⌈L/B_L⌉]; parameter/optimizer keys by layer l. Adjacent blocks
/// sharing a boundary use the same key.
struct BoundaryKey {
  BoundaryKind kind = BoundaryKind::activation;
  std::uint32_t index = 0;
  std::uint32_t step = 0;
  auto operator<=>(const BoundaryKey&) const = default;
};

std::string to_string(const BoundaryKey& key);

struct ScheduledKey {
  BoundaryKey key;
  bool stored = true;  // false: committed by hash only
};

struct StepSchedule {
  std::size_t step = 0;
  std::vector<ScheduledKey> keys;
};

enum class Anchor : std::uint8_t { client_input, labels, base_model };

std::string to_string(Anchor a);

using Neighbor = std::variant<BlockId, Anchor>;

struct Neighbors {
  Neighbor left;   // B(i-1, j): supplies inputs
  Neighbor right;  // B(i+1, j): supplies gradients
  Neighbor above;  // B(i, j-1): supplies parameters
};

class BlockGrid {
 public:
  static BlockGrid partition(const GridConfig& config);

  const GridConfig& config() const { return config_; }
  std::size_t num_layer_blocks() const { return layer_blocks_.size(); }
  std::size_t num_step_blocks() const { return step_blocks_.size(); }
  std::size_t num_blocks() const { return num_layer_blocks() * num_step_blocks(); }
  const std::vector<IndexRange>& layer_blocks() const { return layer_blocks_; }
  const std::vector<IndexRange>& step_blocks() const { return step_blocks_; }
  const IndexRange& layer_block(std::size_t i) const { return layer_blocks_.at(i); }
  const IndexRange& step_block(std::size_t j) const { return step_blocks_.at(j); }
  bool contains(BlockId id) const {
    return id.i < num_layer_blocks() && id.j < num_step_blocks();
  }

  /// All block ids, row by row (every layer block of step block 0 first).
  std::vector<BlockId> blocks() const;
  BlockId locate(std::size_t layer, std::size_t step) const;

  /// Step at step-block boundary j in [0, ⌈T/B_S⌉]; the last one is T.
  std::size_t boundary_step(std::size_t j) const;
  /// Model layer index where boundary b starts; b = ⌈L/B_L⌉ maps to L (model output).
  std::size_t boundary_layer(std::size_t b) const;

  bool isolated(std::size_t i) const;
  /// Checkpoint interval of layer block i (1 for isolated blocks).
  std::optional<std::uint32_t> checkpoint_interval(std::size_t i) const;
  /// Whether θ/s of layer block i are stored at step-block boundary j.
  bool checkpoint_stored(std::size_t i, std::size_t j) const;
  /// Latest boundary j0 <= j with a stored checkpoint for layer block i.
  std::optional<std::size_t> prior_checkpoint(std::size_t i, std::size_t j) const;

  /// Activation boundaries recorded per step.
  std::vector<std::size_t> recorded_boundaries(RunMode mode) const;
  /// Inference: the recorded boundaries [lo, hi] that enclose layer block i.
  IndexRange inference_segment(std::size_t i) const;

 private:
  GridConfig config_;
  std::vector<IndexRange> layer_blocks_;
  std::vector<IndexRange> step_blocks_;
  std::vector<bool> isolated_;
};

/// Per-step keys to record. `layer_has_params[l]` says whether layer l owns
/// parameters (parameterless layers have no θ/s keys). Training entries also
/// cover step T, which carries only the final parameter keys.
std::vector<StepSchedule> boundary_schedule(const BlockGrid& grid, RunMode mode,
                                            const std::vector<bool>& layer_has_params);

/// The keys a block's commitment set must contain.
std::vector<BoundaryKey> block_keys(const BlockGrid& grid, BlockId id, RunMode mode,
                                    const std::vector<bool>& layer_has_params);

Neighbors neighbors(BlockId id, const BlockGrid& grid);

/// Byte sizes for the storage estimate. checkpoint_bytes[i] is |θ| + |s| of layer
/// block i; activation/gradient bytes are per boundary b in [0, ⌈L/B_L⌉].
struct StorageSizes {
  std::vector<std::uint64_t> checkpoint_bytes;
  std::vector<std::uint64_t> activation_bytes;
  std::vector<std::uint64_t> gradient_bytes;

  /// Same-size boundaries and one combined checkpoint size (no isolated layers).
  static StorageSizes uniform(const BlockGrid& grid, std::uint64_t theta, std::uint64_t state,
                              std::uint64_t activation, std::uint64_t gradient);
};

struct StorageEstimate {
  std::uint64_t checkpoint_bytes = 0;
  std::uint64_t boundary_bytes = 0;
  std::uint64_t total = 0;
  std::vector<std::size_t> checkpoint_counts;  // per layer block
  /// The continuous form (⌈T/B_S⌉ / I_C)·(|θ|+|s|), for comparison only.
  double continuous_checkpoint_term = 0.0;
};

StorageEstimate storage_estimate(const BlockGrid& grid, const StorageSizes& sizes);

}  // namespace aftune
