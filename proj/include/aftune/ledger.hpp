#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aftune/grid.hpp"
#include "aftune/hash.hpp"
#include "aftune/manifest.hpp"

namespace aftune {

/// R_{i,j}: the digests of every boundary tensor one block cell touches.
class CommitmentSet {
 public:
  CommitmentSet() = default;
  explicit CommitmentSet(BlockId id) : id_(id) {}

  BlockId id() const { return id_; }
  bool sealed() const { return sealed_; }
  const std::map<BoundaryKey, Digest>& digests() const { return digests_; }
  std::size_t size() const { return digests_.size(); }

  void add(const BoundaryKey& key, const Digest& digest);
  /// Freezes the set after checking it holds exactly `required`.
  void seal(const std::vector<BoundaryKey>& required);

  bool contains(const BoundaryKey& key) const { return digests_.count(key) != 0; }
  const Digest& at(const BoundaryKey& key) const;

  /// Rebuilds a sealed set read back from a ledger.
  static CommitmentSet sealed_from(BlockId id, std::map<BoundaryKey, Digest> digests);

  bool operator==(const CommitmentSet&) const = default;

 private:
  BlockId id_;
  std::map<BoundaryKey, Digest> digests_;
  bool sealed_ = false;
};

/// Picks the block's keys out of a digest table (shared boundaries are hashed
/// once and referenced by every block that touches them) and seals.
CommitmentSet seal_block(const BlockGrid& grid, BlockId id, RunMode mode,
                         const std::vector<bool>& layer_has_params,
                         const std::map<BoundaryKey, Digest>& digests);

/// Hashes the given tensors and seals; errors list any absent keys.
CommitmentSet seal_block(const BlockGrid& grid, BlockId id, RunMode mode,
                         const std::vector<bool>& layer_has_params,
                         const std::map<BoundaryKey, AnyTensor>& tensors, HashAlgo algo,
                         WorkerPool* pool = nullptr);

/// Append-only ledger of sealed commitment sets behind a run manifest.
///
/// File layout (all integers little-endian):
///   "AFTLEDG1" | u32 schema | u32 n | n bytes canonical manifest JSON
///   then per entry: u32 len | payload
///   payload: u32 i | u32 j | u32 nkeys | nkeys × (u8 kind | u32 index | u32 step |
///            u8 algo | 32-byte digest) | u32 signature length (always 0)
class RunLedger {
 public:
  /// In-memory ledger (nothing is written to disk).
  explicit RunLedger(Manifest manifest);
  /// Creates `path` and writes the header; fails if the file exists.
  static RunLedger create(const std::filesystem::path& path, Manifest manifest);
  static RunLedger load(const std::filesystem::path& path);
  static RunLedger from_bytes(const std::vector<std::uint8_t>& bytes);

  const Manifest& manifest() const { return manifest_; }
  const BlockGrid& grid() const { return grid_; }
  const std::vector<CommitmentSet>& entries() const { return entries_; }
  bool complete() const { return entries_.size() == grid_.num_blocks(); }

  /// Appends a sealed set, enforcing row completeness; fsyncs when file-backed.
  void append(const CommitmentSet& set);

  const CommitmentSet* find(BlockId id) const;
  const CommitmentSet& at(BlockId id) const;

  std::vector<std::uint8_t> to_bytes() const;
  Digest ledger_digest() const;
  nlohmann::json export_json() const;

 private:
  void check_order(BlockId id) const;
  static std::vector<std::uint8_t> encode_entry(const CommitmentSet& set);

  Manifest manifest_;
  BlockGrid grid_;
  std::vector<CommitmentSet> entries_;
  std::map<BlockId, std::size_t> by_id_;
  std::optional<std::filesystem::path> path_;
};

}  // namespace aftune
