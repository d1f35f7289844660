#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "aftune/grid.hpp"
#include "aftune/hash.hpp"

namespace aftune {

struct StoreEntry {
  std::string blob;  // blob file name under store/, the hex digest
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
  Digest digest;
  Shape shape;
  Precision precision = Precision::f32;
};

/// Content-addressed blob store with a key index. Blobs live at
/// <root>/store/<hex-digest>; the index is <root>/store/index.json. An empty
/// root keeps everything in memory.
class TensorStore {
 public:
  TensorStore() = default;
  static TensorStore create(const std::filesystem::path& root);
  static TensorStore open(const std::filesystem::path& root);

  bool in_memory() const { return root_.empty(); }
  const std::filesystem::path& root() const { return root_; }

  /// Stores `t` under `key` with the given digest (the tensor's chunked hash).
  void put(const BoundaryKey& key, const AnyTensor& t, const Digest& digest);
  Digest put(const BoundaryKey& key, const AnyTensor& t, std::size_t chunk, HashAlgo algo);

  bool contains(const BoundaryKey& key) const { return index_.count(key) != 0; }
  bool released(const BoundaryKey& key) const { return released_.count(key) != 0; }
  const StoreEntry& entry(const BoundaryKey& key) const;
  std::vector<BoundaryKey> keys() const;
  const std::map<BoundaryKey, StoreEntry>& index() const { return index_; }

  /// Raw little-endian bytes of a key's blob, exactly as stored.
  std::vector<std::uint8_t> raw(const BoundaryKey& key) const;
  AnyTensor get(const BoundaryKey& key) const;
  std::filesystem::path blob_path(const BoundaryKey& key) const;
  /// Overwrites a blob in place (used to simulate storage tampering).
  void overwrite_raw(const BoundaryKey& key, const std::vector<std::uint8_t>& bytes);

  /// Sum of every key's blob length: what the schedule asked to keep.
  std::uint64_t logical_bytes() const;
  /// Bytes of distinct blobs actually held.
  std::uint64_t physical_bytes() const;

  /// Drops every key not in `keep`, deletes unreferenced blobs and remembers the
  /// dropped keys as released.
  void retain_only(const std::set<BoundaryKey>& keep);

  void flush() const;

 private:
  std::filesystem::path root_;
  std::map<BoundaryKey, StoreEntry> index_;
  std::set<BoundaryKey> released_;
  std::map<std::string, std::vector<std::uint8_t>> memory_;
};

std::string key_token(const BoundaryKey& key);
BoundaryKey key_from_token(const std::string& token);

}  // namespace aftune
