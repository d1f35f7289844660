#include "aftune/ledger.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>
#include <set>

#include "aftune/wire.hpp"

namespace aftune {

namespace {

constexpr char kMagic[8] = {'A', 'F', 'T', 'L', 'E', 'D', 'G', '1'};

std::string key_list(const std::vector<BoundaryKey>& keys) {
  std::string s;
  for (std::size_t k = 0; k < keys.size(); ++k) {
    if (k) s += ", ";
    if (k == 8) {
      s += "... (" + std::to_string(keys.size() - 8) + " more)";
      break;
    }
    s += to_string(keys[k]);
  }
  return s;
}

/// Appends bytes and forces them to stable storage before returning.
void append_durable(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes,
                    bool create) {
  const int flags = O_WRONLY | O_APPEND | O_CLOEXEC | (create ? O_CREAT | O_EXCL : 0);
  const int fd = ::open(path.c_str(), flags, 0644);
  if (fd < 0) throw LedgerError("cannot open ledger " + path.string() + ": " + std::strerror(errno));
  std::size_t off = 0;
  while (off < bytes.size()) {
    const ssize_t n = ::write(fd, bytes.data() + off, bytes.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      const int e = errno;
      ::close(fd);
      throw LedgerError("ledger write failed: " + std::string(std::strerror(e)));
    }
    off += static_cast<std::size_t>(n);
  }
  if (::fsync(fd) != 0) {
    const int e = errno;
    ::close(fd);
    throw LedgerError("ledger fsync failed: " + std::string(std::strerror(e)));
  }
  ::close(fd);
}

std::vector<std::uint8_t> header_bytes(const Manifest& m) {
  ByteWriter w;
  w.bytes({reinterpret_cast<const std::uint8_t*>(kMagic), 8});
  w.u32(m.schema_version);
  w.str(m.canonical_json());
  return w.take();
}

}  // namespace

void CommitmentSet::add(const BoundaryKey& key, const Digest& digest) {
  if (sealed_) throw LedgerError("commitment set " + to_string(id_) + " is sealed");
  if (!digests_.emplace(key, digest).second) {
    throw LedgerError("key " + to_string(key) + " added twice to block " + to_string(id_));
  }
}

void CommitmentSet::seal(const std::vector<BoundaryKey>& required) {
  if (sealed_) throw LedgerError("commitment set " + to_string(id_) + " is already sealed");
  std::vector<BoundaryKey> missing;
  for (const auto& k : required) {
    if (!digests_.count(k)) missing.push_back(k);
  }
  if (!missing.empty()) {
    throw LedgerError("block " + to_string(id_) + " is missing boundaries: " + key_list(missing));
  }
  const std::set<BoundaryKey> want(required.begin(), required.end());
  std::vector<BoundaryKey> extra;
  for (const auto& [k, d] : digests_) {
    if (!want.count(k)) extra.push_back(k);
  }
  if (!extra.empty()) {
    throw LedgerError("block " + to_string(id_) + " has unscheduled keys: " + key_list(extra));
  }
  sealed_ = true;
}

const Digest& CommitmentSet::at(const BoundaryKey& key) const {
  auto it = digests_.find(key);
  if (it == digests_.end()) {
    throw LedgerError("block " + to_string(id_) + " has no commitment for " + to_string(key));
  }
  return it->second;
}

CommitmentSet CommitmentSet::sealed_from(BlockId id, std::map<BoundaryKey, Digest> digests) {
  CommitmentSet s(id);
  s.digests_ = std::move(digests);
  s.sealed_ = true;
  return s;
}

CommitmentSet seal_block(const BlockGrid& grid, BlockId id, RunMode mode,
                         const std::vector<bool>& layer_has_params,
                         const std::map<BoundaryKey, Digest>& digests) {
  const auto keys = block_keys(grid, id, mode, layer_has_params);
  CommitmentSet set(id);
  std::vector<BoundaryKey> missing;
  for (const auto& k : keys) {
    auto it = digests.find(k);
    if (it == digests.end()) {
      missing.push_back(k);
    } else {
      set.add(k, it->second);
    }
  }
  if (!missing.empty()) {
    throw LedgerError("block " + to_string(id) + " is missing boundaries: " + key_list(missing));
  }
  set.seal(keys);
  return set;
}

CommitmentSet seal_block(const BlockGrid& grid, BlockId id, RunMode mode,
                         const std::vector<bool>& layer_has_params,
                         const std::map<BoundaryKey, AnyTensor>& tensors, HashAlgo algo,
                         WorkerPool* pool) {
  std::map<BoundaryKey, Digest> digests;
  for (const auto& k : block_keys(grid, id, mode, layer_has_params)) {
    auto it = tensors.find(k);
    if (it != tensors.end()) {
      digests.emplace(k, chunked_hash(it->second, grid.config().chunk_size, algo, pool));
    }
  }
  return seal_block(grid, id, mode, layer_has_params, digests);
}

RunLedger::RunLedger(Manifest manifest)
    : manifest_(std::move(manifest)), grid_(BlockGrid::partition(manifest_.grid)) {}

RunLedger RunLedger::create(const std::filesystem::path& path, Manifest manifest) {
  RunLedger l(std::move(manifest));
  append_durable(path, header_bytes(l.manifest_), true);
  l.path_ = path;
  return l;
}

RunLedger RunLedger::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LedgerError("cannot read ledger " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  auto l = from_bytes(bytes);
  l.path_ = path;
  return l;
}

RunLedger RunLedger::from_bytes(const std::vector<std::uint8_t>& bytes) {
  try {
    ByteReader r(bytes);
    const auto magic = r.bytes(8);
    if (std::memcmp(magic.data(), kMagic, 8) != 0) throw LedgerError("not a ledger file (bad magic)");
    const std::uint32_t schema = r.u32();
    if (schema != kSchemaVersion) {
      throw LedgerError("ledger schema version " + std::to_string(schema) + " is not supported");
    }
    RunLedger l(Manifest::from_json_text(r.str()));
    while (!r.done()) {
      const std::uint32_t len = r.u32();
      ByteReader e(r.bytes(len));
      BlockId id{e.u32(), e.u32()};
      const std::uint32_t n = e.u32();
      std::map<BoundaryKey, Digest> ds;
      for (std::uint32_t k = 0; k < n; ++k) {
        BoundaryKey key;
        const std::uint8_t kind = e.u8();
        if (kind > 3) throw LedgerError("bad boundary kind in ledger entry");
        key.kind = static_cast<BoundaryKind>(kind);
        key.index = e.u32();
        key.step = e.u32();
        Digest d;
        const std::uint8_t algo = e.u8();
        if (algo != 1 && algo != 2) throw LedgerError("bad hash algorithm tag in ledger entry");
        d.algo = static_cast<HashAlgo>(algo);
        const auto raw = e.bytes(32);
        std::copy(raw.begin(), raw.end(), d.bytes.begin());
        if (!ds.emplace(key, d).second) throw LedgerError("duplicate key in ledger entry");
      }
      const std::uint32_t sig = e.u32();
      e.bytes(sig);
      if (!e.done()) throw LedgerError("trailing bytes in ledger entry");
      l.check_order(id);
      l.by_id_[id] = l.entries_.size();
      l.entries_.push_back(CommitmentSet::sealed_from(id, std::move(ds)));
    }
    return l;
  } catch (const LedgerError&) {
    throw;
  } catch (const Error& e) {
    throw LedgerError(std::string("corrupt ledger: ") + e.what());
  }
}

void RunLedger::check_order(BlockId id) const {
  if (!grid_.contains(id)) throw LedgerError("block " + to_string(id) + " is outside the grid");
  if (by_id_.count(id)) throw LedgerError("block " + to_string(id) + " already appended");
  const std::size_t row_len = grid_.num_layer_blocks();
  // Entries are a prefix of complete rows followed by part of the current row.
  const std::size_t full_rows = entries_.size() / row_len;
  if (id.j != full_rows) {
    throw LedgerError("block " + to_string(id) + " appended out of order: row " +
                      std::to_string(full_rows) + " must be complete first");
  }
}

std::vector<std::uint8_t> RunLedger::encode_entry(const CommitmentSet& set) {
  ByteWriter p;
  p.u32(set.id().i);
  p.u32(set.id().j);
  p.u32(static_cast<std::uint32_t>(set.size()));
  for (const auto& [k, d] : set.digests()) {
    p.u8(static_cast<std::uint8_t>(k.kind));
    p.u32(k.index);
    p.u32(k.step);
    p.u8(static_cast<std::uint8_t>(d.algo));
    p.bytes(d.bytes);
  }
  p.u32(0);  // signature slot, unused
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(p.data().size()));
  w.bytes(p.data());
  return w.take();
}

void RunLedger::append(const CommitmentSet& set) {
  if (!set.sealed()) throw LedgerError("block " + to_string(set.id()) + " must be sealed first");
  check_order(set.id());
  if (path_) append_durable(*path_, encode_entry(set), false);
  by_id_[set.id()] = entries_.size();
  entries_.push_back(set);
}

const CommitmentSet* RunLedger::find(BlockId id) const {
  auto it = by_id_.find(id);
  return it == by_id_.end() ? nullptr : &entries_[it->second];
}

const CommitmentSet& RunLedger::at(BlockId id) const {
  const auto* s = find(id);
  if (!s) throw LedgerError("ledger has no entry for block " + to_string(id));
  return *s;
}

std::vector<std::uint8_t> RunLedger::to_bytes() const {
  auto out = header_bytes(manifest_);
  for (const auto& e : entries_) {
    const auto b = encode_entry(e);
    out.insert(out.end(), b.begin(), b.end());
  }
  return out;
}

Digest RunLedger::ledger_digest() const { return hash_bytes(manifest_.algo, to_bytes()); }

nlohmann::json RunLedger::export_json() const {
  nlohmann::json j;
  j["manifest"] = to_json(manifest_);
  j["ledger_digest"] = ledger_digest().hex();
  nlohmann::json es = nlohmann::json::array();
  for (const auto& e : entries_) {
    nlohmann::json keys = nlohmann::json::object();
    for (const auto& [k, d] : e.digests()) keys[to_string(k)] = d.hex();
    es.push_back({{"block", to_string(e.id())}, {"digests", keys}});
  }
  j["entries"] = es;
  return j;
}

}  // namespace aftune
