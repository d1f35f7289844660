#include "aftune/store.hpp"

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace aftune {

namespace fs = std::filesystem;
using nlohmann::json;

std::string key_token(const BoundaryKey& key) { return to_string(key); }

BoundaryKey key_from_token(const std::string& token) {
  // kind/{b|l}<index>/t<step>
  const auto a = token.find('/');
  const auto b = token.find('/', a == std::string::npos ? a : a + 1);
  if (a == std::string::npos || b == std::string::npos || b <= a + 2 || token.size() <= b + 2 ||
      token[b + 1] != 't') {
    throw StoreError("bad key '" + token + "'");
  }
  BoundaryKey k;
  const std::string kind = token.substr(0, a);
  if (kind == "act") {
    k.kind = BoundaryKind::activation;
  } else if (kind == "grad") {
    k.kind = BoundaryKind::gradient;
  } else if (kind == "param") {
    k.kind = BoundaryKind::parameter;
  } else if (kind == "opt") {
    k.kind = BoundaryKind::optimizer;
  } else {
    throw StoreError("bad key kind in '" + token + "'");
  }
  try {
    k.index = static_cast<std::uint32_t>(std::stoul(token.substr(a + 2, b - a - 2)));
    k.step = static_cast<std::uint32_t>(std::stoul(token.substr(b + 2)));
  } catch (const std::exception&) {
    throw StoreError("bad key '" + token + "'");
  }
  return k;
}

namespace {

std::vector<std::uint8_t> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw StoreError("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw StoreError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw StoreError("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, p, ec);
  if (ec) throw StoreError("cannot rename into " + p.string() + ": " + ec.message());
}

}  // namespace

TensorStore TensorStore::create(const fs::path& root) {
  if (root.empty()) return {};
  std::error_code ec;
  fs::create_directories(root / "store", ec);
  if (ec) throw StoreError("cannot create store under " + root.string() + ": " + ec.message());
  TensorStore s;
  s.root_ = root;
  s.flush();
  return s;
}

TensorStore TensorStore::open(const fs::path& root) {
  TensorStore s;
  s.root_ = root;
  const auto bytes = read_file(root / "store" / "index.json");
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
    for (const auto& [tok, e] : j.at("keys").items()) {
      StoreEntry x;
      x.blob = e.at("blob").get<std::string>();
      x.offset = e.at("offset").get<std::uint64_t>();
      x.length = e.at("length").get<std::uint64_t>();
      const HashAlgo algo = hash_algo_from_string(e.at("algo").get<std::string>());
      x.digest = Digest::from_hex(algo, e.at("digest").get<std::string>());
      x.shape = e.at("shape").get<Shape>();
      x.precision = precision_from_string(e.at("precision").get<std::string>());
      s.index_.emplace(key_from_token(tok), x);
    }
    for (const auto& tok : j.at("released")) s.released_.insert(key_from_token(tok.get<std::string>()));
  } catch (const json::exception& e) {
    throw StoreError(std::string("corrupt store index: ") + e.what());
  }
  return s;
}

void TensorStore::put(const BoundaryKey& key, const AnyTensor& t, const Digest& digest) {
  if (index_.count(key)) throw StoreError("key " + to_string(key) + " stored twice");
  auto bytes = to_le_bytes(t);
  StoreEntry e;
  e.blob = digest.hex();
  e.length = bytes.size();
  e.digest = digest;
  e.shape = shape_of(t);
  e.precision = precision_of(t);
  if (in_memory()) {
    memory_.try_emplace(e.blob, std::move(bytes));
  } else {
    const fs::path p = root_ / "store" / e.blob;
    if (!fs::exists(p)) write_file(p, bytes);
  }
  released_.erase(key);
  index_.emplace(key, std::move(e));
}

Digest TensorStore::put(const BoundaryKey& key, const AnyTensor& t, std::size_t chunk,
                        HashAlgo algo) {
  const Digest d = chunked_hash(t, chunk, algo);
  put(key, t, d);
  return d;
}

const StoreEntry& TensorStore::entry(const BoundaryKey& key) const {
  auto it = index_.find(key);
  if (it == index_.end()) {
    if (released_.count(key)) {
      throw EvidenceReleased("evidence for " + to_string(key) + " was released by pruning");
    }
    throw StoreError("store has no tensor for " + to_string(key));
  }
  return it->second;
}

std::vector<BoundaryKey> TensorStore::keys() const {
  std::vector<BoundaryKey> out;
  for (const auto& [k, e] : index_) out.push_back(k);
  return out;
}

fs::path TensorStore::blob_path(const BoundaryKey& key) const {
  return root_ / "store" / entry(key).blob;
}

std::vector<std::uint8_t> TensorStore::raw(const BoundaryKey& key) const {
  const auto& e = entry(key);
  std::vector<std::uint8_t> all;
  if (in_memory()) {
    all = memory_.at(e.blob);
  } else {
    all = read_file(root_ / "store" / e.blob);
  }
  if (e.offset + e.length > all.size()) throw StoreError("blob for " + to_string(key) + " is truncated");
  return {all.begin() + static_cast<std::ptrdiff_t>(e.offset),
          all.begin() + static_cast<std::ptrdiff_t>(e.offset + e.length)};
}

AnyTensor TensorStore::get(const BoundaryKey& key) const {
  const auto& e = entry(key);
  return tensor_from_le_bytes(e.precision, e.shape, raw(key));
}

void TensorStore::overwrite_raw(const BoundaryKey& key, const std::vector<std::uint8_t>& bytes) {
  const auto& e = entry(key);
  if (bytes.size() != e.length) throw StoreError("overwrite must keep the blob length");
  if (in_memory()) {
    memory_.at(e.blob) = bytes;
  } else {
    write_file(root_ / "store" / e.blob, bytes);
  }
}

std::uint64_t TensorStore::logical_bytes() const {
  std::uint64_t n = 0;
  for (const auto& [k, e] : index_) n += e.length;
  return n;
}

std::uint64_t TensorStore::physical_bytes() const {
  std::map<std::string, std::uint64_t> blobs;
  for (const auto& [k, e] : index_) blobs[e.blob] = e.length;
  std::uint64_t n = 0;
  for (const auto& [b, len] : blobs) n += len;
  return n;
}

void TensorStore::retain_only(const std::set<BoundaryKey>& keep) {
  std::set<std::string> live;
  for (auto it = index_.begin(); it != index_.end();) {
    if (keep.count(it->first)) {
      live.insert(it->second.blob);
      ++it;
    } else {
      released_.insert(it->first);
      it = index_.erase(it);
    }
  }
  if (in_memory()) {
    std::erase_if(memory_, [&](const auto& kv) { return !live.count(kv.first); });
  } else {
    for (const auto& f : fs::directory_iterator(root_ / "store")) {
      const auto name = f.path().filename().string();
      if (name.size() == 64 && !live.count(name)) fs::remove(f.path());
    }
  }
  flush();
}

void TensorStore::flush() const {
  if (in_memory()) return;
  json keys = json::object();
  for (const auto& [k, e] : index_) {
    keys[key_token(k)] = {{"blob", e.blob},
                          {"offset", e.offset},
                          {"length", e.length},
                          {"algo", to_string(e.digest.algo)},
                          {"digest", e.digest.hex()},
                          {"shape", e.shape},
                          {"precision", to_string(e.precision)}};
  }
  json rel = json::array();
  for (const auto& k : released_) rel.push_back(key_token(k));
  const std::string text = json{{"keys", keys}, {"released", rel}}.dump(1);
  write_file(root_ / "store" / "index.json", {text.begin(), text.end()});
}

}  // namespace aftune
