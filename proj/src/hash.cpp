#include "aftune/hash.hpp"

#include <openssl/evp.h>

#include "blake3.h"

namespace aftune {

std::string to_string(HashAlgo algo) { return algo == HashAlgo::sha256 ? "sha256" : "blake3"; }

HashAlgo hash_algo_from_string(const std::string& s) {
  if (s == "blake3") return HashAlgo::blake3;
  if (s == "sha256") return HashAlgo::sha256;
  throw ConfigError("unknown hash algorithm '" + s + "'");
}

std::string Digest::hex() const {
  static const char* digits = "0123456789abcdef";
  std::string out(64, '0');
  for (std::size_t k = 0; k < 32; ++k) {
    out[2 * k] = digits[bytes[k] >> 4];
    out[2 * k + 1] = digits[bytes[k] & 15];
  }
  return out;
}

Digest Digest::from_hex(HashAlgo algo, const std::string& hex) {
  if (hex.size() != 64) throw ConfigError("digest hex must be 64 characters");
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw ConfigError(std::string("bad hex digit '") + c + "'");
  };
  Digest d;
  d.algo = algo;
  for (std::size_t k = 0; k < 32; ++k) {
    d.bytes[k] = static_cast<std::uint8_t>(nibble(hex[2 * k]) << 4 | nibble(hex[2 * k + 1]));
  }
  return d;
}

struct Hasher::Impl {
  HashAlgo algo;
  blake3_hasher b3;
  EVP_MD_CTX* sha = nullptr;
};

Hasher::Hasher(HashAlgo algo) : impl_(new Impl{algo, {}, nullptr}) {
  if (algo == HashAlgo::blake3) {
    blake3_hasher_init(&impl_->b3);
  } else {
    impl_->sha = EVP_MD_CTX_new();
    if (!impl_->sha || EVP_DigestInit_ex(impl_->sha, EVP_sha256(), nullptr) != 1) {
      EVP_MD_CTX_free(impl_->sha);
      delete impl_;
      throw Error("sha256 initialisation failed");
    }
  }
}

Hasher::~Hasher() {
  if (impl_) EVP_MD_CTX_free(impl_->sha);
  delete impl_;
}

void Hasher::update(std::span<const std::uint8_t> bytes) {
  if (impl_->algo == HashAlgo::blake3) {
    blake3_hasher_update(&impl_->b3, bytes.data(), bytes.size());
  } else {
    EVP_DigestUpdate(impl_->sha, bytes.data(), bytes.size());
  }
}

void Hasher::update_u64(std::uint64_t v) {
  std::uint8_t buf[8];
  for (int b = 0; b < 8; ++b) buf[b] = static_cast<std::uint8_t>(v >> (8 * b));
  update(buf);
}

Digest Hasher::finish() {
  Digest d;
  d.algo = impl_->algo;
  if (impl_->algo == HashAlgo::blake3) {
    blake3_hasher_finalize(&impl_->b3, d.bytes.data(), d.bytes.size());
  } else {
    unsigned len = 0;
    EVP_DigestFinal_ex(impl_->sha, d.bytes.data(), &len);
  }
  return d;
}

Digest hash_bytes(HashAlgo algo, std::span<const std::uint8_t> bytes) {
  Hasher h(algo);
  h.update(bytes);
  return h.finish();
}

WorkerPool::WorkerPool(std::size_t workers) {
  if (workers < 1) throw ConfigError("worker pool needs at least one worker");
  for (std::size_t k = 1; k < workers; ++k) threads_.emplace_back([this] { worker_loop(); });
}

WorkerPool::~WorkerPool() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  wake_.notify_all();
  for (auto& t : threads_) t.join();
}

void WorkerPool::run_items() {
  for (;;) {
    const std::size_t k = next_.fetch_add(1);
    if (k >= job_size_) return;
    (*job_)(k);
  }
}

void WorkerPool::worker_loop() {
  std::uint64_t seen = 0;
  for (;;) {
    {
      std::unique_lock lock(mu_);
      wake_.wait(lock, [&] { return stop_ || generation_ != seen; });
      if (stop_) return;
      seen = generation_;
      ++busy_;
    }
    run_items();
    {
      std::lock_guard lock(mu_);
      --busy_;
    }
    done_.notify_all();
  }
}

void WorkerPool::parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  if (threads_.empty() || n == 1) {
    for (std::size_t k = 0; k < n; ++k) fn(k);
    return;
  }
  {
    std::lock_guard lock(mu_);
    job_ = &fn;
    job_size_ = n;
    next_ = 0;
    ++generation_;
  }
  wake_.notify_all();
  run_items();
  // Wait until every index was claimed and no worker is still inside fn.
  std::unique_lock lock(mu_);
  done_.wait(lock, [&] { return busy_ == 0 && next_.load() >= n; });
  job_ = nullptr;
}

Digest chunked_hash(std::span<const std::uint8_t> bytes, std::size_t element_width,
                    std::size_t chunk_elems, HashAlgo algo, WorkerPool* pool) {
  if (chunk_elems < 1) throw ConfigError("chunk size must be at least 1");
  if (element_width < 1 || bytes.size() % element_width != 0) {
    throw ConfigError("byte length is not a whole number of elements");
  }
  const std::size_t chunk_bytes = chunk_elems * element_width;
  const std::size_t m = (bytes.size() + chunk_bytes - 1) / chunk_bytes;
  std::vector<Digest> parts(m);
  auto one = [&](std::size_t k) {
    const std::size_t off = k * chunk_bytes;
    parts[k] = hash_bytes(algo, bytes.subspan(off, std::min(chunk_bytes, bytes.size() - off)));
  };
  if (pool) {
    pool->parallel_for(m, one);
  } else {
    for (std::size_t k = 0; k < m; ++k) one(k);
  }
  Hasher top(algo);
  for (const auto& p : parts) top.update(p.bytes);
  return top.finish();
}

Digest chunked_hash(const AnyTensor& t, std::size_t chunk_elems, HashAlgo algo, WorkerPool* pool) {
  return std::visit([&](const auto& x) { return chunked_hash(x, chunk_elems, algo, pool); }, t);
}

}  // namespace aftune
