#pragma once

#include <array>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "aftune/tensor.hpp"

namespace aftune {

enum class HashAlgo : std::uint8_t { blake3 = 1, sha256 = 2 };

std::string to_string(HashAlgo algo);
HashAlgo hash_algo_from_string(const std::string& s);

struct Digest {
  HashAlgo algo = HashAlgo::blake3;
  std::array<std::uint8_t, 32> bytes{};

  std::string hex() const;
  static Digest from_hex(HashAlgo algo, const std::string& hex);

  auto operator<=>(const Digest&) const = default;
};

Digest hash_bytes(HashAlgo algo, std::span<const std::uint8_t> bytes);

/// Incremental hasher over either algorithm.
class Hasher {
 public:
  explicit Hasher(HashAlgo algo);
  ~Hasher();
  Hasher(const Hasher&) = delete;
  Hasher& operator=(const Hasher&) = delete;

  void update(std::span<const std::uint8_t> bytes);
  void update(const std::string& s) {
    update({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
  }
  void update_u64(std::uint64_t v);
  Digest finish();

 private:
  struct Impl;
  Impl* impl_;
};

/// Fixed set of threads that execute index ranges. The calling thread takes
/// part, so a pool of n workers starts n - 1 threads.
class WorkerPool {
 public:
  explicit WorkerPool(std::size_t workers);
  ~WorkerPool();
  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  std::size_t workers() const { return threads_.size() + 1; }

  /// Calls fn(k) once for each k in [0, n); returns when all calls are done.
  void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

 private:
  void run_items();
  void worker_loop();

  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable wake_;
  std::condition_variable done_;
  const std::function<void(std::size_t)>* job_ = nullptr;
  std::size_t job_size_ = 0;
  std::atomic<std::size_t> next_{0};
  std::size_t busy_ = 0;
  std::uint64_t generation_ = 0;
  bool stop_ = false;
};

/// Map-reduce digest: the byte string is split into chunks of `chunk_elems`
/// elements of `element_width` bytes (the last chunk may be short), each chunk is
/// hashed, and the result is H(h_0 ‖ … ‖ h_{m-1}). Zero bytes hash to H(empty).
Digest chunked_hash(std::span<const std::uint8_t> bytes, std::size_t element_width,
                    std::size_t chunk_elems, HashAlgo algo, WorkerPool* pool = nullptr);

template <typename Real>
Digest chunked_hash(const BasicTensor<Real>& t, std::size_t chunk_elems, HashAlgo algo,
                    WorkerPool* pool = nullptr) {
  const auto bytes = to_le_bytes(t);
  return chunked_hash(bytes, sizeof(Real), chunk_elems, algo, pool);
}

Digest chunked_hash(const AnyTensor& t, std::size_t chunk_elems, HashAlgo algo,
                    WorkerPool* pool = nullptr);

}  // namespace aftune
