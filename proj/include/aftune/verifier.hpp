#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aftune/ledger.hpp"
#include "aftune/store.hpp"

namespace aftune {

/// The verifier declined to run: over budget, malformed request, or a
/// reconstruction that cannot be bitwise reproduced. Not a verdict on the provider.
class RefusedError : public Error {
 public:
  using Error::Error;
};

enum class Verdict : std::uint8_t { pass, fail, evidence_released, refused };
enum class FailureKind : std::uint8_t { hash_mismatch, numerical_mismatch };

std::string to_string(Verdict v);
std::string to_string(FailureKind k);

struct Failure {
  FailureKind kind = FailureKind::hash_mismatch;
  BoundaryKey key;
  std::string detail;
  double measured = 0.0;   // relative L2 error (numerical mismatches)
  double tolerance = 0.0;
};

/// One replayed value compared against the provided tensor.
struct KeyCheck {
  BoundaryKey key;
  std::string what;
  double relative_error = 0.0;
  bool bitwise = false;  // replayed bytes hash to the committed digest
};

struct VerificationReport {
  BlockId id;
  RunMode mode = RunMode::training;
  Verdict verdict = Verdict::pass;
  std::vector<Failure> failures;  // first entry is the cause; more only with full scan
  std::vector<KeyCheck> checks;
  double tolerance = 0.0;
  double max_error = 0.0;
  double replay_seconds = 0.0;
  std::string message;

  bool passed() const { return verdict == Verdict::pass; }
  const Failure* cause() const { return failures.empty() ? nullptr : &failures.front(); }
  nlohmann::json to_json() const;
  static VerificationReport from_json(const nlohmann::json& j);
  std::string summary() const;
};

/// Everything the isolated verifier receives for one block.
struct VerificationRequest {
  BlockId id;
  RunMode mode = RunMode::training;
  double tolerance = 1e-5;
  Precision replay_precision = Precision::f32;
  bool full_scan = false;
  /// Relative magnitude of noise injected into replay inputs (simulated device divergence).
  double replay_noise = 0.0;
  std::uint64_t noise_seed = 0;

  std::size_t first_layer = 0;
  std::vector<LayerSpec> layers;  // the replayed span
  OptimizerConfig optimizer;
  std::uint32_t boundary_in = 0;
  std::uint32_t boundary_out = 0;
  std::uint32_t last_boundary = 0;  // ⌈L/B_L⌉, the model output boundary
  std::vector<std::uint32_t> steps;
  std::uint32_t entry_step = 0;  // step of the entry θ/s keys (training)
  std::uint32_t exit_step = 0;
  std::size_t chunk_size = 4096;
  HashAlgo algo = HashAlgo::blake3;

  std::map<BoundaryKey, AnyTensor> tensors;
  std::map<std::uint32_t, AnyTensor> labels;  // per step, last block only
  CommitmentSet commitment;

  std::map<std::uint32_t, Digest> input_anchors;  // per step, when boundary_in == 0
  std::map<std::uint32_t, Digest> label_anchors;  // per step, last block
  std::map<std::uint32_t, Digest> param_anchors;  // per layer (entry at step 0, or inference)
  std::map<std::uint32_t, Digest> opt_anchors;

  std::uint64_t payload_bytes() const;
  std::vector<std::uint8_t> serialize() const;
  static VerificationRequest deserialize(std::span<const std::uint8_t> bytes);
};

struct VerifierConfig {
  std::uint64_t memory_budget = 256ull << 20;
};

/// Replays one training block cell: hash checks on every provided tensor, trust
/// anchor checks on edge blocks, then forward, backward and optimizer replay with
/// relative L2 comparison against the provided tensors.
VerificationReport verify_training_block(const VerificationRequest& req,
                                         const VerifierConfig& cfg = {});

/// Forward-only replay between the recorded boundaries enclosing the block.
VerificationReport verify_inference_block(const VerificationRequest& req,
                                          const VerifierConfig& cfg = {});

VerificationReport verify_block(const VerificationRequest& req, const VerifierConfig& cfg = {});

struct PrepareOptions {
  std::optional<double> tolerance;           // default: from the manifest
  std::optional<Precision> replay_precision;  // default: the run precision
  bool full_scan = false;
  double replay_noise = 0.0;
  std::uint64_t noise_seed = 0;
};

/// Untrusted orchestrator side: gathers block-scoped evidence from the store,
/// reconstructing entry/exit state when no checkpoint was kept. Throws
/// EvidenceReleased for pruned evidence and RefusedError when the state cannot be
/// reproduced bitwise.
VerificationRequest prepare_request(const RunLedger& ledger, const TensorStore& store, BlockId id,
                                    const PrepareOptions& opts = {});

/// Layer-block state at a step-block boundary.
template <typename Real>
struct BlockState {
  std::vector<Layer<Real>> layers;
  std::vector<LayerOptState<Real>> opt;
};

/// θ/s of layer block i at step-block boundary j, from the nearest prior
/// checkpoint (or the regenerated base model) by block-local replay.
template <typename Real>
BlockState<Real> reconstruct_block_state(const RunLedger& ledger, const TensorStore& store,
                                         std::size_t i, std::size_t j);

/// Whole-model θ/s at boundary j.
template <typename Real>
ModelState<Real> reconstruct_state(const RunLedger& ledger, const TensorStore& store,
                                   std::size_t j);

struct ChainIssue {
  BlockId block;
  BoundaryKey key;
  std::string reason;
};

struct ChainReport {
  std::vector<ChainIssue> issues;
  std::size_t blocks_checked = 0;
  std::size_t digests_checked = 0;
  bool ok() const { return issues.empty(); }
  nlohmann::json to_json() const;
};

/// Checks that each digest a block consumes is a trust anchor or appears in the
/// sealed commitment of the neighbor that produced it.
ChainReport check_trust_chain(const RunLedger& ledger, const TrustAnchors& anchors,
                              const std::vector<BlockId>& blocks);

}  // namespace aftune
