#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "aftune/ledger.hpp"
#include "aftune/store.hpp"

namespace aftune {

/// Interception points used by the adversary harness. The honest recorder uses
/// the no-op defaults.
template <typename Real>
struct RecordingHooks {
  virtual ~RecordingHooks() = default;
  /// Called before θ/s are committed at step-block boundary j.
  virtual void on_boundary(std::size_t j, ModelState<Real>& state) { (void)j, (void)state; }
  virtual void on_batch(std::size_t step, Batch<Real>& batch) { (void)step, (void)batch; }
  /// Returning true makes the provider skip the real step and reuse its previous trace.
  virtual bool skip_step(std::size_t step) { return (void)step, false; }
  /// Replaces the whole training step (forward, backward and update) when it returns a trace.
  virtual std::optional<StepTrace<Real>> custom_step(std::size_t step, ModelState<Real>& state,
                                                     const Batch<Real>& batch) {
    return (void)step, (void)state, (void)batch, std::nullopt;
  }
  virtual void on_trace(std::size_t step, StepTrace<Real>& trace) { (void)step, (void)trace; }
};

template <typename Real>
struct InferenceHooks {
  virtual ~InferenceHooks() = default;
  /// May alter the model actually used to serve request r (the committed one is unchanged).
  virtual void before_request(std::size_t r, ModelState<Real>& served) { (void)r, (void)served; }
  /// May alter the recorded activations (all L+1 of them) before hashing.
  virtual void on_outputs(std::size_t r, std::vector<BasicTensor<Real>>& activations) {
    (void)r, (void)activations;
  }
};

struct RecordOptions {
  std::filesystem::path run_dir;  // empty: keep everything in memory
  WorkerPool* pool = nullptr;
  /// Put non-deterministic layers in their own I_C = 1 layer blocks.
  bool auto_isolate = true;
};

template <typename Real>
struct TrainingRecord {
  RunLedger ledger;
  TensorStore store;
  ModelState<Real> final_state;
  std::vector<double> losses;
  std::map<BoundaryKey, Digest> digests;  // every committed key
};

template <typename Real>
struct InferenceRecord {
  RunLedger ledger;
  TensorStore store;
  std::vector<BasicTensor<Real>> outputs;  // one per request
  std::map<BoundaryKey, Digest> digests;
};

/// Layout of a run directory.
struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path manifest() const { return root / "manifest.json"; }
  std::filesystem::path ledger() const { return root / "ledger.bin"; }
  std::filesystem::path reports() const { return root / "reports"; }
};

/// Fills anchors (when empty) and the isolation list, then validates.
template <typename Real>
Manifest prepare_training_manifest(Manifest m, bool auto_isolate);

/// Trains with boundary recording. The manifest (with anchors) is committed
/// before step 0; each step-block row is sealed as soon as its exit state exists.
template <typename Real>
TrainingRecord<Real> record_training(Manifest manifest, const RecordOptions& opts,
                                     RecordingHooks<Real>* hooks = nullptr);

/// Inference inputs for a manifest: request r is the input half of the batch
/// for step r.
template <typename Real>
std::vector<BasicTensor<Real>> inference_requests(const Manifest& m);

/// Serves each request as a single step. The committed model's parameters are
/// stored under parameter keys at step 0.
template <typename Real>
InferenceRecord<Real> record_inference(Manifest manifest, const ModelState<Real>& model,
                                       const RecordOptions& opts,
                                       InferenceHooks<Real>* hooks = nullptr);

/// Byte sizes the recorder writes for this (prepared) manifest, from the shapes
/// of one forward pass.
StorageSizes measured_storage_sizes(const Manifest& m);

/// Keys needed to prepare a verification request for `id` from the store.
std::set<BoundaryKey> evidence_closure(const BlockGrid& grid, BlockId id, RunMode mode,
                                       const std::vector<bool>& layer_has_params);

/// Deletes evidence of `verified` blocks that no other kept block needs.
/// Blocks in `requested` must not be pruned.
void prune_after_verification(TensorStore& store, const RunLedger& ledger,
                              const std::set<BlockId>& verified,
                              const std::set<BlockId>& requested);

}  // namespace aftune
