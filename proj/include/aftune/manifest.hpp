#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aftune/dataset.hpp"
#include "aftune/grid.hpp"
#include "aftune/hash.hpp"
#include "aftune/model.hpp"

namespace aftune {

inline constexpr std::uint32_t kSchemaVersion = 1;

/// Digests published before step 0 from which all other evidence is anchored.
struct TrustAnchors {
  std::vector<Digest> base_params;  // per layer (parameterless layers hash the empty tensor)
  std::vector<Digest> base_opt;     // per layer, the initial optimizer state
  Digest base_model;                // H(base_params[0] ‖ … ‖ base_params[L-1])
  Digest dataset;
  std::vector<Digest> step_inputs;  // per step (training) or per request (inference)
  std::vector<Digest> step_labels;  // training only

  bool operator==(const TrustAnchors&) const = default;
};

struct Manifest {
  std::uint32_t schema_version = kSchemaVersion;
  RunMode mode = RunMode::training;
  GridConfig grid;
  ModelSpec model;
  OptimizerConfig optimizer;
  DatasetSpec dataset;
  std::size_t batch_size = 16;
  std::uint64_t data_seed = 11;
  HashAlgo algo = HashAlgo::blake3;
  TrustAnchors anchors;

  std::vector<bool> layer_has_params() const;
  std::string canonical_json() const;
  static Manifest from_json_text(const std::string& text);

  bool operator==(const Manifest&) const = default;
};

nlohmann::json to_json(const Manifest& m);
Manifest manifest_from_json(const nlohmann::json& j);

nlohmann::json grid_to_json(const GridConfig& g);
GridConfig grid_from_json(const nlohmann::json& j);
nlohmann::json model_to_json(const ModelSpec& m);
ModelSpec model_from_json(const nlohmann::json& j);

/// Digest of one layer's parameters, flattened in declaration order.
template <typename Real>
Digest layer_param_digest(const Layer<Real>& layer, std::size_t chunk, HashAlgo algo,
                          WorkerPool* pool = nullptr);

template <typename Real>
Digest layer_opt_digest(const LayerOptState<Real>& state, std::size_t chunk, HashAlgo algo,
                        WorkerPool* pool = nullptr);

Digest aggregate_digest(HashAlgo algo, const std::vector<Digest>& parts);

/// Client-side anchors for a training run: the base model the manifest
/// describes, the dataset, and each step's batch inputs and labels.
template <typename Real>
TrustAnchors compute_training_anchors(const Manifest& m);

/// Anchors for serving `model` on the given request inputs.
template <typename Real>
TrustAnchors compute_inference_anchors(const ModelState<Real>& model,
                                       const std::vector<BasicTensor<Real>>& requests,
                                       std::size_t chunk, HashAlgo algo);

template <typename Real>
Digest dataset_digest(const Dataset<Real>& data, std::size_t chunk, HashAlgo algo);

}  // namespace aftune
