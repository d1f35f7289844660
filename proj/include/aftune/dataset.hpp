#pragma once

#include <cstdint>
#include <string>

#include "aftune/model.hpp"

namespace aftune {

enum class DatasetKind : std::uint8_t {
  rings,     // 2-D concentric rings, one ring per class
  gaussian,  // standard-normal inputs labelled by a fixed random linear map
};

std::string to_string(DatasetKind kind);
DatasetKind dataset_kind_from_string(const std::string& s);

/// Synthetic client dataset, fully determined by its spec.
struct DatasetSpec {
  DatasetKind kind = DatasetKind::rings;
  std::size_t samples = 256;
  std::size_t input_dim = 2;
  std::size_t classes = 3;
  double noise = 0.1;
  std::uint64_t seed = 7;

  bool operator==(const DatasetSpec&) const = default;
};

template <typename Real>
struct Dataset {
  BasicTensor<Real> inputs;  // [samples, input_dim]
  BasicTensor<Real> labels;  // [samples], class index stored as a value
};

template <typename Real>
Dataset<Real> make_dataset(const DatasetSpec& spec);

/// Batch for training step `step`: `batch_size` distinct samples chosen by a
/// partial Fisher-Yates shuffle keyed by (data_seed, step).
template <typename Real>
Batch<Real> batch_for_step(const Dataset<Real>& data, std::uint64_t data_seed, std::uint64_t step,
                           std::size_t batch_size);

}  // namespace aftune
