#include "aftune/dataset.hpp"

#include <cmath>
#include <numeric>

#include "aftune/rng.hpp"

namespace aftune {

std::string to_string(DatasetKind kind) {
  return kind == DatasetKind::rings ? "rings" : "gaussian";
}

DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "rings") return DatasetKind::rings;
  if (s == "gaussian") return DatasetKind::gaussian;
  throw ConfigError("unknown dataset kind '" + s + "'");
}

template <typename Real>
Dataset<Real> make_dataset(const DatasetSpec& spec) {
  if (spec.samples == 0 || spec.input_dim == 0 || spec.classes < 2) {
    throw ConfigError("dataset needs samples > 0, input_dim > 0 and at least two classes");
  }
  if (spec.kind == DatasetKind::rings && spec.input_dim != 2) {
    throw ConfigError("rings dataset is two-dimensional");
  }
  Dataset<Real> data;
  data.inputs = BasicTensor<Real>({spec.samples, spec.input_dim});
  data.labels = BasicTensor<Real>({spec.samples});
  CounterRng rng(spec.seed, RngPurpose::dataset);
  if (spec.kind == DatasetKind::rings) {
    for (std::size_t n = 0; n < spec.samples; ++n) {
      const std::size_t c = n % spec.classes;
      const double radius = 1.0 + static_cast<double>(c) + spec.noise * rng.normal();
      const double angle = rng.uniform(0.0, 6.283185307179586);
      data.inputs[n * 2] = static_cast<Real>(radius * std::cos(angle));
      data.inputs[n * 2 + 1] = static_cast<Real>(radius * std::sin(angle));
      data.labels[n] = static_cast<Real>(c);
    }
    return data;
  }
  CounterRng proj_rng(spec.seed, RngPurpose::dataset, 1);
  std::vector<double> proj(spec.classes * spec.input_dim);
  for (double& w : proj) w = proj_rng.normal();
  for (std::size_t n = 0; n < spec.samples; ++n) {
    std::vector<double> x(spec.input_dim);
    for (std::size_t d = 0; d < spec.input_dim; ++d) {
      x[d] = rng.normal();
      data.inputs[n * spec.input_dim + d] = static_cast<Real>(x[d]);
    }
    std::size_t best = 0;
    double best_score = -INFINITY;
    for (std::size_t c = 0; c < spec.classes; ++c) {
      double s = 0.0;
      for (std::size_t d = 0; d < spec.input_dim; ++d) s += proj[c * spec.input_dim + d] * x[d];
      if (s > best_score) {
        best_score = s;
        best = c;
      }
    }
    data.labels[n] = static_cast<Real>(best);
  }
  return data;
}

template <typename Real>
Batch<Real> batch_for_step(const Dataset<Real>& data, std::uint64_t data_seed, std::uint64_t step,
                           std::size_t batch_size) {
  const std::size_t n = data.labels.size();
  if (batch_size == 0 || batch_size > n) {
    throw ConfigError("batch size " + std::to_string(batch_size) + " must be in [1, " +
                      std::to_string(n) + "]");
  }
  const std::size_t d = data.inputs.last_dim();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  CounterRng rng(data_seed, RngPurpose::data, step);
  for (std::size_t k = 0; k < batch_size; ++k) {
    const std::size_t pick = k + static_cast<std::size_t>(rng.below(n - k));
    std::swap(order[k], order[pick]);
  }
  Batch<Real> batch;
  batch.step = step;
  batch.inputs = BasicTensor<Real>({batch_size, d});
  batch.labels = BasicTensor<Real>({batch_size});
  for (std::size_t k = 0; k < batch_size; ++k) {
    const std::size_t src = order[k];
    std::copy_n(data.inputs.data.begin() + static_cast<std::ptrdiff_t>(src * d), d,
                batch.inputs.data.begin() + static_cast<std::ptrdiff_t>(k * d));
    batch.labels[k] = data.labels[src];
  }
  return batch;
}

template Dataset<float> make_dataset<float>(const DatasetSpec&);
template Dataset<double> make_dataset<double>(const DatasetSpec&);
template Batch<float> batch_for_step(const Dataset<float>&, std::uint64_t, std::uint64_t,
                                     std::size_t);
template Batch<double> batch_for_step(const Dataset<double>&, std::uint64_t, std::uint64_t,
                                      std::size_t);

}  // namespace aftune
