#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "aftune/recorder.hpp"
#include "aftune/verifier.hpp"

namespace aftune::testing {

/// Small training manifest on the rings dataset.
inline Manifest toy_manifest(std::size_t depth, std::size_t steps, std::size_t bl, std::size_t bs,
                             std::optional<std::uint32_t> ic,
                             OptimizerKind opt = OptimizerKind::sgd_momentum,
                             Precision p = Precision::f32) {
  Manifest m;
  m.model = ModelSpec::mlp(2, 8, depth, 3, 5);
  m.grid.layers = m.model.num_layers();
  m.grid.steps = steps;
  m.grid.layer_block = bl;
  m.grid.step_block = bs;
  m.grid.checkpoint_interval = ic;
  m.grid.chunk_size = 16;
  m.grid.precision = p;
  m.grid.tolerance = default_tolerance(p);
  m.optimizer.kind = opt;
  m.optimizer.lr = opt == OptimizerKind::adamw ? 0.01 : 0.05;
  m.optimizer.momentum = opt == OptimizerKind::adamw ? 0.0 : 0.9;
  m.dataset.samples = 64;
  m.batch_size = 8;
  return m;
}

/// Fresh scratch directory, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    static std::mt19937_64 gen{std::random_device{}()};
    path = std::filesystem::temp_directory_path() /
           ("aftune-" + tag + "-" + std::to_string(gen()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace aftune::testing
