#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace aftune {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Tensor shape does not match what a layer expects.
class ShapeError : public Error {
 public:
  ShapeError(std::size_t layer, const std::string& what)
      : Error("layer " + std::to_string(layer) + ": " + what), layer_(layer) {}
  std::size_t layer() const noexcept { return layer_; }

 private:
  std::size_t layer_;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class LedgerError : public Error {
 public:
  using Error::Error;
};

class StoreError : public Error {
 public:
  using Error::Error;
};

/// Evidence for a block was deliberately pruned after the client released it.
class EvidenceReleased : public Error {
 public:
  using Error::Error;
};

}  // namespace aftune
