#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "aftune/error.hpp"

namespace aftune {

/// Arithmetic width of a run. The enum value is the serialized element width.
enum class Precision : std::uint8_t { f32 = 4, f64 = 8 };

std::string to_string(Precision p);
Precision precision_from_string(const std::string& s);

template <typename Real>
constexpr Precision precision_of() {
  static_assert(std::is_same_v<Real, float> || std::is_same_v<Real, double>);
  return std::is_same_v<Real, float> ? Precision::f32 : Precision::f64;
}

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

std::string shape_string(const Shape& shape);

/// Dense row-major tensor. `data.size()` always equals the product of `shape`.
template <typename Real>
struct BasicTensor {
  using value_type = Real;

  Shape shape;
  std::vector<Real> data;

  BasicTensor() = default;
  explicit BasicTensor(Shape s) : shape(std::move(s)), data(element_count(shape), Real{0}) {}
  BasicTensor(Shape s, std::vector<Real> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != element_count(shape)) {
      throw ConfigError("tensor data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_string(shape));
    }
  }

  std::size_t size() const noexcept { return data.size(); }
  bool empty() const noexcept { return data.empty(); }
  std::size_t last_dim() const noexcept { return shape.empty() ? 1 : shape.back(); }
  /// Number of rows when viewed as [size / last_dim, last_dim].
  std::size_t rows() const noexcept { return last_dim() == 0 ? 0 : size() / last_dim(); }

  Real& operator[](std::size_t i) { return data[i]; }
  const Real& operator[](std::size_t i) const { return data[i]; }

  bool operator==(const BasicTensor&) const = default;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// A tensor of either supported precision, as read back from storage or a request.
using AnyTensor = std::variant<Tensor, Tensor64>;

template <typename To, typename From>
BasicTensor<To> convert(const BasicTensor<From>& in) {
  if constexpr (std::is_same_v<To, From>) {
    return in;
  } else {
    BasicTensor<To> out(in.shape);
    for (std::size_t k = 0; k < in.size(); ++k) out.data[k] = static_cast<To>(in.data[k]);
    return out;
  }
}

template <typename To>
BasicTensor<To> convert(const AnyTensor& in) {
  return std::visit([](const auto& t) { return convert<To>(t); }, in);
}

const Shape& shape_of(const AnyTensor& t);
Precision precision_of(const AnyTensor& t);

template <typename Real>
bool all_finite(const BasicTensor<Real>& t) {
  for (Real v : t.data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

/// Appends the little-endian IEEE-754 bit pattern of every element.
template <typename Real>
void append_le_bytes(std::span<const Real> values, std::vector<std::uint8_t>& out) {
  using Bits = std::conditional_t<sizeof(Real) == 4, std::uint32_t, std::uint64_t>;
  const std::size_t base = out.size();
  out.resize(base + values.size() * sizeof(Real));
  std::uint8_t* dst = out.data() + base;
  for (Real v : values) {
    Bits bits = std::bit_cast<Bits>(v);
    for (std::size_t b = 0; b < sizeof(Real); ++b) {
      *dst++ = static_cast<std::uint8_t>(bits >> (8 * b));
    }
  }
}

template <typename Real>
std::vector<std::uint8_t> to_le_bytes(const BasicTensor<Real>& t) {
  std::vector<std::uint8_t> out;
  out.reserve(t.size() * sizeof(Real));
  append_le_bytes<Real>(t.data, out);
  return out;
}

std::vector<std::uint8_t> to_le_bytes(const AnyTensor& t);

template <typename Real>
std::vector<Real> values_from_le_bytes(std::span<const std::uint8_t> bytes) {
  using Bits = std::conditional_t<sizeof(Real) == 4, std::uint32_t, std::uint64_t>;
  if (bytes.size() % sizeof(Real) != 0) {
    throw ConfigError("byte length " + std::to_string(bytes.size()) +
                      " is not a multiple of the element width");
  }
  std::vector<Real> out(bytes.size() / sizeof(Real));
  const std::uint8_t* src = bytes.data();
  for (Real& v : out) {
    Bits bits = 0;
    for (std::size_t b = 0; b < sizeof(Real); ++b) bits |= Bits{*src++} << (8 * b);
    v = std::bit_cast<Real>(bits);
  }
  return out;
}

AnyTensor tensor_from_le_bytes(Precision p, Shape shape, std::span<const std::uint8_t> bytes);

template <typename Real>
double l2_norm(const BasicTensor<Real>& t) {
  double acc = 0.0;
  for (Real v : t.data) acc += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(acc);
}

/// ‖replayed − recorded‖₂ / ‖recorded‖₂, evaluated in binary64. Falls back to the
/// absolute error when the recorded tensor has zero norm. Infinite on shape mismatch.
template <typename A, typename B>
double relative_l2_error(const BasicTensor<A>& replayed, const BasicTensor<B>& recorded) {
  if (replayed.shape != recorded.shape) return INFINITY;
  double diff = 0.0;
  double ref = 0.0;
  for (std::size_t k = 0; k < recorded.size(); ++k) {
    const double r = static_cast<double>(recorded.data[k]);
    const double d = static_cast<double>(replayed.data[k]) - r;
    diff += d * d;
    ref += r * r;
  }
  diff = std::sqrt(diff);
  ref = std::sqrt(ref);
  return ref == 0.0 ? diff : diff / ref;
}

/// Concatenates flattened tensors into one rank-1 tensor.
template <typename Real>
BasicTensor<Real> flatten_concat(std::span<const BasicTensor<Real>> parts) {
  std::vector<Real> all;
  for (const auto& p : parts) all.insert(all.end(), p.data.begin(), p.data.end());
  const std::size_t n = all.size();
  return BasicTensor<Real>({n}, std::move(all));
}

}  // namespace aftune
