#include "aftune/tensor.hpp"

namespace aftune {

std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision precision_from_string(const std::string& s) {
  if (s == "f32" || s == "binary32") return Precision::f32;
  if (s == "f64" || s == "binary64") return Precision::f64;
  throw ConfigError("unknown precision '" + s + "' (expected f32 or f64)");
}

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t k = 0; k < shape.size(); ++k) {
    if (k) out += ", ";
    out += std::to_string(shape[k]);
  }
  return out + "]";
}

const Shape& shape_of(const AnyTensor& t) {
  return std::visit([](const auto& x) -> const Shape& { return x.shape; }, t);
}

Precision precision_of(const AnyTensor& t) {
  return std::holds_alternative<Tensor>(t) ? Precision::f32 : Precision::f64;
}

std::vector<std::uint8_t> to_le_bytes(const AnyTensor& t) {
  return std::visit([](const auto& x) { return to_le_bytes(x); }, t);
}

AnyTensor tensor_from_le_bytes(Precision p, Shape shape, std::span<const std::uint8_t> bytes) {
  if (bytes.size() != element_count(shape) * static_cast<std::size_t>(p)) {
    throw ConfigError("blob of " + std::to_string(bytes.size()) + " bytes cannot hold a " +
                      to_string(p) + " tensor of shape " + shape_string(shape));
  }
  if (p == Precision::f32) return Tensor(std::move(shape), values_from_le_bytes<float>(bytes));
  return Tensor64(std::move(shape), values_from_le_bytes<double>(bytes));
}

}  // namespace aftune
