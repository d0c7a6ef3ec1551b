#include "smile/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <sstream>

#include "smile/errors.hpp"

namespace smile {

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (element_count(shape_) != data_.size()) {
    throw ShapeError("tensor: shape " + to_string(shape_) + " needs " +
                     std::to_string(element_count(shape_)) + " values, got " +
                     std::to_string(data_.size()));
  }
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ShapeError("item() on tensor of shape " + to_string(shape_));
  }
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> indices) {
  if (t.rank() == 0) throw ShapeError("gather_rows on a scalar");
  const std::size_t rows = t.dim(0);
  const std::size_t stride = rows ? t.size() / rows : 0;
  Shape shape = t.shape();
  shape[0] = indices.size();
  Tensor out(shape);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= rows) throw ShapeError("gather_rows: index out of range");
    std::memcpy(out.data() + r * stride, t.data() + indices[r] * stride,
                stride * sizeof(double));
  }
  return out;
}

std::uint64_t fingerprint(const Tensor& t, std::uint64_t seed) {
  std::uint64_t h = seed;
  auto mix = [&h](std::uint64_t word) {
    for (int b = 0; b < 8; ++b) {
      h ^= (word >> (8 * b)) & 0xffu;
      h *= 1099511628211ULL;
    }
  };
  mix(t.rank());
  for (auto d : t.shape()) mix(d);
  for (double v : t.values()) mix(std::bit_cast<std::uint64_t>(v));
  return h;
}

}  // namespace smile
