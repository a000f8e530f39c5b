#include "decomposeme/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "decomposeme/error.hpp"

namespace decomposeme {

std::string to_string(const Shape& s) {
  return std::to_string(s.n) + "x" + std::to_string(s.c) + "x" +
         std::to_string(s.h) + "x" + std::to_string(s.w);
}

Tensor::Tensor(Shape shape, float fill) : shape_(shape) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
    throw DimensionError("negative tensor extent " + to_string(shape));
  }
  data_.assign(shape.numel(), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data)
    : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape.numel()) {
    throw DimensionError("tensor " + to_string(shape) + " needs " +
                         std::to_string(shape.numel()) + " elements, got " +
                         std::to_string(data_.size()));
  }
}

Tensor Tensor::reshaped(Shape s) const {
  if (s.numel() != shape_.numel()) {
    throw DimensionError("cannot reshape " + to_string(shape_) + " to " +
                         to_string(s));
  }
  return Tensor(s, data_);
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](float v) { return std::isfinite(v); });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) {
    throw DimensionError("max_abs_diff: " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::fabs(static_cast<double>(a[i]) - b[i]));
  }
  return m;
}

double sum(const Tensor& t) {
  double s = 0.0;
  for (float v : t.data()) s += v;
  return s;
}

double l2_norm(const Tensor& t) {
  double s = 0.0;
  for (float v : t.data()) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

}  // namespace decomposeme
