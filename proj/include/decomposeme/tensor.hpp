#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace decomposeme {

/// Extent of a dense NCHW tensor.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t sample_size() const { return static_cast<std::size_t>(c) * h * w; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& s);

/// Dense 4D float32 tensor, row-major with width fastest. Also used for
/// parameter arrays of lower logical rank (vectors are {len,1,1,1}).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor vector(std::size_t len, float fill = 0.0f) {
    return Tensor({static_cast<int>(len), 1, 1, 1}, fill);
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  float* raw() { return data_.data(); }
  const float* raw() const { return data_.data(); }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) *
               shape_.w + w;
  }
  float& at(int n, int c, int h, int w) { return data_[offset(n, c, h, w)]; }
  float at(int n, int c, int h, int w) const {
    return data_[offset(n, c, h, w)];
  }

  std::span<float> sample(int n) {
    return std::span<float>(data_).subspan(n * shape_.sample_size(),
                                           shape_.sample_size());
  }
  std::span<const float> sample(int n) const {
    return std::span<const float>(data_).subspan(n * shape_.sample_size(),
                                                 shape_.sample_size());
  }

  /// Same buffer, new extent; the element count must match.
  Tensor reshaped(Shape s) const;
  void fill(float v);
  bool all_finite() const;

 private:
  Shape shape_{};
  std::vector<float> data_;
};

/// Largest absolute elementwise difference; shapes must agree.
double max_abs_diff(const Tensor& a, const Tensor& b);
double sum(const Tensor& t);
double l2_norm(const Tensor& t);

}  // namespace decomposeme
