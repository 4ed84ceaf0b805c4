#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace sslseg {

/// Dense N-D float-64 tensor, row-major. Image batches use N x H x W x C.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  static Tensor scalar(double v);
  static Tensor from_data(std::vector<std::size_t> shape,
                          std::vector<double> data);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_[i]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  // NHWC addressing for rank-4 tensors.
  std::size_t index4(std::size_t n, std::size_t h, std::size_t w,
                     std::size_t c) const {
    return ((n * shape_[1] + h) * shape_[2] + w) * shape_[3] + c;
  }
  double at4(std::size_t n, std::size_t h, std::size_t w,
             std::size_t c) const {
    return data_[index4(n, h, w, c)];
  }
  double& at4(std::size_t n, std::size_t h, std::size_t w, std::size_t c) {
    return data_[index4(n, h, w, c)];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  /// Value of a single-element tensor; throws ShapeError otherwise.
  double item() const;

  void fill(double v);

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::string shape_to_string(const std::vector<std::size_t>& shape);

/// Throws ShapeError unless both tensors have identical shapes.
void require_same_shape(const Tensor& a, const Tensor& b, const char* where);

/// Throws NumericError if the tensor contains NaN or Inf.
void require_finite(const Tensor& t, const char* where);

}  // namespace sslseg
