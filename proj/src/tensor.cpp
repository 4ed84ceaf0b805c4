#include "sslseg/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "sslseg/errors.hpp"

namespace sslseg {

namespace {

std::size_t checked_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimension must be positive");
    n *= d;
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(checked_product(shape_), fill) {}

Tensor Tensor::scalar(double v) {
  Tensor t;
  t.shape_ = {1};
  t.data_ = {v};
  return t;
}

Tensor Tensor::from_data(std::vector<std::size_t> shape,
                         std::vector<double> data) {
  Tensor t;
  t.shape_ = std::move(shape);
  if (checked_product(t.shape_) != data.size()) {
    throw ShapeError("data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_to_string(t.shape_));
  }
  t.data_ = std::move(data);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ShapeError("item() requires a single-element tensor, got shape " +
                     shape_to_string(shape_));
  }
  return data_[0];
}

void Tensor::fill(double v) {
  for (double& x : data_) x = v;
}

std::string shape_to_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* where) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(where) + ": shape mismatch " +
                     shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

void require_finite(const Tensor& t, const char* where) {
  if (!t.all_finite()) {
    throw NumericError(std::string(where) + ": tensor contains NaN or Inf");
  }
}

}  // namespace sslseg
