#include "compresskit/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace compresskit {

std::size_t shape_product(std::span<const std::size_t> shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_to_string(std::span<const std::size_t> shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
  for (std::size_t d : shape_) {
    if (d == 0) throw std::invalid_argument("Tensor: zero dimension in shape " + shape_to_string(shape_));
  }
  data_.assign(shape_product(shape_), 0.0);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_product(shape_) != data_.size()) {
    throw std::invalid_argument("Tensor: shape " + shape_to_string(shape_) + " implies " +
                                std::to_string(shape_product(shape_)) + " elements, got " +
                                std::to_string(data_.size()));
  }
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor Tensor::reshaped(std::vector<std::size_t> new_shape) const {
  if (shape_product(new_shape) != data_.size()) {
    throw std::invalid_argument("Tensor::reshaped: " + shape_to_string(new_shape) +
                                " does not match element count " + std::to_string(data_.size()));
  }
  return Tensor(std::move(new_shape), data_);
}

std::string Tensor::shape_string() const { return shape_to_string(shape_); }

double Tensor::min_value() const {
  if (data_.empty()) throw std::logic_error("Tensor::min_value on empty tensor");
  return *std::min_element(data_.begin(), data_.end());
}

double Tensor::max_value() const {
  if (data_.empty()) throw std::logic_error("Tensor::max_value on empty tensor");
  return *std::max_element(data_.begin(), data_.end());
}

std::size_t Tensor::stride(std::size_t axis) const {
  std::size_t s = 1;
  for (std::size_t i = axis + 1; i < shape_.size(); ++i) s *= shape_[i];
  return s;
}

} // namespace compresskit
