// SPDX-License-Identifier: Apache-2.0
#include "mvlpt/array.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mvlpt/errors.hpp"

namespace mvlpt {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("array shape must have at least one dimension");
  for (auto d : shape) {
    if (d == 0) throw DimensionError("array dimension must be positive, got " + shape_string(shape));
  }
}

}  // namespace

Array::Array(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_size(shape_), fill);
}

Array::Array(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  check_shape(shape_);
  if (shape_size(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_string(shape_) + " needs " +
                         std::to_string(shape_size(shape_)) + " values, got " +
                         std::to_string(data_.size()));
  }
}

Array Array::scalar(double value) { return Array({1}, std::vector<double>{value}); }

Array Array::vector(std::initializer_list<double> values) {
  return Array({values.size()}, std::vector<double>(values));
}

Array Array::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Array({r, c}, std::move(data));
}

std::size_t Array::rows() const noexcept {
  if (shape_.empty()) return 0;
  return shape_.size() == 1 ? 1 : shape_.front();
}

std::size_t Array::cols() const noexcept {
  if (shape_.empty()) return 0;
  return shape_.size() == 1 ? shape_.front() : data_.size() / shape_.front();
}

double Array::item() const {
  if (data_.size() != 1) {
    throw ContractError("item() on non-scalar array of shape " + shape_string(shape_));
  }
  return data_.front();
}

void Array::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Array Array::reshaped(Shape shape) const {
  Array out(std::move(shape));
  if (out.size() != size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(out.shape_));
  }
  out.data_ = data_;
  return out;
}

bool Array::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace mvlpt
