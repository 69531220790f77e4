// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors and boolean masks.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dart {

using Shape = std::vector<std::int64_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::int64_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename S>
struct Tensor {
  Shape shape;
  std::vector<S> data;

  Tensor() = default;
  explicit Tensor(Shape s, S fill = S{0}) : shape(std::move(s)), data(static_cast<std::size_t>(numel(shape)), fill) {}
  Tensor(Shape s, std::vector<S> values) : shape(std::move(s)), data(std::move(values)) {
    if (static_cast<std::int64_t>(data.size()) != numel(shape)) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                           shape_string(shape));
    }
  }

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape.size()); }
  // Leading extent when viewed as a matrix over the last axis.
  std::int64_t rows() const { return shape.empty() ? 1 : size() / shape.back(); }
  std::int64_t cols() const { return shape.empty() ? 1 : shape.back(); }

  S& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  const S& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }
  S& at(std::int64_t r, std::int64_t c) { return data[static_cast<std::size_t>(r * cols() + c)]; }
  const S& at(std::int64_t r, std::int64_t c) const { return data[static_cast<std::size_t>(r * cols() + c)]; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

// Row-major boolean matrix; true means "visible".
class BoolMatrix {
 public:
  BoolMatrix() = default;
  BoolMatrix(std::int64_t rows, std::int64_t cols, bool fill = false)
      : rows_(rows), cols_(cols), bits_(static_cast<std::size_t>(rows * cols), fill ? 1 : 0) {}

  std::int64_t rows() const { return rows_; }
  std::int64_t cols() const { return cols_; }
  bool operator()(std::int64_t r, std::int64_t c) const { return bits_[static_cast<std::size_t>(r * cols_ + c)] != 0; }
  void set(std::int64_t r, std::int64_t c, bool v) { bits_[static_cast<std::size_t>(r * cols_ + c)] = v ? 1 : 0; }
  const std::uint8_t* row(std::int64_t r) const { return bits_.data() + r * cols_; }

  // Rows [row_begin, row_begin + count) restricted to the first `col_count` columns.
  BoolMatrix block(std::int64_t row_begin, std::int64_t count, std::int64_t col_count) const;

  bool operator==(const BoolMatrix&) const = default;

 private:
  std::int64_t rows_ = 0;
  std::int64_t cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

}  // namespace dart
