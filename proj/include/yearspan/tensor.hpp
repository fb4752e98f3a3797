#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace yearspan {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

// Dense row-major fp32 array. Every op in this header rejects NaN/Inf in its
// result with NumericError.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor filled(Shape shape, float value);
  static Tensor identity(std::size_t n);
  static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows);
  static Tensor vector(std::vector<float> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // For rank >= 1: rows() is the product of all leading dims, cols() the last.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  float* raw() { return data_.data(); }
  const float* raw() const { return data_.data(); }
  const std::vector<float>& values() const { return data_; }

  std::span<float> row(std::size_t r);
  std::span<const float> row(std::size_t r) const;

  float& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  Tensor reshaped(Shape shape) const;
  // Copies rows [begin, end) of the (rows x cols) view.
  Tensor slice_rows(std::size_t begin, std::size_t end) const;
  // Copies columns [begin, end) of a 2D tensor.
  Tensor slice_cols(std::size_t begin, std::size_t end) const;
  Tensor transposed() const;

  bool all_finite() const;
  void require_finite(const char* op) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

Tensor matmul(const Tensor& a, const Tensor& b);
// a (m x k) times b^T where b is (n x k).
Tensor matmul_transposed(const Tensor& a, const Tensor& b);

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps);
// Normalizes without the affine step; returns the per-row normalized values.
Tensor normalize_rows(const Tensor& x, float eps);

float gelu(float x);
Tensor gelu(const Tensor& x);

Tensor softmax(const Tensor& x, int axis = -1);
std::vector<float> softmax(std::span<const float> logits);

Tensor add(const Tensor& a, const Tensor& b);
Tensor subtract(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
// Adds a length-cols vector to every row.
Tensor add_row_vector(const Tensor& a, const Tensor& v);
void add_inplace(Tensor& a, const Tensor& b);

float max_abs_diff(const Tensor& a, const Tensor& b);
float max_abs_diff(std::span<const float> a, std::span<const float> b);

}  // namespace yearspan
