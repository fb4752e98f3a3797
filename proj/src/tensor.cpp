#include "yearspan/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace yearspan {

namespace {

using RowMajor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using Map = Eigen::Map<RowMajor>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(element_count(shape_), 0.0f) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (element_count(shape_) != data_.size()) {
    throw ShapeError("tensor: shape " + to_string(shape_) + " does not hold " +
                     std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::filled(Shape shape, float value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0f;
  return t;
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<float>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<float> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("tensor: ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::vector(std::vector<float> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) throw ShapeError("tensor: axis out of range");
  return shape_[axis];
}

std::size_t Tensor::rows() const {
  if (shape_.empty()) return 1;
  return shape_.back() == 0 ? 0 : data_.size() / shape_.back();
}

std::size_t Tensor::cols() const { return shape_.empty() ? 1 : shape_.back(); }

std::span<float> Tensor::row(std::size_t r) { return std::span<float>(data_).subspan(r * cols(), cols()); }

std::span<const float> Tensor::row(std::size_t r) const {
  return std::span<const float>(data_).subspan(r * cols(), cols());
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
  if (begin > end || end > rows()) throw ShapeError("tensor: row slice out of range");
  const std::size_t c = cols();
  std::vector<float> out(data_.begin() + static_cast<std::ptrdiff_t>(begin * c),
                         data_.begin() + static_cast<std::ptrdiff_t>(end * c));
  return Tensor({end - begin, c}, std::move(out));
}

Tensor Tensor::slice_cols(std::size_t begin, std::size_t end) const {
  if (rank() != 2 || begin > end || end > cols()) throw ShapeError("tensor: column slice out of range");
  const std::size_t r = rows();
  const std::size_t w = end - begin;
  Tensor out({r, w});
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(i * cols() + begin), w,
                out.data_.begin() + static_cast<std::ptrdiff_t>(i * w));
  }
  return out;
}

Tensor Tensor::transposed() const {
  if (rank() != 2) throw ShapeError("tensor: transpose needs rank 2");
  Tensor out({cols(), rows()});
  Map(out.raw(), cols(), rows()) = ConstMap(raw(), rows(), cols()).transpose();
  return out;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

void Tensor::require_finite(const char* op) const {
  if (!all_finite()) throw NumericError(std::string(op) + ": non-finite value in result");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul: operands must be rank 2");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  Tensor out({a.rows(), b.cols()});
  Map(out.raw(), a.rows(), b.cols()).noalias() =
      ConstMap(a.raw(), a.rows(), a.cols()) * ConstMap(b.raw(), b.rows(), b.cols());
  out.require_finite("matmul");
  return out;
}

Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul_transposed: operands must be rank 2");
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_transposed: inner dimensions differ " + to_string(a.shape()) + " x " +
                     to_string(b.shape()) + "^T");
  }
  Tensor out({a.rows(), b.rows()});
  Map(out.raw(), a.rows(), b.rows()).noalias() =
      ConstMap(a.raw(), a.rows(), a.cols()) * ConstMap(b.raw(), b.rows(), b.cols()).transpose();
  out.require_finite("matmul_transposed");
  return out;
}

Tensor normalize_rows(const Tensor& x, float eps) {
  Tensor out(x.shape());
  const std::size_t d = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    double mean = 0.0;
    for (float v : in) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (float v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    auto dst = out.row(r);
    for (std::size_t i = 0; i < d; ++i) dst[i] = static_cast<float>((in[i] - mean) * inv);
  }
  out.require_finite("layernorm");
  return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  const std::size_t d = x.cols();
  if (gain.size() != d || bias.size() != d) {
    throw ShapeError("layernorm: gain/bias length must equal last dimension " + std::to_string(d));
  }
  Tensor out = normalize_rows(x, eps);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t i = 0; i < d; ++i) row[i] = row[i] * gain[i] + bias[i];
  }
  out.require_finite("layernorm");
  return out;
}

float gelu(float x) {
  constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
  return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

Tensor gelu(const Tensor& x) {
  Tensor out(x.shape());
  std::transform(x.data().begin(), x.data().end(), out.data().begin(), [](float v) { return gelu(v); });
  out.require_finite("gelu");
  return out;
}

std::vector<float> softmax(std::span<const float> logits) {
  std::vector<float> out(logits.size());
  if (logits.empty()) return out;
  const float peak = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - peak);
    total += out[i];
  }
  const float inv = static_cast<float>(1.0 / total);
  for (float& v : out) v *= inv;
  return out;
}

Tensor softmax(const Tensor& x, int axis) {
  const int rank = static_cast<int>(x.rank());
  if (rank == 0) throw ShapeError("softmax: scalar input");
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("softmax: axis out of range");
  const auto& shape = x.shape();
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= shape[static_cast<std::size_t>(i)];
  const std::size_t n = shape[static_cast<std::size_t>(axis)];

  Tensor out(shape);
  std::vector<float> lane(n);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      for (std::size_t k = 0; k < n; ++k) lane[k] = x[base + k * inner];
      const auto probs = softmax(lane);
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] = probs[k];
    }
  }
  out.require_finite("softmax");
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = a;
  add_inplace(out, b);
  return out;
}

void add_inplace(Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto dst = a.data();
  auto src = b.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  a.require_finite("add");
}

Tensor subtract(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "subtract");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  out.require_finite("subtract");
  return out;
}

Tensor scale(const Tensor& a, float s) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  out.require_finite("scale");
  return out;
}

Tensor add_row_vector(const Tensor& a, const Tensor& v) {
  if (v.size() != a.cols()) throw ShapeError("add_row_vector: vector length must equal column count");
  Tensor out = a;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t i = 0; i < row.size(); ++i) row[i] += v[i];
  }
  out.require_finite("add_row_vector");
  return out;
}

float max_abs_diff(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("max_abs_diff: length mismatch");
  float worst = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  return max_abs_diff(a.data(), b.data());
}

}  // namespace yearspan
