#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace gsgcn {

// Scalar type of all tensor data. The default build uses 32-bit reals;
// defining GSGCN_REAL64 switches the whole core to 64-bit for tight
// gradient verification.
#ifdef GSGCN_REAL64
using real = double;
#else
using real = float;
#endif

// Extents of a dense row-major array. An empty shape is a rank-0 scalar.
using Shape = std::vector<int>;

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shape_to_string(const Shape& shape);
std::int64_t shape_numel(const Shape& shape);
std::vector<std::int64_t> row_major_strides(const Shape& shape);

// Dense N-dimensional array of reals with row-major layout.
class Tensor {
 public:
  Tensor() : data_(1, real(0)) {}
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<real> data);

  static Tensor scalar(real v);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, real v);
  static Tensor ones(Shape shape) { return full(std::move(shape), real(1)); }
  // Uniform draws in [lo, hi), consumed from `rng` in row-major order.
  static Tensor uniform(Shape shape, real lo, real hi, std::mt19937& rng);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_[static_cast<size_t>(axis)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  real* data() { return data_.data(); }
  const real* data() const { return data_.data(); }
  std::vector<real>& vec() { return data_; }
  const std::vector<real>& vec() const { return data_; }

  real& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
  real operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // Multi-index accessors; slow, intended for tests and glue code.
  real& at(std::initializer_list<int> idx);
  real at(std::initializer_list<int> idx) const;

  void fill(real v) { std::fill(data_.begin(), data_.end(), v); }
  bool all_finite() const;
  std::string shape_str() const { return shape_to_string(shape_); }

 private:
  Shape shape_;
  std::vector<real> data_;
};

// Broadcast two shapes (numpy rules restricted to singleton axes), throwing
// TensorError when they are incompatible.
Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op_name);

}  // namespace gsgcn
