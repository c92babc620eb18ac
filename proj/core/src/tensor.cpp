#include "gsgcn/tensor.hpp"

#include <cmath>
#include <sstream>

namespace gsgcn {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::vector<std::int64_t> row_major_strides(const Shape& shape) {
  std::vector<std::int64_t> strides(shape.size());
  std::int64_t acc = 1;
  for (size_t i = shape.size(); i-- > 0;) {
    strides[i] = acc;
    acc *= shape[i];
  }
  return strides;
}

namespace {
void validate_shape(const Shape& shape) {
  for (int d : shape) {
    if (d < 1) {
      throw TensorError("invalid tensor shape " + shape_to_string(shape) +
                        ": all extents must be >= 1");
    }
  }
}
}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  validate_shape(shape_);
  data_.assign(static_cast<size_t>(shape_numel(shape_)), real(0));
}

Tensor::Tensor(Shape shape, std::vector<real> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  validate_shape(shape_);
  if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size())) {
    throw TensorError("tensor data length " + std::to_string(data_.size()) +
                      " does not match shape " + shape_to_string(shape_));
  }
}

Tensor Tensor::scalar(real v) {
  Tensor t;
  t.data_[0] = v;
  return t;
}

Tensor Tensor::full(Shape shape, real v) {
  Tensor t(std::move(shape));
  t.fill(v);
  return t;
}

Tensor Tensor::uniform(Shape shape, real lo, real hi, std::mt19937& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<real> dist(lo, hi);
  for (auto& v : t.data_) v = dist(rng);
  return t;
}

real& Tensor::at(std::initializer_list<int> idx) {
  if (static_cast<int>(idx.size()) != rank()) {
    throw TensorError("at(): index rank " + std::to_string(idx.size()) +
                      " does not match tensor rank " + std::to_string(rank()));
  }
  std::int64_t flat = 0;
  auto strides = row_major_strides(shape_);
  size_t axis = 0;
  for (int i : idx) {
    if (i < 0 || i >= shape_[axis]) {
      throw TensorError("at(): index " + std::to_string(i) + " out of range for axis " +
                        std::to_string(axis) + " of shape " + shape_str());
    }
    flat += strides[axis] * i;
    ++axis;
  }
  return data_[static_cast<size_t>(flat)];
}

real Tensor::at(std::initializer_list<int> idx) const {
  return const_cast<Tensor*>(this)->at(idx);
}

bool Tensor::all_finite() const {
  for (real v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op_name) {
  const size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (size_t i = 0; i < rank; ++i) {
    const int da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const int db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw TensorError(std::string(op_name) + ": shapes " + shape_to_string(a) + " and " +
                        shape_to_string(b) + " are not broadcastable");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

}  // namespace gsgcn
