#pragma once

// Dense row-major tensor over float (runtime) or double (gradient checking).
// Storage is a shared, contiguous buffer: copies are cheap, and the library
// treats tensors as immutable once an op has returned them. Mutation happens
// only while a tensor is being built (fills, loaders) or through the explicit
// *_consume kernels that document their uniqueness requirement.

#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "linglo/error.hpp"
#include "linglo/metering.hpp"

namespace linglo {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

template <typename T>
class Buffer {
 public:
  explicit Buffer(std::int64_t n) : n_(n), meter_(active_meter()) {
    if (meter_) meter_->on_alloc(bytes());  // may throw under a byte limit
    data_ = std::make_unique_for_overwrite<T[]>(static_cast<std::size_t>(n));
  }
  ~Buffer() {
    if (meter_) meter_->on_free(bytes());
  }
  Buffer(const Buffer&) = delete;
  Buffer& operator=(const Buffer&) = delete;

  T* data() { return data_.get(); }
  const T* data() const { return data_.get(); }
  std::int64_t size() const { return n_; }
  std::int64_t bytes() const { return n_ * static_cast<std::int64_t>(sizeof(T)); }

 private:
  std::int64_t n_;
  std::shared_ptr<MeterState> meter_;  // meter that counted this buffer
  std::unique_ptr<T[]> data_;
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  Tensor() = default;  // empty: no buffer, distinguishable via defined()

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape(shape_);
    buffer_ = std::make_shared<detail::Buffer<T>>(shape_numel(shape_));
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    T* p = t.raw();
    for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = value;
    return t;
  }

  static Tensor from(Shape shape, const std::vector<T>& values) {
    Tensor t(std::move(shape));
    if (static_cast<std::int64_t>(values.size()) != t.numel())
      fail(ErrorKind::Shape, "tensor: " + std::to_string(values.size()) +
                                 " values for shape " + shape_str(t.shape()));
    std::copy(values.begin(), values.end(), t.raw());
    return t;
  }

  static Tensor scalar(T value) { return full(Shape{}, value); }

  bool defined() const { return buffer_ != nullptr; }
  const Shape& shape() const { return shape_; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t dim(std::int64_t i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return buffer_ ? shape_numel(shape_) : 0; }

  const T* data() const { return buffer_->data(); }
  T* raw() { return buffer_->data(); }  // build-time mutation only

  // Element access for tests and small utilities (row-major).
  template <typename... Ix>
  T at(Ix... ix) const {
    const std::int64_t idx[] = {static_cast<std::int64_t>(ix)...};
    std::int64_t off = 0;
    for (std::size_t d = 0; d < sizeof...(Ix); ++d) off = off * shape_[d] + idx[d];
    return data()[off];
  }

  // A tensor with the same buffer but a different shape (numel must match).
  Tensor reshaped(Shape shape) const {
    validate_shape(shape);
    if (shape_numel(shape) != numel())
      fail(ErrorKind::Shape, "reshape: " + shape_str(shape_) + " -> " + shape_str(shape) +
                                 " changes element count");
    Tensor t;
    t.shape_ = std::move(shape);
    t.buffer_ = buffer_;
    return t;
  }

  Tensor clone() const {
    Tensor t(shape_);
    std::copy(data(), data() + numel(), t.raw());
    return t;
  }

  bool buffer_unique() const { return buffer_ && buffer_.use_count() == 1; }
  std::int64_t byte_size() const { return buffer_ ? buffer_->bytes() : 0; }

  bool all_finite() const {
    const T* p = data();
    for (std::int64_t i = 0; i < numel(); ++i)
      if (!std::isfinite(p[i])) return false;
    return true;
  }

 private:
  static void validate_shape(const Shape& shape) {
    for (std::int64_t e : shape)
      if (e < 1) fail(ErrorKind::Shape, "tensor: extent < 1 in shape " + shape_str(shape));
  }

  Shape shape_;
  std::shared_ptr<detail::Buffer<T>> buffer_;
};

// Row-major strides for a shape.
inline std::vector<std::int64_t> row_major_strides(const Shape& shape) {
  std::vector<std::int64_t> strides(shape.size(), 1);
  for (std::int64_t i = static_cast<std::int64_t>(shape.size()) - 2; i >= 0; --i)
    strides[static_cast<std::size_t>(i)] =
        strides[static_cast<std::size_t>(i) + 1] * shape[static_cast<std::size_t>(i) + 1];
  return strides;
}

}  // namespace linglo
