#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tornet/errors.hpp"

namespace tornet {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

/// (frequency, time) pair used for kernels, strides and paddings.
struct Index2 {
  Index f = 1;
  Index t = 1;
  friend bool operator==(const Index2&, const Index2&) = default;
};

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape, char sep = 'x') {
  std::ostringstream os;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << sep;
    os << shape[i];
  }
  return os.str();
}

/// Dense row-major N-d array (last axis fastest). Storage is an Eigen column
/// array so whole-tensor arithmetic can be written as Eigen expressions.
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;

  explicit Tensor(Shape shape) : Tensor(std::move(shape), Scalar(0)) {}

  Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)) {
    for (Index d : shape_) {
      if (d <= 0) throw ConfigError("tensor dimensions must be positive, got " + to_string(shape_));
    }
    data_ = Storage::Constant(numel(shape_), fill);
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values) : Tensor(std::move(shape)) {
    if (static_cast<Index>(values.size()) != size()) {
      throw ConfigError("initializer has " + std::to_string(values.size()) + " values for shape " +
                        to_string(shape_));
    }
    std::copy(values.begin(), values.end(), data_.data());
  }

  Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size()) {
      throw ConfigError("data length " + std::to_string(data_.size()) + " does not match shape " +
                        to_string(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> values() { return {data_.data(), static_cast<std::size_t>(data_.size())}; }
  std::span<const Scalar> values() const {
    return {data_.data(), static_cast<std::size_t>(data_.size())};
  }

  Storage& array() { return data_; }
  const Storage& array() const { return data_; }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  template <typename... Is>
  Scalar& operator()(Is... idx) {
    return data_[offset(idx...)];
  }
  template <typename... Is>
  Scalar operator()(Is... idx) const {
    return data_[offset(idx...)];
  }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != size()) {
      throw ConfigError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>().eval());
  }

  bool all_finite() const { return data_.allFinite(); }

  void set_zero() { data_.setZero(); }

 private:
  template <typename... Is>
  Index offset(Is... idx) const {
    const Index ids[] = {static_cast<Index>(idx)...};
    Index off = 0;
    for (std::size_t a = 0; a < sizeof...(Is); ++a) off = off * shape_[a] + ids[a];
    return off;
  }

  Shape shape_;
  Storage data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

/// Throws ConfigError unless `t` has exactly the given rank.
template <typename Scalar>
void require_rank(const Tensor<Scalar>& t, Index rank, const char* what) {
  if (t.rank() != rank) {
    throw ConfigError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                      to_string(t.shape()));
  }
}

}  // namespace tornet
