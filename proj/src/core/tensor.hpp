#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <numeric>
#include <vector>

#include "core/common.hpp"

namespace pgns {

// Dense row-major value carrier. Rank is 1 or 2; rank-1 tensors behave as a
// single column. Gradients, when a tape allocates them, share the shape.
template <class T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int r, int c) : shape{r, c}, data(size_t(r) * c, T(0)) {
    require(r >= 0 && c >= 0, "tensor: negative dimension");
  }
  Tensor(int r, int c, std::vector<T> values) : shape{r, c}, data(std::move(values)) {
    require(data.size() == size_t(r) * c, "tensor: shape/data mismatch");
  }

  static Tensor scalar(T v) {
    Tensor t(1, 1);
    t.data[0] = v;
    return t;
  }

  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int cols() const { return shape.size() < 2 ? (shape.empty() ? 0 : 1) : shape[1]; }
  size_t size() const { return data.size(); }

  T& at(int r, int c) { return data[size_t(r) * cols() + c]; }
  T at(int r, int c) const { return data[size_t(r) * cols() + c]; }

  T value() const {
    require(size() == 1, "tensor: value() on non-scalar");
    return data[0];
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool same_shape(const Tensor& o) const { return rows() == o.rows() && cols() == o.cols(); }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

  using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<EMat> mat() { return {data.data(), rows(), cols()}; }
  Eigen::Map<const EMat> mat() const { return {data.data(), rows(), cols()}; }
};

template <class T>
Tensor<T> tensor_cast_from_double(const Tensor<double>& src) {
  Tensor<T> out(src.rows(), src.cols());
  for (size_t i = 0; i < src.data.size(); ++i) out.data[i] = T(src.data[i]);
  return out;
}

template <class T>
Tensor<double> tensor_to_double(const Tensor<T>& src) {
  Tensor<double> out(src.rows(), src.cols());
  for (size_t i = 0; i < src.data.size(); ++i) out.data[i] = double(src.data[i]);
  return out;
}

}  // namespace pgns
