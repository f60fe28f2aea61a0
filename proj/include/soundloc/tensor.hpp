// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "soundloc/common.hpp"

namespace soundloc {

/// Dense row-major tensor. Rank is dynamic (vectors, matrices, feature maps
/// and batched maps all share this one type).
template <class T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape)
      : shape_(std::move(shape)), data_(checked_numel(shape_), T{}) {}

  Tensor(std::vector<int> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != checked_numel(shape_)) {
      throw InvalidInput("Tensor: data size does not match shape");
    }
  }

  static Tensor full(std::vector<int> shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& raw() { return data_; }
  const std::vector<T>& raw() const { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const {
    return data_[static_cast<std::size_t>(i)];
  }

  T& operator()(int a) { return data_[static_cast<std::size_t>(a)]; }
  const T& operator()(int a) const { return data_[static_cast<std::size_t>(a)]; }

  T& operator()(int a, int b) { return data_[idx2(a, b)]; }
  const T& operator()(int a, int b) const { return data_[idx2(a, b)]; }

  T& operator()(int a, int b, int c) { return data_[idx3(a, b, c)]; }
  const T& operator()(int a, int b, int c) const { return data_[idx3(a, b, c)]; }

  T& operator()(int a, int b, int c, int d) { return data_[idx4(a, b, c, d)]; }
  const T& operator()(int a, int b, int c, int d) const {
    return data_[idx4(a, b, c, d)];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  T max_value() const {
    if (data_.empty()) throw InvalidInput("Tensor::max_value: empty tensor");
    return *std::max_element(data_.begin(), data_.end());
  }

  T min_value() const {
    if (data_.empty()) throw InvalidInput("Tensor::min_value: empty tensor");
    return *std::min_element(data_.begin(), data_.end());
  }

  bool all_finite() const {
    for (const T& v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

 private:
  static std::int64_t checked_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (const int d : shape) {
      if (d < 0) throw InvalidInput("Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  std::size_t idx2(int a, int b) const {
    return static_cast<std::size_t>(a) * static_cast<std::size_t>(shape_[1]) +
           static_cast<std::size_t>(b);
  }
  std::size_t idx3(int a, int b, int c) const {
    return (static_cast<std::size_t>(a) * static_cast<std::size_t>(shape_[1]) +
            static_cast<std::size_t>(b)) *
               static_cast<std::size_t>(shape_[2]) +
           static_cast<std::size_t>(c);
  }
  std::size_t idx4(int a, int b, int c, int d) const {
    return ((static_cast<std::size_t>(a) * static_cast<std::size_t>(shape_[1]) +
             static_cast<std::size_t>(b)) *
                static_cast<std::size_t>(shape_[2]) +
            static_cast<std::size_t>(c)) *
               static_cast<std::size_t>(shape_[3]) +
           static_cast<std::size_t>(d);
  }

  std::vector<int> shape_;
  std::vector<T> data_;
};

using RTensor = Tensor<double>;

}  // namespace soundloc
