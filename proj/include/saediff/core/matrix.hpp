// Copyright 2026 The sae-diff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "saediff/core/errors.hpp"

namespace saediff {

// Dense row-major matrix with value semantics. Vectors are 1×n matrices when
// they need to live next to matrices (parameter blocks), otherwise plain
// std::vector.
template <class T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> flat() { return data_; }
  std::span<const T> flat() const { return data_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <class U>
  Matrix<U> cast() const {
    Matrix<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.flat()[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

inline void require_dims(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

// out[i] = sum_j m(i, j) * x[j]
template <class T, class U>
void matvec(const Matrix<T>& m, std::span<const U> x, std::span<U> out) {
  require_dims(x.size() == m.cols() && out.size() == m.rows(), "matvec: shape mismatch");
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const T* r = m.data() + i * m.cols();
    U acc = U(0);
    for (std::size_t j = 0; j < m.cols(); ++j) acc += static_cast<U>(r[j]) * x[j];
    out[i] = acc;
  }
}

// C = A · Bᵀ   (A: n×k, B: m×k, C: n×m). Linear layers store weights as
// [out × in], so this is the forward product of a batch of rows.
template <class T>
Matrix<T> matmul_bt(const Matrix<T>& a, const Matrix<T>& b) {
  require_dims(a.cols() == b.cols(), "matmul_bt: inner dimension mismatch");
  const std::size_t k = a.cols(), m = b.rows();
  // Row-axpy over Bᵀ keeps the inner loop free of reductions so it vectorizes.
  std::vector<T> bt(k * m);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t t = 0; t < k; ++t) bt[t * m + j] = b.data()[j * k + t];
  Matrix<T> c(a.rows(), m);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T* ar = a.data() + i * k;
    T* cr = c.data() + i * m;
    for (std::size_t t = 0; t < k; ++t) {
      const T av = ar[t];
      const T* br = bt.data() + t * m;
      for (std::size_t j = 0; j < m; ++j) cr[j] += av * br[j];
    }
  }
  return c;
}

// C = A · B   (A: n×k, B: k×m)
template <class T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  require_dims(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  Matrix<T> c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T* cr = c.data() + i * b.cols();
    for (std::size_t t = 0; t < a.cols(); ++t) {
      const T av = a(i, t);
      if (av == T(0)) continue;
      const T* br = b.data() + t * b.cols();
      for (std::size_t j = 0; j < b.cols(); ++j) cr[j] += av * br[j];
    }
  }
  return c;
}

// G += Aᵀ · B   (A: n×m, B: n×k, G: m×k). Weight-gradient accumulation.
template <class T>
void add_at_b(Matrix<T>& g, const Matrix<T>& a, const Matrix<T>& b) {
  require_dims(a.rows() == b.rows() && g.rows() == a.cols() && g.cols() == b.cols(),
               "add_at_b: shape mismatch");
  for (std::size_t n = 0; n < a.rows(); ++n) {
    const T* ar = a.data() + n * a.cols();
    const T* br = b.data() + n * b.cols();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const T av = ar[i];
      if (av == T(0)) continue;
      T* gr = g.data() + i * g.cols();
      for (std::size_t j = 0; j < b.cols(); ++j) gr[j] += av * br[j];
    }
  }
}

template <class T, class U = double>
U dot(std::span<const T> a, std::span<const T> b) {
  U acc = U(0);
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<U>(a[i]) * static_cast<U>(b[i]);
  return acc;
}

template <class T>
double norm2(std::span<const T> a) {
  return std::sqrt(dot<T, double>(a, a));
}

template <class T>
bool all_finite(std::span<const T> v) {
  for (const T& x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace saediff
