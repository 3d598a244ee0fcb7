#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "kgseq/errors.hpp"

namespace kgseq::nn {

// Dense row-major tensor. Rank 1 and 2 cover everything the model needs;
// scalars are shape {1}.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, T fill = T(0)) : shape(std::move(s)) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    data.assign(n, fill);
  }

  static Tensor scalar(T v) {
    Tensor t({1});
    t.data[0] = v;
    return t;
  }

  size_t numel() const { return data.size(); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int cols() const { return ndim() < 2 ? 1 : shape[1]; }

  T& at(int i) { return data[static_cast<size_t>(i)]; }
  T at(int i) const { return data[static_cast<size_t>(i)]; }
  T& at(int i, int j) { return data[static_cast<size_t>(i) * static_cast<size_t>(shape[1]) + static_cast<size_t>(j)]; }
  T at(int i, int j) const { return data[static_cast<size_t>(i) * static_cast<size_t>(shape[1]) + static_cast<size_t>(j)]; }
  T* row_ptr(int i) { return data.data() + static_cast<size_t>(i) * static_cast<size_t>(cols()); }
  const T* row_ptr(int i) const { return data.data() + static_cast<size_t>(i) * static_cast<size_t>(cols()); }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
};

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                     b.shape_str());
}

// C(m x n) += or = A(m x k) * B(k x n). Row-major, i-k-j loop order so the
// inner updates stream over contiguous rows.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
  if (!accumulate) std::fill(c, c + static_cast<size_t>(m) * static_cast<size_t>(n), T(0));
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<size_t>(i) * static_cast<size_t>(k);
    T* crow = c + static_cast<size_t>(i) * static_cast<size_t>(n);
    for (int kk = 0; kk < k; ++kk) {
      const T av = arow[kk];
      if (av == T(0)) continue;
      const T* brow = b + static_cast<size_t>(kk) * static_cast<size_t>(n);
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(m x n) += or = A(m x k) * B(n x k)^T. Dot products over contiguous rows.
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<size_t>(i) * static_cast<size_t>(k);
    T* crow = c + static_cast<size_t>(i) * static_cast<size_t>(n);
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<size_t>(j) * static_cast<size_t>(k);
      T acc = T(0);
      for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      crow[j] = accumulate ? crow[j] + acc : acc;
    }
  }
}

// C(m x n) += or = A(k x m)^T * B(k x n).
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
  if (!accumulate) std::fill(c, c + static_cast<size_t>(m) * static_cast<size_t>(n), T(0));
  for (int kk = 0; kk < k; ++kk) {
    const T* arow = a + static_cast<size_t>(kk) * static_cast<size_t>(m);
    const T* brow = b + static_cast<size_t>(kk) * static_cast<size_t>(n);
    for (int i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T(0)) continue;
      T* crow = c + static_cast<size_t>(i) * static_cast<size_t>(n);
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// Stable log-softmax of a length-n row, written to out (may alias in).
template <typename T>
void log_softmax_row(const T* in, T* out, int n) {
  T mx = in[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, in[i]);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += std::exp(static_cast<double>(in[i] - mx));
  const T lse = mx + static_cast<T>(std::log(sum));
  for (int i = 0; i < n; ++i) out[i] = in[i] - lse;
}

template <typename T>
void softmax_row(const T* in, T* out, int n) {
  T mx = in[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, in[i]);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const double e = std::exp(static_cast<double>(in[i] - mx));
    out[i] = static_cast<T>(e);
    sum += e;
  }
  const T inv = static_cast<T>(1.0 / sum);
  for (int i = 0; i < n; ++i) out[i] *= inv;
}

}  // namespace kgseq::nn
