// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sentinel/errors.hpp"
#include "sentinel/rng.hpp"

namespace sentinel {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major n-d array. Storage is 32-bit in production (T = float);
// the double instantiation exists for the finite-difference shadow used by
// gradient checks. requires_grad / grad mirror the training contract: grad,
// when present, has the same extent as data.
template <typename T>
struct TensorT {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;  // empty == absent

  TensorT() = default;

  explicit TensorT(Shape s) : shape(std::move(s)) {
    validate_shape();
    data.assign(static_cast<size_t>(shape_numel(shape)), T(0));
  }

  TensorT(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    validate_shape();
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      fail(ErrorKind::Dimension, "tensor data length " + std::to_string(data.size()) +
                                     " does not match shape " + shape_str(shape));
  }

  static TensorT zeros(Shape s) { return TensorT(std::move(s)); }

  static TensorT full(Shape s, T v) {
    TensorT t(std::move(s));
    for (auto& x : t.data) x = v;
    return t;
  }

  static TensorT randn(Shape s, Rng& rng, double stddev = 1.0) {
    TensorT t(std::move(s));
    for (auto& x : t.data) x = static_cast<T>(rng.gaussian() * stddev);
    return t;
  }

  static TensorT identity(int64_t n) {
    TensorT t(Shape{n, n});
    for (int64_t i = 0; i < n; ++i) t.data[static_cast<size_t>(i * n + i)] = T(1);
    return t;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

  T& at(int64_t i) { return data[static_cast<size_t>(i)]; }
  T at(int64_t i) const { return data[static_cast<size_t>(i)]; }
  T& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
  T at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }
  T& at(int64_t i, int64_t j, int64_t k) {
    return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
  }
  T at(int64_t i, int64_t j, int64_t k) const {
    return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
  }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  void alloc_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }

  void zero_grad() {
    for (auto& g : grad) g = T(0);
  }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  void ensure_finite(const std::string& context) const {
    for (size_t i = 0; i < data.size(); ++i)
      if (!std::isfinite(static_cast<double>(data[i])))
        fail(ErrorKind::Numeric, context + ": non-finite value at flat index " + std::to_string(i));
  }

  TensorT reshaped(Shape s) const {
    if (shape_numel(s) != numel())
      fail(ErrorKind::Dimension,
           "reshape " + shape_str(shape) + " -> " + shape_str(s) + " changes element count");
    TensorT t;
    t.shape = std::move(s);
    t.data = data;
    return t;
  }

  // 64-bit accumulation for reductions, per the storage/accumulation split.
  double sum() const {
    double acc = 0.0;
    for (T v : data) acc += static_cast<double>(v);
    return acc;
  }

  double sum_squares() const {
    double acc = 0.0;
    for (T v : data) acc += static_cast<double>(v) * static_cast<double>(v);
    return acc;
  }

  double norm2() const { return std::sqrt(sum_squares()); }

  double mean() const { return data.empty() ? 0.0 : sum() / static_cast<double>(data.size()); }

  double stddev() const {
    if (data.size() < 2) return 0.0;
    const double m = mean();
    double acc = 0.0;
    for (T v : data) {
      const double d = static_cast<double>(v) - m;
      acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(data.size()));
  }

  double max_abs() const {
    double m = 0.0;
    for (T v : data) m = std::max(m, std::abs(static_cast<double>(v)));
    return m;
  }

 private:
  void validate_shape() const {
    for (int64_t e : shape)
      if (e <= 0) fail(ErrorKind::Dimension, "non-positive extent in shape " + shape_str(shape));
  }
};

using Tensor = TensorT<float>;

template <typename T>
double max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
  if (!a.same_shape(b)) fail(ErrorKind::Dimension, "max_abs_diff: shape mismatch");
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
  return m;
}

namespace detail {

// C[m,p] = A[m,n] * B[n,p]; row-major, double accumulators.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t p,
             std::vector<double>& scratch) {
  scratch.assign(static_cast<size_t>(p), 0.0);
  double* acc = scratch.data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < p; ++j) acc[j] = 0.0;
    const T* ai = a + i * n;
    for (int64_t k = 0; k < n; ++k) {
      const double av = static_cast<double>(ai[k]);
      const T* bk = b + k * p;
      for (int64_t j = 0; j < p; ++j) acc[j] += av * static_cast<double>(bk[j]);
    }
    T* ci = c + i * p;
    for (int64_t j = 0; j < p; ++j) ci[j] = static_cast<T>(acc[j]);
  }
}

// C[m,n] += G[m,p] * B^T[p,n]  (i.e. rows of G dotted with rows of B).
// Eight independent accumulator lanes keep the reduction pipelined.
template <typename T>
void gemm_nt_accum(const T* g, const T* b, T* c, int64_t m, int64_t n, int64_t p) {
  for (int64_t i = 0; i < m; ++i) {
    const T* gi = g + i * p;
    T* ci = c + i * n;
    for (int64_t k = 0; k < n; ++k) {
      const T* bk = b + k * p;
      double lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
      int64_t j = 0;
      for (; j + 8 <= p; j += 8)
        for (int64_t u = 0; u < 8; ++u)
          lane[u] += static_cast<double>(gi[j + u]) * static_cast<double>(bk[j + u]);
      double acc = ((lane[0] + lane[1]) + (lane[2] + lane[3])) +
                   ((lane[4] + lane[5]) + (lane[6] + lane[7]));
      for (; j < p; ++j) acc += static_cast<double>(gi[j]) * static_cast<double>(bk[j]);
      ci[k] += static_cast<T>(acc);
    }
  }
}

// C[n,p] += A^T[n,m] * G[m,p].
template <typename T>
void gemm_tn_accum(const T* a, const T* g, T* c, int64_t m, int64_t n, int64_t p,
                   std::vector<double>& scratch) {
  scratch.assign(static_cast<size_t>(p), 0.0);
  double* acc = scratch.data();
  for (int64_t k = 0; k < n; ++k) {
    for (int64_t j = 0; j < p; ++j) acc[j] = 0.0;
    for (int64_t i = 0; i < m; ++i) {
      const double av = static_cast<double>(a[i * n + k]);
      const T* gi = g + i * p;
      for (int64_t j = 0; j < p; ++j) acc[j] += av * static_cast<double>(gi[j]);
    }
    T* ck = c + k * p;
    for (int64_t j = 0; j < p; ++j) ck[j] += static_cast<T>(acc[j]);
  }
}

}  // namespace detail

// Plain (non-autodiff) dense product, used by materialization and oracles.
template <typename T>
TensorT<T> matmul_value(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    fail(ErrorKind::Dimension,
         "matmul " + shape_str(a.shape) + " x " + shape_str(b.shape) + ": inner extents differ");
  TensorT<T> c(Shape{a.dim(0), b.dim(1)});
  std::vector<double> scratch;
  detail::gemm_nn(a.data.data(), b.data.data(), c.data.data(), a.dim(0), a.dim(1), b.dim(1),
                  scratch);
  return c;
}

template <typename T>
TensorT<T> transpose_value(const TensorT<T>& a) {
  if (a.rank() != 2) fail(ErrorKind::Dimension, "transpose needs rank-2 tensor");
  TensorT<T> t(Shape{a.dim(1), a.dim(0)});
  for (int64_t i = 0; i < a.dim(0); ++i)
    for (int64_t j = 0; j < a.dim(1); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

}  // namespace sentinel
