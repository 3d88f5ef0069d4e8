// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "sentinel/rng.hpp"
#include "sentinel/tensor.hpp"

namespace sentinel {

// Define-by-run reverse-mode tape over dense tensors. The op surface is
// exactly what the toy transformers, the detector, and the weight-space
// attacks need; there is no broadcasting engine. Creation order is the
// topological order, so backward() is a single reverse sweep.
//
// T = float in production; T = double instantiates the shadow engine used
// by finite-difference gradient checks.
template <typename T>
class GraphT {
 public:
  struct Var {
    int i = -1;
    bool valid() const { return i >= 0; }
  };

  Var leaf(const TensorT<T>& t) {
    Node n;
    n.value = t;
    n.needs_grad = t.requires_grad;
    return push(std::move(n));
  }

  Var constant(TensorT<T> t) {
    Node n;
    n.value = std::move(t);
    n.needs_grad = false;
    return push(std::move(n));
  }

  const TensorT<T>& val(Var v) const { return nodes_[static_cast<size_t>(v.i)].value; }

  // Gradient of the last backward() w.r.t. this node; zeros if untouched.
  TensorT<T> grad(Var v) const {
    const Node& n = nodes_[static_cast<size_t>(v.i)];
    TensorT<T> g(n.value.shape);
    if (!n.grad.empty()) g.data = n.grad;
    return g;
  }

  void backward(Var out) {
    Node& o = node(out);
    if (o.value.numel() != 1) fail(ErrorKind::Dimension, "backward requires a scalar output");
    ensure_grad(out.i);
    o.grad[0] = T(1);
    for (int i = out.i; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.backward && !n.grad.empty()) n.backward(*this);
    }
  }

  size_t size() const { return nodes_.size(); }

  // ---- elementwise ----

  Var add(Var a, Var b) { return ew_linear(a, b, /*negate_b=*/false); }
  Var sub(Var a, Var b) { return ew_linear(a, b, /*negate_b=*/true); }

  Var mul(Var a, Var b) {
    check_same(a, b, "mul");
    Node n;
    n.value = TensorT<T>(val(a).shape);
    const auto& x = val(a).data;
    const auto& y = val(b).data;
    for (size_t i = 0; i < x.size(); ++i) n.value.data[i] = x[i] * y[i];
    n.parents = {a.i, b.i};
    n.needs_grad = needs(a) || needs(b);
    if (n.needs_grad) {
      int ai = a.i, bi = b.i;
      n.backward = [ai, bi](GraphT& g) {
        const int oi = g.cursor_;
        const auto& gv = g.nodes_[oi].grad;
        if (g.needs_idx(ai)) {
          g.ensure_grad(ai);
          const auto& yv = g.nodes_[bi].value.data;
          auto& ga = g.nodes_[ai].grad;
          for (size_t i = 0; i < gv.size(); ++i) ga[i] += gv[i] * yv[i];
        }
        if (g.needs_idx(bi)) {
          g.ensure_grad(bi);
          const auto& xv = g.nodes_[ai].value.data;
          auto& gb = g.nodes_[bi].grad;
          for (size_t i = 0; i < gv.size(); ++i) gb[i] += gv[i] * xv[i];
        }
      };
    }
    return push_with_cursor(std::move(n));
  }

  Var divide(Var a, Var b) {
    check_same(a, b, "div");
    Node n;
    n.value = TensorT<T>(val(a).shape);
    const auto& x = val(a).data;
    const auto& y = val(b).data;
    for (size_t i = 0; i < x.size(); ++i) n.value.data[i] = x[i] / y[i];
    n.parents = {a.i, b.i};
    n.needs_grad = needs(a) || needs(b);
    if (n.needs_grad) {
      int ai = a.i, bi = b.i;
      n.backward = [ai, bi](GraphT& g) {
        const int oi = g.cursor_;
        const auto& gv = g.nodes_[oi].grad;
        const auto& yv = g.nodes_[bi].value.data;
        if (g.needs_idx(ai)) {
          g.ensure_grad(ai);
          auto& ga = g.nodes_[ai].grad;
          for (size_t i = 0; i < gv.size(); ++i) ga[i] += gv[i] / yv[i];
        }
        if (g.needs_idx(bi)) {
          g.ensure_grad(bi);
          const auto& ov = g.nodes_[oi].value.data;
          auto& gb = g.nodes_[bi].grad;
          for (size_t i = 0; i < gv.size(); ++i) gb[i] -= gv[i] * ov[i] / yv[i];
        }
      };
    }
    return push_with_cursor(std::move(n));
  }

  Var scale(Var a, double c) {
    Node n;
    n.value = TensorT<T>(val(a).shape);
    const auto& x = val(a).data;
    for (size_t i = 0; i < x.size(); ++i) n.value.data[i] = static_cast<T>(x[i] * c);
    n.parents = {a.i};
    n.needs_grad = needs(a);
    if (n.needs_grad) {
      int ai = a.i;
      n.backward = [ai, c](GraphT& g) {
        const auto& gv = g.nodes_[g.cursor_].grad;
        g.ensure_grad(ai);
        auto& ga = g.nodes_[ai].grad;
        for (size_t i = 0; i < gv.size(); ++i) ga[i] += static_cast<T>(gv[i] * c);
      };
    }
    return push_with_cursor(std::move(n));
  }

  Var add_scalar(Var a, double c) {
    Node n;
    n.value = TensorT<T>(val(a).shape);
    const auto& x = val(a).data;
    for (size_t i = 0; i < x.size(); ++i) n.value.data[i] = static_cast<T>(x[i] + c);
    n.parents = {a.i};
    n.needs_grad = needs(a);
    if (n.needs_grad) {
      int ai = a.i;
      n.backward = [ai](GraphT& g) {
        const auto& gv = g.nodes_[g.cursor_].grad;
        g.ensure_grad(ai);
        auto& ga = g.nodes_[ai].grad;
        for (size_t i = 0; i < gv.size(); ++i) ga[i] += gv[i];
      };
    }
    return push_with_cursor(std::move(n));
  }

  Var relu(Var a) {
    Node n;
    n.value = TensorT<T>(val(a).shape);
    const auto& x = val(a).data;
    for (size_t i = 0; i < x.size(); ++i) n.value.data[i] = x[i] > T(0) ? x[i] : T(0);
    n.parents = {a.i};
    n.needs_grad = needs(a);
    if (n.needs_grad) {
      int ai = a.i;
      n.backward = [ai](GraphT& g) {
        const int oi = g.cursor_;
        const auto& gv = g.nodes_[oi].grad;
        const auto& xv = g.nodes_[ai].value.data;
        g.ensure_grad(ai);
        auto& ga = g.nodes_[ai].grad;
        for (size_t i = 0; i < gv.size(); ++i)
          if (xv[i] > T(0)) ga[i] += gv[i];
      };
    }
    return push_with_cursor(std::move(n));
  }

  // x[..., k] + b[k], bias broadcast over the last dimension.
  Var add_bias(Var x, Var b) {
    const auto& xv = val(x);
    const auto& bv = val(b);
    if (bv.rank() != 1 || xv.rank() < 1 || xv.shape.back() != bv.dim(0))
      fail(ErrorKind::Dimension,
           "add_bias " + shape_str(xv.shape) + " + " + shape_str(bv.shape));
    const int64_t k = bv.dim(0);
    const int64_t rows = xv.numel() / k;
    Node n;
    n.value = TensorT<T>(xv.shape);
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < k; ++j)
        n.value.data[static_cast<size_t>(r * k + j)] =
            xv.data[static_cast<size_t>(r * k + j)] + bv.data[static_cast<size_t>(j)];
    n.parents = {x.i, b.i};
    n.needs_grad = needs(x) || needs(b);
    if (n.needs_grad) {
      int xi = x.i, bi = b.i;
      n.backward = [xi, bi, rows, k](GraphT& g) {
        const auto& gv = g.nodes_[g.cursor_].grad;
        if (g.needs_idx(xi)) {
          g.ensure_grad(xi);
          auto& gx = g.nodes_[xi].grad;
          for (size_t i = 0; i < gv.size(); ++i) gx[i] += gv[i];
        }
        if (g.needs_idx(bi)) {
          g.ensure_grad(bi);
          auto& gb = g.nodes_[bi].grad;
          for (int64_t j = 0; j < k; ++j) {
            double acc = 0.0;
            for (int64_t r = 0; r < rows; ++r)
              acc += static_cast<double>(gv[static_cast<size_t>(r * k + j)]);
            gb[static_cast<size_t>(j)] += static_cast<T>(acc);
          }
        }
      };
    }
    return push_with_cursor(std::move(n));
  }

  // ---- structural ----

  Var reshape(Var a, Shape s) {
    const auto& av = val(a);
    if (shape_numel(s) != av.numel())
      fail(ErrorKind::Dimension,
           "reshape " + shape_str(av.shape) + " -> " + shape_str(s) + " changes element count");
    Node n;
    n.value = av.reshaped(s);
    n.parents = {a.i};
    n.needs_grad = needs(a);
    if (n.needs_grad) {
      int ai = a.i;
      n.backward = [ai](GraphT& g) {
        const auto& gv = g.nodes_[g.cursor_].grad;
        g.ensure_grad(ai);
        auto& ga = g.nodes_[ai].grad;
        for (size_t i = 0; i < gv.size(); ++i) ga[i] += gv[i];
      };
    }
    return push_with_cursor(std::move(n));
  }

  Var transpose(Var a) {
    const auto& av = val(a);
    if (av.rank() != 2) fail(ErrorKind::Dimension, "transpose needs rank-2 tensor");
    Node n;
    n.value = transpose_value(av);
    n.parents = {a.i};
    n.needs_grad = needs(a);
    if (n.needs_grad) {
      int ai = a.i;
      const int64_t r = av.dim(0), c = av.dim(1);
      n.backward = [ai, r, c](GraphT& g) {
        const auto& gv = g.nodes_[g.cursor_].grad;
        g.ensure_grad(ai);
        auto& ga = g.nodes_[ai].grad;
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j)
            ga[static_cast<size_t>(i * c + j)] += gv[static_cast<size_t>(j * r + i)];
      };
    }
    return push_with_cursor(std::move(n));
  }

  // [B, T, H, D] -> [B, H, T, D]; its own inverse on the permuted shape.
  Var swap_axes12(Var a) {
    const auto& av = val(a);
    if (av.rank() != 4) fail(ErrorKind::Dimension, "swap_axes12 needs rank-4 tensor");
    const int64_t B = av.dim(0), Tn = av.dim(1), H = av.dim(2), D = av.dim(3);
    Node n;
    n.value = TensorT<T>(Shape{B, H, Tn, D});
    for (int64_t b = 0; b < B; ++b)
      for (int64_t t = 0; t < Tn; ++t)
        for (int64_t h = 0; h < H; ++h) {
          const T* src = av.data.data() + ((b * Tn + t) * H + h) * D;
          T* dst = n.value.data.data() + ((b * H + h) * Tn + t) * D;
          std::copy(src, src + D, dst);
        }
    n.parents = {a.i};
    n.needs_grad = needs(a);
    if (n.needs_grad) {
      int ai = a.i;
      n.backward = [ai, B, Tn, H, D](GraphT& g) {
        const auto& gv = g.nodes_[g.cursor_].grad;
        g.ensure_grad(ai);
        auto& ga = g.nodes_[ai].grad;
        for (int64_t b = 0; b < B; ++b)
          for (int64_t h = 0; h < H; ++h)
            for (int64_t t = 0; t < Tn; ++t) {
              const T* src = gv.data() + ((b * H + h) * Tn + t) * D;
              T* dst = ga.data() + ((b * Tn + t) * H + h) * D;
              for (int64_t d = 0; d < D; ++d) dst[d] += src[d];
            }
      };
    }
    return push_with_cursor(std::move(n));
  }

  // ---- linear algebra ----

  Var matmul(Var a, Var b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
      fail(ErrorKind::Dimension,
           "matmul " + shape_str(av.shape) + " x " + shape_str(bv.shape) + ": inner extents differ");
    const int64_t m = av.dim(0), k = av.dim(1), p = bv.dim(1);
    Node n;
    n.value = TensorT<T>(Shape{m, p});
    std::vector<double> scratch;
    detail::gemm_nn(av.data.data(), bv.data.data(), n.value.data.data(), m, k, p, scratch);
    n.parents = {a.i, b.i};
    n.needs_grad = needs(a) || needs(b);
    if (n.needs_grad) {
      int ai = a.i, bi = b.i;
      n.backward = [ai, bi, m, k, p](GraphT& g) {
        const auto& gv = g.nodes_[g.cursor_].grad;
        if (g.needs_idx(ai)) {  // dA += G * B^T
          g.ensure_grad(ai);
          detail::gemm_nt_accum(gv.data(), g.nodes_[bi].value.data.data(),
                                g.nodes_[ai].grad.data(), m, k, p);
        }
        if (g.needs_idx(bi)) {  // dB += A^T * G
          g.ensure_grad(bi);
          std::vector<double> scratch;
          detail::gemm_tn_accum(g.nodes_[ai].value.data.data(), gv.data(),
                                g.nodes_[bi].grad.data(), m, k, p, scratch);
        }
      };
    }
    return push_with_cursor(std::move(n));
  }

  Var batched_matmul(Var a, Var b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(1))
      fail(ErrorKind::Dimension,
           "batched_matmul " + shape_str(av.shape) + " x " + shape_str(bv.shape));
    const int64_t N = av.dim(0), m = av.dim(1), k = av.dim(2), p = bv.dim(2);
    Node n;
    n.value = TensorT<T>(Shape{N, m, p});
    std::vector<double> scratch;
    for (int64_t s = 0; s < N; ++s)
      detail::gemm_nn(av.data.data() + s * m * k, bv.data.data() + s * k * p,
                      n.value.data.data() + s * m * p, m, k, p, scratch);
    n.parents = {a.i, b.i};
    n.needs_grad = needs(a) || needs(b);
    if (n.needs_grad) {
      int ai = a.i, bi = b.i;
      n.backward = [ai, bi, N, m, k, p](GraphT& g) {
        const auto& gv = g.nodes_[g.cursor_].grad;
        if (g.needs_idx(ai)) {
          g.ensure_grad(ai);
          for (int64_t s = 0; s < N; ++s)
            detail::gemm_nt_accum(gv.data() + s * m * p,
                                  g.nodes_[bi].value.data.data() + s * k * p,
                                  g.nodes_[ai].grad.data() + s * m * k, m, k, p);
        }
        if (g.needs_idx(bi)) {
          g.ensure_grad(bi);
          std::vector<double> scratch;
          for (int64_t s = 0; s < N; ++s)
            detail::gemm_tn_accum(g.nodes_[ai].value.data.data() + s * m * k,
                                  gv.data() + s * m * p,
                                  g.nodes_[bi].grad.data() + s * k * p, m, k, p, scratch);
        }
      };
    }
    return push_with_cursor(std::move(n));
  }

  Var batched_transpose(Var a) {
    const auto& av = val(a);
    if (av.rank() != 3) fail(ErrorKind::Dimension, "batched_transpose needs rank-3 tensor");
    const int64_t N = av.dim(0), m = av.dim(1), k = av.dim(2);
    Node n;
    n.value = TensorT<T>(Shape{N, k, m});
    for (int64_t s = 0; s < N; ++s)
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < k; ++j)
          n.value.data[static_cast<size_t>((s * k + j) * m + i)] =
              av.data[static_cast<size_t>((s * m + i) * k + j)];
    n.parents = {a.i};
    n.needs_grad = needs(a);
    if (n.needs_grad) {
      int ai = a.i;
      n.backward = [ai, N, m, k](GraphT& g) {
        const auto& gv = g.nodes_[g.cursor_].grad;
        g.ensure_grad(ai);
        auto& ga = g.nodes_[ai].grad;
        for (int64_t s = 0; s < N; ++s)
          for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < k; ++j)
              ga[static_cast<size_t>((s * m + i) * k + j)] +=
                  gv[static_cast<size_t>((s * k + j) * m + i)];
      };
    }
    return push_with_cursor(std::move(n));
  }

  // x[d,k] with per-column weights w[k]: out[i,j] = x[i,j]*w[j].
  Var scale_columns(Var x, Var w) {
    const auto& xv = val(x);
    const auto& wv = val(w);
    if (xv.rank() != 2 || wv.rank() != 1 || xv.dim(1) != wv.dim(0))
      fail(ErrorKind::Dimension,
           "scale_columns " + shape_str(xv.shape) + " by " + shape_str(wv.shape));
    const int64_t d = xv.dim(0), k = xv.dim(1);
    Node n;
    n.value = TensorT<T>(xv.shape);
    for (int64_t i = 0; i < d; ++i)
      for (int64_t j = 0; j < k; ++j)
        n.value.data[static_cast<size_t>(i * k + j)] =
            xv.data[static_cast<size_t>(i * k + j)] * wv.data[static_cast<size_t>(j)];
    n.parents = {x.i, w.i};
    n.needs_grad = needs(x) || needs(w);
    if (n.needs_grad) {
      int xi = x.i, wi = w.i;
      n.backward = [xi, wi, d, k](GraphT& g) {
        const auto& gv = g.nodes_[g.cursor_].grad;
        if (g.needs_idx(xi)) {
          g.ensure_grad(xi);
          const auto& wv2 = g.nodes_[wi].value.data;
          auto& gx = g.nodes_[xi].grad;
          for (int64_t i = 0; i < d; ++i)
            for (int64_t j = 0; j < k; ++j)
              gx[static_cast<size_t>(i * k + j)] +=
                  gv[static_cast<size_t>(i * k + j)] * wv2[static_cast<size_t>(j)];
        }
        if (g.needs_idx(wi)) {
          g.ensure_grad(wi);
          const auto& xv2 = g.nodes_[xi].value.data;
          auto& gw = g.nodes_[wi].grad;
          for (int64_t j = 0; j < k; ++j) {
            double acc = 0.0;
            for (int64_t i = 0; i < d; ++i)
              acc += static_cast<double>(gv[static_cast<size_t>(i * k + j)]) *
                     static_cast<double>(xv2[static_cast<size_t>(i * k + j)]);
            gw[static_cast<size_t>(j)] += static_cast<T>(acc);
          }
        }
      };
    }
    return push_with_cursor(std::move(n));
  }

  // x[r,k] with per-row weights w[r]: out[i,j] = x[i,j]*w[i].
  Var scale_rows(Var x, Var w) {
    const auto& xv = val(x);
    const auto& wv = val(w);
    if (xv.rank() != 2 || wv.rank() != 1 || xv.dim(0) != wv.dim(0))
      fail(ErrorKind::Dimension,
           "scale_rows " + shape_str(xv.shape) + " by " + shape_str(wv.shape));
    const int64_t r = xv.dim(0), k = xv.dim(1);
    Node n;
    n.value = TensorT<T>(xv.shape);
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < k; ++j)
        n.value.data[static_cast<size_t>(i * k + j)] =
            xv.data[static_cast<size_t>(i * k + j)] * wv.data[static_cast<size_t>(i)];
    n.parents = {x.i, w.i};
    n.needs_grad = needs(x) || needs(w);
    if (n.needs_grad) {
      int xi = x.i, wi = w.i;
      n.backward = [xi, wi, r, k](GraphT& g) {
        const auto& gv = g.nodes_[g.cursor_].grad;
        if (g.needs_idx(xi)) {
          g.ensure_grad(xi);
          const auto& wv2 = g.nodes_[wi].value.data;
          auto& gx = g.nodes_[xi].grad;
          for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < k; ++j)
              gx[static_cast<size_t>(i * k + j)] +=
                  gv[static_cast<size_t>(i * k + j)] * wv2[static_cast<size_t>(i)];
        }
        if (g.needs_idx(wi)) {
          g.ensure_grad(wi);
          const auto& xv2 = g.nodes_[xi].value.data;
          auto& gw = g.nodes_[wi].grad;
          for (int64_t i = 0; i < r; ++i) {
            double acc = 0.0;
            for (int64_t j = 0; j < k; ++j)
              acc += static_cast<double>(gv[static_cast<size_t>(i * k + j)]) *
                     static_cast<double>(xv2[static_cast<size_t>(i * k + j)]);
            gw[static_cast<size_t>(i)] += static_cast<T>(acc);
          }
        }
      };
    }
    return push_with_cursor(std::move(n));
  }

  // Euclidean norm of each column of x[d,k] -> [k].
  Var column_norms(Var x) {
    const auto& xv = val(x);
    if (xv.rank() != 2) fail(ErrorKind::Dimension, "column_norms needs rank-2 tensor");
    const int64_t d = xv.dim(0), k = xv.dim(1);
    Node n;
    n.value = TensorT<T>(Shape{k});
    for (int64_t j = 0; j < k; ++j) {
      double acc = 0.0;
      for (int64_t i = 0; i < d; ++i) {
        const double v = static_cast<double>(xv.data[static_cast<size_t>(i * k + j)]);
        acc += v * v;
      }
      n.value.data[static_cast<size_t>(j)] = static_cast<T>(std::sqrt(acc));
    }
    n.parents = {x.i};
    n.needs_grad = needs(x);
    if (n.needs_grad) {
      int xi = x.i;
      n.backward = [xi, d, k](GraphT& g) {
        const int oi = g.cursor_;
        const auto& gv = g.nodes_[oi].grad;
        const auto& nv = g.nodes_[oi].value.data;
        const auto& xv2 = g.nodes_[xi].value.data;
        g.ensure_grad(xi);
        auto& gx = g.nodes_[xi].grad;
        for (int64_t j = 0; j < k; ++j) {
          const T nj = nv[static_cast<size_t>(j)];
          if (nj == T(0)) continue;  // subgradient 0 at the origin
          const T c = gv[static_cast<size_t>(j)] / nj;
          for (int64_t i = 0; i < d; ++i)
            gx[static_cast<size_t>(i * k + j)] += c * xv2[static_cast<size_t>(i * k + j)];
        }
      };
    }
    return push_with_cursor(std::move(n));
  }

  // ---- normalization / reductions ----

  Var softmax_lastdim(Var x) {
    const auto& xv = val(x);
    if (xv.rank() < 1) fail(ErrorKind::Dimension, "softmax needs rank >= 1");
    const int64_t k = xv.shape.back();
    const int64_t rows = xv.numel() / k;
    Node n;
    n.value = TensorT<T>(xv.shape);
    for (int64_t r = 0; r < rows; ++r) {
      const T* xr = xv.data.data() + r * k;
      T* yr = n.value.data.data() + r * k;
      T mx = xr[0];
      for (int64_t j = 1; j < k; ++j) mx = std::max(mx, xr[j]);
      double denom = 0.0;
      for (int64_t j = 0; j < k; ++j) {
        const double e = std::exp(static_cast<double>(xr[j] - mx));
        yr[j] = static_cast<T>(e);
        denom += e;
      }
      for (int64_t j = 0; j < k; ++j) yr[j] = static_cast<T>(static_cast<double>(yr[j]) / denom);
    }
    n.parents = {x.i};
    n.needs_grad = needs(x);
    if (n.needs_grad) {
      int xi = x.i;
      n.backward = [xi, rows, k](GraphT& g) {
        const int oi = g.cursor_;
        const auto& gv = g.nodes_[oi].grad;
        const auto& yv = g.nodes_[oi].value.data;
        g.ensure_grad(xi);
        auto& gx = g.nodes_[xi].grad;
        for (int64_t r = 0; r < rows; ++r) {
          const T* yr = yv.data() + r * k;
          const T* gr = gv.data() + r * k;
          double dot = 0.0;
          for (int64_t j = 0; j < k; ++j)
            dot += static_cast<double>(gr[j]) * static_cast<double>(yr[j]);
          for (int64_t j = 0; j < k; ++j)
            gx[static_cast<size_t>(r * k + j)] +=
                static_cast<T>((static_cast<double>(gr[j]) - dot) * static_cast<double>(yr[j]));
        }
      };
    }
    return push_with_cursor(std::move(n));
  }

  Var layernorm_lastdim(Var x, Var gamma, Var beta, double eps = 1e-5) {
    const auto& xv = val(x);
    const auto& gv0 = val(gamma);
    const auto& bv0 = val(beta);
    const int64_t k = xv.shape.back();
    if (gv0.rank() != 1 || bv0.rank() != 1 || gv0.dim(0) != k || bv0.dim(0) != k)
      fail(ErrorKind::Dimension, "layernorm affine params must be [" + std::to_string(k) + "]");
    const int64_t rows = xv.numel() / k;
    Node n;
    n.value = TensorT<T>(xv.shape);
    std::vector<T> xhat(static_cast<size_t>(xv.numel()));
    std::vector<T> inv_sigma(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
      const T* xr = xv.data.data() + r * k;
      double mean = 0.0;
      for (int64_t j = 0; j < k; ++j) mean += static_cast<double>(xr[j]);
      mean /= static_cast<double>(k);
      double var = 0.0;
      for (int64_t j = 0; j < k; ++j) {
        const double d = static_cast<double>(xr[j]) - mean;
        var += d * d;
      }
      var /= static_cast<double>(k);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_sigma[static_cast<size_t>(r)] = static_cast<T>(is);
      for (int64_t j = 0; j < k; ++j) {
        const T xh = static_cast<T>((static_cast<double>(xr[j]) - mean) * is);
        xhat[static_cast<size_t>(r * k + j)] = xh;
        n.value.data[static_cast<size_t>(r * k + j)] =
            xh * gv0.data[static_cast<size_t>(j)] + bv0.data[static_cast<size_t>(j)];
      }
    }
    n.parents = {x.i, gamma.i, beta.i};
    n.needs_grad = needs(x) || needs(gamma) || needs(beta);
    if (n.needs_grad) {
      int xi = x.i, gi = gamma.i, bi = beta.i;
      auto xh = std::make_shared<std::vector<T>>(std::move(xhat));
      auto isg = std::make_shared<std::vector<T>>(std::move(inv_sigma));
      n.backward = [xi, gi, bi, rows, k, xh, isg](GraphT& g) {
        const auto& gv = g.nodes_[g.cursor_].grad;
        const auto& gammav = g.nodes_[gi].value.data;
        if (g.needs_idx(xi)) {
          g.ensure_grad(xi);
          auto& gx = g.nodes_[xi].grad;
          for (int64_t r = 0; r < rows; ++r) {
            const T* gr = gv.data() + r * k;
            const T* xhr = xh->data() + r * k;
            const double is = static_cast<double>((*isg)[static_cast<size_t>(r)]);
            double mh = 0.0, mhx = 0.0;
            for (int64_t j = 0; j < k; ++j) {
              const double h = static_cast<double>(gr[j]) * static_cast<double>(gammav[static_cast<size_t>(j)]);
              mh += h;
              mhx += h * static_cast<double>(xhr[j]);
            }
            mh /= static_cast<double>(k);
            mhx /= static_cast<double>(k);
            for (int64_t j = 0; j < k; ++j) {
              const double h = static_cast<double>(gr[j]) * static_cast<double>(gammav[static_cast<size_t>(j)]);
              gx[static_cast<size_t>(r * k + j)] +=
                  static_cast<T>((h - mh - static_cast<double>(xhr[j]) * mhx) * is);
            }
          }
        }
        if (g.needs_idx(gi)) {
          g.ensure_grad(gi);
          auto& gg = g.nodes_[gi].grad;
          for (int64_t j = 0; j < k; ++j) {
            double acc = 0.0;
            for (int64_t r = 0; r < rows; ++r)
              acc += static_cast<double>(gv[static_cast<size_t>(r * k + j)]) *
                     static_cast<double>((*xh)[static_cast<size_t>(r * k + j)]);
            gg[static_cast<size_t>(j)] += static_cast<T>(acc);
          }
        }
        if (g.needs_idx(bi)) {
          g.ensure_grad(bi);
          auto& gb = g.nodes_[bi].grad;
          for (int64_t j = 0; j < k; ++j) {
            double acc = 0.0;
            for (int64_t r = 0; r < rows; ++r)
              acc += static_cast<double>(gv[static_cast<size_t>(r * k + j)]);
            gb[static_cast<size_t>(j)] += static_cast<T>(acc);
          }
        }
      };
    }
    return push_with_cursor(std::move(n));
  }

  // [B, T, D] -> [B, D] mean over the middle axis.
  Var mean_axis1(Var x) {
    const auto& xv = val(x);
    if (xv.rank() != 3) fail(ErrorKind::Dimension, "mean_axis1 needs rank-3 tensor");
    const int64_t B = xv.dim(0), Tn = xv.dim(1), D = xv.dim(2);
    Node n;
    n.value = TensorT<T>(Shape{B, D});
    for (int64_t b = 0; b < B; ++b)
      for (int64_t d = 0; d < D; ++d) {
        double acc = 0.0;
        for (int64_t t = 0; t < Tn; ++t)
          acc += static_cast<double>(xv.data[static_cast<size_t>((b * Tn + t) * D + d)]);
        n.value.data[static_cast<size_t>(b * D + d)] = static_cast<T>(acc / static_cast<double>(Tn));
      }
    n.parents = {x.i};
    n.needs_grad = needs(x);
    if (n.needs_grad) {
      int xi = x.i;
      n.backward = [xi, B, Tn, D](GraphT& g) {
        const auto& gv = g.nodes_[g.cursor_].grad;
        g.ensure_grad(xi);
        auto& gx = g.nodes_[xi].grad;
        const T inv = static_cast<T>(1.0 / static_cast<double>(Tn));
        for (int64_t b = 0; b < B; ++b)
          for (int64_t t = 0; t < Tn; ++t)
            for (int64_t d = 0; d < D; ++d)
              gx[static_cast<size_t>((b * Tn + t) * D + d)] +=
                  gv[static_cast<size_t>(b * D + d)] * inv;
      };
    }
    return push_with_cursor(std::move(n));
  }

  Var sum_all(Var x) {
    Node n;
    n.value = TensorT<T>(Shape{1});
    n.value.data[0] = static_cast<T>(val(x).sum());
    n.parents = {x.i};
    n.needs_grad = needs(x);
    if (n.needs_grad) {
      int xi = x.i;
      n.backward = [xi](GraphT& g) {
        const T gv = g.nodes_[g.cursor_].grad[0];
        g.ensure_grad(xi);
        for (auto& v : g.nodes_[xi].grad) v += gv;
      };
    }
    return push_with_cursor(std::move(n));
  }

  // ---- lookup / regularizers ----

  Var embedding(Var table, const std::vector<int>& ids) {
    const auto& tv = val(table);
    if (tv.rank() != 2) fail(ErrorKind::Dimension, "embedding table must be rank-2");
    const int64_t V = tv.dim(0), D = tv.dim(1);
    for (int id : ids)
      if (id < 0 || id >= V)
        fail(ErrorKind::Index, "embedding id " + std::to_string(id) + " out of range");
    Node n;
    n.value = TensorT<T>(Shape{static_cast<int64_t>(ids.size()), D});
    for (size_t i = 0; i < ids.size(); ++i)
      std::copy(tv.data.data() + static_cast<int64_t>(ids[i]) * D,
                tv.data.data() + (static_cast<int64_t>(ids[i]) + 1) * D,
                n.value.data.data() + static_cast<int64_t>(i) * D);
    n.parents = {table.i};
    n.needs_grad = needs(table);
    if (n.needs_grad) {
      int ti = table.i;
      auto idv = std::make_shared<std::vector<int>>(ids);
      n.backward = [ti, idv, D](GraphT& g) {
        const auto& gv = g.nodes_[g.cursor_].grad;
        g.ensure_grad(ti);
        auto& gt = g.nodes_[ti].grad;
        std::vector<double> acc(gt.size(), 0.0);
        for (size_t i = 0; i < idv->size(); ++i) {
          const int64_t row = static_cast<int64_t>((*idv)[i]);
          for (int64_t d = 0; d < D; ++d)
            acc[static_cast<size_t>(row * D + d)] +=
                static_cast<double>(gv[static_cast<size_t>(static_cast<int64_t>(i) * D + d)]);
        }
        for (size_t i = 0; i < gt.size(); ++i) gt[i] += static_cast<T>(acc[i]);
      };
    }
    return push_with_cursor(std::move(n));
  }

  Var dropout(Var x, double p, Rng& rng, bool training) {
    if (p < 0.0 || p >= 1.0) fail(ErrorKind::Config, "dropout rate must be in [0,1)");
    if (!training || p == 0.0) return x;
    const auto& xv = val(x);
    Node n;
    n.value = TensorT<T>(xv.shape);
    auto mask = std::make_shared<std::vector<uint8_t>>(xv.data.size());
    const T inv_keep = static_cast<T>(1.0 / (1.0 - p));
    for (size_t i = 0; i < xv.data.size(); ++i) {
      const bool keep = rng.uniform() >= p;
      (*mask)[i] = keep ? 1 : 0;
      n.value.data[i] = keep ? xv.data[i] * inv_keep : T(0);
    }
    n.parents = {x.i};
    n.needs_grad = needs(x);
    if (n.needs_grad) {
      int xi = x.i;
      n.backward = [xi, mask, inv_keep](GraphT& g) {
        const auto& gv = g.nodes_[g.cursor_].grad;
        g.ensure_grad(xi);
        auto& gx = g.nodes_[xi].grad;
        for (size_t i = 0; i < gv.size(); ++i)
          if ((*mask)[i]) gx[i] += gv[i] * inv_keep;
      };
    }
    return push_with_cursor(std::move(n));
  }

  // ---- convolution / pooling (NCHW) ----

  Var conv2d(Var x, Var kernels, Var bias, int64_t stride) {
    const auto& xv = val(x);
    const auto& kv = val(kernels);
    if (xv.rank() != 4 || kv.rank() != 4)
      fail(ErrorKind::Dimension, "conv2d expects x[B,C,H,W], kernels[F,C,kh,kw]");
    const int64_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int64_t F = kv.dim(0), kh = kv.dim(2), kw = kv.dim(3);
    if (kv.dim(1) != C)
      fail(ErrorKind::Dimension, "conv2d channel mismatch");
    if (kh > H || kw > W)
      fail(ErrorKind::Dimension, "conv2d kernel larger than input");
    if (stride < 1) fail(ErrorKind::Dimension, "conv2d stride must be >= 1");
    const bool with_bias = bias.valid();
    if (with_bias && (val(bias).rank() != 1 || val(bias).dim(0) != F))
      fail(ErrorKind::Dimension, "conv2d bias must be [F]");
    const int64_t OH = (H - kh) / stride + 1;
    const int64_t OW = (W - kw) / stride + 1;
    Node n;
    n.value = TensorT<T>(Shape{B, F, OH, OW});
    for (int64_t b = 0; b < B; ++b)
      for (int64_t f = 0; f < F; ++f)
        for (int64_t oh = 0; oh < OH; ++oh)
          for (int64_t ow = 0; ow < OW; ++ow) {
            double acc = with_bias ? static_cast<double>(val(bias).data[static_cast<size_t>(f)]) : 0.0;
            for (int64_t c = 0; c < C; ++c)
              for (int64_t i = 0; i < kh; ++i) {
                const T* xr = xv.data.data() + ((b * C + c) * H + oh * stride + i) * W + ow * stride;
                const T* kr = kv.data.data() + ((f * C + c) * kh + i) * kw;
                for (int64_t j = 0; j < kw; ++j)
                  acc += static_cast<double>(xr[j]) * static_cast<double>(kr[j]);
              }
            n.value.data[static_cast<size_t>(((b * F + f) * OH + oh) * OW + ow)] =
                static_cast<T>(acc);
          }
    n.parents = with_bias ? std::vector<int>{x.i, kernels.i, bias.i}
                          : std::vector<int>{x.i, kernels.i};
    n.needs_grad = needs(x) || needs(kernels) || (with_bias && needs(bias));
    if (n.needs_grad) {
      int xi = x.i, ki = kernels.i, bi = with_bias ? bias.i : -1;
      n.backward = [xi, ki, bi, B, C, H, W, F, kh, kw, OH, OW, stride](GraphT& g) {
        const auto& gv = g.nodes_[g.cursor_].grad;
        const auto& xv2 = g.nodes_[xi].value.data;
        const auto& kv2 = g.nodes_[ki].value.data;
        const bool want_x = g.needs_idx(xi);
        const bool want_k = g.needs_idx(ki);
        const bool want_b = bi >= 0 && g.needs_idx(bi);
        std::vector<double> dx(want_x ? xv2.size() : 0, 0.0);
        std::vector<double> dk(want_k ? kv2.size() : 0, 0.0);
        std::vector<double> db(want_b ? static_cast<size_t>(F) : 0, 0.0);
        for (int64_t b = 0; b < B; ++b)
          for (int64_t f = 0; f < F; ++f)
            for (int64_t oh = 0; oh < OH; ++oh)
              for (int64_t ow = 0; ow < OW; ++ow) {
                const double go = static_cast<double>(
                    gv[static_cast<size_t>(((b * F + f) * OH + oh) * OW + ow)]);
                if (go == 0.0) continue;
                if (want_b) db[static_cast<size_t>(f)] += go;
                for (int64_t c = 0; c < C; ++c)
                  for (int64_t i = 0; i < kh; ++i) {
                    const int64_t xoff = ((b * C + c) * H + oh * stride + i) * W + ow * stride;
                    const int64_t koff = ((f * C + c) * kh + i) * kw;
                    for (int64_t j = 0; j < kw; ++j) {
                      if (want_x)
                        dx[static_cast<size_t>(xoff + j)] +=
                            go * static_cast<double>(kv2[static_cast<size_t>(koff + j)]);
                      if (want_k)
                        dk[static_cast<size_t>(koff + j)] +=
                            go * static_cast<double>(xv2[static_cast<size_t>(xoff + j)]);
                    }
                  }
              }
        if (want_x) {
          g.ensure_grad(xi);
          auto& gx = g.nodes_[xi].grad;
          for (size_t i = 0; i < gx.size(); ++i) gx[i] += static_cast<T>(dx[i]);
        }
        if (want_k) {
          g.ensure_grad(ki);
          auto& gk = g.nodes_[ki].grad;
          for (size_t i = 0; i < gk.size(); ++i) gk[i] += static_cast<T>(dk[i]);
        }
        if (want_b) {
          g.ensure_grad(bi);
          auto& gb = g.nodes_[bi].grad;
          for (size_t i = 0; i < gb.size(); ++i) gb[i] += static_cast<T>(db[i]);
        }
      };
    }
    return push_with_cursor(std::move(n));
  }

  Var maxpool2d(Var x, int64_t kh, int64_t kw, int64_t stride) {
    const auto& xv = val(x);
    if (xv.rank() != 4) fail(ErrorKind::Dimension, "maxpool2d expects x[B,C,H,W]");
    const int64_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (kh > H || kw > W) fail(ErrorKind::Dimension, "maxpool2d window larger than input");
    const int64_t OH = (H - kh) / stride + 1;
    const int64_t OW = (W - kw) / stride + 1;
    Node n;
    n.value = TensorT<T>(Shape{B, C, OH, OW});
    auto argmax = std::make_shared<std::vector<int64_t>>(n.value.data.size());
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t oh = 0; oh < OH; ++oh)
          for (int64_t ow = 0; ow < OW; ++ow) {
            T best = xv.data[static_cast<size_t>(((b * C + c) * H + oh * stride) * W + ow * stride)];
            int64_t best_idx = ((b * C + c) * H + oh * stride) * W + ow * stride;
            for (int64_t i = 0; i < kh; ++i)
              for (int64_t j = 0; j < kw; ++j) {
                const int64_t idx = ((b * C + c) * H + oh * stride + i) * W + ow * stride + j;
                const T v = xv.data[static_cast<size_t>(idx)];
                if (v > best) {
                  best = v;
                  best_idx = idx;
                }
              }
            const int64_t oidx = ((b * C + c) * OH + oh) * OW + ow;
            n.value.data[static_cast<size_t>(oidx)] = best;
            (*argmax)[static_cast<size_t>(oidx)] = best_idx;
          }
    n.parents = {x.i};
    n.needs_grad = needs(x);
    if (n.needs_grad) {
      int xi = x.i;
      n.backward = [xi, argmax](GraphT& g) {
        const auto& gv = g.nodes_[g.cursor_].grad;
        g.ensure_grad(xi);
        auto& gx = g.nodes_[xi].grad;
        for (size_t i = 0; i < gv.size(); ++i)
          gx[static_cast<size_t>((*argmax)[i])] += gv[i];
      };
    }
    return push_with_cursor(std::move(n));
  }

  Var avgpool2d(Var x, int64_t kh, int64_t kw, int64_t stride) {
    const auto& xv = val(x);
    if (xv.rank() != 4) fail(ErrorKind::Dimension, "avgpool2d expects x[B,C,H,W]");
    const int64_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (kh > H || kw > W) fail(ErrorKind::Dimension, "avgpool2d window larger than input");
    const int64_t OH = (H - kh) / stride + 1;
    const int64_t OW = (W - kw) / stride + 1;
    const double inv = 1.0 / static_cast<double>(kh * kw);
    Node n;
    n.value = TensorT<T>(Shape{B, C, OH, OW});
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t oh = 0; oh < OH; ++oh)
          for (int64_t ow = 0; ow < OW; ++ow) {
            double acc = 0.0;
            for (int64_t i = 0; i < kh; ++i)
              for (int64_t j = 0; j < kw; ++j)
                acc += static_cast<double>(
                    xv.data[static_cast<size_t>(((b * C + c) * H + oh * stride + i) * W + ow * stride + j)]);
            n.value.data[static_cast<size_t>(((b * C + c) * OH + oh) * OW + ow)] =
                static_cast<T>(acc * inv);
          }
    n.parents = {x.i};
    n.needs_grad = needs(x);
    if (n.needs_grad) {
      int xi = x.i;
      n.backward = [xi, B, C, H, W, kh, kw, OH, OW, stride, inv](GraphT& g) {
        const auto& gv = g.nodes_[g.cursor_].grad;
        g.ensure_grad(xi);
        auto& gx = g.nodes_[xi].grad;
        for (int64_t b = 0; b < B; ++b)
          for (int64_t c = 0; c < C; ++c)
            for (int64_t oh = 0; oh < OH; ++oh)
              for (int64_t ow = 0; ow < OW; ++ow) {
                const T go = static_cast<T>(
                    static_cast<double>(gv[static_cast<size_t>(((b * C + c) * OH + oh) * OW + ow)]) * inv);
                for (int64_t i = 0; i < kh; ++i)
                  for (int64_t j = 0; j < kw; ++j)
                    gx[static_cast<size_t>(((b * C + c) * H + oh * stride + i) * W + ow * stride + j)] += go;
              }
      };
    }
    return push_with_cursor(std::move(n));
  }

  // ---- losses ----

  // Mean negative log-softmax of the true class; gradient (softmax-onehot)/B.
  Var softmax_xent(Var logits, const std::vector<int>& labels) {
    const auto& lv = val(logits);
    if (lv.rank() != 2) fail(ErrorKind::Dimension, "softmax_xent expects logits[B,C]");
    const int64_t B = lv.dim(0), C = lv.dim(1);
    if (static_cast<int64_t>(labels.size()) != B)
      fail(ErrorKind::Dimension, "softmax_xent: label count != batch size");
    for (int y : labels)
      if (y < 0 || y >= C) fail(ErrorKind::Index, "label " + std::to_string(y) + " out of [0," +
                                                      std::to_string(C) + ")");
    Node n;
    n.value = TensorT<T>(Shape{1});
    auto probs = std::make_shared<std::vector<T>>(lv.data.size());
    double loss = 0.0;
    for (int64_t b = 0; b < B; ++b) {
      const T* lr = lv.data.data() + b * C;
      T mx = lr[0];
      for (int64_t j = 1; j < C; ++j) mx = std::max(mx, lr[j]);
      double denom = 0.0;
      for (int64_t j = 0; j < C; ++j) denom += std::exp(static_cast<double>(lr[j] - mx));
      const double logz = std::log(denom) + static_cast<double>(mx);
      for (int64_t j = 0; j < C; ++j)
        (*probs)[static_cast<size_t>(b * C + j)] =
            static_cast<T>(std::exp(static_cast<double>(lr[j]) - logz));
      loss -= static_cast<double>(lr[labels[static_cast<size_t>(b)]]) - logz;
    }
    n.value.data[0] = static_cast<T>(loss / static_cast<double>(B));
    n.parents = {logits.i};
    n.needs_grad = needs(logits);
    if (n.needs_grad) {
      int li = logits.i;
      auto labs = std::make_shared<std::vector<int>>(labels);
      n.backward = [li, labs, probs, B, C](GraphT& g) {
        const T go = g.nodes_[g.cursor_].grad[0];
        g.ensure_grad(li);
        auto& gl = g.nodes_[li].grad;
        const T invb = static_cast<T>(1.0 / static_cast<double>(B));
        for (int64_t b = 0; b < B; ++b)
          for (int64_t j = 0; j < C; ++j) {
            T v = (*probs)[static_cast<size_t>(b * C + j)];
            if (j == (*labs)[static_cast<size_t>(b)]) v -= T(1);
            gl[static_cast<size_t>(b * C + j)] += go * v * invb;
          }
      };
    }
    return push_with_cursor(std::move(n));
  }

  // Supervised contrastive loss on row embeddings, L2-normalized inside the
  // op; mean over anchors that have at least one same-label positive.
  Var supcon(Var emb, const std::vector<int>& labels, double tau) {
    const auto& ev = val(emb);
    if (ev.rank() != 2) fail(ErrorKind::Dimension, "supcon expects embeddings[B,E]");
    const int64_t B = ev.dim(0), E = ev.dim(1);
    if (static_cast<int64_t>(labels.size()) != B)
      fail(ErrorKind::Dimension, "supcon: label count != batch size");
    // normalize rows
    auto z = std::make_shared<std::vector<double>>(static_cast<size_t>(B * E));
    auto inv_norm = std::make_shared<std::vector<double>>(static_cast<size_t>(B));
    for (int64_t i = 0; i < B; ++i) {
      double s = 0.0;
      for (int64_t j = 0; j < E; ++j) {
        const double v = static_cast<double>(ev.data[static_cast<size_t>(i * E + j)]);
        s += v * v;
      }
      const double inv = 1.0 / std::max(std::sqrt(s), 1e-12);
      (*inv_norm)[static_cast<size_t>(i)] = inv;
      for (int64_t j = 0; j < E; ++j)
        (*z)[static_cast<size_t>(i * E + j)] =
            static_cast<double>(ev.data[static_cast<size_t>(i * E + j)]) * inv;
    }
    // similarity matrix and per-anchor log-sum-exp over a != i
    std::vector<double> sim(static_cast<size_t>(B * B), 0.0);
    for (int64_t i = 0; i < B; ++i)
      for (int64_t j = 0; j < B; ++j) {
        if (i == j) continue;
        double dot = 0.0;
        for (int64_t e = 0; e < E; ++e)
          dot += (*z)[static_cast<size_t>(i * E + e)] * (*z)[static_cast<size_t>(j * E + e)];
        sim[static_cast<size_t>(i * B + j)] = dot / tau;
      }
    auto gmat = std::make_shared<std::vector<double>>(static_cast<size_t>(B * B), 0.0);
    double loss = 0.0;
    int64_t valid = 0;
    for (int64_t i = 0; i < B; ++i) {
      int64_t npos = 0;
      for (int64_t j = 0; j < B; ++j)
        if (j != i && labels[static_cast<size_t>(j)] == labels[static_cast<size_t>(i)]) ++npos;
      if (npos == 0) continue;
      ++valid;
      double mx = -1e300;
      for (int64_t a = 0; a < B; ++a)
        if (a != i) mx = std::max(mx, sim[static_cast<size_t>(i * B + a)]);
      double denom = 0.0;
      for (int64_t a = 0; a < B; ++a)
        if (a != i) denom += std::exp(sim[static_cast<size_t>(i * B + a)] - mx);
      const double logz = std::log(denom) + mx;
      for (int64_t p = 0; p < B; ++p) {
        if (p == i || labels[static_cast<size_t>(p)] != labels[static_cast<size_t>(i)]) continue;
        loss -= (sim[static_cast<size_t>(i * B + p)] - logz) / static_cast<double>(npos);
        (*gmat)[static_cast<size_t>(i * B + p)] -= 1.0 / static_cast<double>(npos);
      }
      for (int64_t a = 0; a < B; ++a)
        if (a != i)
          (*gmat)[static_cast<size_t>(i * B + a)] +=
              std::exp(sim[static_cast<size_t>(i * B + a)] - logz);
    }
    Node n;
    n.value = TensorT<T>(Shape{1});
    n.value.data[0] = valid > 0 ? static_cast<T>(loss / static_cast<double>(valid)) : T(0);
    n.parents = {emb.i};
    n.needs_grad = needs(emb) && valid > 0;
    if (n.needs_grad) {
      int ei = emb.i;
      const double scale = 1.0 / (static_cast<double>(valid) * tau);
      n.backward = [ei, z, inv_norm, gmat, B, E, scale](GraphT& g) {
        const double go = static_cast<double>(g.nodes_[g.cursor_].grad[0]);
        g.ensure_grad(ei);
        auto& ge = g.nodes_[ei].grad;
        // dL/dz_i = sum_j (G_ij + G_ji) z_j * scale
        std::vector<double> dz(static_cast<size_t>(B * E), 0.0);
        for (int64_t i = 0; i < B; ++i)
          for (int64_t j = 0; j < B; ++j) {
            const double c = ((*gmat)[static_cast<size_t>(i * B + j)] +
                              (*gmat)[static_cast<size_t>(j * B + i)]) * scale;
            if (c == 0.0) continue;
            for (int64_t e = 0; e < E; ++e)
              dz[static_cast<size_t>(i * E + e)] += c * (*z)[static_cast<size_t>(j * E + e)];
          }
        // through the normalization: de = (dz - z (z . dz)) * inv_norm
        for (int64_t i = 0; i < B; ++i) {
          double dot = 0.0;
          for (int64_t e = 0; e < E; ++e)
            dot += (*z)[static_cast<size_t>(i * E + e)] * dz[static_cast<size_t>(i * E + e)];
          const double inv = (*inv_norm)[static_cast<size_t>(i)];
          for (int64_t e = 0; e < E; ++e)
            ge[static_cast<size_t>(i * E + e)] += static_cast<T>(
                go * (dz[static_cast<size_t>(i * E + e)] - (*z)[static_cast<size_t>(i * E + e)] * dot) * inv);
        }
      };
    }
    return push_with_cursor(std::move(n));
  }

 private:
  struct Node {
    TensorT<T> value;
    std::vector<T> grad;
    std::vector<int> parents;
    bool needs_grad = false;
    std::function<void(GraphT&)> backward;
  };

  Node& node(Var v) { return nodes_[static_cast<size_t>(v.i)]; }
  bool needs(Var v) const { return nodes_[static_cast<size_t>(v.i)].needs_grad; }
  bool needs_idx(int i) const { return nodes_[static_cast<size_t>(i)].needs_grad; }

  void ensure_grad(int i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.grad.size() != n.value.data.size()) n.grad.assign(n.value.data.size(), T(0));
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  // Wraps the node's backward so it knows its own index when invoked.
  Var push_with_cursor(Node n) {
    const int idx = static_cast<int>(nodes_.size());
    if (n.backward) {
      auto inner = std::move(n.backward);
      n.backward = [idx, inner](GraphT& g) {
        g.cursor_ = idx;
        inner(g);
      };
    }
    nodes_.push_back(std::move(n));
    return Var{idx};
  }

  Var ew_linear(Var a, Var b, bool negate_b) {
    check_same(a, b, negate_b ? "sub" : "add");
    Node n;
    n.value = TensorT<T>(val(a).shape);
    const auto& x = val(a).data;
    const auto& y = val(b).data;
    if (negate_b)
      for (size_t i = 0; i < x.size(); ++i) n.value.data[i] = x[i] - y[i];
    else
      for (size_t i = 0; i < x.size(); ++i) n.value.data[i] = x[i] + y[i];
    n.parents = {a.i, b.i};
    n.needs_grad = needs(a) || needs(b);
    if (n.needs_grad) {
      int ai = a.i, bi = b.i;
      n.backward = [ai, bi, negate_b](GraphT& g) {
        const auto& gv = g.nodes_[g.cursor_].grad;
        if (g.needs_idx(ai)) {
          g.ensure_grad(ai);
          auto& ga = g.nodes_[ai].grad;
          for (size_t i = 0; i < gv.size(); ++i) ga[i] += gv[i];
        }
        if (g.needs_idx(bi)) {
          g.ensure_grad(bi);
          auto& gb = g.nodes_[bi].grad;
          if (negate_b)
            for (size_t i = 0; i < gv.size(); ++i) gb[i] -= gv[i];
          else
            for (size_t i = 0; i < gv.size(); ++i) gb[i] += gv[i];
        }
      };
    }
    return push_with_cursor(std::move(n));
  }

  void check_same(Var a, Var b, const char* name) {
    if (!val(a).same_shape(val(b)))
      fail(ErrorKind::Dimension, std::string(name) + ": shape mismatch " +
                                     shape_str(val(a).shape) + " vs " + shape_str(val(b).shape));
  }

  std::vector<Node> nodes_;
  int cursor_ = -1;
};

using Graph = GraphT<float>;

}  // namespace sentinel
