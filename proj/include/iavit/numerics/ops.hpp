// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "iavit/numerics/tape.hpp"
#include "iavit/numerics/tensor.hpp"

// Differentiable tensor operations. Every op takes the tape first, computes its
// output eagerly, rejects non-finite results, and registers a local gradient
// rule when any input is differentiable.

namespace iavit {

namespace detail {

// Register-blocked kernels. Each output element is still accumulated in a
// single pass over the reduction index in ascending order, starting from its
// current value, so results match the plain triple loop bit for bit.
inline constexpr std::size_t kRowBlock = 4;
inline constexpr std::size_t kColBlock = 32;

// c[m x n] += a[m x k] * b[k x n]
template <typename Real>
void gemm_nn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  std::size_t i0 = 0;
  for (; i0 + kRowBlock <= m; i0 += kRowBlock) {
    std::size_t j0 = 0;
    for (; j0 + kColBlock <= n; j0 += kColBlock) {
      Real acc[kRowBlock][kColBlock];
      for (std::size_t r = 0; r < kRowBlock; ++r)
        for (std::size_t j = 0; j < kColBlock; ++j) acc[r][j] = c[(i0 + r) * n + j0 + j];
      for (std::size_t p = 0; p < k; ++p) {
        const Real* bp = b + p * n + j0;
        for (std::size_t r = 0; r < kRowBlock; ++r) {
          const Real av = a[(i0 + r) * k + p];
          for (std::size_t j = 0; j < kColBlock; ++j) acc[r][j] += av * bp[j];
        }
      }
      for (std::size_t r = 0; r < kRowBlock; ++r)
        for (std::size_t j = 0; j < kColBlock; ++j) c[(i0 + r) * n + j0 + j] = acc[r][j];
    }
    if (j0 < n) {
      for (std::size_t i = i0; i < i0 + kRowBlock; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const Real av = a[i * k + p];
          for (std::size_t j = j0; j < n; ++j) c[i * n + j] += av * b[p * n + j];
        }
    }
  }
  for (std::size_t i = i0; i < m; ++i) {
    Real* __restrict ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = a[i * k + p];
      const Real* __restrict bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[k x n] += a[m x k]^T * g[m x n]
template <typename Real>
void gemm_tn(const Real* a, const Real* g, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  std::size_t p0 = 0;
  for (; p0 + kRowBlock <= k; p0 += kRowBlock) {
    std::size_t j0 = 0;
    for (; j0 + kColBlock <= n; j0 += kColBlock) {
      Real acc[kRowBlock][kColBlock];
      for (std::size_t r = 0; r < kRowBlock; ++r)
        for (std::size_t j = 0; j < kColBlock; ++j) acc[r][j] = c[(p0 + r) * n + j0 + j];
      for (std::size_t i = 0; i < m; ++i) {
        const Real* gi = g + i * n + j0;
        for (std::size_t r = 0; r < kRowBlock; ++r) {
          const Real av = a[i * k + p0 + r];
          for (std::size_t j = 0; j < kColBlock; ++j) acc[r][j] += av * gi[j];
        }
      }
      for (std::size_t r = 0; r < kRowBlock; ++r)
        for (std::size_t j = 0; j < kColBlock; ++j) c[(p0 + r) * n + j0 + j] = acc[r][j];
    }
    if (j0 < n) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = p0; p < p0 + kRowBlock; ++p) {
          const Real av = a[i * k + p];
          for (std::size_t j = j0; j < n; ++j) c[p * n + j] += av * g[i * n + j];
        }
    }
  }
  if (p0 < k) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = p0; p < k; ++p) {
        const Real av = a[i * k + p];
        Real* __restrict cp = c + p * n;
        const Real* __restrict gi = g + i * n;
        for (std::size_t j = 0; j < n; ++j) cp[j] += av * gi[j];
      }
  }
}

template <typename Real>
void transpose_into(const Real* src, Real* dst, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

// c[m x k] += g[m x n] * b[k x n]^T
template <typename Real>
void gemm_nt(const Real* g, const Real* b, Real* c, std::size_t m, std::size_t n, std::size_t k,
             std::vector<Real>& scratch) {
  scratch.resize(n * k);
  transpose_into(b, scratch.data(), k, n);
  gemm_nn(g, scratch.data(), c, m, n, k);
}

template <typename Real>
bool any_grad(std::initializer_list<const BasicVar<Real>*> vars) {
  for (const auto* v : vars)
    if ((*v)->requires_grad) return true;
  return false;
}

template <typename Real>
BasicVar<Real> new_output(const BasicTape<Real>& tape, Shape shape, bool needs_grad) {
  auto out = std::make_shared<BasicTensor<Real>>(std::move(shape));
  out->requires_grad = tape.recording() && needs_grad;
  return out;
}

template <typename Real, typename Rule>
void finish(BasicTape<Real>& tape, std::string_view op, std::vector<BasicVar<Real>> inputs, const BasicVar<Real>& out,
            Rule&& rule) {
  check_finite(*out, op);
  if (out->requires_grad) tape.record(std::move(inputs), out, std::forward<Rule>(rule));
}

struct AxisSplit {
  std::size_t outer;
  std::size_t len;
  std::size_t inner;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

inline void require_same_shape(const Shape& a, const Shape& b, std::string_view op) {
  if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

inline void require_axis(const Shape& s, std::size_t axis, std::string_view op) {
  if (axis >= s.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + to_string(s));
  }
}

}  // namespace detail

/// a[..., k] x b[k, n] -> [..., n]. Leading axes of `a` are flattened into rows.
template <typename Real>
BasicVar<Real> matmul(BasicTape<Real>& tape, const BasicVar<Real>& a, const BasicVar<Real>& b) {
  if (b->rank() != 2 || a->rank() < 1 || a->shape.back() != b->shape[0]) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a->shape) + " and " + to_string(b->shape));
  }
  const std::size_t k = b->shape[0], n = b->shape[1], m = a->size() / k;
  Shape shape(a->shape.begin(), a->shape.end() - 1);
  shape.push_back(n);
  auto out = detail::new_output(tape, std::move(shape), detail::any_grad({&a, &b}));
  detail::gemm_nn(a->data.data(), b->data.data(), out->data.data(), m, k, n);
  detail::finish(tape, "matmul", {a, b}, out, [A = a.get(), B = b.get(), C = out.get(), m, k, n] {
    if (A->requires_grad) {
      std::vector<Real> scratch;
      detail::gemm_nt(C->grad.data(), B->data.data(), A->grad.data(), m, n, k, scratch);
    }
    if (B->requires_grad) detail::gemm_tn(A->data.data(), C->grad.data(), B->grad.data(), m, k, n);
  });
  return out;
}

/// Batched product: a[B, m, k] x b[B, k, n] -> [B, m, n]; with `transpose_b`,
/// b is [B, n, k] and the product is a x b^T.
template <typename Real>
BasicVar<Real> bmm(BasicTape<Real>& tape, const BasicVar<Real>& a, const BasicVar<Real>& b, bool transpose_b = false) {
  const bool ok = a->rank() == 3 && b->rank() == 3 && a->shape[0] == b->shape[0] &&
                  a->shape[2] == (transpose_b ? b->shape[2] : b->shape[1]);
  if (!ok) {
    throw DimensionError("bmm: incompatible shapes " + to_string(a->shape) + " and " + to_string(b->shape) +
                         (transpose_b ? " (b transposed)" : ""));
  }
  const std::size_t batch = a->shape[0], m = a->shape[1], k = a->shape[2];
  const std::size_t n = transpose_b ? b->shape[1] : b->shape[2];
  auto out = detail::new_output(tape, Shape{batch, m, n}, detail::any_grad({&a, &b}));
  std::vector<Real> scratch;
  for (std::size_t t = 0; t < batch; ++t) {
    const Real* ap = a->data.data() + t * m * k;
    const Real* bp = b->data.data() + t * k * n;
    Real* cp = out->data.data() + t * m * n;
    if (transpose_b) {
      scratch.resize(k * n);
      detail::transpose_into(bp, scratch.data(), n, k);
      detail::gemm_nn(ap, scratch.data(), cp, m, k, n);
    } else {
      detail::gemm_nn(ap, bp, cp, m, k, n);
    }
  }
  detail::finish(tape, "bmm", {a, b}, out, [A = a.get(), B = b.get(), C = out.get(), batch, m, k, n, transpose_b] {
    std::vector<Real> scratch;
    for (std::size_t t = 0; t < batch; ++t) {
      const Real* ap = A->data.data() + t * m * k;
      const Real* bp = B->data.data() + t * k * n;
      const Real* gp = C->grad.data() + t * m * n;
      if (transpose_b) {
        if (A->requires_grad) detail::gemm_nn(gp, bp, A->grad.data() + t * m * k, m, n, k);
        if (B->requires_grad) detail::gemm_tn(gp, ap, B->grad.data() + t * k * n, m, n, k);
      } else {
        if (A->requires_grad) detail::gemm_nt(gp, bp, A->grad.data() + t * m * k, m, n, k, scratch);
        if (B->requires_grad) detail::gemm_tn(ap, gp, B->grad.data() + t * k * n, m, k, n);
      }
    }
  });
  return out;
}

template <typename Real>
BasicVar<Real> add(BasicTape<Real>& tape, const BasicVar<Real>& a, const BasicVar<Real>& b) {
  detail::require_same_shape(a->shape, b->shape, "add");
  auto out = detail::new_output(tape, a->shape, detail::any_grad({&a, &b}));
  for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] + b->data[i];
  detail::finish(tape, "add", {a, b}, out, [A = a.get(), B = b.get(), C = out.get()] {
    for (auto* x : {A, B})
      if (x->requires_grad)
        for (std::size_t i = 0; i < C->size(); ++i) x->grad[i] += C->grad[i];
  });
  return out;
}

template <typename Real>
BasicVar<Real> sub(BasicTape<Real>& tape, const BasicVar<Real>& a, const BasicVar<Real>& b) {
  detail::require_same_shape(a->shape, b->shape, "sub");
  auto out = detail::new_output(tape, a->shape, detail::any_grad({&a, &b}));
  for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] - b->data[i];
  detail::finish(tape, "sub", {a, b}, out, [A = a.get(), B = b.get(), C = out.get()] {
    if (A->requires_grad)
      for (std::size_t i = 0; i < C->size(); ++i) A->grad[i] += C->grad[i];
    if (B->requires_grad)
      for (std::size_t i = 0; i < C->size(); ++i) B->grad[i] -= C->grad[i];
  });
  return out;
}

/// a + b where b's shape is a trailing suffix of a's shape (bias rows,
/// positional tables).
template <typename Real>
BasicVar<Real> add_broadcast(BasicTape<Real>& tape, const BasicVar<Real>& a, const BasicVar<Real>& b) {
  const bool suffix = b->rank() <= a->rank() && std::equal(b->shape.rbegin(), b->shape.rend(), a->shape.rbegin());
  if (!suffix) {
    throw DimensionError("add_broadcast: " + to_string(b->shape) + " is not a suffix of " + to_string(a->shape));
  }
  const std::size_t period = b->size();
  auto out = detail::new_output(tape, a->shape, detail::any_grad({&a, &b}));
  const std::size_t reps = out->size() / period;
  for (std::size_t r = 0; r < reps; ++r) {
    const Real* src = a->data.data() + r * period;
    Real* dst = out->data.data() + r * period;
    for (std::size_t i = 0; i < period; ++i) dst[i] = src[i] + b->data[i];
  }
  detail::finish(tape, "add_broadcast", {a, b}, out, [A = a.get(), B = b.get(), C = out.get(), period, reps] {
    if (A->requires_grad)
      for (std::size_t i = 0; i < C->size(); ++i) A->grad[i] += C->grad[i];
    if (B->requires_grad)
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t i = 0; i < period; ++i) B->grad[i] += C->grad[r * period + i];
  });
  return out;
}

template <typename Real>
BasicVar<Real> mul(BasicTape<Real>& tape, const BasicVar<Real>& a, const BasicVar<Real>& b) {
  detail::require_same_shape(a->shape, b->shape, "mul");
  auto out = detail::new_output(tape, a->shape, detail::any_grad({&a, &b}));
  for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] * b->data[i];
  detail::finish(tape, "mul", {a, b}, out, [A = a.get(), B = b.get(), C = out.get()] {
    if (A->requires_grad)
      for (std::size_t i = 0; i < C->size(); ++i) A->grad[i] += C->grad[i] * B->data[i];
    if (B->requires_grad)
      for (std::size_t i = 0; i < C->size(); ++i) B->grad[i] += C->grad[i] * A->data[i];
  });
  return out;
}

template <typename Real>
BasicVar<Real> scale(BasicTape<Real>& tape, const BasicVar<Real>& a, Real s) {
  auto out = detail::new_output(tape, a->shape, a->requires_grad);
  for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] * s;
  detail::finish(tape, "scale", {a}, out, [A = a.get(), C = out.get(), s] {
    for (std::size_t i = 0; i < C->size(); ++i) A->grad[i] += C->grad[i] * s;
  });
  return out;
}

template <typename Real>
BasicVar<Real> add_scalar(BasicTape<Real>& tape, const BasicVar<Real>& a, Real s) {
  auto out = detail::new_output(tape, a->shape, a->requires_grad);
  for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] + s;
  detail::finish(tape, "add_scalar", {a}, out, [A = a.get(), C = out.get()] {
    for (std::size_t i = 0; i < C->size(); ++i) A->grad[i] += C->grad[i];
  });
  return out;
}

template <typename Real>
BasicVar<Real> exp(BasicTape<Real>& tape, const BasicVar<Real>& a) {
  auto out = detail::new_output(tape, a->shape, a->requires_grad);
  for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = std::exp(a->data[i]);
  detail::finish(tape, "exp", {a}, out, [A = a.get(), C = out.get()] {
    for (std::size_t i = 0; i < C->size(); ++i) A->grad[i] += C->grad[i] * C->data[i];
  });
  return out;
}

/// log(clamp(a, lo, hi)); the gradient is zero wherever the clamp is active.
template <typename Real>
BasicVar<Real> log_clamped(BasicTape<Real>& tape, const BasicVar<Real>& a, Real lo = Real(1e-12), Real hi = Real(1)) {
  auto out = detail::new_output(tape, a->shape, a->requires_grad);
  for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = std::log(std::clamp(a->data[i], lo, hi));
  detail::finish(tape, "log_clamped", {a}, out, [A = a.get(), C = out.get(), lo, hi] {
    for (std::size_t i = 0; i < C->size(); ++i) {
      const Real x = A->data[i];
      if (x >= lo && x <= hi) A->grad[i] += C->grad[i] / x;
    }
  });
  return out;
}

/// sqrt(max(a, 0)); zero gradient where the argument is not positive.
template <typename Real>
BasicVar<Real> sqrt_clamped(BasicTape<Real>& tape, const BasicVar<Real>& a) {
  auto out = detail::new_output(tape, a->shape, a->requires_grad);
  for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = std::sqrt(std::max(a->data[i], Real(0)));
  detail::finish(tape, "sqrt_clamped", {a}, out, [A = a.get(), C = out.get()] {
    for (std::size_t i = 0; i < C->size(); ++i)
      if (A->data[i] > Real(0)) A->grad[i] += C->grad[i] * Real(0.5) / C->data[i];
  });
  return out;
}

/// Exact (erf-based) GELU.
template <typename Real>
BasicVar<Real> gelu(BasicTape<Real>& tape, const BasicVar<Real>& a) {
  constexpr Real inv_sqrt2 = Real(1) / std::numbers::sqrt2_v<Real>;
  constexpr Real inv_sqrt2pi = std::numbers::inv_sqrtpi_v<Real> * inv_sqrt2;
  auto out = detail::new_output(tape, a->shape, a->requires_grad);
  for (std::size_t i = 0; i < out->size(); ++i) {
    const Real x = a->data[i];
    out->data[i] = Real(0.5) * x * (Real(1) + std::erf(x * inv_sqrt2));
  }
  detail::finish(tape, "gelu", {a}, out, [A = a.get(), C = out.get()] {
    for (std::size_t i = 0; i < C->size(); ++i) {
      const Real x = A->data[i];
      const Real cdf = Real(0.5) * (Real(1) + std::erf(x * inv_sqrt2));
      const Real pdf = inv_sqrt2pi * std::exp(Real(-0.5) * x * x);
      A->grad[i] += C->grad[i] * (cdf + x * pdf);
    }
  });
  return out;
}

/// Softmax over the last axis, stabilized by subtracting each row's maximum.
template <typename Real>
BasicVar<Real> softmax(BasicTape<Real>& tape, const BasicVar<Real>& a) {
  check_finite(*a, "softmax input");
  const std::size_t n = a->shape.back(), rows = a->size() / n;
  auto out = detail::new_output(tape, a->shape, a->requires_grad);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* x = a->data.data() + r * n;
    Real* y = out->data.data() + r * n;
    const Real mx = *std::max_element(x, x + n);
    Real total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      total += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= total;
  }
  detail::finish(tape, "softmax", {a}, out, [A = a.get(), C = out.get(), rows, n] {
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* y = C->data.data() + r * n;
      const Real* gy = C->grad.data() + r * n;
      Real* gx = A->grad.data() + r * n;
      Real dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) gx[j] += y[j] * (gy[j] - dot);
    }
  });
  return out;
}

/// Row-wise softmax of a matrix; alias kept for the 2-D case.
template <typename Real>
BasicVar<Real> softmax_rows(BasicTape<Real>& tape, const BasicVar<Real>& a) {
  return softmax(tape, a);
}

/// Layer normalization over the last axis with affine gamma/beta.
template <typename Real>
BasicVar<Real> layer_norm(BasicTape<Real>& tape, const BasicVar<Real>& x, const BasicVar<Real>& gamma,
                          const BasicVar<Real>& beta, Real eps = Real(1e-6)) {
  const std::size_t n = x->shape.back();
  if (gamma->size() != n || beta->size() != n) {
    throw DimensionError("layer_norm: affine params " + to_string(gamma->shape) + "/" + to_string(beta->shape) +
                         " do not match feature axis of " + to_string(x->shape));
  }
  const std::size_t rows = x->size() / n;
  auto out = detail::new_output(tape, x->shape, detail::any_grad({&x, &gamma, &beta}));
  std::vector<Real> xhat(x->size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x->data.data() + r * n;
    Real mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= Real(n);
    Real var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= Real(n);
    inv_std[r] = Real(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const Real h = (xr[j] - mean) * inv_std[r];
      xhat[r * n + j] = h;
      out->data[r * n + j] = h * gamma->data[j] + beta->data[j];
    }
  }
  detail::finish(tape, "layer_norm", {x, gamma, beta}, out,
                 [X = x.get(), G = gamma.get(), B = beta.get(), C = out.get(), xhat = std::move(xhat),
                  inv_std = std::move(inv_std), rows, n] {
                   std::vector<Real> dh(n);
                   for (std::size_t r = 0; r < rows; ++r) {
                     const Real* gy = C->grad.data() + r * n;
                     const Real* h = xhat.data() + r * n;
                     if (G->requires_grad)
                       for (std::size_t j = 0; j < n; ++j) G->grad[j] += gy[j] * h[j];
                     if (B->requires_grad)
                       for (std::size_t j = 0; j < n; ++j) B->grad[j] += gy[j];
                     if (!X->requires_grad) continue;
                     Real mean_dh = 0, mean_dh_h = 0;
                     for (std::size_t j = 0; j < n; ++j) {
                       dh[j] = gy[j] * G->data[j];
                       mean_dh += dh[j];
                       mean_dh_h += dh[j] * h[j];
                     }
                     mean_dh /= Real(n);
                     mean_dh_h /= Real(n);
                     Real* gx = X->grad.data() + r * n;
                     for (std::size_t j = 0; j < n; ++j) gx[j] += inv_std[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                   }
                 });
  return out;
}

/// Sum of all elements, as a [1] tensor.
template <typename Real>
BasicVar<Real> sum(BasicTape<Real>& tape, const BasicVar<Real>& a) {
  auto out = detail::new_output(tape, Shape{1}, a->requires_grad);
  Real total = 0;
  for (Real v : a->data) total += v;
  out->data[0] = total;
  detail::finish(tape, "sum", {a}, out, [A = a.get(), C = out.get()] {
    for (auto& g : A->grad) g += C->grad[0];
  });
  return out;
}

template <typename Real>
BasicVar<Real> mean(BasicTape<Real>& tape, const BasicVar<Real>& a) {
  auto out = detail::new_output(tape, Shape{1}, a->requires_grad);
  Real total = 0;
  for (Real v : a->data) total += v;
  const Real count = Real(a->size());
  out->data[0] = total / count;
  detail::finish(tape, "mean", {a}, out, [A = a.get(), C = out.get(), count] {
    const Real g = C->grad[0] / count;
    for (auto& x : A->grad) x += g;
  });
  return out;
}

namespace detail {
template <typename Real>
BasicVar<Real> reduce_axis(BasicTape<Real>& tape, const BasicVar<Real>& a, std::size_t axis, bool average) {
  require_axis(a->shape, axis, average ? "mean_axis" : "sum_axis");
  const auto s = split_at(a->shape, axis);
  Shape shape;
  for (std::size_t i = 0; i < a->rank(); ++i)
    if (i != axis) shape.push_back(a->shape[i]);
  if (shape.empty()) shape.push_back(1);
  auto out = new_output(tape, std::move(shape), a->requires_grad);
  const Real factor = average ? Real(1) / Real(s.len) : Real(1);
  for (std::size_t o = 0; o < s.outer; ++o) {
    Real* dst = out->data.data() + o * s.inner;
    for (std::size_t l = 0; l < s.len; ++l) {
      const Real* src = a->data.data() + (o * s.len + l) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
    if (average)
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] *= factor;
  }
  finish(tape, average ? "mean_axis" : "sum_axis", {a}, out, [A = a.get(), C = out.get(), s, factor] {
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t l = 0; l < s.len; ++l)
        for (std::size_t i = 0; i < s.inner; ++i)
          A->grad[(o * s.len + l) * s.inner + i] += C->grad[o * s.inner + i] * factor;
  });
  return out;
}
}  // namespace detail

/// Sums out one axis (the axis is removed from the shape).
template <typename Real>
BasicVar<Real> sum_axis(BasicTape<Real>& tape, const BasicVar<Real>& a, std::size_t axis) {
  return detail::reduce_axis(tape, a, axis, false);
}

template <typename Real>
BasicVar<Real> mean_axis(BasicTape<Real>& tape, const BasicVar<Real>& a, std::size_t axis) {
  return detail::reduce_axis(tape, a, axis, true);
}

/// General axis exchange; copies into a fresh row-major buffer.
template <typename Real>
BasicVar<Real> swap_axes(BasicTape<Real>& tape, const BasicVar<Real>& a, std::size_t ax0, std::size_t ax1) {
  detail::require_axis(a->shape, ax0, "swap_axes");
  detail::require_axis(a->shape, ax1, "swap_axes");
  Shape shape = a->shape;
  std::swap(shape[ax0], shape[ax1]);
  const std::size_t rank = a->rank();
  // Strides of the source, permuted into output axis order.
  std::vector<std::size_t> src_stride(rank, 1);
  for (std::size_t i = rank - 1; i-- > 0;) src_stride[i] = src_stride[i + 1] * a->shape[i + 1];
  std::swap(src_stride[ax0], src_stride[ax1]);
  std::vector<std::size_t> map(a->size());
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < map.size(); ++flat) {
    map[flat] = src;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < shape[d]) {
        src += src_stride[d];
        break;
      }
      src -= src_stride[d] * (shape[d] - 1);
      idx[d] = 0;
    }
  }
  auto out = detail::new_output(tape, std::move(shape), a->requires_grad);
  for (std::size_t i = 0; i < map.size(); ++i) out->data[i] = a->data[map[i]];
  detail::finish(tape, "swap_axes", {a}, out, [A = a.get(), C = out.get(), map = std::move(map)] {
    for (std::size_t i = 0; i < map.size(); ++i) A->grad[map[i]] += C->grad[i];
  });
  return out;
}

/// Swaps the last two axes.
template <typename Real>
BasicVar<Real> transpose(BasicTape<Real>& tape, const BasicVar<Real>& a) {
  if (a->rank() < 2) throw DimensionError("transpose: need rank >= 2, got " + to_string(a->shape));
  return swap_axes(tape, a, a->rank() - 2, a->rank() - 1);
}

template <typename Real>
BasicVar<Real> reshape(BasicTape<Real>& tape, const BasicVar<Real>& a, Shape shape) {
  if (numel(shape) != a->size()) {
    throw DimensionError("reshape: cannot view " + to_string(a->shape) + " as " + to_string(shape));
  }
  auto out = detail::new_output(tape, std::move(shape), a->requires_grad);
  out->data = a->data;
  detail::finish(tape, "reshape", {a}, out, [A = a.get(), C = out.get()] {
    for (std::size_t i = 0; i < C->size(); ++i) A->grad[i] += C->grad[i];
  });
  return out;
}

template <typename Real>
BasicVar<Real> concat(BasicTape<Real>& tape, const BasicVar<Real>& a, const BasicVar<Real>& b, std::size_t axis) {
  bool ok = a->rank() == b->rank() && axis < a->rank();
  for (std::size_t i = 0; ok && i < a->rank(); ++i) ok = i == axis || a->shape[i] == b->shape[i];
  if (!ok) {
    throw DimensionError("concat: cannot join " + to_string(a->shape) + " and " + to_string(b->shape) + " on axis " +
                         std::to_string(axis));
  }
  const auto sa = detail::split_at(a->shape, axis), sb = detail::split_at(b->shape, axis);
  Shape shape = a->shape;
  shape[axis] += b->shape[axis];
  auto out = detail::new_output(tape, std::move(shape), detail::any_grad({&a, &b}));
  const std::size_t ca = sa.len * sa.inner, cb = sb.len * sb.inner;
  for (std::size_t o = 0; o < sa.outer; ++o) {
    std::copy_n(a->data.data() + o * ca, ca, out->data.data() + o * (ca + cb));
    std::copy_n(b->data.data() + o * cb, cb, out->data.data() + o * (ca + cb) + ca);
  }
  detail::finish(tape, "concat", {a, b}, out, [A = a.get(), B = b.get(), C = out.get(), outer = sa.outer, ca, cb] {
    for (std::size_t o = 0; o < outer; ++o) {
      if (A->requires_grad)
        for (std::size_t i = 0; i < ca; ++i) A->grad[o * ca + i] += C->grad[o * (ca + cb) + i];
      if (B->requires_grad)
        for (std::size_t i = 0; i < cb; ++i) B->grad[o * cb + i] += C->grad[o * (ca + cb) + ca + i];
    }
  });
  return out;
}

/// Half-open range [begin, end) along one axis.
template <typename Real>
BasicVar<Real> slice(BasicTape<Real>& tape, const BasicVar<Real>& a, std::size_t axis, std::size_t begin,
                     std::size_t end) {
  detail::require_axis(a->shape, axis, "slice");
  if (begin >= end || end > a->shape[axis]) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for axis " +
                         std::to_string(axis) + " of " + to_string(a->shape));
  }
  const auto s = detail::split_at(a->shape, axis);
  Shape shape = a->shape;
  shape[axis] = end - begin;
  auto out = detail::new_output(tape, std::move(shape), a->requires_grad);
  const std::size_t span_len = (end - begin) * s.inner;
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(a->data.data() + (o * s.len + begin) * s.inner, span_len, out->data.data() + o * span_len);
  detail::finish(tape, "slice", {a}, out, [A = a.get(), C = out.get(), s, begin, span_len] {
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < span_len; ++i) A->grad[(o * s.len + begin) * s.inner + i] += C->grad[o * span_len + i];
  });
  return out;
}

/// Stacks `count` copies of `a` along a new leading axis.
template <typename Real>
BasicVar<Real> repeat_leading(BasicTape<Real>& tape, const BasicVar<Real>& a, std::size_t count) {
  Shape shape{count};
  shape.insert(shape.end(), a->shape.begin(), a->shape.end());
  auto out = detail::new_output(tape, std::move(shape), a->requires_grad);
  const std::size_t n = a->size();
  for (std::size_t c = 0; c < count; ++c) std::copy_n(a->data.data(), n, out->data.data() + c * n);
  detail::finish(tape, "repeat_leading", {a}, out, [A = a.get(), C = out.get(), count, n] {
    for (std::size_t c = 0; c < count; ++c)
      for (std::size_t i = 0; i < n; ++i) A->grad[i] += C->grad[c * n + i];
  });
  return out;
}

/// out[r] = a[r, index[r]] for a 2-D tensor.
template <typename Real>
BasicVar<Real> gather_last(BasicTape<Real>& tape, const BasicVar<Real>& a, std::span<const int> index) {
  if (a->rank() != 2 || index.size() != a->shape[0]) {
    throw DimensionError("gather_last: " + std::to_string(index.size()) + " indices for " + to_string(a->shape));
  }
  const std::size_t cols = a->shape[1];
  std::vector<std::size_t> flat(index.size());
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] < 0 || static_cast<std::size_t>(index[r]) >= cols) {
      throw std::out_of_range("gather_last: index " + std::to_string(index[r]) + " outside [0," +
                              std::to_string(cols) + ")");
    }
    flat[r] = r * cols + static_cast<std::size_t>(index[r]);
  }
  auto out = detail::new_output(tape, Shape{index.size()}, a->requires_grad);
  for (std::size_t r = 0; r < flat.size(); ++r) out->data[r] = a->data[flat[r]];
  detail::finish(tape, "gather_last", {a}, out, [A = a.get(), C = out.get(), flat = std::move(flat)] {
    for (std::size_t r = 0; r < flat.size(); ++r) A->grad[flat[r]] += C->grad[r];
  });
  return out;
}

/// Divides each last-axis row by its sum.
template <typename Real>
BasicVar<Real> normalize_last(BasicTape<Real>& tape, const BasicVar<Real>& a) {
  const std::size_t n = a->shape.back(), rows = a->size() / n;
  auto out = detail::new_output(tape, a->shape, a->requires_grad);
  std::vector<Real> totals(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    Real total = 0;
    for (std::size_t j = 0; j < n; ++j) total += a->data[r * n + j];
    totals[r] = total;
    for (std::size_t j = 0; j < n; ++j) out->data[r * n + j] = a->data[r * n + j] / total;
  }
  detail::finish(tape, "normalize_last", {a}, out, [A = a.get(), C = out.get(), totals = std::move(totals), rows, n] {
    for (std::size_t r = 0; r < rows; ++r) {
      Real dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += C->grad[r * n + j] * C->data[r * n + j];
      for (std::size_t j = 0; j < n; ++j) A->grad[r * n + j] += (C->grad[r * n + j] - dot) / totals[r];
    }
  });
  return out;
}

/// Squared Euclidean distances between the rows of x[n, D] and y[m, D].
template <typename Real>
BasicVar<Real> pairwise_sqdist(BasicTape<Real>& tape, const BasicVar<Real>& x, const BasicVar<Real>& y) {
  if (x->rank() != 2 || y->rank() != 2 || x->shape[1] != y->shape[1]) {
    throw DimensionError("pairwise_sqdist: incompatible " + to_string(x->shape) + " and " + to_string(y->shape));
  }
  const std::size_t n = x->shape[0], m = y->shape[0], d = x->shape[1];
  auto out = detail::new_output(tape, Shape{n, m}, detail::any_grad({&x, &y}));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      Real acc = 0;
      for (std::size_t k = 0; k < d; ++k) {
        const Real diff = x->data[i * d + k] - y->data[j * d + k];
        acc += diff * diff;
      }
      out->data[i * m + j] = acc;
    }
  detail::finish(tape, "pairwise_sqdist", {x, y}, out, [X = x.get(), Y = y.get(), C = out.get(), n, m, d] {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const Real g = Real(2) * C->grad[i * m + j];
        for (std::size_t k = 0; k < d; ++k) {
          const Real diff = X->data[i * d + k] - Y->data[j * d + k];
          if (X->requires_grad) X->grad[i * d + k] += g * diff;
          if (Y->requires_grad) Y->grad[j * d + k] -= g * diff;
        }
      }
  });
  return out;
}

/// Copies the value and cuts the graph.
template <typename Real>
BasicVar<Real> stop_gradient(BasicTape<Real>&, const BasicVar<Real>& a) {
  auto out = std::make_shared<BasicTensor<Real>>(a->shape);
  out->data = a->data;
  return out;
}

}  // namespace iavit
