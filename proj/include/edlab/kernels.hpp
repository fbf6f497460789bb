#pragma once

// Raw numeric kernels shared by the autodiff ops and the incremental decoder.
// Every kernel computes each output row from its own input row only, with a
// fixed accumulation order, so a row gets the same bits whether it is
// computed inside a packed batch or alone.

#include <algorithm>
#include <cmath>
#include <cstddef>

namespace edlab::kernels {

// c[m×n] (+)= a[m×k] · b[k×n]
template <class T>
void gemm(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    T* c0 = c + (i + 0) * n;
    T* c1 = c + (i + 1) * n;
    T* c2 = c + (i + 2) * n;
    T* c3 = c + (i + 3) * n;
    if (!accumulate) {
      std::fill(c0, c0 + n, T(0));
      std::fill(c1, c1 + n, T(0));
      std::fill(c2, c2 + n, T(0));
      std::fill(c3, c3 + n, T(0));
    }
    const T* a0 = a + (i + 0) * k;
    const T* a1 = a + (i + 1) * k;
    const T* a2 = a + (i + 2) * k;
    const T* a3 = a + (i + 3) * k;
    for (std::size_t t = 0; t < k; ++t) {
      const T* brow = b + t * n;
      const T x0 = a0[t], x1 = a1[t], x2 = a2[t], x3 = a3[t];
      for (std::size_t j = 0; j < n; ++j) {
        const T bj = brow[j];
        c0[j] += x0 * bj;
        c1[j] += x1 * bj;
        c2[j] += x2 * bj;
        c3[j] += x3 * bj;
      }
    }
  }
  for (; i < m; ++i) {
    T* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, T(0));
    const T* arow = a + i * k;
    for (std::size_t t = 0; t < k; ++t) {
      const T* brow = b + t * n;
      const T x = arow[t];
      for (std::size_t j = 0; j < n; ++j) crow[j] += x * brow[j];
    }
  }
}

template <class T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += kBlock) {
    const std::size_t i1 = std::min(rows, i0 + kBlock);
    for (std::size_t j0 = 0; j0 < cols; j0 += kBlock) {
      const std::size_t j1 = std::min(cols, j0 + kBlock);
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * cols + j];
    }
  }
}

template <class T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

inline constexpr double kLayerNormEps = 1e-5;

// y = (x - mean) / sqrt(var + eps) * gain + bias, statistics in double.
template <class T>
void layernorm_row(const T* x, const T* gain, const T* bias, std::size_t d, T* y, T* xhat, T* rstd_out) {
  double mean = 0.0;
  for (std::size_t j = 0; j < d; ++j) mean += static_cast<double>(x[j]);
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    const double c = static_cast<double>(x[j]) - mean;
    var += c * c;
  }
  var /= static_cast<double>(d);
  const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
  for (std::size_t j = 0; j < d; ++j) {
    const T h = static_cast<T>((static_cast<double>(x[j]) - mean) * rstd);
    if (xhat) xhat[j] = h;
    y[j] = h * gain[j] + bias[j];
  }
  if (rstd_out) *rstd_out = static_cast<T>(rstd);
}

// tanh approximation of GELU
template <class T>
T gelu(T x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  const double xd = static_cast<double>(x);
  const double u = kC * (xd + 0.044715 * xd * xd * xd);
  return static_cast<T>(0.5 * xd * (1.0 + std::tanh(u)));
}

template <class T>
T gelu_derivative(T x) {
  constexpr double kC = 0.7978845608028654;
  const double xd = static_cast<double>(x);
  const double u = kC * (xd + 0.044715 * xd * xd * xd);
  const double th = std::tanh(u);
  const double du = kC * (1.0 + 3.0 * 0.044715 * xd * xd);
  return static_cast<T>(0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * du);
}

// Stable softmax over n entries; normaliser accumulated in double.
template <class T>
void softmax_row(const T* in, std::size_t n, T* out) {
  T mx = in[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double e = std::exp(static_cast<double>(in[j] - mx));
    out[j] = static_cast<T>(e);
    sum += e;
  }
  const double inv = 1.0 / sum;
  for (std::size_t j = 0; j < n; ++j) out[j] = static_cast<T>(static_cast<double>(out[j]) * inv);
}

// log-sum-exp of a row, in double.
template <class T>
double log_sum_exp(const T* in, std::size_t n) {
  double mx = static_cast<double>(in[0]);
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, static_cast<double>(in[j]));
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) sum += std::exp(static_cast<double>(in[j]) - mx);
  return mx + std::log(sum);
}

// One attention head for one query row against `count` key/value rows laid
// out with row stride `stride`. `probs` receives the count attention weights
// and `out` the dh-wide weighted value sum.
template <class T>
void attend_row(const T* q, const T* keys, const T* values, std::size_t stride, std::size_t count,
                std::size_t dh, T scale, T* probs, T* out) {
  for (std::size_t j = 0; j < count; ++j) probs[j] = dot(q, keys + j * stride, dh) * scale;
  softmax_row(probs, count, probs);
  std::fill(out, out + dh, T(0));
  for (std::size_t j = 0; j < count; ++j) {
    const T p = probs[j];
    const T* v = values + j * stride;
    for (std::size_t c = 0; c < dh; ++c) out[c] += p * v[c];
  }
}

// Index of the largest entry; ties go to the lowest index.
template <class T>
std::size_t argmax(const T* row, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < n; ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

}  // namespace edlab::kernels
