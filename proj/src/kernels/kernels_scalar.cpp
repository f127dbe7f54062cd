// Portable reference kernels.  These define the semantics the AVX2 variants
// are tested against; keep them simple and obviously correct.

#include <cmath>
#include <cstring>

#include "refseg/kernels/kernels.hpp"

namespace refseg::kern::scalar {

template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
          std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    if (!accumulate) std::memset(crow, 0, n * sizeof(T));
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

template <typename T>
void transpose(const T* src, T* dst, std::size_t rows, std::size_t cols) {
  constexpr std::size_t kBlock = 32;  // keep both sides cache-resident
  for (std::size_t i0 = 0; i0 < rows; i0 += kBlock) {
    const std::size_t i1 = std::min(rows, i0 + kBlock);
    for (std::size_t j0 = 0; j0 < cols; j0 += kBlock) {
      const std::size_t j1 = std::min(cols, j0 + kBlock);
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * cols + j];
    }
  }
}

template <typename T>
void add(const T* x, const T* y, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + y[i];
}

template <typename T>
void mul(const T* x, const T* y, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * y[i];
}

template <typename T>
void axpy(T a, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <typename T>
void scale(const T* x, T a, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a * x[i];
}

template <typename T>
T dot(const T* x, const T* y, std::size_t n) {
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

template <typename T>
T reduce_sum(const T* x, std::size_t n) {
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

template <typename T>
T reduce_max(const T* x, std::size_t n) {
  T best = x[0];
  for (std::size_t i = 1; i < n; ++i)
    if (x[i] > best) best = x[i];
  return best;
}

template <typename T>
void vexp(const T* x, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(x[i]);
}

template <typename T>
void vlog(const T* x, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = std::log(x[i]);
}

template <typename T>
void verf(const T* x, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = std::erf(x[i]);
}

template <typename T>
void vsigmoid(const T* x, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = T(1) / (T(1) + std::exp(-x[i]));
}

template <typename T>
void adam_step(T* w, const T* g, T* m, T* v, std::size_t n, T lr, T beta1,
               T beta2, T eps, T bc1, T bc2, T wd) {
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = beta1 * m[i] + (T(1) - beta1) * g[i];
    v[i] = beta2 * v[i] + (T(1) - beta2) * g[i] * g[i];
    const T mhat = m[i] * bc1;
    const T vhat = v[i] * bc2;
    // decay stays outside the moment normaliser (decoupled); folding it into
    // g would let wd * w dominate sqrt(vhat) for small-gradient weights and
    // erase them at a constant lr per step
    w[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * w[i]);
  }
}

// Instantiate for the two precisions the project uses (f32 training paths,
// f64 gradient-check paths).
#define REFSEG_INSTANTIATE(T)                                                  \
  template void gemm<T>(const T*, const T*, T*, std::size_t, std::size_t,      \
                        std::size_t, bool);                                    \
  template void transpose<T>(const T*, T*, std::size_t, std::size_t);          \
  template void add<T>(const T*, const T*, T*, std::size_t);                   \
  template void mul<T>(const T*, const T*, T*, std::size_t);                   \
  template void axpy<T>(T, const T*, T*, std::size_t);                         \
  template void scale<T>(const T*, T, T*, std::size_t);                        \
  template T dot<T>(const T*, const T*, std::size_t);                          \
  template T reduce_sum<T>(const T*, std::size_t);                             \
  template T reduce_max<T>(const T*, std::size_t);                             \
  template void vexp<T>(const T*, T*, std::size_t);                            \
  template void vlog<T>(const T*, T*, std::size_t);                            \
  template void verf<T>(const T*, T*, std::size_t);                            \
  template void vsigmoid<T>(const T*, T*, std::size_t);                        \
  template void adam_step<T>(T*, const T*, T*, T*, std::size_t, T, T, T, T, T, \
                             T, T);

REFSEG_INSTANTIATE(float)
REFSEG_INSTANTIATE(double)
#undef REFSEG_INSTANTIATE

}  // namespace refseg::kern::scalar
