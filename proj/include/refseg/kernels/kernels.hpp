#pragma once
// Low-level numeric kernels used by the autograd layer.
//
// Every kernel has a portable scalar reference implementation; on x86-64 the
// hot ones also have AVX2+FMA variants.  The active set is picked once at
// runtime from CPU features (see dispatch.cpp), so a single binary runs
// correctly on machines with and without AVX2.  Scalar and vector variants
// are equivalence-tested against each other in tests/test_kernels.cpp.
//
// Conventions: all matrices are dense row-major, no padding.  gemm computes
// C[m x n] = A[m x k] * B[k x n] (or += with accumulate=true).

#include <cstddef>
#include <cstdint>

namespace refseg::kern {

enum class Backend { scalar, avx2 };

// Detected once on first use.  Set REFSEG_KERNEL_BACKEND=scalar in the
// environment to force the reference implementation.
Backend active_backend();
const char* backend_name(Backend b);

template <typename T>
struct Kernels {
  void (*gemm)(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate);
  void (*transpose)(const T* src, T* dst, std::size_t rows, std::size_t cols);
  void (*add)(const T* x, const T* y, T* out, std::size_t n);    // out = x + y
  void (*mul)(const T* x, const T* y, T* out, std::size_t n);    // out = x .* y
  void (*axpy)(T a, const T* x, T* y, std::size_t n);            // y += a * x
  void (*scale)(const T* x, T a, T* out, std::size_t n);         // out = a * x
  T (*dot)(const T* x, const T* y, std::size_t n);
  T (*reduce_sum)(const T* x, std::size_t n);
  T (*reduce_max)(const T* x, std::size_t n);
  void (*vexp)(const T* x, T* out, std::size_t n);
  void (*vlog)(const T* x, T* out, std::size_t n);
  void (*verf)(const T* x, T* out, std::size_t n);
  void (*vsigmoid)(const T* x, T* out, std::size_t n);
  // Adam with bias correction folded into bc1/bc2 = 1/(1-beta^t); weight
  // decay is decoupled: w -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * w).
  void (*adam_step)(T* w, const T* g, T* m, T* v, std::size_t n, T lr, T beta1,
                    T beta2, T eps, T bc1, T bc2, T wd);
};

// Kernel set for the runtime-selected backend.
template <typename T>
const Kernels<T>& active();

// Explicit backends, used directly by the equivalence tests.
template <typename T>
const Kernels<T>& table(Backend b);

namespace scalar {
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
          std::size_t n, bool accumulate);
template <typename T>
void transpose(const T* src, T* dst, std::size_t rows, std::size_t cols);
template <typename T> void add(const T* x, const T* y, T* out, std::size_t n);
template <typename T> void mul(const T* x, const T* y, T* out, std::size_t n);
template <typename T> void axpy(T a, const T* x, T* y, std::size_t n);
template <typename T> void scale(const T* x, T a, T* out, std::size_t n);
template <typename T> T dot(const T* x, const T* y, std::size_t n);
template <typename T> T reduce_sum(const T* x, std::size_t n);
template <typename T> T reduce_max(const T* x, std::size_t n);
template <typename T> void vexp(const T* x, T* out, std::size_t n);
template <typename T> void vlog(const T* x, T* out, std::size_t n);
template <typename T> void verf(const T* x, T* out, std::size_t n);
template <typename T> void vsigmoid(const T* x, T* out, std::size_t n);
template <typename T>
void adam_step(T* w, const T* g, T* m, T* v, std::size_t n, T lr, T beta1,
               T beta2, T eps, T bc1, T bc2, T wd);
}  // namespace scalar

#if defined(REFSEG_WITH_AVX2)
namespace avx2 {
void gemm_f32(const float* a, const float* b, float* c, std::size_t m,
              std::size_t k, std::size_t n, bool accumulate);
void gemm_f64(const double* a, const double* b, double* c, std::size_t m,
              std::size_t k, std::size_t n, bool accumulate);
void add_f32(const float* x, const float* y, float* out, std::size_t n);
void mul_f32(const float* x, const float* y, float* out, std::size_t n);
void axpy_f32(float a, const float* x, float* y, std::size_t n);
void scale_f32(const float* x, float a, float* out, std::size_t n);
float dot_f32(const float* x, const float* y, std::size_t n);
float reduce_sum_f32(const float* x, std::size_t n);
float reduce_max_f32(const float* x, std::size_t n);
void vexp_f32(const float* x, float* out, std::size_t n);
void vlog_f32(const float* x, float* out, std::size_t n);
void verf_f32(const float* x, float* out, std::size_t n);
void vsigmoid_f32(const float* x, float* out, std::size_t n);
void adam_step_f32(float* w, const float* g, float* m, float* v, std::size_t n,
                   float lr, float beta1, float beta2, float eps, float bc1,
                   float bc2, float wd);
}  // namespace avx2
#endif

}  // namespace refseg::kern
