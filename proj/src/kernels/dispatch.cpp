// Runtime backend selection.  Detection runs once; REFSEG_KERNEL_BACKEND=scalar
// forces the reference kernels (useful for debugging and for isolating
// SIMD-specific differences).

#include <cstdlib>
#include <cstring>
#include <type_traits>

#include "refseg/kernels/kernels.hpp"

namespace refseg::kern {

namespace {

template <typename T>
constexpr Kernels<T> scalar_table() {
  return Kernels<T>{
      &scalar::gemm<T>,       &scalar::transpose<T>, &scalar::add<T>,
      &scalar::mul<T>,        &scalar::axpy<T>,      &scalar::scale<T>,
      &scalar::dot<T>,        &scalar::reduce_sum<T>, &scalar::reduce_max<T>,
      &scalar::vexp<T>,       &scalar::vlog<T>,      &scalar::verf<T>,
      &scalar::vsigmoid<T>,   &scalar::adam_step<T>,
  };
}

#if defined(REFSEG_WITH_AVX2)
Kernels<float> avx2_table_f32() {
  Kernels<float> t = scalar_table<float>();
  t.gemm = &avx2::gemm_f32;
  t.add = &avx2::add_f32;
  t.mul = &avx2::mul_f32;
  t.axpy = &avx2::axpy_f32;
  t.scale = &avx2::scale_f32;
  t.dot = &avx2::dot_f32;
  t.reduce_sum = &avx2::reduce_sum_f32;
  t.reduce_max = &avx2::reduce_max_f32;
  t.vexp = &avx2::vexp_f32;
  t.vlog = &avx2::vlog_f32;
  t.verf = &avx2::verf_f32;
  t.vsigmoid = &avx2::vsigmoid_f32;
  t.adam_step = &avx2::adam_step_f32;
  return t;
}

Kernels<double> avx2_table_f64() {
  // Only the gemm inner loop is worth vectorizing in the f64 (gradient-check)
  // paths; everything else stays on the reference kernels.
  Kernels<double> t = scalar_table<double>();
  t.gemm = &avx2::gemm_f64;
  return t;
}
#endif

Backend detect() {
  if (const char* env = std::getenv("REFSEG_KERNEL_BACKEND")) {
    if (std::strcmp(env, "scalar") == 0) return Backend::scalar;
  }
#if defined(REFSEG_WITH_AVX2)
  if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma"))
    return Backend::avx2;
#endif
  return Backend::scalar;
}

}  // namespace

Backend active_backend() {
  static const Backend b = detect();
  return b;
}

const char* backend_name(Backend b) {
  return b == Backend::avx2 ? "avx2" : "scalar";
}

template <typename T>
const Kernels<T>& table(Backend b) {
  static const Kernels<T> scalar_k = scalar_table<T>();
#if defined(REFSEG_WITH_AVX2)
  if (b == Backend::avx2) {
    if constexpr (std::is_same_v<T, float>) {
      static const Kernels<float> k = avx2_table_f32();
      return k;
    } else {
      static const Kernels<double> k = avx2_table_f64();
      return k;
    }
  }
#else
  (void)b;
#endif
  return scalar_k;
}

template <typename T>
const Kernels<T>& active() {
  static const Kernels<T>& k = table<T>(active_backend());
  return k;
}

template const Kernels<float>& table<float>(Backend);
template const Kernels<double>& table<double>(Backend);
template const Kernels<float>& active<float>();
template const Kernels<double>& active<double>();

}  // namespace refseg::kern
