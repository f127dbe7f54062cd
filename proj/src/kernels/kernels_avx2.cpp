// AVX2+FMA kernel variants.  This translation unit is compiled with
// -mavx2 -mfma and must only be entered after the dispatcher has confirmed
// CPU support.  Polynomial exp/log follow the well-known Cephes single
// precision expansions; erf uses the Abramowitz-Stegun 7.1.26 rational
// approximation (|abs err| <= 1.5e-7).  Scalar tails reuse libm, which is
// why scalar-vs-AVX2 equivalence is tested with tolerances, not bitwise.

#include <immintrin.h>

#include <cmath>
#include <cstring>

#include "refseg/kernels/kernels.hpp"

namespace refseg::kern::avx2 {

namespace {

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 1));
  return _mm_cvtss_f32(lo);
}

inline float hmax(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_max_ps(lo, hi);
  lo = _mm_max_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_max_ss(lo, _mm_shuffle_ps(lo, lo, 1));
  return _mm_cvtss_f32(lo);
}

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  lo = _mm_add_sd(lo, _mm_unpackhi_pd(lo, lo));
  return _mm_cvtsd_f64(lo);
}

// exp(x) for a full vector, Cephes expf expansion.
inline __m256 exp256(__m256 x) {
  const __m256 hi = _mm256_set1_ps(88.3762626647950f);
  const __m256 lo = _mm256_set1_ps(-88.3762626647949f);
  const __m256 log2ef = _mm256_set1_ps(1.44269504088896341f);
  const __m256 c1 = _mm256_set1_ps(0.693359375f);
  const __m256 c2 = _mm256_set1_ps(-2.12194440e-4f);
  const __m256 one = _mm256_set1_ps(1.0f);

  x = _mm256_max_ps(_mm256_min_ps(x, hi), lo);
  __m256 fx = _mm256_floor_ps(_mm256_fmadd_ps(x, log2ef, _mm256_set1_ps(0.5f)));
  x = _mm256_fnmadd_ps(fx, c1, x);
  x = _mm256_fnmadd_ps(fx, c2, x);

  const __m256 z = _mm256_mul_ps(x, x);
  __m256 y = _mm256_set1_ps(1.9875691500e-4f);
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.3981999507e-3f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(8.3334519073e-3f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(4.1665795894e-2f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.6666665459e-1f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(5.0000001201e-1f));
  y = _mm256_fmadd_ps(y, z, x);
  y = _mm256_add_ps(y, one);

  __m256i n = _mm256_cvttps_epi32(fx);
  n = _mm256_add_epi32(n, _mm256_set1_epi32(0x7f));
  n = _mm256_slli_epi32(n, 23);
  return _mm256_mul_ps(y, _mm256_castsi256_ps(n));
}

// log(x) for a full vector, Cephes logf expansion.  x <= 0 yields NaN.
inline __m256 log256(__m256 x) {
  const __m256 one = _mm256_set1_ps(1.0f);
  const __m256 invalid = _mm256_cmp_ps(x, _mm256_setzero_ps(), _CMP_LE_OS);
  x = _mm256_max_ps(x, _mm256_castsi256_ps(_mm256_set1_epi32(0x00800000)));

  __m256i n = _mm256_srli_epi32(_mm256_castps_si256(x), 23);
  n = _mm256_sub_epi32(n, _mm256_set1_epi32(0x7f));
  __m256 e = _mm256_add_ps(_mm256_cvtepi32_ps(n), one);

  // mantissa in [0.5, 1)
  x = _mm256_and_ps(x, _mm256_castsi256_ps(_mm256_set1_epi32(~0x7f800000)));
  x = _mm256_or_ps(x, _mm256_set1_ps(0.5f));

  const __m256 below = _mm256_cmp_ps(x, _mm256_set1_ps(0.707106781186547524f), _CMP_LT_OS);
  e = _mm256_sub_ps(e, _mm256_and_ps(one, below));
  x = _mm256_add_ps(_mm256_sub_ps(x, one), _mm256_and_ps(x, below));

  const __m256 z = _mm256_mul_ps(x, x);
  __m256 y = _mm256_set1_ps(7.0376836292e-2f);
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(-1.1514610310e-1f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.1676998740e-1f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(-1.2420140846e-1f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.4249322787e-1f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(-1.6668057665e-1f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(2.0000714765e-1f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(-2.4999993993e-1f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(3.3333331174e-1f));
  y = _mm256_mul_ps(_mm256_mul_ps(y, x), z);

  y = _mm256_fmadd_ps(e, _mm256_set1_ps(-2.12194440e-4f), y);
  y = _mm256_fnmadd_ps(z, _mm256_set1_ps(0.5f), y);
  x = _mm256_add_ps(x, y);
  x = _mm256_fmadd_ps(e, _mm256_set1_ps(0.693359375f), x);
  return _mm256_or_ps(x, invalid);  // NaN out-of-domain
}

inline __m256 erf256(__m256 x) {
  const __m256 sign_mask = _mm256_set1_ps(-0.0f);
  const __m256 sign = _mm256_and_ps(x, sign_mask);
  const __m256 ax = _mm256_andnot_ps(sign_mask, x);

  const __m256 t = _mm256_div_ps(
      _mm256_set1_ps(1.0f),
      _mm256_fmadd_ps(_mm256_set1_ps(0.3275911f), ax, _mm256_set1_ps(1.0f)));
  __m256 p = _mm256_set1_ps(1.061405429f);
  p = _mm256_fmadd_ps(p, t, _mm256_set1_ps(-1.453152027f));
  p = _mm256_fmadd_ps(p, t, _mm256_set1_ps(1.421413741f));
  p = _mm256_fmadd_ps(p, t, _mm256_set1_ps(-0.284496736f));
  p = _mm256_fmadd_ps(p, t, _mm256_set1_ps(0.254829592f));
  p = _mm256_mul_ps(p, t);

  const __m256 e = exp256(_mm256_sub_ps(_mm256_setzero_ps(), _mm256_mul_ps(ax, ax)));
  const __m256 y = _mm256_fnmadd_ps(p, e, _mm256_set1_ps(1.0f));
  return _mm256_or_ps(y, sign);
}

}  // namespace

// ---- gemm -----------------------------------------------------------------

void gemm_f32(const float* a, const float* b, float* c, std::size_t m,
              std::size_t k, std::size_t n, bool accumulate) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const float *a0 = a + (i + 0) * k, *a1 = a + (i + 1) * k;
    const float *a2 = a + (i + 2) * k, *a3 = a + (i + 3) * k;
    float *c0 = c + (i + 0) * n, *c1 = c + (i + 1) * n;
    float *c2 = c + (i + 2) * n, *c3 = c + (i + 3) * n;
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
      __m256 s0 = accumulate ? _mm256_loadu_ps(c0 + j) : _mm256_setzero_ps();
      __m256 s1 = accumulate ? _mm256_loadu_ps(c1 + j) : _mm256_setzero_ps();
      __m256 s2 = accumulate ? _mm256_loadu_ps(c2 + j) : _mm256_setzero_ps();
      __m256 s3 = accumulate ? _mm256_loadu_ps(c3 + j) : _mm256_setzero_ps();
      for (std::size_t p = 0; p < k; ++p) {
        const __m256 bv = _mm256_loadu_ps(b + p * n + j);
        s0 = _mm256_fmadd_ps(_mm256_broadcast_ss(a0 + p), bv, s0);
        s1 = _mm256_fmadd_ps(_mm256_broadcast_ss(a1 + p), bv, s1);
        s2 = _mm256_fmadd_ps(_mm256_broadcast_ss(a2 + p), bv, s2);
        s3 = _mm256_fmadd_ps(_mm256_broadcast_ss(a3 + p), bv, s3);
      }
      _mm256_storeu_ps(c0 + j, s0);
      _mm256_storeu_ps(c1 + j, s1);
      _mm256_storeu_ps(c2 + j, s2);
      _mm256_storeu_ps(c3 + j, s3);
    }
    for (; j < n; ++j) {
      float s0 = accumulate ? c0[j] : 0.f, s1 = accumulate ? c1[j] : 0.f;
      float s2 = accumulate ? c2[j] : 0.f, s3 = accumulate ? c3[j] : 0.f;
      for (std::size_t p = 0; p < k; ++p) {
        const float bv = b[p * n + j];
        s0 += a0[p] * bv;
        s1 += a1[p] * bv;
        s2 += a2[p] * bv;
        s3 += a3[p] * bv;
      }
      c0[j] = s0;
      c1[j] = s1;
      c2[j] = s2;
      c3[j] = s3;
    }
  }
  for (; i < m; ++i) {
    const float* ar = a + i * k;
    float* cr = c + i * n;
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
      __m256 s = accumulate ? _mm256_loadu_ps(cr + j) : _mm256_setzero_ps();
      for (std::size_t p = 0; p < k; ++p)
        s = _mm256_fmadd_ps(_mm256_broadcast_ss(ar + p), _mm256_loadu_ps(b + p * n + j), s);
      _mm256_storeu_ps(cr + j, s);
    }
    for (; j < n; ++j) {
      float s = accumulate ? cr[j] : 0.f;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * b[p * n + j];
      cr[j] = s;
    }
  }
}

void gemm_f64(const double* a, const double* b, double* c, std::size_t m,
              std::size_t k, std::size_t n, bool accumulate) {
  std::size_t i = 0;
  for (; i + 2 <= m; i += 2) {
    const double *a0 = a + i * k, *a1 = a + (i + 1) * k;
    double *c0 = c + i * n, *c1 = c + (i + 1) * n;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      __m256d s0 = accumulate ? _mm256_loadu_pd(c0 + j) : _mm256_setzero_pd();
      __m256d s1 = accumulate ? _mm256_loadu_pd(c1 + j) : _mm256_setzero_pd();
      for (std::size_t p = 0; p < k; ++p) {
        const __m256d bv = _mm256_loadu_pd(b + p * n + j);
        s0 = _mm256_fmadd_pd(_mm256_broadcast_sd(a0 + p), bv, s0);
        s1 = _mm256_fmadd_pd(_mm256_broadcast_sd(a1 + p), bv, s1);
      }
      _mm256_storeu_pd(c0 + j, s0);
      _mm256_storeu_pd(c1 + j, s1);
    }
    for (; j < n; ++j) {
      double s0 = accumulate ? c0[j] : 0.0, s1 = accumulate ? c1[j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double bv = b[p * n + j];
        s0 += a0[p] * bv;
        s1 += a1[p] * bv;
      }
      c0[j] = s0;
      c1[j] = s1;
    }
  }
  if (i < m) {
    const double* ar = a + i * k;
    double* cr = c + i * n;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      __m256d s = accumulate ? _mm256_loadu_pd(cr + j) : _mm256_setzero_pd();
      for (std::size_t p = 0; p < k; ++p)
        s = _mm256_fmadd_pd(_mm256_broadcast_sd(ar + p), _mm256_loadu_pd(b + p * n + j), s);
      _mm256_storeu_pd(cr + j, s);
    }
    for (; j < n; ++j) {
      double s = accumulate ? cr[j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * b[p * n + j];
      cr[j] = s;
    }
  }
}

// ---- elementwise ----------------------------------------------------------

void add_f32(const float* x, const float* y, float* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) out[i] = x[i] + y[i];
}

void mul_f32(const float* x, const float* y, float* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) out[i] = x[i] * y[i];
}

void axpy_f32(float a, const float* x, float* y, std::size_t n) {
  const __m256 av = _mm256_set1_ps(a);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] += a * x[i];
}

void scale_f32(const float* x, float a, float* out, std::size_t n) {
  const __m256 av = _mm256_set1_ps(a);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_mul_ps(av, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) out[i] = a * x[i];
}

float dot_f32(const float* x, const float* y, std::size_t n) {
  __m256 s0 = _mm256_setzero_ps(), s1 = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    s0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), s0);
    s1 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i + 8), _mm256_loadu_ps(y + i + 8), s1);
  }
  for (; i + 8 <= n; i += 8)
    s0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), s0);
  float acc = hsum(_mm256_add_ps(s0, s1));
  for (; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

float reduce_sum_f32(const float* x, std::size_t n) {
  __m256 s = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) s = _mm256_add_ps(s, _mm256_loadu_ps(x + i));
  float acc = hsum(s);
  for (; i < n; ++i) acc += x[i];
  return acc;
}

float reduce_max_f32(const float* x, std::size_t n) {
  std::size_t i = 0;
  float best;
  if (n >= 8) {
    __m256 mv = _mm256_loadu_ps(x);
    for (i = 8; i + 8 <= n; i += 8) mv = _mm256_max_ps(mv, _mm256_loadu_ps(x + i));
    best = hmax(mv);
  } else {
    best = x[0];
    i = 1;
  }
  for (; i < n; ++i) best = std::max(best, x[i]);
  return best;
}

// ---- transcendentals ------------------------------------------------------

void vexp_f32(const float* x, float* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(out + i, exp256(_mm256_loadu_ps(x + i)));
  for (; i < n; ++i) out[i] = std::exp(x[i]);
}

void vlog_f32(const float* x, float* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(out + i, log256(_mm256_loadu_ps(x + i)));
  for (; i < n; ++i) out[i] = std::log(x[i]);
}

void verf_f32(const float* x, float* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(out + i, erf256(_mm256_loadu_ps(x + i)));
  for (; i < n; ++i) out[i] = std::erf(x[i]);
}

void vsigmoid_f32(const float* x, float* out, std::size_t n) {
  const __m256 one = _mm256_set1_ps(1.0f);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 e = exp256(_mm256_sub_ps(_mm256_setzero_ps(), _mm256_loadu_ps(x + i)));
    _mm256_storeu_ps(out + i, _mm256_div_ps(one, _mm256_add_ps(one, e)));
  }
  for (; i < n; ++i) out[i] = 1.0f / (1.0f + std::exp(-x[i]));
}

// ---- optimizer ------------------------------------------------------------

void adam_step_f32(float* w, const float* g, float* m, float* v, std::size_t n,
                   float lr, float beta1, float beta2, float eps, float bc1,
                   float bc2, float wd) {
  const __m256 vb1 = _mm256_set1_ps(beta1), vb1c = _mm256_set1_ps(1.0f - beta1);
  const __m256 vb2 = _mm256_set1_ps(beta2), vb2c = _mm256_set1_ps(1.0f - beta2);
  const __m256 vlr = _mm256_set1_ps(lr), veps = _mm256_set1_ps(eps);
  const __m256 vbc1 = _mm256_set1_ps(bc1), vbc2 = _mm256_set1_ps(bc2);
  const __m256 vwd = _mm256_set1_ps(wd);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 wv = _mm256_loadu_ps(w + i);
    const __m256 gv = _mm256_loadu_ps(g + i);
    const __m256 mv = _mm256_fmadd_ps(vb1, _mm256_loadu_ps(m + i), _mm256_mul_ps(vb1c, gv));
    const __m256 vv = _mm256_fmadd_ps(vb2, _mm256_loadu_ps(v + i),
                                      _mm256_mul_ps(vb2c, _mm256_mul_ps(gv, gv)));
    _mm256_storeu_ps(m + i, mv);
    _mm256_storeu_ps(v + i, vv);
    const __m256 mhat = _mm256_mul_ps(mv, vbc1);
    const __m256 denom = _mm256_add_ps(_mm256_sqrt_ps(_mm256_mul_ps(vv, vbc2)), veps);
    // decoupled decay, matching the scalar reference
    const __m256 upd = _mm256_fmadd_ps(vwd, wv, _mm256_div_ps(mhat, denom));
    _mm256_storeu_ps(w + i, _mm256_fnmadd_ps(vlr, upd, wv));
  }
  if (i < n)
    scalar::adam_step<float>(w + i, g + i, m + i, v + i, n - i, lr, beta1, beta2,
                             eps, bc1, bc2, wd);
}

}  // namespace refseg::kern::avx2
