// AVX2+FMA kernel variants. Compiled with -mavx2 -mfma; callers must check
// avx2::available() first. Element-for-element these mirror the scalar
// reference ops (same FMA chains, same polynomial, same reduction tree), so
// equivalence tests assert bit-identical outputs.
#include "dmf/kernels/kernels.hpp"
#include "dmf/kernels/math_detail.hpp"

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>

#include <cmath>
#include <limits>

namespace dmf::kern::avx2 {

bool available() {
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
}

namespace {

inline __m256 exp8(__m256 x) {
  const __m256 lo = _mm256_set1_ps(detail::kExpLoF32);
  const __m256 hi = _mm256_set1_ps(detail::kExpHiF32);
  const __m256 zero_mask = _mm256_cmp_ps(x, lo, _CMP_LT_OQ);
  __m256 xc = _mm256_min_ps(x, hi);
  const __m256 fx =
      _mm256_floor_ps(_mm256_fmadd_ps(xc, _mm256_set1_ps(detail::kLog2eF32), _mm256_set1_ps(0.5f)));
  __m256 r = _mm256_fnmadd_ps(fx, _mm256_set1_ps(detail::kLn2HiF32), xc);
  r = _mm256_fnmadd_ps(fx, _mm256_set1_ps(detail::kLn2LoF32), r);
  __m256 y = _mm256_set1_ps(detail::kExpPoly[0]);
  y = _mm256_fmadd_ps(y, r, _mm256_set1_ps(detail::kExpPoly[1]));
  y = _mm256_fmadd_ps(y, r, _mm256_set1_ps(detail::kExpPoly[2]));
  y = _mm256_fmadd_ps(y, r, _mm256_set1_ps(detail::kExpPoly[3]));
  y = _mm256_fmadd_ps(y, r, _mm256_set1_ps(detail::kExpPoly[4]));
  y = _mm256_fmadd_ps(y, r, _mm256_set1_ps(detail::kExpPoly[5]));
  y = _mm256_fmadd_ps(y, _mm256_mul_ps(r, r), _mm256_add_ps(r, _mm256_set1_ps(1.0f)));
  const __m256i n = _mm256_cvttps_epi32(fx);
  const __m256 p2n =
      _mm256_castsi256_ps(_mm256_slli_epi32(_mm256_add_epi32(n, _mm256_set1_epi32(127)), 23));
  return _mm256_andnot_ps(zero_mask, _mm256_mul_ps(y, p2n));
}

inline __m256 tanh8(__m256 x) {
  const __m256 c = _mm256_set1_ps(detail::kTanhClamp);
  x = _mm256_min_ps(_mm256_max_ps(x, _mm256_sub_ps(_mm256_setzero_ps(), c)), c);
  const __m256 e = exp8(_mm256_add_ps(x, x));
  const __m256 one = _mm256_set1_ps(1.0f);
  return _mm256_div_ps(_mm256_sub_ps(e, one), _mm256_add_ps(e, one));
}

// fold [a0..a7] with the canonical tree: (a0+a4, a1+a5, a2+a6, a3+a7) ->
// (c0+c2) + (c1+c3)
inline float fold8(__m256 acc) {
  const __m128 c = _mm_add_ps(_mm256_castps256_ps128(acc), _mm256_extractf128_ps(acc, 1));
  const __m128 e = _mm_add_ps(c, _mm_movehl_ps(c, c));   // [c0+c2, c1+c3, ., .]
  return _mm_cvtss_f32(e) + _mm_cvtss_f32(_mm_shuffle_ps(e, e, 0x1));
}

inline float fold8_max(__m256 acc) {
  const __m128 c = _mm_max_ps(_mm256_castps256_ps128(acc), _mm256_extractf128_ps(acc, 1));
  const __m128 e = _mm_max_ps(c, _mm_movehl_ps(c, c));
  return std::max(_mm_cvtss_f32(e), _mm_cvtss_f32(_mm_shuffle_ps(e, e, 0x1)));
}

inline float sum_lanes(const float* x, std::size_t n) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  const std::size_t nb = n & ~std::size_t(7);
  for (; i < nb; i += 8) acc = _mm256_add_ps(acc, _mm256_loadu_ps(x + i));
  if (i < n) {
    alignas(32) float lanes[8];
    _mm256_store_ps(lanes, acc);
    for (; i < n; ++i) lanes[i & 7] += x[i];
    acc = _mm256_load_ps(lanes);
  }
  return fold8(acc);
}

inline float sumsq_lanes(const float* x, std::size_t n) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  const std::size_t nb = n & ~std::size_t(7);
  for (; i < nb; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    acc = _mm256_fmadd_ps(v, v, acc);
  }
  if (i < n) {
    alignas(32) float lanes[8];
    _mm256_store_ps(lanes, acc);
    for (; i < n; ++i) lanes[i & 7] = std::fma(x[i], x[i], lanes[i & 7]);
    acc = _mm256_load_ps(lanes);
  }
  return fold8(acc);
}

inline float sumsq_centered_lanes(const float* x, std::size_t n, float mu) {
  const __m256 vmu = _mm256_set1_ps(mu);
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  const std::size_t nb = n & ~std::size_t(7);
  for (; i < nb; i += 8) {
    const __m256 d = _mm256_sub_ps(_mm256_loadu_ps(x + i), vmu);
    acc = _mm256_fmadd_ps(d, d, acc);
  }
  if (i < n) {
    alignas(32) float lanes[8];
    _mm256_store_ps(lanes, acc);
    for (; i < n; ++i) {
      const float d = x[i] - mu;
      lanes[i & 7] = std::fma(d, d, lanes[i & 7]);
    }
    acc = _mm256_load_ps(lanes);
  }
  return fold8(acc);
}

inline float max_lanes(const float* x, std::size_t n) {
  const float ninf = -std::numeric_limits<float>::infinity();
  __m256 acc = _mm256_set1_ps(ninf);
  std::size_t i = 0;
  const std::size_t nb = n & ~std::size_t(7);
  for (; i < nb; i += 8) acc = _mm256_max_ps(acc, _mm256_loadu_ps(x + i));
  if (i < n) {
    alignas(32) float lanes[8];
    _mm256_store_ps(lanes, acc);
    for (; i < n; ++i) lanes[i & 7] = std::max(lanes[i & 7], x[i]);
    acc = _mm256_load_ps(lanes);
  }
  return fold8_max(acc);
}

inline void gemm_row_tail(const float* ai, const float* b, float* ci, int k, int n, int j0, int n_,
                          bool accumulate) {
  for (int j = j0; j < n_; ++j) {
    float acc = accumulate ? ci[j] : 0.0f;
    for (int kk = 0; kk < k; ++kk) acc = std::fma(ai[kk], b[std::size_t(kk) * n + j], acc);
    ci[j] = acc;
  }
}

} // namespace

void gemm(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate) {
  const int m4 = m & ~3;
  const int n16 = n & ~15;
  const int n8 = n & ~7;
  int i = 0;
  for (; i < m4; i += 4) {
    const float* a0 = a + std::size_t(i) * k;
    const float* a1 = a0 + k;
    const float* a2 = a1 + k;
    const float* a3 = a2 + k;
    float* c0 = c + std::size_t(i) * n;
    float* c1 = c0 + n;
    float* c2 = c1 + n;
    float* c3 = c2 + n;
    for (int jb = 0; jb < n16; jb += 16) {
      __m256 r00, r01, r10, r11, r20, r21, r30, r31;
      if (accumulate) {
        r00 = _mm256_loadu_ps(c0 + jb); r01 = _mm256_loadu_ps(c0 + jb + 8);
        r10 = _mm256_loadu_ps(c1 + jb); r11 = _mm256_loadu_ps(c1 + jb + 8);
        r20 = _mm256_loadu_ps(c2 + jb); r21 = _mm256_loadu_ps(c2 + jb + 8);
        r30 = _mm256_loadu_ps(c3 + jb); r31 = _mm256_loadu_ps(c3 + jb + 8);
      } else {
        r00 = r01 = r10 = r11 = r20 = r21 = r30 = r31 = _mm256_setzero_ps();
      }
      for (int kk = 0; kk < k; ++kk) {
        const float* brow = b + std::size_t(kk) * n + jb;
        const __m256 b0 = _mm256_loadu_ps(brow);
        const __m256 b1 = _mm256_loadu_ps(brow + 8);
        __m256 av = _mm256_broadcast_ss(a0 + kk);
        r00 = _mm256_fmadd_ps(av, b0, r00); r01 = _mm256_fmadd_ps(av, b1, r01);
        av = _mm256_broadcast_ss(a1 + kk);
        r10 = _mm256_fmadd_ps(av, b0, r10); r11 = _mm256_fmadd_ps(av, b1, r11);
        av = _mm256_broadcast_ss(a2 + kk);
        r20 = _mm256_fmadd_ps(av, b0, r20); r21 = _mm256_fmadd_ps(av, b1, r21);
        av = _mm256_broadcast_ss(a3 + kk);
        r30 = _mm256_fmadd_ps(av, b0, r30); r31 = _mm256_fmadd_ps(av, b1, r31);
      }
      _mm256_storeu_ps(c0 + jb, r00); _mm256_storeu_ps(c0 + jb + 8, r01);
      _mm256_storeu_ps(c1 + jb, r10); _mm256_storeu_ps(c1 + jb + 8, r11);
      _mm256_storeu_ps(c2 + jb, r20); _mm256_storeu_ps(c2 + jb + 8, r21);
      _mm256_storeu_ps(c3 + jb, r30); _mm256_storeu_ps(c3 + jb + 8, r31);
    }
    for (int jb = n16; jb < n8; jb += 8) {
      __m256 r0, r1, r2, r3;
      if (accumulate) {
        r0 = _mm256_loadu_ps(c0 + jb); r1 = _mm256_loadu_ps(c1 + jb);
        r2 = _mm256_loadu_ps(c2 + jb); r3 = _mm256_loadu_ps(c3 + jb);
      } else {
        r0 = r1 = r2 = r3 = _mm256_setzero_ps();
      }
      for (int kk = 0; kk < k; ++kk) {
        const __m256 bv = _mm256_loadu_ps(b + std::size_t(kk) * n + jb);
        r0 = _mm256_fmadd_ps(_mm256_broadcast_ss(a0 + kk), bv, r0);
        r1 = _mm256_fmadd_ps(_mm256_broadcast_ss(a1 + kk), bv, r1);
        r2 = _mm256_fmadd_ps(_mm256_broadcast_ss(a2 + kk), bv, r2);
        r3 = _mm256_fmadd_ps(_mm256_broadcast_ss(a3 + kk), bv, r3);
      }
      _mm256_storeu_ps(c0 + jb, r0); _mm256_storeu_ps(c1 + jb, r1);
      _mm256_storeu_ps(c2 + jb, r2); _mm256_storeu_ps(c3 + jb, r3);
    }
    if (n8 < n) {
      gemm_row_tail(a0, b, c0, k, n, n8, n, accumulate);
      gemm_row_tail(a1, b, c1, k, n, n8, n, accumulate);
      gemm_row_tail(a2, b, c2, k, n, n8, n, accumulate);
      gemm_row_tail(a3, b, c3, k, n, n8, n, accumulate);
    }
  }
  for (; i < m; ++i) {
    const float* ai = a + std::size_t(i) * k;
    float* ci = c + std::size_t(i) * n;
    for (int jb = 0; jb < n8; jb += 8) {
      __m256 r0 = accumulate ? _mm256_loadu_ps(ci + jb) : _mm256_setzero_ps();
      for (int kk = 0; kk < k; ++kk)
        r0 = _mm256_fmadd_ps(_mm256_broadcast_ss(ai + kk), _mm256_loadu_ps(b + std::size_t(kk) * n + jb), r0);
      _mm256_storeu_ps(ci + jb, r0);
    }
    gemm_row_tail(ai, b, ci, k, n, n8, n, accumulate);
  }
}

void gemm(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
  const int m2 = m & ~1;
  const int n8 = n & ~7;
  const int n4 = n & ~3;
  int i = 0;
  for (; i < m2; i += 2) {
    const double* a0 = a + std::size_t(i) * k;
    const double* a1 = a0 + k;
    double* c0 = c + std::size_t(i) * n;
    double* c1 = c0 + n;
    for (int jb = 0; jb < n8; jb += 8) {
      __m256d r00, r01, r10, r11;
      if (accumulate) {
        r00 = _mm256_loadu_pd(c0 + jb); r01 = _mm256_loadu_pd(c0 + jb + 4);
        r10 = _mm256_loadu_pd(c1 + jb); r11 = _mm256_loadu_pd(c1 + jb + 4);
      } else {
        r00 = r01 = r10 = r11 = _mm256_setzero_pd();
      }
      for (int kk = 0; kk < k; ++kk) {
        const double* brow = b + std::size_t(kk) * n + jb;
        const __m256d b0 = _mm256_loadu_pd(brow);
        const __m256d b1 = _mm256_loadu_pd(brow + 4);
        __m256d av = _mm256_broadcast_sd(a0 + kk);
        r00 = _mm256_fmadd_pd(av, b0, r00); r01 = _mm256_fmadd_pd(av, b1, r01);
        av = _mm256_broadcast_sd(a1 + kk);
        r10 = _mm256_fmadd_pd(av, b0, r10); r11 = _mm256_fmadd_pd(av, b1, r11);
      }
      _mm256_storeu_pd(c0 + jb, r00); _mm256_storeu_pd(c0 + jb + 4, r01);
      _mm256_storeu_pd(c1 + jb, r10); _mm256_storeu_pd(c1 + jb + 4, r11);
    }
    for (int jb = n8; jb < n4; jb += 4) {
      __m256d r0 = accumulate ? _mm256_loadu_pd(c0 + jb) : _mm256_setzero_pd();
      __m256d r1 = accumulate ? _mm256_loadu_pd(c1 + jb) : _mm256_setzero_pd();
      for (int kk = 0; kk < k; ++kk) {
        const __m256d bv = _mm256_loadu_pd(b + std::size_t(kk) * n + jb);
        r0 = _mm256_fmadd_pd(_mm256_broadcast_sd(a0 + kk), bv, r0);
        r1 = _mm256_fmadd_pd(_mm256_broadcast_sd(a1 + kk), bv, r1);
      }
      _mm256_storeu_pd(c0 + jb, r0);
      _mm256_storeu_pd(c1 + jb, r1);
    }
    for (int j = n4; j < n; ++j) {
      double acc0 = accumulate ? c0[j] : 0.0;
      double acc1 = accumulate ? c1[j] : 0.0;
      for (int kk = 0; kk < k; ++kk) {
        acc0 = std::fma(a0[kk], b[std::size_t(kk) * n + j], acc0);
        acc1 = std::fma(a1[kk], b[std::size_t(kk) * n + j], acc1);
      }
      c0[j] = acc0;
      c1[j] = acc1;
    }
  }
  for (; i < m; ++i) {
    const double* ai = a + std::size_t(i) * k;
    double* ci = c + std::size_t(i) * n;
    for (int jb = 0; jb < n4; jb += 4) {
      __m256d r0 = accumulate ? _mm256_loadu_pd(ci + jb) : _mm256_setzero_pd();
      for (int kk = 0; kk < k; ++kk)
        r0 = _mm256_fmadd_pd(_mm256_broadcast_sd(ai + kk), _mm256_loadu_pd(b + std::size_t(kk) * n + jb), r0);
      _mm256_storeu_pd(ci + jb, r0);
    }
    for (int j = n4; j < n; ++j) {
      double acc = accumulate ? ci[j] : 0.0;
      for (int kk = 0; kk < k; ++kk) acc = std::fma(ai[kk], b[std::size_t(kk) * n + j], acc);
      ci[j] = acc;
    }
  }
}

void vexp(const float* x, float* y, std::size_t n) {
  std::size_t i = 0;
  const std::size_t nb = n & ~std::size_t(7);
  for (; i < nb; i += 8) _mm256_storeu_ps(y + i, exp8(_mm256_loadu_ps(x + i)));
  for (; i < n; ++i) y[i] = detail::exp_f32(x[i]);
}

void gelu(const float* x, float* y, std::size_t n) {
  const __m256 half = _mm256_set1_ps(0.5f);
  const __m256 one = _mm256_set1_ps(1.0f);
  const __m256 ks = _mm256_set1_ps(detail::kGeluSqrt2OverPi);
  const __m256 kc = _mm256_set1_ps(detail::kGeluCubic);
  std::size_t i = 0;
  const std::size_t nb = n & ~std::size_t(7);
  for (; i < nb; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    const __m256 x2 = _mm256_mul_ps(v, v);
    const __m256 u = _mm256_mul_ps(ks, _mm256_fmadd_ps(_mm256_mul_ps(kc, x2), v, v));
    const __m256 t = tanh8(u);
    _mm256_storeu_ps(y + i, _mm256_mul_ps(_mm256_mul_ps(half, v), _mm256_add_ps(one, t)));
  }
  for (; i < n; ++i) y[i] = detail::gelu_f32(x[i]);
}

void gelu_grad(const float* x, const float* gy, float* gx, std::size_t n) {
  const __m256 half = _mm256_set1_ps(0.5f);
  const __m256 one = _mm256_set1_ps(1.0f);
  const __m256 ks = _mm256_set1_ps(detail::kGeluSqrt2OverPi);
  const __m256 kc = _mm256_set1_ps(detail::kGeluCubic);
  const __m256 kc3 = _mm256_set1_ps(3.0f * detail::kGeluCubic);
  std::size_t i = 0;
  const std::size_t nb = n & ~std::size_t(7);
  for (; i < nb; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    const __m256 x2 = _mm256_mul_ps(v, v);
    const __m256 u = _mm256_mul_ps(ks, _mm256_fmadd_ps(_mm256_mul_ps(kc, x2), v, v));
    const __m256 t = tanh8(u);
    const __m256 du = _mm256_mul_ps(ks, _mm256_fmadd_ps(kc3, x2, one));
    const __m256 sech2 = _mm256_fnmadd_ps(t, t, one);
    const __m256 a = _mm256_mul_ps(half, _mm256_add_ps(one, t));
    const __m256 bterm = _mm256_mul_ps(_mm256_mul_ps(_mm256_mul_ps(half, v), sech2), du);
    const __m256 gp = _mm256_add_ps(a, bterm);
    _mm256_storeu_ps(gx + i, _mm256_fmadd_ps(_mm256_loadu_ps(gy + i), gp, _mm256_loadu_ps(gx + i)));
  }
  for (; i < n; ++i) gx[i] = std::fma(gy[i], detail::dgelu_f32(x[i]), gx[i]);
}

void softmax_rows(float* x, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    float* row = x + std::size_t(r) * cols;
    const float mx = max_lanes(row, std::size_t(cols));
    const __m256 vmx = _mm256_set1_ps(mx);
    std::size_t j = 0;
    const std::size_t nb = std::size_t(cols) & ~std::size_t(7);
    for (; j < nb; j += 8)
      _mm256_storeu_ps(row + j, exp8(_mm256_sub_ps(_mm256_loadu_ps(row + j), vmx)));
    for (; j < std::size_t(cols); ++j) row[j] = detail::exp_f32(row[j] - mx);
    const float s = sum_lanes(row, std::size_t(cols));
    const float inv = 1.0f / s;
    const __m256 vinv = _mm256_set1_ps(inv);
    j = 0;
    for (; j < nb; j += 8) _mm256_storeu_ps(row + j, _mm256_mul_ps(_mm256_loadu_ps(row + j), vinv));
    for (; j < std::size_t(cols); ++j) row[j] *= inv;
  }
}

void layernorm_rows(const float* x, float* y, float* mean, float* rstd,
                    const float* gamma, const float* beta, int rows, int cols, float eps) {
  for (int r = 0; r < rows; ++r) {
    const float* xr = x + std::size_t(r) * cols;
    float* yr = y + std::size_t(r) * cols;
    const float mu = sum_lanes(xr, std::size_t(cols)) / float(cols);
    const float var = sumsq_centered_lanes(xr, std::size_t(cols), mu) / float(cols);
    const float rs = 1.0f / std::sqrt(var + eps);
    mean[r] = mu;
    rstd[r] = rs;
    const __m256 vmu = _mm256_set1_ps(mu);
    const __m256 vrs = _mm256_set1_ps(rs);
    std::size_t j = 0;
    const std::size_t nb = std::size_t(cols) & ~std::size_t(7);
    for (; j < nb; j += 8) {
      const __m256 t = _mm256_mul_ps(_mm256_sub_ps(_mm256_loadu_ps(xr + j), vmu), vrs);
      _mm256_storeu_ps(yr + j, _mm256_fmadd_ps(t, _mm256_loadu_ps(gamma + j), _mm256_loadu_ps(beta + j)));
    }
    for (; j < std::size_t(cols); ++j) {
      const float t = (xr[j] - mu) * rs;
      yr[j] = std::fma(t, gamma[j], beta[j]);
    }
  }
}

float reduce_sum(const float* x, std::size_t n) { return sum_lanes(x, n); }
float reduce_sumsq(const float* x, std::size_t n) { return sumsq_lanes(x, n); }

} // namespace dmf::kern::avx2

#else // non-x86 or AVX2 not enabled for this TU: keep the symbols, report unavailable

namespace dmf::kern::avx2 {
bool available() { return false; }
void gemm(const float*, const float*, float*, int, int, int, bool) {}
void gemm(const double*, const double*, double*, int, int, int, bool) {}
void vexp(const float*, float*, std::size_t) {}
void gelu(const float*, float*, std::size_t) {}
void gelu_grad(const float*, const float*, float*, std::size_t) {}
void softmax_rows(float*, int, int) {}
void layernorm_rows(const float*, float*, float*, float*, const float*, const float*, int, int, float) {}
float reduce_sum(const float*, std::size_t) { return 0.0f; }
float reduce_sumsq(const float*, std::size_t) { return 0.0f; }
} // namespace dmf::kern::avx2

#endif
