// AVX2 variants. Built without -mavx2 so that nothing else in this translation
// unit picks up AVX encodings; only the functions below carry the target
// attribute and are reached solely through the runtime dispatcher.
#include <algorithm>
#include <cmath>
#include <limits>

#include "udaseg/simd.hpp"

#if defined(__x86_64__) || defined(__i386__)
#include <immintrin.h>
#define UDASEG_AVX2_TARGET __attribute__((target("avx2,fma")))
#define UDASEG_HAVE_AVX2_KERNELS 1
#endif

namespace udaseg::simd::avx2 {

#ifdef UDASEG_HAVE_AVX2_KERNELS

UDASEG_AVX2_TARGET void axpy(float a, const float* x, float* y, std::size_t n) {
  const __m256 va = _mm256_set1_ps(a);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 vx = _mm256_loadu_ps(x + i);
    const __m256 vy = _mm256_loadu_ps(y + i);
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, vx, vy));
  }
  for (; i < n; ++i) y[i] = std::fma(a, x[i], y[i]);
}

UDASEG_AVX2_TARGET void relu(float* y, std::size_t n) {
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(y + i, _mm256_max_ps(_mm256_loadu_ps(y + i), zero));
  for (; i < n; ++i) y[i] = y[i] > 0.0f ? y[i] : 0.0f;
}

UDASEG_AVX2_TARGET double sum_sq_diff(const float* a, const float* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 va = _mm256_loadu_ps(a + i);
    const __m256 vb = _mm256_loadu_ps(b + i);
    const __m256d d0 = _mm256_sub_pd(_mm256_cvtps_pd(_mm256_castps256_ps128(va)),
                                     _mm256_cvtps_pd(_mm256_castps256_ps128(vb)));
    const __m256d d1 = _mm256_sub_pd(_mm256_cvtps_pd(_mm256_extractf128_ps(va, 1)),
                                     _mm256_cvtps_pd(_mm256_extractf128_ps(vb, 1)));
    acc0 = _mm256_fmadd_pd(d0, d0, acc0);
    acc1 = _mm256_fmadd_pd(d1, d1, acc1);
  }
  alignas(32) double lanes[4];
  _mm256_store_pd(lanes, _mm256_add_pd(acc0, acc1));
  double s = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
  for (; i < n; ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s;
}

UDASEG_AVX2_TARGET double min_dist2(double px, double py, double pz, const double* xs,
                                    const double* ys, const double* zs, std::size_t n) {
  const __m256d vx = _mm256_set1_pd(px);
  const __m256d vy = _mm256_set1_pd(py);
  const __m256d vz = _mm256_set1_pd(pz);
  __m256d best = _mm256_set1_pd(std::numeric_limits<double>::infinity());
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d dx = _mm256_sub_pd(_mm256_loadu_pd(xs + i), vx);
    const __m256d dy = _mm256_sub_pd(_mm256_loadu_pd(ys + i), vy);
    const __m256d dz = _mm256_sub_pd(_mm256_loadu_pd(zs + i), vz);
    // Same operation order as the scalar kernel (no FMA) so results match exactly.
    const __m256d d2 = _mm256_add_pd(_mm256_add_pd(_mm256_mul_pd(dx, dx), _mm256_mul_pd(dy, dy)),
                                     _mm256_mul_pd(dz, dz));
    best = _mm256_min_pd(best, d2);
  }
  alignas(32) double lanes[4];
  _mm256_store_pd(lanes, best);
  double out = std::min(std::min(lanes[0], lanes[1]), std::min(lanes[2], lanes[3]));
  for (; i < n; ++i) {
    const double dx = xs[i] - px;
    const double dy = ys[i] - py;
    const double dz = zs[i] - pz;
    out = std::min(out, dx * dx + dy * dy + dz * dz);
  }
  return out;
}

#else

void axpy(float a, const float* x, float* y, std::size_t n) { scalar::axpy(a, x, y, n); }
void relu(float* y, std::size_t n) { scalar::relu(y, n); }
double sum_sq_diff(const float* a, const float* b, std::size_t n) {
  return scalar::sum_sq_diff(a, b, n);
}
double min_dist2(double px, double py, double pz, const double* xs, const double* ys,
                 const double* zs, std::size_t n) {
  return scalar::min_dist2(px, py, pz, xs, ys, zs, n);
}

#endif

}  // namespace udaseg::simd::avx2
