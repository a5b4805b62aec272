#pragma once

#include <cstddef>
#include <span>

// Data-parallel inner loops used by smoothing, registration, the segmenter and
// surface-distance search. Each kernel has a scalar reference and an AVX2
// variant; the active variant is picked once at runtime from CPUID and can be
// forced with UDASEG_SIMD=scalar.
namespace udaseg::simd {

enum class Level { Scalar, Avx2 };

const char* to_string(Level level);
bool cpu_supports(Level level);
Level active_level();
// Overrides the dispatch choice; throws InvalidArgument if unsupported.
void set_level(Level level);

// y[i] += a * x[i]
void axpy(float a, std::span<const float> x, std::span<float> y);
// y[i] = max(y[i], 0)
void relu(std::span<float> y);
// sum (a[i] - b[i])^2, accumulated in double
double sum_sq_diff(std::span<const float> a, std::span<const float> b);
// min over i of (xs[i]-px)^2 + (ys[i]-py)^2 + (zs[i]-pz)^2; +inf for empty input
double min_dist2(double px, double py, double pz, std::span<const double> xs,
                 std::span<const double> ys, std::span<const double> zs);

namespace scalar {
void axpy(float a, const float* x, float* y, std::size_t n);
void relu(float* y, std::size_t n);
double sum_sq_diff(const float* a, const float* b, std::size_t n);
double min_dist2(double px, double py, double pz, const double* xs, const double* ys,
                 const double* zs, std::size_t n);
}  // namespace scalar

namespace avx2 {
void axpy(float a, const float* x, float* y, std::size_t n);
void relu(float* y, std::size_t n);
double sum_sq_diff(const float* a, const float* b, std::size_t n);
double min_dist2(double px, double py, double pz, const double* xs, const double* ys,
                 const double* zs, std::size_t n);
}  // namespace avx2

}  // namespace udaseg::simd
