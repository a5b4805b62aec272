#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "doctest.h"
#include "udaseg/simd.hpp"

using namespace udaseg;

namespace {

std::vector<float> random_floats(std::size_t n, std::mt19937& rng, float lo = -2.0f, float hi = 2.0f) {
  std::uniform_real_distribution<float> u(lo, hi);
  std::vector<float> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

std::vector<double> random_doubles(std::size_t n, std::mt19937& rng) {
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

}  // namespace

TEST_CASE("active level is supported by this CPU") {
  CHECK(simd::cpu_supports(simd::active_level()));
  CHECK(simd::cpu_supports(simd::Level::Scalar));
}

TEST_CASE("AVX2 kernels agree with the scalar reference") {
  if (!simd::cpu_supports(simd::Level::Avx2)) {
    MESSAGE("AVX2 not available; equivalence not exercised");
    return;
  }
  std::mt19937 rng(11);
  // Odd lengths exercise the scalar tails.
  for (std::size_t n : {0u, 1u, 3u, 7u, 8u, 9u, 31u, 64u, 1000u, 4099u}) {
    CAPTURE(n);
    const auto x = random_floats(n, rng);
    auto y_ref = random_floats(n, rng);
    auto y_vec = y_ref;
    simd::scalar::axpy(0.37f, x.data(), y_ref.data(), n);
    simd::avx2::axpy(0.37f, x.data(), y_vec.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(y_vec[i] == doctest::Approx(y_ref[i]).epsilon(1e-6));

    auto r_ref = random_floats(n, rng);
    auto r_vec = r_ref;
    simd::scalar::relu(r_ref.data(), n);
    simd::avx2::relu(r_vec.data(), n);
    CHECK(r_ref == r_vec);

    const auto a = random_floats(n, rng);
    const auto b = random_floats(n, rng);
    const double s_ref = simd::scalar::sum_sq_diff(a.data(), b.data(), n);
    const double s_vec = simd::avx2::sum_sq_diff(a.data(), b.data(), n);
    CHECK(s_vec == doctest::Approx(s_ref).epsilon(1e-12));

    const auto xs = random_doubles(n, rng), ys = random_doubles(n, rng), zs = random_doubles(n, rng);
    const double d_ref = simd::scalar::min_dist2(1.5, -2.0, 3.25, xs.data(), ys.data(), zs.data(), n);
    const double d_vec = simd::avx2::min_dist2(1.5, -2.0, 3.25, xs.data(), ys.data(), zs.data(), n);
    if (n == 0) {
      CHECK(std::isinf(d_ref));
      CHECK(std::isinf(d_vec));
    } else {
      CHECK(d_ref == d_vec);  // identical operation order, bit-exact
    }
  }
}

TEST_CASE("dispatch can be forced to scalar and back") {
  const auto before = simd::active_level();
  simd::set_level(simd::Level::Scalar);
  CHECK(simd::active_level() == simd::Level::Scalar);
  std::vector<float> x{1, 2, 3}, y{1, 1, 1};
  simd::axpy(2.0f, x, y);
  CHECK(y == std::vector<float>{3, 5, 7});
  simd::set_level(before);
  CHECK(simd::active_level() == before);
}

TEST_CASE("length mismatch is rejected") {
  std::vector<float> x(3), y(4);
  CHECK_THROWS(simd::axpy(1.0f, x, y));
}
