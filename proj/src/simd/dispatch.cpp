#include <atomic>
#include <cstdlib>
#include <string>

#include "udaseg/error.hpp"
#include "udaseg/simd.hpp"

namespace udaseg::simd {
namespace {

Level detect() {
  if (const char* env = std::getenv("UDASEG_SIMD")) {
    const std::string v(env);
    if (v == "scalar") return Level::Scalar;
  }
  return cpu_supports(Level::Avx2) ? Level::Avx2 : Level::Scalar;
}

std::atomic<Level>& current() {
  static std::atomic<Level> level{detect()};
  return level;
}

void check_same(std::size_t a, std::size_t b, const char* what) {
  require(a == b, ErrorKind::InvalidArgument, std::string("simd::") + what + ": length mismatch");
}

}  // namespace

const char* to_string(Level level) { return level == Level::Avx2 ? "avx2" : "scalar"; }

bool cpu_supports(Level level) {
  if (level == Level::Scalar) return true;
#if defined(__x86_64__) || defined(__i386__)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Level active_level() { return current().load(std::memory_order_relaxed); }

void set_level(Level level) {
  require(cpu_supports(level), ErrorKind::InvalidArgument,
          std::string("simd level not supported on this CPU: ") + to_string(level));
  current().store(level, std::memory_order_relaxed);
}

void axpy(float a, std::span<const float> x, std::span<float> y) {
  check_same(x.size(), y.size(), "axpy");
  if (active_level() == Level::Avx2)
    avx2::axpy(a, x.data(), y.data(), x.size());
  else
    scalar::axpy(a, x.data(), y.data(), x.size());
}

void relu(std::span<float> y) {
  if (active_level() == Level::Avx2)
    avx2::relu(y.data(), y.size());
  else
    scalar::relu(y.data(), y.size());
}

double sum_sq_diff(std::span<const float> a, std::span<const float> b) {
  check_same(a.size(), b.size(), "sum_sq_diff");
  if (active_level() == Level::Avx2) return avx2::sum_sq_diff(a.data(), b.data(), a.size());
  return scalar::sum_sq_diff(a.data(), b.data(), a.size());
}

double min_dist2(double px, double py, double pz, std::span<const double> xs,
                 std::span<const double> ys, std::span<const double> zs) {
  check_same(xs.size(), ys.size(), "min_dist2");
  check_same(xs.size(), zs.size(), "min_dist2");
  if (active_level() == Level::Avx2)
    return avx2::min_dist2(px, py, pz, xs.data(), ys.data(), zs.data(), xs.size());
  return scalar::min_dist2(px, py, pz, xs.data(), ys.data(), zs.data(), xs.size());
}

}  // namespace udaseg::simd
