#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <random>

#include "doctest.h"
#include "udaseg/imgops.hpp"

using namespace udaseg;

namespace {

Volume make_volume(Dims dims, Vec3 spacing, std::function<float(std::int64_t, std::int64_t, std::int64_t)> f) {
  Geometry g;
  g.dims = dims;
  g.spacing = spacing;
  std::vector<float> data(static_cast<std::size_t>(g.voxel_count()));
  for (std::int64_t k = 0; k < dims[2]; ++k)
    for (std::int64_t j = 0; j < dims[1]; ++j)
      for (std::int64_t i = 0; i < dims[0]; ++i) data[static_cast<std::size_t>(g.linear(i, j, k))] = f(i, j, k);
  return Volume(g, std::move(data));
}

// Oracle: full sort + linear interpolation.
double sorted_percentile(std::vector<float> v, double p) {
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * p / 100.0;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (static_cast<double>(v[hi]) - v[lo]);
}

}  // namespace

TEST_CASE("resample to the high-resolution grid scales dims") {
  const Volume v = make_volume({64, 64, 32}, {0.8, 0.8, 2.0}, [](auto, auto, auto) { return 1.0f; });
  const Volume r = resample(v, {0.4102, 0.4102, 1.0});
  CHECK(r.spacing() == Vec3{0.4102, 0.4102, 1.0});
  CHECK(r.dims()[0] == static_cast<std::int64_t>(std::ceil(64 * 0.8 / 0.4102)));
  CHECK(r.dims()[0] == 125);  // 64 * 1.9503
  CHECK(r.dims()[2] == 64);
  for (int a = 0; a < 3; ++a) {
    const double in_extent = v.dims()[a] * v.spacing()[a];
    const double out_extent = r.dims()[a] * r.spacing()[a];
    CHECK(std::abs(out_extent - in_extent) <= r.spacing()[a]);
  }
  CHECK(r.geometry().origin == v.geometry().origin);
}

TEST_CASE("resample at the same spacing is bitwise identity") {
  std::mt19937 rng(3);
  std::uniform_real_distribution<float> u(-5, 5);
  const Volume v = make_volume({7, 5, 3}, {0.8, 0.8, 2.0}, [&](auto, auto, auto) { return u(rng); });
  const Volume r = resample(v, v.spacing());
  CHECK(r.data() == v.data());
  CHECK(r.geometry() == v.geometry());
}

TEST_CASE("trilinear resampling reproduces an affine ramp") {
  const Volume v = make_volume({12, 9, 6}, {0.8, 0.8, 2.0}, [](auto i, auto j, auto k) {
    return static_cast<float>(0.1 * (0.8 * i + 0.1 * 0.8 * j - 0.05 * 2.0 * k));
  });
  for (const Vec3 target : {Vec3{0.4102, 0.4102, 1.0}, Vec3{1.3, 0.5, 0.7}}) {
    const Volume r = resample(v, target);
    double worst = 0.0;
    for (std::int64_t k = 0; k < r.dims()[2]; ++k)
      for (std::int64_t j = 0; j < r.dims()[1]; ++j)
        for (std::int64_t i = 0; i < r.dims()[0]; ++i) {
          const Vec3 w = r.geometry().index_to_world({double(i), double(j), double(k)});
          if (!v.geometry().contains_index(v.geometry().world_to_index(w))) continue;  // edge clamp region
          const double expected = 0.1 * (w[0] + 0.1 * w[1] - 0.05 * w[2]);
          worst = std::max(worst, std::abs(r.at(i, j, k) - expected));
        }
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("resample preconditions") {
  const Volume v = make_volume({4, 4, 4}, {1, 1, 1}, [](auto, auto, auto) { return 2.0f; });
  CHECK_THROWS_AS(resample(v, {0.0, 1.0, 1.0}), Error);
  try {
    resample(v, {1e-4, 1e-4, 1e-4}, Interp::Trilinear, 1'000'000);
    FAIL("expected resource limit");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ResourceLimit);
  }
}

TEST_CASE("resample round trip of a constant is exact") {
  const Volume v = make_volume({10, 8, 6}, {0.8, 0.8, 2.0}, [](auto, auto, auto) { return 3.25f; });
  const Volume up = resample(v, {0.4102, 0.4102, 1.0});
  const Volume back = resample(up, v.spacing());
  for (const float x : back.data()) CHECK(x == 3.25f);
}

TEST_CASE("label resampling is nearest neighbour") {
  Geometry g;
  g.dims = {4, 1, 1};
  const LabelMap m(g, std::vector<std::uint8_t>{0, 1, 2, 1});
  const LabelMap r = resample(m, {0.5, 1, 1});
  CHECK(r.dims()[0] == 8);
  CHECK(r.data() == std::vector<std::uint8_t>{0, 1, 1, 2, 2, 1, 1, 1});
}

TEST_CASE("percentile conventions") {
  const Volume c = make_volume({5, 5, 5}, {1, 1, 1}, [](auto, auto, auto) { return 4.5f; });
  for (double p : {0.0, 13.0, 50.0, 85.0, 100.0}) CHECK(percentile(c, p) == 4.5);

  const Volume ramp = make_volume({100, 1, 1}, {1, 1, 1}, [](auto i, auto, auto) { return float(i); });
  CHECK(percentile(ramp, 85) == doctest::Approx(84.15).epsilon(1e-12));
  CHECK(percentile(ramp, 100) == 99.0);
  CHECK(percentile(ramp, 0) == 0.0);
  CHECK_THROWS_AS(percentile(ramp, 101), Error);
  CHECK_THROWS_AS(percentile(ramp, -0.5), Error);
  const VoxelMask empty(100, 0);
  CHECK_THROWS_AS(percentile(ramp, 50, std::span<const std::uint8_t>(empty)), Error);
}

TEST_CASE("percentile matches the sort oracle and is monotone") {
  std::mt19937 rng(19);
  std::normal_distribution<float> n(0, 3);
  for (int trial = 0; trial < 20; ++trial) {
    const Volume v = make_volume({9, 7, 1 + trial % 4}, {1, 1, 1}, [&](auto, auto, auto) { return n(rng); });
    VoxelMask mask(v.data().size());
    for (auto& m : mask) m = rng() % 3 == 0;
    mask[0] = 1;
    std::vector<float> masked;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) masked.push_back(v.data()[i]);
    double prev = -1e300;
    for (double p = 0; p <= 100; p += 2.5) {
      const double got = percentile(v, p);
      CHECK(got == doctest::Approx(sorted_percentile(v.data(), p)).epsilon(1e-12));
      CHECK(got >= prev);
      prev = got;
      CHECK(percentile(v, p, std::span<const std::uint8_t>(mask)) ==
            doctest::Approx(sorted_percentile(masked, p)).epsilon(1e-12));
    }
    CHECK(percentile(v, 0) == *std::min_element(v.data().begin(), v.data().end()));
    CHECK(percentile(v, 100) == *std::max_element(v.data().begin(), v.data().end()));
  }
}

TEST_CASE("gaussian kernel is truncated at 3 sigma and normalised") {
  const auto k = gaussian_kernel_1d(1.0);
  CHECK(k.size() == 7);
  CHECK(std::accumulate(k.begin(), k.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-7));
  CHECK(gaussian_kernel_1d(0.4).size() == 5);  // ceil(1.2) = 2
  CHECK_THROWS_AS(gaussian_kernel_1d(0.0), Error);
}

TEST_CASE("gaussian smoothing of constants and impulses") {
  const Volume c = make_volume({9, 8, 7}, {1, 1, 1}, [](auto, auto, auto) { return 0.7f; });
  const Volume sc = gaussian_smooth_3d(c, {1, 1.5, 2});
  for (const float x : sc.data()) CHECK(std::abs(x - 0.7f) < 1e-6);

  const Volume imp = make_volume({15, 15, 15}, {1, 1, 1}, [](auto i, auto j, auto k) {
    return (i == 7 && j == 7 && k == 7) ? 1.0f : 0.0f;
  });
  const Volume si = gaussian_smooth_3d(imp, {1, 1, 1});
  double sum = 0.0;
  for (const float x : si.data()) sum += x;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));

  // Oracle: explicit truncated/renormalised 1D kernel, centre weight cubed.
  double w[7], wsum = 0.0;
  for (int t = -3; t <= 3; ++t) wsum += (w[t + 3] = std::exp(-0.5 * t * t));
  const double centre = w[3] / wsum;
  CHECK(si.at(7, 7, 7) == doctest::Approx(centre * centre * centre).epsilon(1e-6));
  CHECK(si.at(8, 7, 7) == doctest::Approx((w[4] / wsum) * centre * centre).epsilon(1e-6));
}

TEST_CASE("gaussian smoothing stays in range and region-limited smoothing writes only inside") {
  std::mt19937 rng(5);
  std::uniform_real_distribution<float> u(-1, 3);
  const Volume v = make_volume({12, 10, 8}, {1, 1, 1}, [&](auto, auto, auto) { return u(rng); });
  const auto [mn, mx] = std::minmax_element(v.data().begin(), v.data().end());
  const Volume s = gaussian_smooth_3d(v, {2, 2, 2});
  for (const float x : s.data()) {
    CHECK(x >= *mn);
    CHECK(x <= *mx);
  }
  VoxelMask region(v.data().size(), 0);
  for (std::int64_t k = 3; k < 6; ++k)
    for (std::int64_t j = 2; j < 5; ++j) region[static_cast<std::size_t>(v.geometry().linear(4, j, k))] = 1;
  region[0] = 1;  // a corner voxel exercises the clamp-to-edge path
  const Volume r = gaussian_smooth_3d(v, {1, 1, 1}, std::span<const std::uint8_t>(region));
  const Volume full = gaussian_smooth_3d(v, {1, 1, 1});
  for (std::size_t i = 0; i < region.size(); ++i) {
    if (region[i])
      CHECK(r.data()[i] == doctest::Approx(full.data()[i]).epsilon(1e-6));
    else
      CHECK(r.data()[i] == v.data()[i]);
  }
}

namespace {
// Oracle: union-find over all voxel pairs within the neighbourhood.
int count_components_bruteforce(const LabelMap& m, std::uint8_t cls, int conn) {
  const auto n = static_cast<std::size_t>(m.size());
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  std::function<std::size_t(std::size_t)> find = [&](std::size_t x) {
    return parent[x] == x ? x : parent[x] = find(parent[x]);
  };
  const auto& g = m.geometry();
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b) {
      if (m[a] != cls || m[b] != cls) continue;
      const auto pa = g.unlinear(a), pb = g.unlinear(b);
      int cheb = 0, man = 0;
      for (int d = 0; d < 3; ++d) {
        const int diff = static_cast<int>(std::abs(pa[d] - pb[d]));
        cheb = std::max(cheb, diff);
        man += diff;
      }
      if (cheb <= 1 && (conn == 26 || man == 1)) parent[find(a)] = find(b);
    }
  std::map<std::size_t, int> roots;
  for (std::size_t a = 0; a < n; ++a)
    if (m[a] == cls) roots[find(a)] = 1;
  return static_cast<int>(roots.size());
}
}  // namespace

TEST_CASE("connected components") {
  Geometry g;
  g.dims = {6, 6, 6};
  std::vector<std::uint8_t> d(216, 0);
  const LabelMap empty(g, d);
  CHECK(connected_components(empty, 1, Connectivity::Six).empty());

  auto put = [&](int i, int j, int k, std::uint8_t c) { d[static_cast<std::size_t>(g.linear(i, j, k))] = c; };
  put(0, 0, 0, 1);
  put(4, 4, 4, 1);
  const auto two = connected_components(LabelMap(g, d), 1, Connectivity::Six);
  REQUIRE(two.size() == 2);
  CHECK(two[0].size() == two[1].size());
  CHECK(two[0].voxels.front() < two[1].voxels.front());  // tie broken by index

  std::fill(d.begin(), d.end(), 0);
  put(2, 2, 2, 2);
  put(3, 3, 3, 2);  // diagonal neighbours
  const LabelMap diag(g, d);
  CHECK(connected_components(diag, 2, Connectivity::TwentySix).size() == 1);
  CHECK(connected_components(diag, 2, Connectivity::Six).size() == 2);
  CHECK(count_components_bruteforce(diag, 2, 26) == 1);
  CHECK(count_components_bruteforce(diag, 2, 6) == 2);
  CHECK_THROWS_AS(connected_components(diag, 0, Connectivity::Six), Error);
}

TEST_CASE("connected components partition the class and match brute force") {
  std::mt19937 rng(7);
  Geometry g;
  g.dims = {5, 4, 4};
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::uint8_t> d(static_cast<std::size_t>(g.voxel_count()));
    for (auto& x : d) x = static_cast<std::uint8_t>(rng() % 4 == 0 ? 1 : 0);
    const LabelMap m(g, d);
    for (const auto conn : {Connectivity::Six, Connectivity::TwentySix}) {
      const auto comps = connected_components(m, 1, conn);
      CHECK(static_cast<int>(comps.size()) == count_components_bruteforce(m, 1, static_cast<int>(conn)));
      std::vector<int> hits(d.size(), 0);
      for (std::size_t c = 0; c < comps.size(); ++c) {
        if (c > 0) CHECK(comps[c - 1].size() >= comps[c].size());
        for (auto idx : comps[c].voxels) hits[static_cast<std::size_t>(idx)]++;
      }
      for (std::size_t i = 0; i < d.size(); ++i) CHECK(hits[i] == (d[i] == 1 ? 1 : 0));
    }
  }
}

TEST_CASE("keep_largest_components drops the smaller islands") {
  Geometry g;
  g.dims = {8, 1, 1};
  const LabelMap m(g, std::vector<std::uint8_t>{1, 1, 1, 0, 1, 0, 2, 0});
  const LabelMap k = keep_largest_components(m, Connectivity::Six);
  CHECK(k.data() == std::vector<std::uint8_t>{1, 1, 1, 0, 0, 0, 2, 0});
}

TEST_CASE("downsample2 halves dims and doubles spacing") {
  const Volume v = make_volume({9, 8, 1}, {0.5, 0.5, 2}, [](auto i, auto, auto) { return float(i); });
  const Volume d = downsample2(v);
  CHECK(d.dims() == Dims{5, 4, 1});
  CHECK(d.spacing() == Vec3{1.0, 1.0, 2.0});
}

TEST_CASE("box dilation") {
  Dims dims{5, 5, 1};
  VoxelMask m(25, 0);
  m[12] = 1;
  const auto d = dilate_box(m, dims, 1);
  CHECK(std::accumulate(d.begin(), d.end(), 0) == 9);
}
