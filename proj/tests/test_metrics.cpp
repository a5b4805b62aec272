#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "udaseg/metrics.hpp"

using namespace udaseg;
using namespace udaseg::metrics;

namespace {

Geometry grid(Dims d, Vec3 sp = {1, 1, 1}) {
  Geometry g;
  g.dims = d;
  g.spacing = sp;
  return g;
}

LabelMap with_voxels(const Geometry& g, std::initializer_list<std::array<std::int64_t, 3>> vox,
                     std::uint8_t cls = label::kVs) {
  std::vector<std::uint8_t> v(static_cast<std::size_t>(g.voxel_count()), 0);
  for (const auto& p : vox) v[static_cast<std::size_t>(g.linear(p[0], p[1], p[2]))] = cls;
  return LabelMap(g, std::move(v));
}

// All-pairs oracle with its own surface test written against explicit coordinates.
double brute_assd(const LabelMap& a, const LabelMap& b, std::uint8_t cls, const Vec3& sp) {
  const Dims d = a.geometry().dims;
  auto surf = [&](const LabelMap& m) {
    std::vector<Vec3> pts;
    for (std::int64_t k = 0; k < d[2]; ++k)
      for (std::int64_t j = 0; j < d[1]; ++j)
        for (std::int64_t i = 0; i < d[0]; ++i) {
          if (m.at(i, j, k) != cls) continue;
          bool edge = false;
          const std::int64_t nb[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
          for (const auto& o : nb) {
            const std::int64_t x = i + o[0], y = j + o[1], z = k + o[2];
            if (x < 0 || y < 0 || z < 0 || x >= d[0] || y >= d[1] || z >= d[2] || m.at(x, y, z) != cls) edge = true;
          }
          if (edge) pts.push_back({i * sp[0], j * sp[1], k * sp[2]});
        }
    return pts;
  };
  const auto sa = surf(a), sb = surf(b);
  auto directed = [](const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
    double s = 0;
    for (const auto& p : from) {
      double best = INFINITY;
      for (const auto& q : to)
        best = std::min(best, std::hypot(p[0] - q[0], p[1] - q[1], p[2] - q[2]));
      s += best;
    }
    return s;
  };
  return (directed(sa, sb) + directed(sb, sa)) / double(sa.size() + sb.size());
}

LabelMap random_blob(const Geometry& g, std::mt19937_64& rng, double p) {
  std::bernoulli_distribution keep(p);
  std::vector<std::uint8_t> v(static_cast<std::size_t>(g.voxel_count()), 0);
  // Random boxes with random holes so surfaces are irregular.
  for (int b = 0; b < 3; ++b) {
    int lo[3], hi[3];
    for (int k = 0; k < 3; ++k) {
      lo[k] = std::uniform_int_distribution<int>(0, int(g.dims[k]) - 1)(rng);
      hi[k] = std::min<int>(int(g.dims[k]) - 1, lo[k] + std::uniform_int_distribution<int>(0, 5)(rng));
    }
    for (int z = lo[2]; z <= hi[2]; ++z)
      for (int y = lo[1]; y <= hi[1]; ++y)
        for (int x = lo[0]; x <= hi[0]; ++x)
          if (keep(rng)) v[static_cast<std::size_t>(g.linear(x, y, z))] = label::kVs;
  }
  return LabelMap(g, std::move(v));
}

}  // namespace

TEST_CASE("dice examples") {
  const Geometry g = grid({6, 6, 6});
  const LabelMap a = with_voxels(g, {{0, 0, 0}, {1, 0, 0}});
  const LabelMap b = with_voxels(g, {{1, 0, 0}, {2, 0, 0}});
  const LabelMap c = with_voxels(g, {{4, 4, 4}});
  const LabelMap empty = with_voxels(g, {});
  CHECK(dice(a, a, label::kVs) == 1.0);
  CHECK(dice(a, c, label::kVs) == 0.0);
  CHECK(dice(a, b, label::kVs) == 0.5);
  CHECK(dice(empty, empty, label::kVs) == 1.0);
  CHECK(dice(a, empty, label::kVs) == 0.0);
  CHECK_THROWS_AS(dice(a, with_voxels(grid({6, 6, 5}), {}), label::kVs), Error);
}

TEST_CASE("dice is symmetric and permutation invariant") {
  std::mt19937_64 rng(7);
  const Geometry g = grid({10, 9, 8});
  const LabelMap a = random_blob(g, rng, 0.7), b = random_blob(g, rng, 0.7);
  CHECK(dice(a, b, label::kVs) == dice(b, a, label::kVs));
  std::vector<std::size_t> perm(static_cast<std::size_t>(g.voxel_count()));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::uint8_t> pa(perm.size()), pb(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    pa[i] = a.values()[perm[i]];
    pb[i] = b.values()[perm[i]];
  }
  CHECK(dice(LabelMap(g, pa), LabelMap(g, pb), label::kVs) == doctest::Approx(dice(a, b, label::kVs)).epsilon(1e-15));
}

TEST_CASE("assd examples") {
  const Geometry g = grid({8, 4, 4});
  const LabelMap a = with_voxels(g, {{1, 1, 1}});
  const LabelMap b = with_voxels(g, {{4, 1, 1}});
  CHECK(*assd(a, b, label::kVs) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(*assd(a, b, label::kVs, {0.5, 1, 1}) == doctest::Approx(1.5).epsilon(1e-12));
  CHECK(*assd(a, a, label::kVs) == 0.0);
  CHECK_FALSE(assd(a, with_voxels(g, {}), label::kVs).has_value());
  CHECK_THROWS_AS(assd(a, b, label::kVs, {0, 1, 1}), Error);
}

TEST_CASE("assd matches the all-pairs oracle on small grids") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 25; ++trial) {
    const Dims d{std::uniform_int_distribution<std::int64_t>(3, 12)(rng),
                 std::uniform_int_distribution<std::int64_t>(3, 12)(rng),
                 std::uniform_int_distribution<std::int64_t>(3, 12)(rng)};
    const Vec3 sp{std::uniform_real_distribution<double>(0.3, 2.0)(rng), 0.7, 1.3};
    const Geometry g = grid(d, sp);
    const LabelMap a = random_blob(g, rng, 0.8), b = random_blob(g, rng, 0.8);
    if (count_class(a, label::kVs) == 0 || count_class(b, label::kVs) == 0) continue;
    CAPTURE(trial);
    const double got = *assd(a, b, label::kVs, sp);
    CHECK(std::abs(got - brute_assd(a, b, label::kVs, sp)) < 1e-9);
    CHECK(std::abs(got - *assd(b, a, label::kVs, sp)) < 1e-12);
    CHECK(*assd(a, a, label::kVs, sp) == 0.0);
    // Uniform spacing scaling scales ASSD linearly.
    const Vec3 sp2{sp[0] * 2.5, sp[1] * 2.5, sp[2] * 2.5};
    CHECK(*assd(a, b, label::kVs, sp2) == doctest::Approx(2.5 * got).epsilon(1e-12));
  }
}

TEST_CASE("report statistics and formatting") {
  CaseMetrics one{"c0", 0.8, 0.5, 1.0, std::nullopt};
  const auto r1 = report({one}, 1);
  CHECK(r1.dice_vs.mean == doctest::Approx(0.8));
  CHECK(r1.dice_vs.std == 0.0);
  CHECK(r1.assd_cochlea.n == 0);
  CHECK(r1.assd_cochlea.undefined == 1);

  CaseMetrics a{"a", 0.7, 0.5, 2.0, 1.0}, b{"b", 0.9, 0.5, 4.0, std::nullopt};
  const auto r = report({a, b}, 2);
  CHECK(r.dice_vs.mean == doctest::Approx(0.8));
  CHECK(r.dice_vs.std == doctest::Approx(0.1));  // population denominator
  CHECK(r.assd_vs.mean == doctest::Approx(3.0));
  CHECK(r.assd_cochlea.n == 1);
  CHECK(r.assd_cochlea.undefined == 1);

  CHECK(format_mean_std(81.78, 8.03) == "81.78±8.03");
  CHECK(format_mean_std(0.8 * 100, 0.0) == "80.00±0.00");

  const std::string rows = r.rows();
  CHECK(rows.find("b\tcochlea\t0.500000\tnan\n") != std::string::npos);
  CHECK(rows.find("a\tvs\t0.700000\t2.000000\n") != std::string::npos);

  const std::string table = format_table({r1, r}, {"Stage 1", "Stage 2"});
  CHECK(table.find("Dice VS (%)") < table.find("Dice cochlea (%)"));
  CHECK(table.find("Dice cochlea (%)") < table.find("ASSD VS (mm)"));
  CHECK(table.find("ASSD VS (mm)") < table.find("ASSD cochlea (mm)"));
  CHECK(table.find("80.00±10.00") != std::string::npos);
  CHECK_THROWS_AS(report({}, 1), Error);
}
