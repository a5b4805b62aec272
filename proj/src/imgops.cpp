#include "udaseg/imgops.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

#include "udaseg/simd.hpp"

namespace udaseg {
namespace {

Geometry resampled_geometry(const Geometry& g, const Vec3& target_spacing,
                            std::int64_t max_voxels) {
  for (int a = 0; a < 3; ++a)
    require(std::isfinite(target_spacing[a]) && target_spacing[a] > 0.0,
            ErrorKind::InvalidArgument, "resample: target spacing must be > 0");
  Geometry out = g;
  double total = 1.0;
  for (int a = 0; a < 3; ++a) {
    // Guard against 0.99999999 style round-off pushing ceil up by one.
    const double exact = static_cast<double>(g.dims[a]) * g.spacing[a] / target_spacing[a];
    const double snapped = std::round(exact);
    const double n = std::abs(exact - snapped) < 1e-9 * std::max(1.0, exact) ? snapped : std::ceil(exact);
    out.dims[a] = std::max<std::int64_t>(1, static_cast<std::int64_t>(n));
    out.spacing[a] = target_spacing[a];
    total *= static_cast<double>(out.dims[a]);
  }
  require(total <= static_cast<double>(max_voxels), ErrorKind::ResourceLimit,
          "resample: output of " + std::to_string(static_cast<long long>(total)) +
              " voxels exceeds the configured cap");
  return out;
}

inline std::int64_t clampi(std::int64_t v, std::int64_t lo, std::int64_t hi) {
  return v < lo ? lo : (v > hi ? hi : v);
}

// Per-axis lookup of (lower index, fraction) for a pure rescaling of index space.
struct AxisTaps {
  std::vector<std::int64_t> i0;
  std::vector<std::int64_t> i1;
  std::vector<double> frac;
};

AxisTaps axis_taps(std::int64_t out_n, std::int64_t in_n, double scale) {
  AxisTaps t;
  t.i0.resize(out_n);
  t.i1.resize(out_n);
  t.frac.resize(out_n);
  for (std::int64_t o = 0; o < out_n; ++o) {
    double x = static_cast<double>(o) * scale;
    x = std::clamp(x, 0.0, static_cast<double>(in_n - 1));
    const auto f = static_cast<std::int64_t>(std::floor(x));
    t.i0[o] = f;
    t.i1[o] = std::min(f + 1, in_n - 1);
    t.frac[o] = x - static_cast<double>(f);
  }
  return t;
}

}  // namespace

Volume resample(const Volume& v, const Vec3& target_spacing, Interp mode,
                std::int64_t max_voxels) {
  const Geometry& g = v.geometry();
  Geometry out = resampled_geometry(g, target_spacing, max_voxels);
  if (out.dims == g.dims && out.spacing == g.spacing) return v;

  std::vector<float> data(static_cast<std::size_t>(out.voxel_count()));
  const auto& src = v.data();
  if (mode == Interp::Nearest) {
    std::array<std::vector<std::int64_t>, 3> idx;
    for (int a = 0; a < 3; ++a) {
      idx[a].resize(out.dims[a]);
      const double scale = target_spacing[a] / g.spacing[a];
      for (std::int64_t o = 0; o < out.dims[a]; ++o)
        idx[a][o] = clampi(static_cast<std::int64_t>(std::floor(o * scale + 0.5)), 0, g.dims[a] - 1);
    }
    std::size_t n = 0;
    for (std::int64_t k = 0; k < out.dims[2]; ++k)
      for (std::int64_t j = 0; j < out.dims[1]; ++j)
        for (std::int64_t i = 0; i < out.dims[0]; ++i)
          data[n++] = src[static_cast<std::size_t>(g.linear(idx[0][i], idx[1][j], idx[2][k]))];
    return Volume(out, std::move(data));
  }

  const AxisTaps tx = axis_taps(out.dims[0], g.dims[0], target_spacing[0] / g.spacing[0]);
  const AxisTaps ty = axis_taps(out.dims[1], g.dims[1], target_spacing[1] / g.spacing[1]);
  const AxisTaps tz = axis_taps(out.dims[2], g.dims[2], target_spacing[2] / g.spacing[2]);
  std::size_t n = 0;
  for (std::int64_t k = 0; k < out.dims[2]; ++k) {
    const double fz = tz.frac[k];
    for (std::int64_t j = 0; j < out.dims[1]; ++j) {
      const double fy = ty.frac[j];
      const std::int64_t r00 = g.dims[0] * (ty.i0[j] + g.dims[1] * tz.i0[k]);
      const std::int64_t r10 = g.dims[0] * (ty.i1[j] + g.dims[1] * tz.i0[k]);
      const std::int64_t r01 = g.dims[0] * (ty.i0[j] + g.dims[1] * tz.i1[k]);
      const std::int64_t r11 = g.dims[0] * (ty.i1[j] + g.dims[1] * tz.i1[k]);
      for (std::int64_t i = 0; i < out.dims[0]; ++i) {
        const double fx = tx.frac[i];
        const std::int64_t x0 = tx.i0[i];
        const std::int64_t x1 = tx.i1[i];
        auto lerp = [](double a, double b, double f) { return a + f * (b - a); };
        const double c00 = lerp(src[r00 + x0], src[r00 + x1], fx);
        const double c10 = lerp(src[r10 + x0], src[r10 + x1], fx);
        const double c01 = lerp(src[r01 + x0], src[r01 + x1], fx);
        const double c11 = lerp(src[r11 + x0], src[r11 + x1], fx);
        const double c0 = lerp(c00, c10, fy);
        const double c1 = lerp(c01, c11, fy);
        data[n++] = static_cast<float>(lerp(c0, c1, fz));
      }
    }
  }
  return Volume(out, std::move(data));
}

LabelMap resample(const LabelMap& m, const Vec3& target_spacing, std::int64_t max_voxels) {
  const Geometry& g = m.geometry();
  Geometry out = resampled_geometry(g, target_spacing, max_voxels);
  if (out.dims == g.dims && out.spacing == g.spacing) return m;
  std::array<std::vector<std::int64_t>, 3> idx;
  for (int a = 0; a < 3; ++a) {
    idx[a].resize(out.dims[a]);
    const double scale = target_spacing[a] / g.spacing[a];
    for (std::int64_t o = 0; o < out.dims[a]; ++o)
      idx[a][o] = clampi(static_cast<std::int64_t>(std::floor(o * scale + 0.5)), 0, g.dims[a] - 1);
  }
  std::vector<std::uint8_t> data(static_cast<std::size_t>(out.voxel_count()));
  std::size_t n = 0;
  for (std::int64_t k = 0; k < out.dims[2]; ++k)
    for (std::int64_t j = 0; j < out.dims[1]; ++j)
      for (std::int64_t i = 0; i < out.dims[0]; ++i)
        data[n++] = m[g.linear(idx[0][i], idx[1][j], idx[2][k])];
  return LabelMap(out, std::move(data));
}

double sample_trilinear_clamped(const Volume& v, const Vec3& ijk) {
  const Dims& d = v.dims();
  Vec3 c;
  for (int a = 0; a < 3; ++a) c[a] = std::clamp(ijk[a], 0.0, static_cast<double>(d[a] - 1));
  const auto x0 = static_cast<std::int64_t>(std::floor(c[0]));
  const auto y0 = static_cast<std::int64_t>(std::floor(c[1]));
  const auto z0 = static_cast<std::int64_t>(std::floor(c[2]));
  const std::int64_t x1 = std::min(x0 + 1, d[0] - 1);
  const std::int64_t y1 = std::min(y0 + 1, d[1] - 1);
  const std::int64_t z1 = std::min(z0 + 1, d[2] - 1);
  const double fx = c[0] - x0, fy = c[1] - y0, fz = c[2] - z0;
  auto at = [&](std::int64_t i, std::int64_t j, std::int64_t k) {
    return static_cast<double>(v.at(i, j, k));
  };
  const double c00 = at(x0, y0, z0) + fx * (at(x1, y0, z0) - at(x0, y0, z0));
  const double c10 = at(x0, y1, z0) + fx * (at(x1, y1, z0) - at(x0, y1, z0));
  const double c01 = at(x0, y0, z1) + fx * (at(x1, y0, z1) - at(x0, y0, z1));
  const double c11 = at(x0, y1, z1) + fx * (at(x1, y1, z1) - at(x0, y1, z1));
  const double c0 = c00 + fy * (c10 - c00);
  const double c1 = c01 + fy * (c11 - c01);
  return c0 + fz * (c1 - c0);
}

double sample_trilinear_zero(const Volume& v, const Vec3& ijk) {
  if (!v.geometry().contains_index(ijk)) return 0.0;
  return sample_trilinear_clamped(v, ijk);
}

double percentile_of(std::vector<float> values, double p) {
  require(!values.empty(), ErrorKind::InvalidArgument, "percentile: empty region");
  require(std::isfinite(p) && p >= 0.0 && p <= 100.0, ErrorKind::InvalidArgument,
          "percentile: p must be in [0, 100]");
  const double h = static_cast<double>(values.size() - 1) * p / 100.0;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const double frac = h - static_cast<double>(lo);
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(lo), values.end());
  const double x_lo = values[lo];
  if (frac == 0.0 || lo + 1 >= values.size()) return x_lo;
  // The next order statistic is the minimum of the upper partition.
  const double x_hi = *std::min_element(values.begin() + static_cast<std::ptrdiff_t>(lo) + 1, values.end());
  return x_lo + frac * (x_hi - x_lo);
}

double percentile(const Volume& v, double p, std::optional<std::span<const std::uint8_t>> region) {
  if (!region) return percentile_of(v.data(), p);
  require(static_cast<std::int64_t>(region->size()) == v.size(), ErrorKind::InvalidArgument,
          "percentile: region size does not match volume");
  std::vector<float> vals;
  for (std::size_t i = 0; i < region->size(); ++i)
    if ((*region)[i]) vals.push_back(v.data()[i]);
  return percentile_of(std::move(vals), p);
}

std::vector<float> gaussian_kernel_1d(double sigma) {
  require(std::isfinite(sigma) && sigma > 0.0, ErrorKind::InvalidArgument,
          "gaussian: sigma must be > 0");
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> w(static_cast<std::size_t>(2 * r + 1));
  double sum = 0.0;
  for (int t = -r; t <= r; ++t) {
    w[static_cast<std::size_t>(t + r)] = std::exp(-0.5 * t * t / (sigma * sigma));
    sum += w[static_cast<std::size_t>(t + r)];
  }
  std::vector<float> out(w.size());
  double fsum = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    out[i] = static_cast<float>(w[i] / sum);
    if (i != static_cast<std::size_t>(r)) fsum += out[i];
  }
  // Centre tap absorbs the float rounding so the taps sum to 1 as closely as possible.
  out[static_cast<std::size_t>(r)] = static_cast<float>(1.0 - fsum);
  return out;
}

Volume gaussian_smooth_3d(const Volume& v, const Vec3& sigma_voxels,
                          std::optional<std::span<const std::uint8_t>> region) {
  const Geometry& g = v.geometry();
  const Dims& d = g.dims;
  std::array<std::vector<float>, 3> kern;
  std::array<std::int64_t, 3> rad{};
  for (int a = 0; a < 3; ++a) {
    kern[a] = gaussian_kernel_1d(sigma_voxels[a]);
    rad[a] = static_cast<std::int64_t>(kern[a].size() / 2);
  }

  // Working box: the whole grid, or the region's bounding box grown by the kernel radius.
  std::array<std::int64_t, 3> lo{0, 0, 0};
  std::array<std::int64_t, 3> hi{d[0] - 1, d[1] - 1, d[2] - 1};
  if (region) {
    require(static_cast<std::int64_t>(region->size()) == v.size(), ErrorKind::InvalidArgument,
            "gaussian_smooth_3d: region size does not match volume");
    std::array<std::int64_t, 3> bl{d[0], d[1], d[2]};
    std::array<std::int64_t, 3> bh{-1, -1, -1};
    for (std::int64_t idx = 0; idx < v.size(); ++idx) {
      if (!(*region)[static_cast<std::size_t>(idx)]) continue;
      const auto ijk = g.unlinear(idx);
      for (int a = 0; a < 3; ++a) {
        bl[a] = std::min(bl[a], ijk[a]);
        bh[a] = std::max(bh[a], ijk[a]);
      }
    }
    if (bh[0] < 0) return v;
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::max<std::int64_t>(0, bl[a] - rad[a]);
      hi[a] = std::min<std::int64_t>(d[a] - 1, bh[a] + rad[a]);
    }
  }
  const std::int64_t bx = hi[0] - lo[0] + 1;
  const std::int64_t by = hi[1] - lo[1] + 1;
  const std::int64_t bz = hi[2] - lo[2] + 1;
  const auto box_n = static_cast<std::size_t>(bx * by * bz);
  auto bidx = [&](std::int64_t i, std::int64_t j, std::int64_t k) {
    return static_cast<std::size_t>(i + bx * (j + by * k));
  };

  const auto& src = v.data();
  std::vector<float> pass_x(box_n, 0.0f);
  {
    const std::int64_t r = rad[0];
    std::vector<float> padded(static_cast<std::size_t>(bx + 2 * r));
    for (std::int64_t k = 0; k < bz; ++k)
      for (std::int64_t j = 0; j < by; ++j) {
        const std::int64_t row = g.linear(0, lo[1] + j, lo[2] + k);
        for (std::int64_t t = 0; t < bx + 2 * r; ++t)
          padded[static_cast<std::size_t>(t)] = src[static_cast<std::size_t>(row + clampi(lo[0] + t - r, 0, d[0] - 1))];
        std::span<float> out(pass_x.data() + bidx(0, j, k), static_cast<std::size_t>(bx));
        for (std::int64_t t = 0; t <= 2 * r; ++t)
          simd::axpy(kern[0][static_cast<std::size_t>(t)],
                     std::span<const float>(padded.data() + t, static_cast<std::size_t>(bx)), out);
      }
  }
  // Passes along y and z read rows of the previous pass, clamped to the box;
  // the box only differs from the grid where the result is not needed.
  std::vector<float> pass_y(box_n, 0.0f);
  for (std::int64_t k = 0; k < bz; ++k)
    for (std::int64_t j = 0; j < by; ++j) {
      std::span<float> out(pass_y.data() + bidx(0, j, k), static_cast<std::size_t>(bx));
      for (std::int64_t t = -rad[1]; t <= rad[1]; ++t) {
        const std::int64_t jj = clampi(j + t, 0, by - 1);
        simd::axpy(kern[1][static_cast<std::size_t>(t + rad[1])],
                   std::span<const float>(pass_x.data() + bidx(0, jj, k), static_cast<std::size_t>(bx)), out);
      }
    }
  std::vector<float> pass_z(box_n, 0.0f);
  for (std::int64_t k = 0; k < bz; ++k)
    for (std::int64_t j = 0; j < by; ++j) {
      std::span<float> out(pass_z.data() + bidx(0, j, k), static_cast<std::size_t>(bx));
      for (std::int64_t t = -rad[2]; t <= rad[2]; ++t) {
        const std::int64_t kk = clampi(k + t, 0, bz - 1);
        simd::axpy(kern[2][static_cast<std::size_t>(t + rad[2])],
                   std::span<const float>(pass_y.data() + bidx(0, j, kk), static_cast<std::size_t>(bx)), out);
      }
    }

  // A convex combination stays inside the data range; clamp away float round-off.
  const auto [mn_it, mx_it] = std::minmax_element(src.begin(), src.end());
  const float mn = *mn_it, mx = *mx_it;
  std::vector<float> out = src;
  for (std::int64_t k = 0; k < bz; ++k)
    for (std::int64_t j = 0; j < by; ++j)
      for (std::int64_t i = 0; i < bx; ++i) {
        const auto gi = static_cast<std::size_t>(g.linear(lo[0] + i, lo[1] + j, lo[2] + k));
        if (region && !(*region)[gi]) continue;
        out[gi] = std::clamp(pass_z[bidx(i, j, k)], mn, mx);
      }
  return Volume(g, std::move(out));
}

std::vector<Component> connected_components(const LabelMap& m, std::uint8_t class_id,
                                            Connectivity connectivity) {
  require(class_id == label::kVs || class_id == label::kCochlea, ErrorKind::InvalidArgument,
          "connected_components: class_id must be 1 or 2");
  const Geometry& g = m.geometry();
  const Dims& d = g.dims;
  std::vector<std::array<int, 3>> offsets;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
        if (manhattan == 0) continue;
        if (connectivity == Connectivity::Six && manhattan != 1) continue;
        offsets.push_back({dx, dy, dz});
      }

  std::vector<std::uint8_t> seen(static_cast<std::size_t>(m.size()), 0);
  std::vector<Component> comps;
  std::deque<std::int64_t> queue;
  for (std::int64_t seed = 0; seed < m.size(); ++seed) {
    if (seen[static_cast<std::size_t>(seed)] || m[seed] != class_id) continue;
    Component c;
    seen[static_cast<std::size_t>(seed)] = 1;
    queue.push_back(seed);
    while (!queue.empty()) {
      const std::int64_t cur = queue.front();
      queue.pop_front();
      c.voxels.push_back(cur);
      const auto ijk = g.unlinear(cur);
      for (const auto& o : offsets) {
        const std::int64_t i = ijk[0] + o[0], j = ijk[1] + o[1], k = ijk[2] + o[2];
        if (i < 0 || j < 0 || k < 0 || i >= d[0] || j >= d[1] || k >= d[2]) continue;
        const std::int64_t n = g.linear(i, j, k);
        if (seen[static_cast<std::size_t>(n)] || m[n] != class_id) continue;
        seen[static_cast<std::size_t>(n)] = 1;
        queue.push_back(n);
      }
    }
    std::sort(c.voxels.begin(), c.voxels.end());
    comps.push_back(std::move(c));
  }
  // Seeds are visited in index order, so a stable sort keeps the tie rule.
  std::stable_sort(comps.begin(), comps.end(),
                   [](const Component& a, const Component& b) { return a.size() > b.size(); });
  return comps;
}

LabelMap keep_largest_components(const LabelMap& m, Connectivity connectivity) {
  std::vector<std::uint8_t> out(m.data().size(), label::kBackground);
  for (const std::uint8_t c : {label::kVs, label::kCochlea}) {
    const auto comps = connected_components(m, c, connectivity);
    if (comps.empty()) continue;
    for (const auto idx : comps.front().voxels) out[static_cast<std::size_t>(idx)] = c;
  }
  return LabelMap(m.geometry(), std::move(out));
}

Volume downsample2(const Volume& v) {
  const Geometry& g = v.geometry();
  Vec3 sigma{};
  for (int a = 0; a < 3; ++a) sigma[a] = g.dims[a] >= 2 ? 1.0 : 0.25;
  const Volume smooth = gaussian_smooth_3d(v, sigma);
  Geometry out = g;
  std::array<std::int64_t, 3> step{};
  for (int a = 0; a < 3; ++a) {
    step[a] = g.dims[a] >= 2 ? 2 : 1;
    out.dims[a] = (g.dims[a] + step[a] - 1) / step[a];
    out.spacing[a] = g.spacing[a] * static_cast<double>(step[a]);
  }
  std::vector<float> data(static_cast<std::size_t>(out.voxel_count()));
  std::size_t n = 0;
  for (std::int64_t k = 0; k < out.dims[2]; ++k)
    for (std::int64_t j = 0; j < out.dims[1]; ++j)
      for (std::int64_t i = 0; i < out.dims[0]; ++i)
        data[n++] = smooth.at(i * step[0], j * step[1], k * step[2]);
  return Volume(out, std::move(data));
}

VoxelMask dilate_box(const VoxelMask& mask, const Dims& d, int radius) {
  require(static_cast<std::int64_t>(mask.size()) == d[0] * d[1] * d[2], ErrorKind::InvalidArgument,
          "dilate_box: mask size does not match dims");
  VoxelMask cur = mask;
  if (radius <= 0) return cur;
  const std::array<std::int64_t, 3> stride{1, d[0], d[0] * d[1]};
  for (int a = 0; a < 3; ++a) {
    VoxelMask next(cur.size(), 0);
    for (std::int64_t idx = 0; idx < static_cast<std::int64_t>(cur.size()); ++idx) {
      if (!cur[static_cast<std::size_t>(idx)]) continue;
      const std::int64_t coord = (idx / stride[a]) % d[a];
      const std::int64_t lo = std::max<std::int64_t>(0, coord - radius);
      const std::int64_t hi = std::min<std::int64_t>(d[a] - 1, coord + radius);
      const std::int64_t base = idx - coord * stride[a];
      for (std::int64_t c = lo; c <= hi; ++c) next[static_cast<std::size_t>(base + c * stride[a])] = 1;
    }
    cur = std::move(next);
  }
  return cur;
}

}  // namespace udaseg
