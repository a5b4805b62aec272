#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "udaseg/volume.hpp"

namespace udaseg {

enum class Interp { Trilinear, Nearest };

// Default cap on the voxel count of any resampled output.
inline constexpr std::int64_t kDefaultMaxVoxels = std::int64_t{1} << 28;

// Output dims = ceil(dims * spacing / target_spacing); origin and direction are
// kept, so output voxel 0 coincides with input voxel 0. Samples beyond the
// last input voxel centre are clamped to the edge.
Volume resample(const Volume& v, const Vec3& target_spacing, Interp mode = Interp::Trilinear,
                std::int64_t max_voxels = kDefaultMaxVoxels);
// Label maps only support nearest-neighbour resampling.
LabelMap resample(const LabelMap& m, const Vec3& target_spacing,
                  std::int64_t max_voxels = kDefaultMaxVoxels);

// Trilinear sample at a continuous index; clamps to the edge.
double sample_trilinear_clamped(const Volume& v, const Vec3& ijk);
// Trilinear sample at a continuous index; zero outside [0, dim-1] on any axis.
double sample_trilinear_zero(const Volume& v, const Vec3& ijk);

// Linear-interpolation percentile with inclusive endpoints (the "type 7"
// definition): h = (n-1)·p/100, result = x[floor h] + frac(h)·(x[floor h+1] - x[floor h]).
double percentile(const Volume& v, double p,
                  std::optional<std::span<const std::uint8_t>> region = std::nullopt);
double percentile_of(std::vector<float> values, double p);

// Discrete Gaussian truncated at ceil(3σ) and renormalised to sum 1.
std::vector<float> gaussian_kernel_1d(double sigma);

// Separable Gaussian, clamp-to-edge. With a region, only region voxels are
// replaced; neighbourhood reads still cross the region boundary.
Volume gaussian_smooth_3d(const Volume& v, const Vec3& sigma_voxels,
                          std::optional<std::span<const std::uint8_t>> region = std::nullopt);

enum class Connectivity { Six = 6, TwentySix = 26 };

struct Component {
  std::vector<std::int64_t> voxels;  // ascending linear indices
  std::int64_t size() const { return static_cast<std::int64_t>(voxels.size()); }
};

// Maximal connected sets of `class_id`, largest first, ties by smallest voxel index.
std::vector<Component> connected_components(const LabelMap& m, std::uint8_t class_id,
                                            Connectivity connectivity);
// Keeps only the largest component per foreground class (off by default in the pipeline).
LabelMap keep_largest_components(const LabelMap& m, Connectivity connectivity);

// Gaussian pre-smoothing followed by 2x decimation; spacing doubles, origin kept.
Volume downsample2(const Volume& v);

// Binary dilation with a (2r+1)^3 box, clipped at the grid edge.
VoxelMask dilate_box(const VoxelMask& mask, const Dims& dims, int radius);

}  // namespace udaseg
