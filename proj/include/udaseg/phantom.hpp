#pragma once

#include <array>
#include <cstdint>

#include "udaseg/dataset.hpp"
#include "udaseg/volume.hpp"

namespace udaseg::phantom {

// Intensity transform applied per site: gain * I^gamma + bias.
struct SiteContrast {
  double gain = 1.0;
  double bias = 0.0;
  double gamma = 1.0;
};

struct PhantomConfig {
  std::uint64_t seed = 2022;
  int cases_per_site_per_modality = 12;
  int validation_cases_per_site = 12;
  Dims dims{64, 64, 32};
  Vec3 spacing{0.8, 0.8, 2.0};
  std::array<int, 2> tumor_size_range{40, 640};  // VS voxel count, inclusive
  // Probability of drawing the VS size from the lower third of the range.
  double small_tumor_share = 0.35;
  std::array<SiteContrast, 2> site_contrast{SiteContrast{1.0, 0.0, 1.0}, SiteContrast{0.9, 0.04, 1.4}};
  double noise_sigma = 0.03;
  int max_pose_shift = 2;  // voxels, per axis (z uses half)

  void validate() const;
};

enum class Split { Train, Validation };

std::string case_id(Site site, Modality modality, Split split, int index);

// Deterministic phantom; the returned Case always carries its ground-truth labels.
Case generate_case(const PhantomConfig& cfg, Site site, Modality modality, int case_index,
                   Split split = Split::Train);

// Four unpaired training pools plus a labelled hrT2 validation split. hrT2
// labels (training and validation) live only in the evaluation registry.
Dataset generate_dataset(const PhantomConfig& cfg);

}  // namespace udaseg::phantom
