#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "udaseg/volume.hpp"

namespace udaseg::prep {

// T(p) = R p + t, mapping moving-image world coordinates (mm) onto the atlas.
// R = Rz * Ry * Rx, so the X rotation is applied first.
struct RigidTransform {
  Vec3 angles{0, 0, 0};       // radians
  Vec3 translation{0, 0, 0};  // mm

  Mat3 rotation() const;
  Vec3 apply(const Vec3& p) const;
  Vec3 apply_inverse(const Vec3& q) const;
  void validate() const;
};

std::string format_transform(const RigidTransform& t);
RigidTransform parse_transform(const std::string& text);
void save_transform(const std::string& path, const RigidTransform& t);
RigidTransform load_transform(const std::string& path);

struct Box {
  Vec3 min{0, 0, 0};
  Vec3 max{0, 0, 0};
};

struct Atlas {
  Volume volume;
  Box roi_box;  // atlas world coordinates, mm
  DomainTag tag;

  void validate() const;
};

// Atlas from a labelled case: roi_box is the tight bounding box of all
// foreground labels dilated by `dilation_voxels`, clipped to the volume.
Atlas build_atlas(const Case& c, int dilation_voxels = 8);

// atlases.json (tags and ROI boxes) plus one NIfTI volume per atlas.
void save_atlases(const std::vector<Atlas>& atlases, const std::string& dir);
std::vector<Atlas> load_atlases(const std::string& dir);

struct RegistrationConfig {
  int levels = 3;
  int iters = 200;           // per level
  double step = 1.0;         // largest parameter step at full resolution, mm
  double min_step = 0.02;    // stop once the proposed step drops below this, mm
  int patience = 32;         // consecutive rejected trial steps tolerated at the finest level
  double min_overlap = 0.25; // fraction of moving samples that must land inside the fixed grid
  int fine_stride = 2;       // voxel stride of the samples used at the finest level

  void validate() const;
};

struct RegistrationResult {
  RigidTransform transform;
  double metric = 0.0;  // mean squared difference at the finest level
  int iterations = 0;
  // Objective after each accepted step, one list per pyramid level (coarsest first).
  std::vector<std::vector<double>> level_trace;
};

// Thrown when the optimiser diverges; carries the best transform seen.
class RegistrationFailure : public Error {
 public:
  RegistrationFailure(const std::string& what, RegistrationResult best)
      : Error(ErrorKind::ConvergenceFailure, what), best_(best) {}
  const RegistrationResult& best() const noexcept { return best_; }

 private:
  RegistrationResult best_;
};

// Finds T minimising mean((moving(y) - fixed(T(y)))^2) over moving voxels y,
// coarse to fine, by Levenberg-Marquardt on the per-sample residuals of
// lightly smoothed images. Fixed samples outside the grid read as zero.
RegistrationResult register_rigid(const Volume& moving, const Volume& fixed, const RegistrationConfig& cfg = {});

// Resamples v onto an axis-aligned grid covering atlas.roi_box at v's
// spacing, origin at roi_box.min; each output point p reads v at T^-1(p).
// Points that map outside v read as zero (background for labels).
Volume crop_roi(const Volume& v, const RigidTransform& t, const Atlas& atlas);
LabelMap crop_roi(const LabelMap& m, const RigidTransform& t, const Atlas& atlas);

struct Preprocessed {
  Case c;
  RigidTransform transform;
  double metric = 0.0;
};

const Atlas& atlas_for(const std::vector<Atlas>& atlases, Site site, Modality modality);

// register -> crop -> resample; labels (if present) follow with nearest-neighbour.
Preprocessed preprocess_case(const Case& c, const std::vector<Atlas>& atlases, const Vec3& target_spacing,
                             const RegistrationConfig& cfg = {});
// Applies an already-estimated transform to labels kept outside the case
// (evaluation ground truth), producing the same grid as preprocess_case.
LabelMap preprocess_labels(const LabelMap& m, const RigidTransform& t, const Atlas& atlas,
                           const Vec3& target_spacing);

}  // namespace udaseg::prep
