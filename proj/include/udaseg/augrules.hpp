#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "udaseg/rng.hpp"
#include "udaseg/volume.hpp"

namespace udaseg::aug {

enum class RuleOrder { VsThenCochlea, CochleaThenVs };

const char* to_string(RuleOrder o);  // "vs-then-cochlea" / "cochlea-then-vs"
RuleOrder parse_rule_order(const std::string& s);

struct AugmentConfig {
  double vs_attenuation = 0.5;
  double vs_apply_prob = 0.5;
  double cochlea_lo_pct = 85.0;
  double cochlea_hi_pct = 95.0;
  double smooth_sigma = 1.0;  // voxels
  std::uint64_t seed = 0;
  // One uniform draw per cochlea voxel (default) or a single draw per volume.
  bool cochlea_per_voxel = true;
  RuleOrder order = RuleOrder::VsThenCochlea;

  void validate() const;
};

struct VsResult {
  Volume volume;
  bool applied = false;
};

// One uniform draw per volume decides whether VS voxels are scaled by vs_attenuation.
VsResult augment_vs(const Volume& v, const LabelMap& m, const AugmentConfig& cfg, Rng& rng);

struct CochleaTrace {
  bool gate_fired = false;
  double lo = 0.0;  // percentile(v, cochlea_lo_pct) over the whole volume
  double hi = 0.0;
  double cochlea_mean = 0.0;
  std::vector<float> replaced;  // pre-smoothing values, cochlea voxels in index order
};

// When the mean cochlea intensity is below P_lo, cochlea voxels are redrawn
// uniformly from [P_lo, P_hi] and then smoothed within the cochlea region.
Volume augment_cochlea(const Volume& v, const LabelMap& m, const AugmentConfig& cfg, Rng& rng,
                       CochleaTrace* trace = nullptr);

struct AuditEntry {
  std::string case_id;
  bool vs_applied = false;
  bool cochlea_gate_fired = false;
  double lo = 0.0;
  double hi = 0.0;
};

std::string format_audit(const std::vector<AuditEntry>& entries);

// Both rules per case with a per-case stream seeded from (cfg.seed, case id).
std::vector<Case> augment_pool(const std::vector<const Case*>& cases, const AugmentConfig& cfg,
                               std::vector<AuditEntry>* audit = nullptr);

}  // namespace udaseg::aug
