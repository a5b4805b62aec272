#pragma once

#include <optional>
#include <string>
#include <vector>

#include "udaseg/volume.hpp"

namespace udaseg::metrics {

// 2|P∩G| / (|P|+|G|); 1.0 when both masks are empty.
double dice(const LabelMap& pred, const LabelMap& gt, std::uint8_t class_id);

// Average symmetric surface distance in mm. Surface voxels are class voxels
// with at least one 6-neighbour outside the class (the grid border counts as
// outside). Returns nullopt when either mask is empty.
std::optional<double> assd(const LabelMap& pred, const LabelMap& gt, std::uint8_t class_id,
                           const Vec3& spacing);
std::optional<double> assd(const LabelMap& pred, const LabelMap& gt, std::uint8_t class_id);

struct CaseMetrics {
  std::string case_id;
  double dice_vs = 0.0;
  double dice_cochlea = 0.0;
  std::optional<double> assd_vs;
  std::optional<double> assd_cochlea;
};

CaseMetrics evaluate_case(const std::string& case_id, const LabelMap& pred, const LabelMap& gt);

// Mean and population standard deviation (denominator n) over defined values.
struct Summary {
  double mean = 0.0;
  double std = 0.0;
  int n = 0;
  int undefined = 0;
};

Summary summarize(const std::vector<std::optional<double>>& values);

struct MetricsReport {
  int stage = 0;
  std::vector<CaseMetrics> cases;
  Summary dice_vs, dice_cochlea, assd_vs, assd_cochlea;

  // One line per case: case_id, structure, dice, assd_mm ("nan" when undefined).
  std::string rows() const;
};

MetricsReport report(std::vector<CaseMetrics> cases, int stage);

// "81.78±8.03": Dice is rendered in percent, ASSD in mm, both with 2 decimals.
std::string format_mean_std(double mean, double std);

// Aligned table, columns Dice VS, Dice cochlea, ASSD VS, ASSD cochlea; one row
// per report labelled by `names[i]`.
std::string format_table(const std::vector<MetricsReport>& reports, const std::vector<std::string>& names);

}  // namespace udaseg::metrics
