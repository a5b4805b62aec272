#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "udaseg/volume.hpp"

namespace udaseg {

// Withheld annotations, keyed by case id. Only evaluation code reads this;
// cases handed to training never carry these labels.
class EvaluationRegistry {
 public:
  void put(const std::string& case_id, LabelMap labels);
  bool contains(const std::string& case_id) const { return labels_.count(case_id) > 0; }
  const LabelMap& lookup(const std::string& case_id) const;
  std::size_t size() const { return labels_.size(); }
  const std::map<std::string, LabelMap>& entries() const { return labels_; }

 private:
  std::map<std::string, LabelMap> labels_;
};

struct Dataset {
  std::vector<Case> train;       // ceT1 with labels, hrT2 without
  std::vector<Case> validation;  // held-out hrT2, labels only in `eval`
  EvaluationRegistry eval;

  // Training-facing pool accessor; hrT2 pools come back label-less.
  std::vector<const Case*> pool(Site site, Modality modality) const;
};

// On-disk datasets: a `dataset.json` manifest (ids, tags, splits, file paths)
// next to NIfTI volumes at <site>/<modality>/<id>.nii and labels at
// labels/<id>.nii. Withheld labels are listed separately in the manifest and
// load into the evaluation registry only. The manifest is written last, so a
// directory without one is an incomplete write.
namespace store {

inline constexpr const char* kManifest = "dataset.json";

void save_dataset(const Dataset& ds, const std::filesystem::path& root);
Dataset load_dataset(const std::filesystem::path& root);

}  // namespace store

}  // namespace udaseg
