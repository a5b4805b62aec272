#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "udaseg/augrules.hpp"
#include "udaseg/dataset.hpp"
#include "udaseg/metrics.hpp"
#include "udaseg/seg.hpp"

namespace udaseg::boot {

enum class PoolKind { Pseudo2D, Pseudo3D, RealHrT2 };

const char* to_string(PoolKind k);
PoolKind parse_pool_kind(const std::string& s);

struct StageConfig {
  int stage_id = 1;
  std::vector<PoolKind> recipe;
  bool vs_augment = false;
  bool oversample = false;
  int oversample_cap = 160;
  // Fixed VS voxel-count threshold; when absent, the given percentile of VS
  // counts over the labelled pseudo pool is used.
  std::optional<std::int64_t> small_tumor_threshold;
  double small_tumor_percentile = 25.0;

  static StageConfig defaults(int stage_id);
  void validate() const;
};

struct PseudoLabelEntry {
  LabelMap labels;
  int generation = 0;  // id of the stage whose models produced the labels
};

// Append-only: a refresh supersedes the current entry and keeps the old one.
class PseudoLabelRegistry {
 public:
  void put(const std::string& case_id, LabelMap labels, int generation);
  bool contains(const std::string& case_id) const { return history_.count(case_id) > 0; }
  const PseudoLabelEntry& current(const std::string& case_id) const;
  const std::vector<PseudoLabelEntry>& history(const std::string& case_id) const;
  std::size_t size() const { return history_.size(); }
  int refresh_count() const { return static_cast<int>(generations_.size()); }
  const std::vector<int>& generations() const { return generations_; }
  void begin_refresh(int generation) { generations_.push_back(generation); }

 private:
  std::map<std::string, std::vector<PseudoLabelEntry>> history_;
  std::vector<int> generations_;
};

// Ensemble prediction for every case; the cases must be label-less.
std::vector<std::pair<std::string, LabelMap>> pseudo_label(const std::vector<const seg::SegmenterModel*>& models,
                                                           const std::vector<const Case*>& real_hrT2);

struct OversampleResult {
  std::vector<const Case*> cases;
  int duplicates = 0;
  std::optional<std::string> warning;
};

// Appends copies of eligible small-tumour cases (VS count <= threshold),
// round-robin in id order, until the list holds `cap` entries.
OversampleResult oversample_small_tumors(const std::vector<const Case*>& cases, int cap, std::int64_t threshold,
                                         const std::function<bool(const Case&)>& eligible = {});

std::int64_t small_tumor_threshold(const std::vector<const Case*>& labelled_pseudo, double percentile);

struct StageRecord {
  int stage_id = 0;
  std::vector<seg::SegmenterModel> models;
  std::vector<std::string> training_ids;  // in training-list order, duplicates included
  std::int64_t small_tumor_threshold = 0;
  std::vector<std::string> warnings;
};

struct PipelineState {
  std::vector<Case> pseudo_2d;
  std::vector<Case> pseudo_3d;
  std::vector<Case> real_hrT2;  // preprocessed, label-less
  PseudoLabelRegistry pseudo_labels;
  std::vector<StageRecord> ledger;
  bool ensemble_registered = false;

  const StageRecord& stage(int stage_id) const;
  std::vector<const seg::SegmenterModel*> stage_models(int stage_id) const;
  // Stage 2, 3 and 4 fold models; with equal fold counts the plain mean over
  // them equals the mean of the three stage ensembles.
  std::vector<const seg::SegmenterModel*> ensemble_models() const;
};

struct StageContext {
  seg::TrainConfig train;
  aug::AugmentConfig augment;
};

// Assembles the stage's training list, trains the fold models and appends a
// ledger record. Pseudo labels for real hrT2 are refreshed from the previous
// stage's ensemble before any stage >= 2 trains.
void run_stage(PipelineState& state, const StageConfig& stage, const StageContext& ctx);

// Training list the stage would use (after augmentation and oversampling);
// the owned augmented cases live in `storage`.
std::vector<const Case*> assemble_stage(PipelineState& state, const StageConfig& stage, const StageContext& ctx,
                                        std::vector<Case>& storage, StageRecord& record);

}  // namespace udaseg::boot
