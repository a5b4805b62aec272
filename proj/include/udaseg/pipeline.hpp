#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "udaseg/augrules.hpp"
#include "udaseg/boot.hpp"
#include "udaseg/dataset.hpp"
#include "udaseg/metrics.hpp"
#include "udaseg/phantom.hpp"
#include "udaseg/prep.hpp"
#include "udaseg/seg.hpp"
#include "udaseg/xlate.hpp"

namespace udaseg {

struct PipelineConfig {
  std::uint64_t seed = 7;
  phantom::PhantomConfig phantom;
  int atlas_dilation = 8;
  Vec3 target_spacing{0.4102, 0.4102, 1.0};
  prep::RegistrationConfig registration;
  xlate::MatrixMode matrix = xlate::MatrixMode::Full;
  xlate::TrainConfig translator;
  std::map<xlate::WindowMode, xlate::InferenceWindowConfig> windows{
      {xlate::WindowMode::TwoD, xlate::InferenceWindowConfig::defaults(xlate::WindowMode::TwoD)},
      {xlate::WindowMode::ThreeD, xlate::InferenceWindowConfig::defaults(xlate::WindowMode::ThreeD)}};
  aug::AugmentConfig augment;
  seg::TrainConfig train;
  std::array<boot::StageConfig, 4> stages{boot::StageConfig::defaults(1), boot::StageConfig::defaults(2),
                                          boot::StageConfig::defaults(3), boot::StageConfig::defaults(4)};
  // Validation cases whose ROI-frame VS is at most this percentile of the
  // validation VS counts form the small-tumour subset.
  double small_eval_percentile = 33.0;
  std::string output_root;  // empty: nothing written

  // Throws a Configuration error naming the offending field path.
  void validate() const;
  // Sub-step seeds (phantom, translators, augmentation, segmenter) are all
  // derived from `seed`; they are not separately configurable.
  void derive_seeds();
};

// JSON config file; unknown keys are rejected, missing keys keep defaults.
PipelineConfig parse_pipeline_config(const std::string& json_text);
PipelineConfig load_pipeline_config(const std::string& path);
std::string to_json(const PipelineConfig& cfg);

// Preprocessed data in the ROI frame shared by every later step.
struct PreparedData {
  std::vector<prep::Atlas> atlases;
  std::vector<Case> ceT1;        // labelled
  std::vector<Case> hrT2;        // label-less training pool
  std::vector<Case> validation;  // label-less
  EvaluationRegistry eval;       // ROI-frame ground truth of hrT2 train + validation
  std::map<std::string, prep::RigidTransform> transforms;  // per case id
};

PreparedData prepare(const Dataset& raw, const PipelineConfig& cfg);

struct PipelineResult {
  boot::PipelineState state;
  std::vector<metrics::MetricsReport> stages;  // stages 1..4 on the validation split
  metrics::MetricsReport ensemble;             // tagged stage 0
  std::vector<std::string> small_ids;
  std::vector<metrics::MetricsReport> small_stages;
  metrics::MetricsReport small_ensemble;
  int translators = 0;
  std::size_t pseudo_cases = 0;

  // Machine-readable rows of every report ("stage\tcase_id\tstructure\tdice\tassd_mm").
  std::string metric_rows() const;
};

using ProgressFn = std::function<void(const std::string&)>;

PipelineResult run_pipeline(const PipelineConfig& cfg, const ProgressFn& progress = {});

// Ensemble prediction and scoring against the evaluation registry.
metrics::MetricsReport evaluate_models(const std::vector<const seg::SegmenterModel*>& models,
                                       const std::vector<const Case*>& cases, const EvaluationRegistry& eval,
                                       int stage);

}  // namespace udaseg
