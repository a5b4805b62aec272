#include "udaseg/boot.hpp"

#include <algorithm>

#include "udaseg/imgops.hpp"

namespace udaseg::boot {

const char* to_string(PoolKind k) {
  switch (k) {
    case PoolKind::Pseudo2D: return "pseudo_2d";
    case PoolKind::Pseudo3D: return "pseudo_3d";
    case PoolKind::RealHrT2: return "real_hrT2";
  }
  return "?";
}

PoolKind parse_pool_kind(const std::string& s) {
  if (s == "pseudo_2d") return PoolKind::Pseudo2D;
  if (s == "pseudo_3d") return PoolKind::Pseudo3D;
  if (s == "real_hrT2") return PoolKind::RealHrT2;
  fail(ErrorKind::InvalidArgument, "unknown pool '" + s + "' (expected pseudo_2d, pseudo_3d or real_hrT2)");
}

StageConfig StageConfig::defaults(int stage_id) {
  StageConfig s;
  s.stage_id = stage_id;
  if (stage_id == 1) {
    s.recipe = {PoolKind::Pseudo2D, PoolKind::Pseudo3D};
  } else {
    s.recipe = {PoolKind::Pseudo3D, PoolKind::RealHrT2};
    s.vs_augment = stage_id >= 3;
    s.oversample = stage_id >= 3;
  }
  return s;
}

void StageConfig::validate() const {
  require(stage_id >= 1 && stage_id <= 4, ErrorKind::InvalidArgument, "stage: stage_id must be in 1..4");
  require(!recipe.empty(), ErrorKind::InvalidArgument, "stage " + std::to_string(stage_id) + ": empty recipe");
  require(oversample_cap >= 1, ErrorKind::InvalidArgument, "stage: oversample_cap must be >= 1");
  require(!small_tumor_threshold || *small_tumor_threshold >= 0, ErrorKind::InvalidArgument,
          "stage: small_tumor_threshold must be >= 0");
  require(small_tumor_percentile >= 0.0 && small_tumor_percentile <= 100.0, ErrorKind::InvalidArgument,
          "stage: small_tumor_percentile must be in [0, 100]");
}

void PseudoLabelRegistry::put(const std::string& case_id, LabelMap labels, int generation) {
  history_[case_id].push_back({std::move(labels), generation});
}

const PseudoLabelEntry& PseudoLabelRegistry::current(const std::string& case_id) const {
  return history(case_id).back();
}

const std::vector<PseudoLabelEntry>& PseudoLabelRegistry::history(const std::string& case_id) const {
  const auto it = history_.find(case_id);
  require(it != history_.end(), ErrorKind::Precondition, "no pseudo labels for case " + case_id);
  return it->second;
}

std::vector<std::pair<std::string, LabelMap>> pseudo_label(const std::vector<const seg::SegmenterModel*>& models,
                                                           const std::vector<const Case*>& real_hrT2) {
  require(!models.empty(), ErrorKind::Precondition, "pseudo_label: no trained models");
  std::vector<std::pair<std::string, LabelMap>> out;
  for (const Case* c : real_hrT2) {
    require(!c->labels.has_value(), ErrorKind::Precondition, "pseudo_label: case " + c->id + " already carries labels");
    out.emplace_back(c->id, seg::predict(models, c->volume).labels);
  }
  return out;
}

OversampleResult oversample_small_tumors(const std::vector<const Case*>& cases, int cap, std::int64_t threshold,
                                         const std::function<bool(const Case&)>& eligible) {
  require(cap >= static_cast<int>(cases.size()), ErrorKind::InvalidArgument,
          "oversample: cap " + std::to_string(cap) + " is below the list size " + std::to_string(cases.size()));
  OversampleResult r;
  r.cases = cases;
  std::vector<const Case*> small;
  for (const Case* c : cases) {
    require(c->labels.has_value(), ErrorKind::InvalidArgument, "oversample: case " + c->id + " has no labels");
    if ((!eligible || eligible(*c)) && count_class(*c->labels, label::kVs) <= threshold) small.push_back(c);
  }
  if (small.empty()) {
    r.warning = "no case with a VS of at most " + std::to_string(threshold) + " voxels; list left unchanged";
    return r;
  }
  std::stable_sort(small.begin(), small.end(), [](const Case* a, const Case* b) { return a->id < b->id; });
  for (std::size_t i = 0; static_cast<int>(r.cases.size()) < cap; ++i, ++r.duplicates)
    r.cases.push_back(small[i % small.size()]);
  return r;
}

std::int64_t small_tumor_threshold(const std::vector<const Case*>& labelled_pseudo, double pct) {
  require(!labelled_pseudo.empty(), ErrorKind::Precondition, "small_tumor_threshold: empty pseudo pool");
  std::vector<float> counts;
  for (const Case* c : labelled_pseudo) {
    require(c->labels.has_value(), ErrorKind::Precondition, "small_tumor_threshold: unlabeled case " + c->id);
    counts.push_back(static_cast<float>(count_class(*c->labels, label::kVs)));
  }
  return static_cast<std::int64_t>(std::floor(percentile_of(std::move(counts), pct)));
}

const StageRecord& PipelineState::stage(int stage_id) const {
  for (const auto& r : ledger)
    if (r.stage_id == stage_id) return r;
  fail(ErrorKind::Precondition, "stage " + std::to_string(stage_id) + " has not run");
}

std::vector<const seg::SegmenterModel*> PipelineState::stage_models(int stage_id) const {
  std::vector<const seg::SegmenterModel*> out;
  for (const auto& m : stage(stage_id).models) out.push_back(&m);
  return out;
}

std::vector<const seg::SegmenterModel*> PipelineState::ensemble_models() const {
  require(ensemble_registered, ErrorKind::Precondition, "final ensemble is registered only after stage 4");
  std::vector<const seg::SegmenterModel*> out;
  for (const int s : {2, 3, 4})
    for (const auto* m : stage_models(s)) out.push_back(m);
  return out;
}

namespace {

const std::vector<Case>& pool_of(const PipelineState& st, PoolKind k) {
  switch (k) {
    case PoolKind::Pseudo2D: return st.pseudo_2d;
    case PoolKind::Pseudo3D: return st.pseudo_3d;
    case PoolKind::RealHrT2: return st.real_hrT2;
  }
  fail(ErrorKind::Configuration, "unknown pool");
}

}  // namespace

std::vector<const Case*> assemble_stage(PipelineState& state, const StageConfig& stage, const StageContext& ctx,
                                        std::vector<Case>& storage, StageRecord& record) {
  stage.validate();
  // Sized up front so pointers into storage stay valid.
  std::size_t total = 0;
  for (const PoolKind k : stage.recipe) {
    const auto& pool = pool_of(state, k);
    require(!pool.empty(), ErrorKind::Configuration,
            "stage " + std::to_string(stage.stage_id) + " recipe needs pool " + to_string(k) + ", which is empty");
    total += pool.size();
  }
  storage.clear();
  storage.reserve(total);
  std::vector<const Case*> list, pseudo;
  aug::AugmentConfig acfg = ctx.augment;
  if (!stage.vs_augment) acfg.vs_apply_prob = 0.0;
  for (const PoolKind k : stage.recipe) {
    const auto& pool = pool_of(state, k);
    if (k == PoolKind::RealHrT2) {
      for (const Case& c : pool) {
        Case l{c.id, c.volume, state.pseudo_labels.current(c.id).labels, c.tag};
        storage.push_back(std::move(l));
        list.push_back(&storage.back());
      }
      continue;
    }
    std::vector<const Case*> in;
    for (const Case& c : pool) in.push_back(&c);
    // The cochlea rule applies to every pseudo volume; the VS rule only when flagged.
    for (Case& c : aug::augment_pool(in, acfg)) {
      storage.push_back(std::move(c));
      list.push_back(&storage.back());
      pseudo.push_back(&storage.back());
    }
  }
  record.small_tumor_threshold = stage.small_tumor_threshold
                                     ? *stage.small_tumor_threshold
                                     : (pseudo.empty() ? 0 : small_tumor_threshold(pseudo, stage.small_tumor_percentile));
  if (stage.oversample) {
    auto r = oversample_small_tumors(list, stage.oversample_cap, record.small_tumor_threshold,
                                     [](const Case& c) { return c.tag.provenance == Provenance::Pseudo; });
    if (r.warning) record.warnings.push_back(*r.warning);
    list = std::move(r.cases);
  }
  return list;
}

void run_stage(PipelineState& state, const StageConfig& stage, const StageContext& ctx) {
  stage.validate();
  const int expected = static_cast<int>(state.ledger.size()) + 1;
  require(stage.stage_id == expected, ErrorKind::Precondition,
          "stage " + std::to_string(stage.stage_id) + " cannot run now; next stage is " + std::to_string(expected));
  const bool needs_real =
      std::find(stage.recipe.begin(), stage.recipe.end(), PoolKind::RealHrT2) != stage.recipe.end();
  if (needs_real) {
    require(stage.stage_id >= 2, ErrorKind::Precondition, "stage 1 cannot use real hrT2: no model to pseudo-label it");
    std::vector<const Case*> real;
    for (const Case& c : state.real_hrT2) real.push_back(&c);
    const int gen = stage.stage_id - 1;
    state.pseudo_labels.begin_refresh(gen);
    for (auto& [id, lm] : pseudo_label(state.stage_models(gen), real)) state.pseudo_labels.put(id, std::move(lm), gen);
  }
  StageRecord rec;
  rec.stage_id = stage.stage_id;
  std::vector<Case> storage;
  const auto list = assemble_stage(state, stage, ctx, storage, rec);
  for (const Case* c : list) rec.training_ids.push_back(c->id);
  seg::TrainConfig tcfg = ctx.train;
  tcfg.seed = stream_seed(ctx.train.seed, {std::uint64_t(stage.stage_id)});
  try {
    rec.models = seg::train_segmenter(list, tcfg).models;
  } catch (const Error& e) {
    rethrow_with_context(e, "stage " + std::to_string(stage.stage_id));
  }
  state.ledger.push_back(std::move(rec));
  if (stage.stage_id == 4) state.ensemble_registered = true;
}

}  // namespace udaseg::boot
