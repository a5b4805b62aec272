#include "udaseg/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <sstream>

#include "udaseg/fsutil.hpp"
#include "udaseg/imgops.hpp"

namespace udaseg {

namespace {

void note(const ProgressFn& p, const std::string& msg) {
  if (p) p(msg);
}

std::vector<const Case*> ptrs(const std::vector<Case>& v) {
  std::vector<const Case*> out;
  out.reserve(v.size());
  for (const Case& c : v) out.push_back(&c);
  return out;
}

struct EvalCase {
  const Case* c;
  seg::FeatureMap features;
};

metrics::MetricsReport score(const std::vector<const seg::SegmenterModel*>& models, const std::vector<EvalCase>& cases,
                             const EvaluationRegistry& eval, int stage) {
  std::vector<metrics::CaseMetrics> rows;
  for (const auto& e : cases) {
    const auto pred = seg::predict(models, e.features, e.c->volume.geometry());
    rows.push_back(metrics::evaluate_case(e.c->id, pred.labels, eval.lookup(e.c->id)));
  }
  return metrics::report(std::move(rows), stage);
}

metrics::MetricsReport subset(const metrics::MetricsReport& r, const std::vector<std::string>& ids) {
  std::vector<metrics::CaseMetrics> rows;
  for (const auto& c : r.cases)
    if (std::find(ids.begin(), ids.end(), c.case_id) != ids.end()) rows.push_back(c);
  return metrics::report(std::move(rows), r.stage);
}

void write_stage_artifacts(const std::filesystem::path& dir, const boot::StageRecord& rec,
                           const metrics::MetricsReport& rep) {
  std::filesystem::create_directories(dir);
  for (std::size_t k = 0; k < rec.models.size(); ++k)
    seg::save_model((dir / ("fold" + std::to_string(k) + ".udsm")).string(), rec.models[k]);
  std::string list;
  for (const auto& id : rec.training_ids) list += id + "\n";
  fsutil::write_atomic(dir / "training_list.txt", list);
  fsutil::write_atomic(dir / "metrics.tsv", rep.rows());
  std::string info = "stage: " + std::to_string(rec.stage_id) + "\n";
  info += "training_cases: " + std::to_string(rec.training_ids.size()) + "\n";
  info += "small_tumor_threshold: " + std::to_string(rec.small_tumor_threshold) + "\n";
  for (const auto& w : rec.warnings) info += "warning: " + w + "\n";
  fsutil::write_atomic(dir / "stage.txt", info);
}

}  // namespace

PreparedData prepare(const Dataset& raw, const PipelineConfig& cfg) {
  PreparedData out;
  // Atlases come from the first training case of each pool. For hrT2 the ROI
  // box needs annotations, which only the withheld registry has.
  for (const Site s : {Site::A, Site::B})
    for (const Modality m : {Modality::CeT1, Modality::HrT2}) {
      const auto pool = raw.pool(s, m);
      require(!pool.empty(), ErrorKind::Configuration,
              std::string("no training case for atlas ") + to_string(m) + "_" + to_string(s));
      Case ref = *pool.front();
      if (!ref.labels) ref.labels = raw.eval.lookup(ref.id);
      out.atlases.push_back(prep::build_atlas(ref, cfg.atlas_dilation));
    }
  for (const Case& c : raw.train) {
    auto p = prep::preprocess_case(c, out.atlases, cfg.target_spacing, cfg.registration);
    out.transforms[c.id] = p.transform;
    if (c.tag.modality == Modality::CeT1) {
      out.ceT1.push_back(std::move(p.c));
      continue;
    }
    const auto& atlas = prep::atlas_for(out.atlases, c.tag.site, c.tag.modality);
    out.eval.put(c.id, prep::preprocess_labels(raw.eval.lookup(c.id), p.transform, atlas, cfg.target_spacing));
    out.hrT2.push_back(std::move(p.c));
  }
  for (const Case& c : raw.validation) {
    auto p = prep::preprocess_case(c, out.atlases, cfg.target_spacing, cfg.registration);
    out.transforms[c.id] = p.transform;
    const auto& atlas = prep::atlas_for(out.atlases, c.tag.site, c.tag.modality);
    out.eval.put(c.id, prep::preprocess_labels(raw.eval.lookup(c.id), p.transform, atlas, cfg.target_spacing));
    out.validation.push_back(std::move(p.c));
  }
  return out;
}

metrics::MetricsReport evaluate_models(const std::vector<const seg::SegmenterModel*>& models,
                                       const std::vector<const Case*>& cases, const EvaluationRegistry& eval,
                                       int stage) {
  std::vector<EvalCase> ec;
  for (const Case* c : cases) ec.push_back({c, seg::compute_features(c->volume)});
  return score(models, ec, eval, stage);
}

std::string PipelineResult::metric_rows() const {
  std::ostringstream os;
  os << "report\tstage\tcase_id\tstructure\tdice\tassd_mm\n";
  auto emit = [&](const std::string& name, const metrics::MetricsReport& r) {
    std::istringstream is(r.rows());
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) os << name << '\t' << r.stage << '\t' << line << '\n';
  };
  for (const auto& r : stages) emit("validation", r);
  emit("validation", ensemble);
  return os.str();
}

PipelineResult run_pipeline(const PipelineConfig& cfg_in, const ProgressFn& progress) {
  PipelineConfig cfg = cfg_in;
  cfg.derive_seeds();
  cfg.validate();
  PipelineResult res;
  const std::filesystem::path root = cfg.output_root;

  note(progress, "phantom");
  const Dataset raw = phantom::generate_dataset(cfg.phantom);

  note(progress, "preprocess");
  PreparedData data;
  try {
    data = prepare(raw, cfg);
  } catch (const Error& e) {
    rethrow_with_context(e, "preprocess");
  }

  note(progress, "translators");
  const auto matrix = xlate::TranslationConfigMatrix::make(cfg.matrix);
  std::vector<xlate::WindowMode> modes;
  for (const auto& [m, w] : cfg.windows) modes.push_back(m);
  const auto ceT1 = ptrs(data.ceT1);
  const auto translators = xlate::train_matrix(ceT1, ptrs(data.hrT2), matrix, modes, cfg.translator);
  res.translators = static_cast<int>(matrix.entries.size());
  auto pseudo = xlate::generate_pseudo_pool(ceT1, translators, matrix, modes, cfg.windows);
  res.pseudo_cases = pseudo.size();

  boot::PipelineState& st = res.state;
  for (Case& c : pseudo) {
    if (c.tag.origin->mode == "2d")
      st.pseudo_2d.push_back(std::move(c));
    else
      st.pseudo_3d.push_back(std::move(c));
  }
  st.real_hrT2 = std::move(data.hrT2);

  // Validation features are computed once and shared by every report.
  std::vector<EvalCase> val;
  for (const Case& c : data.validation) val.push_back({&c, seg::compute_features(c.volume)});
  {
    std::vector<float> counts;
    for (const auto& e : val) counts.push_back(static_cast<float>(count_class(data.eval.lookup(e.c->id), label::kVs)));
    const double thr = percentile_of(counts, cfg.small_eval_percentile);
    for (const auto& e : val)
      if (count_class(data.eval.lookup(e.c->id), label::kVs) <= thr) res.small_ids.push_back(e.c->id);
  }

  const boot::StageContext ctx{cfg.train, cfg.augment};
  for (const auto& stage : cfg.stages) {
    note(progress, "stage " + std::to_string(stage.stage_id));
    boot::run_stage(st, stage, ctx);
    res.stages.push_back(score(st.stage_models(stage.stage_id), val, data.eval, stage.stage_id));
    res.small_stages.push_back(subset(res.stages.back(), res.small_ids));
    if (!root.empty())
      write_stage_artifacts(root / ("stage" + std::to_string(stage.stage_id)), st.ledger.back(), res.stages.back());
  }
  res.ensemble = score(st.ensemble_models(), val, data.eval, 0);
  res.small_ensemble = subset(res.ensemble, res.small_ids);

  if (!root.empty()) {
    std::filesystem::create_directories(root);
    fsutil::write_atomic(root / "metrics.tsv", res.metric_rows());
    std::vector<metrics::MetricsReport> all = res.stages;
    all.push_back(res.ensemble);
    fsutil::write_atomic(root / "table.txt",
                         metrics::format_table(all, {"stage 1", "stage 2", "stage 3", "stage 4", "ensemble 2+3+4"}));
  }
  return res;
}

}  // namespace udaseg
