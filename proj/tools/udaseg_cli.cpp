// udaseg command-line driver.
//
// Exit codes: 0 success, 1 usage error, 2 validation error (bad config or
// inputs, detected before any work starts), 3 runtime failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "udaseg/dataset.hpp"
#include "udaseg/fsutil.hpp"
#include "udaseg/pipeline.hpp"
#include "udaseg/volume_io.hpp"

using namespace udaseg;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0, kUsage = 1, kInvalid = 2, kRuntime = 3;

// Raised for anything wrong with the request itself: config, flags, inputs.
struct Invalid : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <class F>
auto validated(F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    throw Invalid(e.what());
  }
}

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  std::string out;
  bool quiet = false;
};

PipelineConfig load_config(const Common& c) {
  return validated([&] {
    PipelineConfig cfg = c.config_path.empty() ? PipelineConfig{} : load_pipeline_config(c.config_path);
    if (c.seed) cfg.seed = *c.seed;
    if (c.jobs < 1) throw Invalid("--jobs must be >= 1");
    cfg.derive_seeds();
    cfg.validate();
    return cfg;
  });
}

// --out, then the config's output_root, then $UDASEG_OUT/<default_leaf>.
fs::path output_dir(const Common& c, const PipelineConfig& cfg, const std::string& leaf) {
  if (!c.out.empty()) return c.out;
  if (!cfg.output_root.empty()) return fs::path(cfg.output_root) / leaf;
  const char* env = std::getenv("UDASEG_OUT");
  return fs::path(env && *env ? env : "udaseg_out") / leaf;
}

void require_dataset(const std::string& flag, const std::string& dir) {
  if (dir.empty()) throw Invalid(flag + " is required");
  if (!fs::exists(fs::path(dir) / store::kManifest))
    throw Invalid(flag + ": '" + dir + "' has no " + store::kManifest);
}

Dataset load(const std::string& dir) {
  return validated([&] { return store::load_dataset(dir); });
}

std::vector<xlate::WindowMode> parse_modes(const std::string& s) {
  std::vector<xlate::WindowMode> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    out.push_back(validated([&] { return xlate::parse_window_mode(item); }));
  if (out.empty()) throw Invalid("--modes: expected 2d, 3d or 2d,3d");
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

// key: value lines describing how an output directory was produced.
void write_manifest(const fs::path& dir, const std::string& command, const Common& c, const PipelineConfig& cfg,
                    const std::vector<std::pair<std::string, std::string>>& extra = {}) {
  const std::string cfg_json = to_json(cfg);
  std::ostringstream m;
  m << "command: " << command << "\n";
  m << "version: " << UDASEG_VERSION << "\n";
  m << "config_file: " << (c.config_path.empty() ? "(defaults)" : c.config_path) << "\n";
  m << "config_hash: fnv1a64:" << fsutil::hex64(fsutil::fnv1a64(cfg_json)) << "\n";
  m << "seed: " << cfg.seed << "\n";
  m << "seed_phantom: " << cfg.phantom.seed << "\n";
  m << "seed_translator: " << cfg.translator.seed << "\n";
  m << "seed_augment: " << cfg.augment.seed << "\n";
  m << "seed_segmenter: " << cfg.train.seed << "\n";
  m << "jobs: " << c.jobs << "\n";
  for (const auto& [k, v] : extra) m << k << ": " << v << "\n";
  fs::create_directories(dir);
  fsutil::write_atomic(dir / "manifest.txt", m.str());
  fsutil::write_atomic(dir / "config.json", cfg_json);
}

void say(const Common& c, const std::string& msg) {
  if (!c.quiet) std::cerr << msg << "\n";
}

// ---------------------------------------------------------------------------

int cmd_phantom(const Common& c) {
  const auto cfg = load_config(c);
  const auto out = output_dir(c, cfg, "phantom");
  const Dataset ds = phantom::generate_dataset(cfg.phantom);
  store::save_dataset(ds, out);
  write_manifest(out, "phantom", c, cfg,
                 {{"train_cases", std::to_string(ds.train.size())},
                  {"validation_cases", std::to_string(ds.validation.size())}});
  say(c, "phantom: " + std::to_string(ds.train.size() + ds.validation.size()) + " cases -> " + out.string());
  return kOk;
}

int cmd_preprocess(const Common& c, const std::string& data) {
  const auto cfg = load_config(c);
  require_dataset("--data", data);
  const auto out = output_dir(c, cfg, "preprocessed");
  const Dataset raw = load(data);
  PreparedData p = prepare(raw, cfg);
  Dataset ds;
  for (auto* pool : {&p.ceT1, &p.hrT2})
    for (auto& cs : *pool) ds.train.push_back(std::move(cs));
  ds.validation = std::move(p.validation);
  ds.eval = std::move(p.eval);
  store::save_dataset(ds, out);
  prep::save_atlases(p.atlases, (out / "atlases").string());
  fs::create_directories(out / "transforms");
  for (const auto& [id, t] : p.transforms) prep::save_transform((out / "transforms" / (id + ".txt")).string(), t);
  write_manifest(out, "preprocess", c, cfg, {{"input", data}});
  say(c, "preprocess: " + std::to_string(p.transforms.size()) + " cases -> " + out.string());
  return kOk;
}

std::string translator_file(int model_id, xlate::WindowMode mode) {
  return "m" + std::to_string(model_id) + "_" + xlate::to_string(mode) + ".json";
}

int cmd_translate_train(const Common& c, const std::string& data, const std::string& matrix_s,
                        const std::string& modes_s) {
  auto cfg = load_config(c);
  require_dataset("--data", data);
  if (!matrix_s.empty()) cfg.matrix = validated([&] { return xlate::parse_matrix_mode(matrix_s); });
  const auto modes = parse_modes(modes_s);
  const auto out = output_dir(c, cfg, "translators");
  const Dataset ds = load(data);
  std::vector<const Case*> ceT1, hrT2;
  for (const Case& cs : ds.train) (cs.tag.modality == Modality::CeT1 ? ceT1 : hrT2).push_back(&cs);
  if (ceT1.empty() || hrT2.empty()) throw Invalid("--data: needs ceT1 and hrT2 training cases");
  const auto matrix = xlate::TranslationConfigMatrix::make(cfg.matrix);
  const auto set = xlate::train_matrix(ceT1, hrT2, matrix, modes, cfg.translator);
  fs::create_directories(out);
  for (const auto& [key, t] : set) xlate::save_translator((out / translator_file(key.first, key.second)).string(), t);
  write_manifest(out, "translate-train", c, cfg,
                 {{"input", data}, {"matrix", xlate::to_string(cfg.matrix)}, {"modes", modes_s},
                  {"translators", std::to_string(set.size())}});
  say(c, "translate-train: " + std::to_string(set.size()) + " translators -> " + out.string());
  return kOk;
}

int cmd_translate_apply(const Common& c, const std::string& data, const std::string& tdir,
                        const std::string& matrix_s, const std::string& modes_s) {
  auto cfg = load_config(c);
  require_dataset("--data", data);
  if (tdir.empty() || !fs::is_directory(tdir)) throw Invalid("--translators: '" + tdir + "' is not a directory");
  if (!matrix_s.empty()) cfg.matrix = validated([&] { return xlate::parse_matrix_mode(matrix_s); });
  const auto modes = parse_modes(modes_s);
  const auto matrix = xlate::TranslationConfigMatrix::make(cfg.matrix);
  xlate::TranslatorSet set;
  for (const auto& e : matrix.entries)
    for (const auto m : modes) {
      const auto path = fs::path(tdir) / translator_file(e.model_id, m);
      if (!fs::exists(path)) throw Invalid("--translators: missing " + path.string());
      set.emplace(std::make_pair(e.model_id, m), validated([&] { return xlate::load_translator(path.string()); }));
    }
  for (const auto m : modes)
    if (!cfg.windows.count(m)) throw Invalid(std::string("config: no window settings for mode ") + xlate::to_string(m));
  const auto out = output_dir(c, cfg, "pseudo");
  const Dataset ds = load(data);
  std::vector<const Case*> ceT1;
  for (const Case& cs : ds.train)
    if (cs.tag.modality == Modality::CeT1) ceT1.push_back(&cs);
  if (ceT1.empty()) throw Invalid("--data: no ceT1 training cases");
  Dataset pool;
  pool.train = xlate::generate_pseudo_pool(ceT1, set, matrix, modes, cfg.windows);
  store::save_dataset(pool, out);
  write_manifest(out, "translate-apply", c, cfg, {{"input", data}, {"translators", tdir}});
  say(c, "translate-apply: " + std::to_string(pool.train.size()) + " pseudo cases -> " + out.string());
  return kOk;
}

int cmd_augment(const Common& c, const std::string& data, std::optional<double> vs_prob) {
  auto cfg = load_config(c);
  require_dataset("--data", data);
  if (vs_prob) {
    cfg.augment.vs_apply_prob = *vs_prob;
    validated([&] {
      cfg.augment.validate();
      return 0;
    });
  }
  const auto out = output_dir(c, cfg, "augmented");
  const Dataset ds = load(data);
  std::vector<const Case*> in;
  for (const Case& cs : ds.train) in.push_back(&cs);
  if (in.empty()) throw Invalid("--data: no training cases");
  std::vector<aug::AuditEntry> audit;
  Dataset res;
  res.train = aug::augment_pool(in, cfg.augment, &audit);
  store::save_dataset(res, out);
  fsutil::write_atomic(out / "audit.tsv", aug::format_audit(audit));
  write_manifest(out, "augment", c, cfg, {{"input", data}});
  say(c, "augment: " + std::to_string(res.train.size()) + " cases -> " + out.string());
  return kOk;
}

int cmd_segment_train(const Common& c, const std::string& data_list) {
  const auto cfg = load_config(c);
  const auto dirs = split_list(data_list);
  if (dirs.empty()) throw Invalid("--data is required");
  std::vector<Dataset> sets;
  for (const auto& d : dirs) {
    require_dataset("--data", d);
    sets.push_back(load(d));
  }
  std::vector<const Case*> cases;
  for (const auto& ds : sets)
    for (const Case& cs : ds.train) {
      if (!cs.labels) throw Invalid("--data: training case " + cs.id + " has no labels");
      cases.push_back(&cs);
    }
  const auto out = output_dir(c, cfg, "models");
  validated([&] {
    std::vector<std::string> ids;
    for (const Case* cs : cases) ids.push_back(cs->id);
    return seg::assign_folds(ids, cfg.train.folds, cfg.train.seed);  // fold-count check up front
  });
  const auto trained = seg::train_segmenter(cases, cfg.train);
  fs::create_directories(out);
  for (std::size_t k = 0; k < trained.models.size(); ++k)
    seg::save_model((out / ("fold" + std::to_string(k) + ".udsm")).string(), trained.models[k]);
  write_manifest(out, "segment-train", c, cfg,
                 {{"input", data_list}, {"cases", std::to_string(cases.size())},
                  {"folds", std::to_string(trained.models.size())}});
  say(c, "segment-train: " + std::to_string(trained.models.size()) + " models -> " + out.string());
  return kOk;
}

int cmd_segment_predict(const Common& c, const std::string& models_s, const std::string& data) {
  const auto cfg = load_config(c);
  require_dataset("--data", data);
  const auto paths = split_list(models_s);
  if (paths.empty()) throw Invalid("--models is required");
  std::vector<seg::SegmenterModel> models;
  for (const auto& p : paths) {
    if (!fs::exists(p)) throw Invalid("--models: no such file '" + p + "'");
    models.push_back(validated([&] { return seg::load_model(p); }));
  }
  std::vector<const seg::SegmenterModel*> mp;
  for (const auto& m : models) mp.push_back(&m);
  const auto out = output_dir(c, cfg, "predictions");
  Dataset ds = load(data);
  ds.eval = EvaluationRegistry{};  // predictions never carry withheld labels along
  for (auto* split : {&ds.train, &ds.validation})
    for (Case& cs : *split) cs.labels = seg::predict(mp, cs.volume).labels;
  store::save_dataset(ds, out);
  write_manifest(out, "segment-predict", c, cfg, {{"input", data}, {"models", models_s}});
  say(c, "segment-predict: " + std::to_string(ds.train.size() + ds.validation.size()) + " cases -> " + out.string());
  return kOk;
}

int cmd_evaluate(const Common& c, const std::string& pred, const std::string& truth, int stage) {
  const auto cfg = load_config(c);
  require_dataset("--pred", pred);
  require_dataset("--truth", truth);
  const Dataset p = load(pred);
  const Dataset t = load(truth);
  std::vector<metrics::CaseMetrics> rows;
  for (const auto* split : {&p.train, &p.validation})
    for (const Case& cs : *split) {
      if (!t.eval.contains(cs.id)) continue;
      if (!cs.labels) throw Invalid("--pred: case " + cs.id + " has no predicted labels");
      rows.push_back(validated([&] { return metrics::evaluate_case(cs.id, *cs.labels, t.eval.lookup(cs.id)); }));
    }
  if (rows.empty()) throw Invalid("--truth: no withheld labels match the predicted cases");
  const auto rep = metrics::report(std::move(rows), stage);
  const auto out = output_dir(c, cfg, "evaluation");
  fs::create_directories(out);
  fsutil::write_atomic(out / "metrics.tsv", rep.rows());
  const auto table = metrics::format_table({rep}, {"stage " + std::to_string(stage)});
  fsutil::write_atomic(out / "table.txt", table);
  write_manifest(out, "evaluate", c, cfg, {{"pred", pred}, {"truth", truth}});
  std::cout << table;
  return kOk;
}

int cmd_run_all(const Common& c) {
  auto cfg = load_config(c);
  fs::path out = c.out;
  if (out.empty()) out = cfg.output_root;
  if (out.empty()) {
    const char* env = std::getenv("UDASEG_OUT");
    out = env && *env ? env : "udaseg_out";
  }
  cfg.output_root = out.string();
  validated([&] {
    cfg.validate();
    return 0;
  });
  write_manifest(out, "run-all", c, cfg);
  const auto res = run_pipeline(cfg, [&](const std::string& s) { say(c, "run-all: " + s); });
  std::vector<metrics::MetricsReport> all = res.stages;
  all.push_back(res.ensemble);
  std::cout << metrics::format_table(all, {"stage 1", "stage 2", "stage 3", "stage 4", "ensemble 2+3+4"});
  return kOk;
}

// Closest option name for an unrecognised flag, if one is near enough.
std::string suggest(const CLI::App* app, const std::string& bad) {
  std::string flag = bad.substr(0, bad.find('='));
  while (!flag.empty() && flag.front() == '-') flag.erase(0, 1);
  std::string best;
  std::size_t best_d = std::max<std::size_t>(2, flag.size() / 3) + 1;
  for (const auto* opt : app->get_options()) {
    for (const auto& name : opt->get_lnames()) {
      std::vector<std::size_t> row(name.size() + 1);
      for (std::size_t j = 0; j <= name.size(); ++j) row[j] = j;
      for (std::size_t i = 1; i <= flag.size(); ++i) {
        std::size_t diag = row[0];
        row[0] = i;
        for (std::size_t j = 1; j <= name.size(); ++j) {
          const std::size_t up = row[j];
          row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (flag[i - 1] != name[j - 1])});
          diag = up;
        }
      }
      if (row[name.size()] < best_d) best_d = row[name.size()], best = "--" + name;
    }
  }
  return best;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"udaseg: cross-modality VS/cochlea segmentation pipeline on synthetic phantoms"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(UDASEG_VERSION));
  Common common;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "Pipeline config file (JSON)");
    sub->add_option("--seed", common.seed, "Master seed, overrides the config");
    sub->add_option("--jobs", common.jobs, "Worker bound for per-case/per-fold work");
    sub->add_option("--out", common.out, "Output directory (default: $UDASEG_OUT/<step>)");
    sub->add_flag("--quiet", common.quiet, "No progress output");
  };

  std::string data, translators, matrix, modes = "3d", models, pred, truth;
  std::optional<double> vs_prob;
  int stage = 0;

  auto* phantom = app.add_subcommand("phantom", "Generate the synthetic two-site dataset");
  auto* preprocess = app.add_subcommand("preprocess", "Atlas registration, ROI crop and resampling");
  auto* ttrain = app.add_subcommand("translate-train", "Train the cross-site translator matrix");
  auto* tapply = app.add_subcommand("translate-apply", "Generate pseudo hrT2 cases from ceT1");
  auto* augment = app.add_subcommand("augment", "Apply the VS and cochlea augmentation rules");
  auto* strain = app.add_subcommand("segment-train", "Train the k-fold segmenter");
  auto* spredict = app.add_subcommand("segment-predict", "Predict label maps with a model ensemble");
  auto* evaluate = app.add_subcommand("evaluate", "Dice/ASSD against withheld labels");
  auto* runall = app.add_subcommand("run-all", "Full pipeline: phantom to stage 4 and the ensemble");
  for (auto* s : {phantom, preprocess, ttrain, tapply, augment, strain, spredict, evaluate, runall}) add_common(s);

  for (auto* s : {preprocess, ttrain, tapply, augment, spredict}) s->add_option("--data", data, "Input dataset directory");
  strain->add_option("--data", data, "Comma-separated labelled dataset directories");
  for (auto* s : {ttrain, tapply}) {
    s->add_option("--matrix", matrix, "full | within-site (default from config)");
    s->add_option("--modes", modes, "Window modes: 2d, 3d or 2d,3d")->capture_default_str();
  }
  tapply->add_option("--translators", translators, "Directory written by translate-train");
  augment->add_option("--vs-prob", vs_prob, "Override the VS rule probability");
  spredict->add_option("--models", models, "Comma-separated model files");
  evaluate->add_option("--pred", pred, "Dataset written by segment-predict");
  evaluate->add_option("--truth", truth, "Preprocessed dataset holding withheld labels");
  evaluate->add_option("--stage", stage, "Stage id recorded in the report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (dynamic_cast<const CLI::ExtrasError*>(&e)) {
      const CLI::App* ctx = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
      for (const auto& extra : ctx->remaining()) {
        const auto s = suggest(ctx, extra);
        if (!s.empty()) std::cerr << "  unknown argument '" << extra << "', did you mean '" << s << "'?\n";
      }
    }
    std::cerr << "run with --help for usage\n";
    return kUsage;
  }

  try {
    if (phantom->parsed()) return cmd_phantom(common);
    if (preprocess->parsed()) return cmd_preprocess(common, data);
    if (ttrain->parsed()) return cmd_translate_train(common, data, matrix, modes);
    if (tapply->parsed()) return cmd_translate_apply(common, data, translators, matrix, modes);
    if (augment->parsed()) return cmd_augment(common, data, vs_prob);
    if (strain->parsed()) return cmd_segment_train(common, data);
    if (spredict->parsed()) return cmd_segment_predict(common, models, data);
    if (evaluate->parsed()) return cmd_evaluate(common, pred, truth, stage);
    if (runall->parsed()) return cmd_run_all(common);
  } catch (const Invalid& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
