#include <algorithm>
#include <filesystem>
#include <set>

#include <json.hpp>

#include "udaseg/fsutil.hpp"
#include "udaseg/pipeline.hpp"

namespace udaseg {

using nlohmann::json;

namespace {

[[noreturn]] void bad(const std::string& path, const std::string& what) {
  fail(ErrorKind::Configuration, "config: " + path + ": " + what);
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] != b[j - 1])});
      diag = up;
    }
  }
  return row[b.size()];
}

// Object reader that remembers which keys were consumed, so leftovers can be
// reported as unknown.
class Obj {
 public:
  Obj(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) bad(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string sub(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  template <class F>
  void opt(const std::string& key, F&& f) {
    known_.push_back(key);
    const auto it = j_.find(key);
    if (it != j_.end()) {
      const std::string q = sub(key);
      f(*it, q);
    }
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (std::find(known_.begin(), known_.end(), k) != known_.end()) continue;
      std::string msg = "unknown key";
      std::size_t best = 3;
      std::string guess;
      for (const auto& cand : known_) {
        const auto d = edit_distance(k, cand);
        if (d < best) best = d, guess = cand;
      }
      if (!guess.empty()) msg += " (did you mean '" + guess + "'?)";
      bad(sub(k), msg);
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::vector<std::string> known_;
};

double as_double(const json& j, const std::string& p) {
  if (!j.is_number()) bad(p, "expected a number");
  return j.get<double>();
}

std::int64_t as_int(const json& j, const std::string& p) {
  if (!j.is_number_integer()) bad(p, "expected an integer");
  return j.get<std::int64_t>();
}

int as_int32(const json& j, const std::string& p) {
  const auto v = as_int(j, p);
  if (v < INT32_MIN || v > INT32_MAX) bad(p, "integer out of range");
  return static_cast<int>(v);
}

std::uint64_t as_u64(const json& j, const std::string& p) {
  if (!j.is_number_unsigned()) bad(p, "expected a non-negative integer");
  return j.get<std::uint64_t>();
}

bool as_bool(const json& j, const std::string& p) {
  if (!j.is_boolean()) bad(p, "expected true or false");
  return j.get<bool>();
}

std::string as_string(const json& j, const std::string& p) {
  if (!j.is_string()) bad(p, "expected a string");
  return j.get<std::string>();
}

const json& as_array(const json& j, const std::string& p, std::size_t n) {
  if (!j.is_array() || j.size() != n) bad(p, "expected an array of " + std::to_string(n) + " values");
  return j;
}

Vec3 as_vec3(const json& j, const std::string& p) {
  as_array(j, p, 3);
  Vec3 v;
  for (int a = 0; a < 3; ++a) v[a] = as_double(j[a], p + "[" + std::to_string(a) + "]");
  return v;
}

std::array<std::int64_t, 3> as_int3(const json& j, const std::string& p) {
  as_array(j, p, 3);
  std::array<std::int64_t, 3> v{};
  for (int a = 0; a < 3; ++a) v[a] = as_int(j[a], p + "[" + std::to_string(a) + "]");
  return v;
}

// Enum parsers throw InvalidArgument; re-raise with the field path.
template <class F>
auto parse_enum(const json& j, const std::string& p, F&& parse) {
  const auto s = as_string(j, p);
  try {
    return parse(s);
  } catch (const Error& e) {
    bad(p, e.what());
  }
}

void read_phantom(const json& j, const std::string& p, phantom::PhantomConfig& c) {
  Obj o(j, p);
  o.opt("cases_per_site_per_modality", [&](auto& v, auto& q) { c.cases_per_site_per_modality = as_int32(v, q); });
  o.opt("validation_cases_per_site", [&](auto& v, auto& q) { c.validation_cases_per_site = as_int32(v, q); });
  o.opt("dims", [&](auto& v, auto& q) {
    const auto d = as_int3(v, q);
    c.dims = Dims{d[0], d[1], d[2]};
  });
  o.opt("spacing", [&](auto& v, auto& q) { c.spacing = as_vec3(v, q); });
  o.opt("tumor_size_range", [&](auto& v, auto& q) {
    as_array(v, q, 2);
    c.tumor_size_range = {as_int32(v[0], q + "[0]"), as_int32(v[1], q + "[1]")};
  });
  o.opt("small_tumor_share", [&](auto& v, auto& q) { c.small_tumor_share = as_double(v, q); });
  o.opt("site_contrast", [&](auto& v, auto& q) {
    as_array(v, q, 2);
    for (int s = 0; s < 2; ++s) {
      Obj sc(v[s], q + "[" + std::to_string(s) + "]");
      sc.opt("gain", [&](auto& x, auto& r) { c.site_contrast[s].gain = as_double(x, r); });
      sc.opt("bias", [&](auto& x, auto& r) { c.site_contrast[s].bias = as_double(x, r); });
      sc.opt("gamma", [&](auto& x, auto& r) { c.site_contrast[s].gamma = as_double(x, r); });
      sc.finish();
    }
  });
  o.opt("noise_sigma", [&](auto& v, auto& q) { c.noise_sigma = as_double(v, q); });
  o.opt("max_pose_shift", [&](auto& v, auto& q) { c.max_pose_shift = as_int32(v, q); });
  o.finish();
}

void read_registration(const json& j, const std::string& p, prep::RegistrationConfig& c) {
  Obj o(j, p);
  o.opt("levels", [&](auto& v, auto& q) { c.levels = as_int32(v, q); });
  o.opt("iters", [&](auto& v, auto& q) { c.iters = as_int32(v, q); });
  o.opt("step", [&](auto& v, auto& q) { c.step = as_double(v, q); });
  o.opt("min_step", [&](auto& v, auto& q) { c.min_step = as_double(v, q); });
  o.opt("patience", [&](auto& v, auto& q) { c.patience = as_int32(v, q); });
  o.opt("min_overlap", [&](auto& v, auto& q) { c.min_overlap = as_double(v, q); });
  o.opt("fine_stride", [&](auto& v, auto& q) { c.fine_stride = as_int32(v, q); });
  o.finish();
}

void read_translator(const json& j, const std::string& p, xlate::TrainConfig& c) {
  Obj o(j, p);
  o.opt("knots", [&](auto& v, auto& q) { c.knots = as_int32(v, q); });
  o.opt("iters", [&](auto& v, auto& q) { c.iters = as_int32(v, q); });
  o.opt("cycle_weight", [&](auto& v, auto& q) { c.cycle_weight = as_double(v, q); });
  o.opt("lr", [&](auto& v, auto& q) { c.lr = as_double(v, q); });
  o.opt("quantiles", [&](auto& v, auto& q) { c.quantiles = as_int32(v, q); });
  o.opt("patches_per_case", [&](auto& v, auto& q) { c.patches_per_case = as_int32(v, q); });
  o.opt("patch_2d", [&](auto& v, auto& q) { c.patch_2d = as_int3(v, q); });
  o.opt("patch_3d", [&](auto& v, auto& q) { c.patch_3d = as_int3(v, q); });
  o.finish();
}

void read_augment(const json& j, const std::string& p, aug::AugmentConfig& c) {
  Obj o(j, p);
  o.opt("vs_attenuation", [&](auto& v, auto& q) { c.vs_attenuation = as_double(v, q); });
  o.opt("vs_apply_prob", [&](auto& v, auto& q) { c.vs_apply_prob = as_double(v, q); });
  o.opt("cochlea_lo_pct", [&](auto& v, auto& q) { c.cochlea_lo_pct = as_double(v, q); });
  o.opt("cochlea_hi_pct", [&](auto& v, auto& q) { c.cochlea_hi_pct = as_double(v, q); });
  o.opt("smooth_sigma", [&](auto& v, auto& q) { c.smooth_sigma = as_double(v, q); });
  o.opt("cochlea_per_voxel", [&](auto& v, auto& q) { c.cochlea_per_voxel = as_bool(v, q); });
  o.opt("order", [&](auto& v, auto& q) { c.order = parse_enum(v, q, aug::parse_rule_order); });
  o.finish();
}

void read_train(const json& j, const std::string& p, seg::TrainConfig& c) {
  Obj o(j, p);
  o.opt("lr0", [&](auto& v, auto& q) { c.lr0 = as_double(v, q); });
  o.opt("epochs", [&](auto& v, auto& q) { c.epochs = as_int32(v, q); });
  o.opt("poly_exponent", [&](auto& v, auto& q) { c.poly_exponent = as_double(v, q); });
  o.opt("momentum", [&](auto& v, auto& q) { c.momentum = as_double(v, q); });
  o.opt("batch_voxels", [&](auto& v, auto& q) { c.batch_voxels = as_int32(v, q); });
  o.opt("folds", [&](auto& v, auto& q) { c.folds = as_int32(v, q); });
  o.opt("hidden", [&](auto& v, auto& q) { c.hidden = as_int32(v, q); });
  o.opt("class_ratio", [&](auto& v, auto& q) {
    const auto r = as_vec3(v, q);
    c.class_ratio = {r[0], r[1], r[2]};
  });
  o.opt("ratio_jitter", [&](auto& v, auto& q) { c.ratio_jitter = as_double(v, q); });
  o.finish();
}

void read_stage(const json& j, const std::string& p, boot::StageConfig& c) {
  Obj o(j, p);
  o.opt("stage_id", [&](auto& v, auto& q) { c.stage_id = as_int32(v, q); });
  o.opt("recipe", [&](auto& v, auto& q) {
    if (!v.is_array()) bad(q, "expected an array of pool names");
    c.recipe.clear();
    for (std::size_t i = 0; i < v.size(); ++i)
      c.recipe.push_back(parse_enum(v[i], q + "[" + std::to_string(i) + "]", boot::parse_pool_kind));
  });
  o.opt("vs_augment", [&](auto& v, auto& q) { c.vs_augment = as_bool(v, q); });
  o.opt("oversample", [&](auto& v, auto& q) { c.oversample = as_bool(v, q); });
  o.opt("oversample_cap", [&](auto& v, auto& q) { c.oversample_cap = as_int32(v, q); });
  o.opt("small_tumor_threshold", [&](auto& v, auto& q) {
    if (v.is_null())
      c.small_tumor_threshold.reset();
    else
      c.small_tumor_threshold = as_int(v, q);
  });
  o.opt("small_tumor_percentile", [&](auto& v, auto& q) { c.small_tumor_percentile = as_double(v, q); });
  o.finish();
}

// Runs a component validator and prefixes its message with the section path.
template <class F>
void check_section(const std::string& path, F&& f) {
  try {
    f();
  } catch (const Error& e) {
    bad(path, e.what());
  }
}

}  // namespace

void PipelineConfig::derive_seeds() {
  phantom.seed = seed;
  translator.seed = stream_seed(seed, {hash_string("translator")});
  augment.seed = stream_seed(seed, {hash_string("augment")});
  train.seed = stream_seed(seed, {hash_string("segmenter")});
}

void PipelineConfig::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (!(phantom.spacing[a] > 0.0)) bad("phantom.spacing[" + std::to_string(a) + "]", "must be > 0");
    if (!(target_spacing[a] > 0.0)) bad("target_spacing[" + std::to_string(a) + "]", "must be > 0");
  }
  if (atlas_dilation < 0) bad("atlas_dilation", "must be >= 0");
  if (!(small_eval_percentile >= 0.0 && small_eval_percentile <= 100.0))
    bad("small_eval_percentile", "must be in [0, 100]");
  check_section("phantom", [&] { phantom.validate(); });
  check_section("registration", [&] { registration.validate(); });
  check_section("translator", [&] { translator.validate(); });
  check_section("augment", [&] { augment.validate(); });
  check_section("train", [&] { train.validate(); });
  if (windows.empty()) bad("windows", "at least one window mode is required");
  for (const auto& [mode, w] : windows)
    check_section(std::string("windows.") + xlate::to_string(mode), [&, m = mode, &wc = w] { wc.validate(m); });
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const std::string p = "stages[" + std::to_string(i) + "]";
    const auto& s = stages[i];
    if (s.stage_id != static_cast<int>(i) + 1) bad(p + ".stage_id", "must be " + std::to_string(i + 1));
    check_section(p, [&] { s.validate(); });
    std::set<boot::PoolKind> seen;
    for (const auto k : s.recipe) {
      if (!seen.insert(k).second) bad(p + ".recipe", std::string("pool ") + boot::to_string(k) + " listed twice");
      if (k == boot::PoolKind::RealHrT2 && s.stage_id == 1)
        bad(p + ".recipe", "stage 1 cannot use real_hrT2 (no earlier model to pseudo-label it)");
      const auto mode = k == boot::PoolKind::Pseudo2D ? xlate::WindowMode::TwoD : xlate::WindowMode::ThreeD;
      if (k != boot::PoolKind::RealHrT2 && !windows.count(mode))
        bad(p + ".recipe", std::string("pool ") + boot::to_string(k) + " needs windows." + xlate::to_string(mode));
    }
  }
  if (!output_root.empty()) {
    const std::filesystem::path out(output_root);
    if (std::filesystem::exists(out) && !std::filesystem::is_directory(out))
      bad("output_root", "'" + output_root + "' exists and is not a directory");
  }
}

PipelineConfig parse_pipeline_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("config: ") + e.what(), e.byte);
  }
  PipelineConfig c;
  Obj o(j, "");
  o.opt("seed", [&](auto& v, auto& q) { c.seed = as_u64(v, q); });
  o.opt("phantom", [&](auto& v, auto& q) { read_phantom(v, q, c.phantom); });
  o.opt("atlas_dilation", [&](auto& v, auto& q) { c.atlas_dilation = as_int32(v, q); });
  o.opt("target_spacing", [&](auto& v, auto& q) { c.target_spacing = as_vec3(v, q); });
  o.opt("registration", [&](auto& v, auto& q) { read_registration(v, q, c.registration); });
  o.opt("matrix", [&](auto& v, auto& q) { c.matrix = parse_enum(v, q, xlate::parse_matrix_mode); });
  o.opt("translator", [&](auto& v, auto& q) { read_translator(v, q, c.translator); });
  o.opt("windows", [&](auto& v, auto& q) {
    Obj w(v, q);
    for (const auto mode : {xlate::WindowMode::TwoD, xlate::WindowMode::ThreeD}) {
      w.opt(xlate::to_string(mode), [&](auto& x, auto& r) {
        if (x.is_null()) {
          c.windows.erase(mode);
          return;
        }
        auto& wc = c.windows[mode];
        Obj wo(x, r);
        wo.opt("patch", [&](auto& y, auto& s) { wc.patch = as_int3(y, s); });
        wo.opt("overlap_ratio", [&](auto& y, auto& s) { wc.overlap_ratio = as_double(y, s); });
        wo.finish();
      });
    }
    w.finish();
  });
  o.opt("augment", [&](auto& v, auto& q) { read_augment(v, q, c.augment); });
  o.opt("train", [&](auto& v, auto& q) { read_train(v, q, c.train); });
  o.opt("stages", [&](auto& v, auto& q) {
    as_array(v, q, 4);
    for (int i = 0; i < 4; ++i) read_stage(v[i], q + "[" + std::to_string(i) + "]", c.stages[i]);
  });
  o.opt("small_eval_percentile", [&](auto& v, auto& q) { c.small_eval_percentile = as_double(v, q); });
  o.opt("output_root", [&](auto& v, auto& q) { c.output_root = as_string(v, q); });
  o.finish();
  return c;
}

PipelineConfig load_pipeline_config(const std::string& path) {
  std::string text;
  try {
    text = fsutil::read_file(path);
  } catch (const Error& e) {
    fail(ErrorKind::Configuration, "config: cannot read '" + path + "': " + e.what());
  }
  return parse_pipeline_config(text);
}

std::string to_json(const PipelineConfig& c) {
  json j;
  j["seed"] = c.seed;
  const auto& ph = c.phantom;
  j["phantom"] = {{"cases_per_site_per_modality", ph.cases_per_site_per_modality},
                  {"validation_cases_per_site", ph.validation_cases_per_site},
                  {"dims", {ph.dims[0], ph.dims[1], ph.dims[2]}},
                  {"spacing", {ph.spacing[0], ph.spacing[1], ph.spacing[2]}},
                  {"tumor_size_range", {ph.tumor_size_range[0], ph.tumor_size_range[1]}},
                  {"small_tumor_share", ph.small_tumor_share},
                  {"noise_sigma", ph.noise_sigma},
                  {"max_pose_shift", ph.max_pose_shift}};
  for (const auto& sc : ph.site_contrast)
    j["phantom"]["site_contrast"].push_back({{"gain", sc.gain}, {"bias", sc.bias}, {"gamma", sc.gamma}});
  j["atlas_dilation"] = c.atlas_dilation;
  j["target_spacing"] = {c.target_spacing[0], c.target_spacing[1], c.target_spacing[2]};
  const auto& r = c.registration;
  j["registration"] = {{"levels", r.levels},     {"iters", r.iters},           {"step", r.step},
                       {"min_step", r.min_step}, {"patience", r.patience},     {"min_overlap", r.min_overlap},
                       {"fine_stride", r.fine_stride}};
  j["matrix"] = xlate::to_string(c.matrix);
  const auto& t = c.translator;
  j["translator"] = {{"knots", t.knots},         {"iters", t.iters},
                     {"cycle_weight", t.cycle_weight}, {"lr", t.lr},
                     {"quantiles", t.quantiles}, {"patches_per_case", t.patches_per_case},
                     {"patch_2d", t.patch_2d},   {"patch_3d", t.patch_3d}};
  j["windows"] = json::object();
  for (const auto& [mode, w] : c.windows)
    j["windows"][xlate::to_string(mode)] = {{"patch", w.patch}, {"overlap_ratio", w.overlap_ratio}};
  const auto& a = c.augment;
  j["augment"] = {{"vs_attenuation", a.vs_attenuation},       {"vs_apply_prob", a.vs_apply_prob},
                  {"cochlea_lo_pct", a.cochlea_lo_pct},       {"cochlea_hi_pct", a.cochlea_hi_pct},
                  {"smooth_sigma", a.smooth_sigma},           {"cochlea_per_voxel", a.cochlea_per_voxel},
                  {"order", aug::to_string(a.order)}};
  const auto& s = c.train;
  j["train"] = {{"lr0", s.lr0},
                {"epochs", s.epochs},
                {"poly_exponent", s.poly_exponent},
                {"momentum", s.momentum},
                {"batch_voxels", s.batch_voxels},
                {"folds", s.folds},
                {"hidden", s.hidden},
                {"class_ratio", s.class_ratio},
                {"ratio_jitter", s.ratio_jitter}};
  for (const auto& st : c.stages) {
    json js = {{"stage_id", st.stage_id},
               {"vs_augment", st.vs_augment},
               {"oversample", st.oversample},
               {"oversample_cap", st.oversample_cap},
               {"small_tumor_percentile", st.small_tumor_percentile}};
    js["recipe"] = json::array();
    for (const auto k : st.recipe) js["recipe"].push_back(boot::to_string(k));
    js["small_tumor_threshold"] = st.small_tumor_threshold ? json(*st.small_tumor_threshold) : json(nullptr);
    j["stages"].push_back(js);
  }
  j["small_eval_percentile"] = c.small_eval_percentile;
  j["output_root"] = c.output_root;
  return j.dump(2) + "\n";
}

}  // namespace udaseg
