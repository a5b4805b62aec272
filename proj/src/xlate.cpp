#include "udaseg/xlate.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>

#include "udaseg/fsutil.hpp"
#include "udaseg/rng.hpp"

namespace udaseg::xlate {

using nlohmann::json;

const char* to_string(MatrixMode m) { return m == MatrixMode::Full ? "full" : "within-site"; }

MatrixMode parse_matrix_mode(const std::string& s) {
  if (s == "full") return MatrixMode::Full;
  if (s == "within-site") return MatrixMode::WithinSite;
  fail(ErrorKind::InvalidArgument, "unknown translation matrix mode '" + s + "' (expected full or within-site)");
}

const char* to_string(WindowMode m) { return m == WindowMode::TwoD ? "2d" : "3d"; }

WindowMode parse_window_mode(const std::string& s) {
  if (s == "2d") return WindowMode::TwoD;
  if (s == "3d") return WindowMode::ThreeD;
  fail(ErrorKind::InvalidArgument, "unknown window mode '" + s + "' (expected 2d or 3d)");
}

TranslationConfigMatrix TranslationConfigMatrix::full() {
  TranslationConfigMatrix m;
  m.mode = MatrixMode::Full;
  m.entries = {{1, {Site::A}, {Site::A}},
               {2, {Site::A}, {Site::B}},
               {3, {Site::B}, {Site::A}},
               {4, {Site::B}, {Site::B}},
               {5, {Site::A, Site::B}, {Site::A, Site::B}}};
  return m;
}

TranslationConfigMatrix TranslationConfigMatrix::within_site() {
  TranslationConfigMatrix m;
  m.mode = MatrixMode::WithinSite;
  m.entries = {{1, {Site::A}, {Site::A}}, {4, {Site::B}, {Site::B}}};
  return m;
}

TranslationConfigMatrix TranslationConfigMatrix::make(MatrixMode mode) {
  return mode == MatrixMode::Full ? full() : within_site();
}

void TranslationConfigMatrix::validate() const {
  const auto expect = make(mode);
  require(entries.size() == expect.entries.size(), ErrorKind::InvalidArgument,
          std::string("translation matrix (") + to_string(mode) + ") must have " +
              std::to_string(expect.entries.size()) + " entries");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    const auto& x = expect.entries[i];
    require(e.model_id == x.model_id && e.sources == x.sources && e.targets == x.targets,
            ErrorKind::InvalidArgument, "translation matrix entry #" + std::to_string(e.model_id) + " is malformed");
  }
}

MonotoneLut MonotoneLut::identity(int knots) {
  require(knots >= 2, ErrorKind::InvalidArgument, "LUT needs at least 2 knots");
  MonotoneLut l;
  l.y.resize(static_cast<std::size_t>(knots));
  for (int k = 0; k < knots; ++k) l.y[static_cast<std::size_t>(k)] = double(k) / double(knots - 1);
  return l;
}

namespace {

struct Hat {
  std::size_t k0;
  double t;  // weight of knot k0 + 1
};

Hat hat(double x, std::size_t knots) {
  const double pos = std::clamp(x, 0.0, 1.0) * double(knots - 1);
  const auto k0 = std::min<std::size_t>(static_cast<std::size_t>(pos), knots - 2);
  return {k0, pos - double(k0)};
}

}  // namespace

double MonotoneLut::operator()(double x) const {
  const Hat h = hat(x, y.size());
  return y[h.k0] + h.t * (y[h.k0 + 1] - y[h.k0]);
}

double MonotoneLut::slope(double x) const {
  const Hat h = hat(x, y.size());
  return (y[h.k0 + 1] - y[h.k0]) * double(y.size() - 1);
}

bool MonotoneLut::is_monotone() const {
  for (std::size_t k = 1; k < y.size(); ++k)
    if (y[k] < y[k - 1]) return false;
  return true;
}

TranslatorPair TranslatorPair::identity(double lo, double hi, int knots) {
  TranslatorPair t;
  t.source = {lo, hi};
  t.target = {lo, hi};
  t.forward = MonotoneLut::identity(knots);
  t.backward = MonotoneLut::identity(knots);
  return t;
}

double TranslatorPair::apply(double v) const {
  const double x = std::clamp((v - source.lo) / (source.hi - source.lo), 0.0, 1.0);
  return target.lo + forward(x) * (target.hi - target.lo);
}

double TranslatorPair::apply_backward(double v) const {
  const double x = std::clamp((v - target.lo) / (target.hi - target.lo), 0.0, 1.0);
  return source.lo + backward(x) * (source.hi - source.lo);
}

void TranslatorPair::validate() const {
  require(source.hi > source.lo && target.hi > target.lo, ErrorKind::Integrity,
          "translator: anchors must satisfy p1 < p99");
  require(forward.knots() >= 2 && backward.knots() >= 2, ErrorKind::Integrity, "translator: LUT too short");
  for (const auto* l : {&forward, &backward}) {
    for (const double v : l->y)
      require(std::isfinite(v), ErrorKind::Integrity, "translator: non-finite control point");
    require(l->is_monotone(), ErrorKind::Integrity, "translator: LUT is not monotone");
  }
}

std::string to_json(const TranslatorPair& t) {
  json j;
  j["model_id"] = t.model_id;
  j["mode"] = to_string(t.mode);
  j["source_anchors"] = {t.source.lo, t.source.hi};
  j["target_anchors"] = {t.target.lo, t.target.hi};
  j["forward"] = t.forward.y;
  j["backward"] = t.backward.y;
  j["losses"] = {{"w1_forward", t.losses.w1_forward},
                 {"w1_backward", t.losses.w1_backward},
                 {"cycle", t.losses.cycle}};
  return j.dump(2) + "\n";
}

TranslatorPair translator_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("translator: ") + e.what(), e.byte);
  }
  TranslatorPair t;
  try {
    t.model_id = j.at("model_id").get<int>();
    t.mode = parse_window_mode(j.at("mode").get<std::string>());
    const auto s = j.at("source_anchors").get<std::array<double, 2>>();
    const auto g = j.at("target_anchors").get<std::array<double, 2>>();
    t.source = {s[0], s[1]};
    t.target = {g[0], g[1]};
    t.forward.y = j.at("forward").get<std::vector<double>>();
    t.backward.y = j.at("backward").get<std::vector<double>>();
    const auto& l = j.at("losses");
    t.losses = {l.at("w1_forward").get<double>(), l.at("w1_backward").get<double>(), l.at("cycle").get<double>()};
  } catch (const json::exception& e) {
    fail(ErrorKind::Parse, std::string("translator: ") + e.what());
  }
  t.validate();
  return t;
}

void save_translator(const std::string& path, const TranslatorPair& t) { fsutil::write_atomic(path, to_json(t)); }

TranslatorPair load_translator(const std::string& path) {
  try {
    return translator_from_json(fsutil::read_file(path));
  } catch (const Error& e) {
    rethrow_with_context(e, path);
  }
}

void TrainConfig::validate() const {
  require(knots >= 2, ErrorKind::InvalidArgument, "translator: knots must be >= 2");
  require(iters >= 1, ErrorKind::InvalidArgument, "translator: iters must be >= 1");
  require(cycle_weight >= 0.0, ErrorKind::InvalidArgument, "translator: cycle_weight must be >= 0");
  require(lr > 0.0, ErrorKind::InvalidArgument, "translator: lr must be > 0");
  require(quantiles >= 2, ErrorKind::InvalidArgument, "translator: quantiles must be >= 2");
  require(patches_per_case >= 1, ErrorKind::InvalidArgument, "translator: patches_per_case must be >= 1");
  for (int a = 0; a < 3; ++a)
    require(patch_2d[a] >= 1 && patch_3d[a] >= 1, ErrorKind::InvalidArgument, "translator: patch sizes must be >= 1");
  require(patch_2d[2] == 1, ErrorKind::InvalidArgument, "translator: 2D patches are one slice thick");
}

namespace {

std::vector<double> quantiles(std::vector<double> v, int q) {
  std::sort(v.begin(), v.end());
  std::vector<double> out(static_cast<std::size_t>(q));
  for (int i = 0; i < q; ++i) {
    const double h = (double(i) + 0.5) / double(q) * double(v.size() - 1);
    const auto lo = static_cast<std::size_t>(h);
    const double frac = h - double(lo);
    out[static_cast<std::size_t>(i)] = lo + 1 < v.size() ? v[lo] + frac * (v[lo + 1] - v[lo]) : v[lo];
  }
  return out;
}

double sgn(double x) { return double((x > 0) - (x < 0)); }

// Pool-adjacent-violators (equal weights), then clamp to [0, 1].
void project_monotone(std::vector<double>& y) {
  std::vector<double> val;
  std::vector<std::size_t> cnt;
  for (const double v : y) {
    val.push_back(v);
    cnt.push_back(1);
    while (val.size() > 1 && val[val.size() - 2] > val.back()) {
      const std::size_t n = cnt.back() + cnt[cnt.size() - 2];
      const double m = (val.back() * double(cnt.back()) + val[val.size() - 2] * double(cnt[cnt.size() - 2])) / double(n);
      val.pop_back();
      cnt.pop_back();
      val.back() = m;
      cnt.back() = n;
    }
  }
  std::size_t k = 0;
  for (std::size_t b = 0; b < val.size(); ++b)
    for (std::size_t i = 0; i < cnt[b]; ++i) y[k++] = std::clamp(val[b], 0.0, 1.0);
}

void add_hat(std::vector<double>& g, double x, double w) {
  const Hat h = hat(x, g.size());
  g[h.k0] += w * (1.0 - h.t);
  g[h.k0 + 1] += w * h.t;
}

TranslatorLosses evaluate_losses(const MonotoneLut& f, const MonotoneLut& g, const std::vector<double>& a,
                                 const std::vector<double>& b) {
  TranslatorLosses l;
  for (std::size_t q = 0; q < a.size(); ++q) {
    l.w1_forward += std::abs(f(a[q]) - b[q]);
    l.w1_backward += std::abs(g(b[q]) - a[q]);
    l.cycle += std::abs(g(f(a[q])) - a[q]);
  }
  const double n = double(a.size());
  l.w1_forward /= n;
  l.w1_backward /= n;
  l.cycle /= n;
  return l;
}

}  // namespace

LutFit fit_luts(std::vector<double> source, std::vector<double> target, const TrainConfig& cfg) {
  cfg.validate();
  require(!source.empty() && !target.empty(), ErrorKind::InvalidArgument, "fit_luts: empty sample set");
  for (const auto* s : {&source, &target})
    for (const double v : *s)
      require(std::isfinite(v) && v >= 0.0 && v <= 1.0, ErrorKind::InvalidArgument,
              "fit_luts: samples must be normalised to [0, 1]");
  // W1 between 1-D distributions is the mean gap between matched quantiles,
  // and a monotone map commutes with sorting, so only quantiles are needed.
  const auto a = quantiles(std::move(source), cfg.quantiles);
  const auto b = quantiles(std::move(target), cfg.quantiles);
  const auto K = static_cast<std::size_t>(cfg.knots);
  MonotoneLut f = MonotoneLut::identity(cfg.knots), g = MonotoneLut::identity(cfg.knots);
  const double inv_q = 1.0 / double(a.size());
  const double lam = cfg.cycle_weight;
  const double floor_mass = 0.25 / double(K);
  std::vector<double> gf(K), gg(K), mf(K), mg(K);
  for (int it = 0; it < cfg.iters; ++it) {
    std::fill(gf.begin(), gf.end(), 0.0);
    std::fill(gg.begin(), gg.end(), 0.0);
    std::fill(mf.begin(), mf.end(), 0.0);
    std::fill(mg.begin(), mg.end(), 0.0);
    for (std::size_t q = 0; q < a.size(); ++q) {
      const double fa = f(a[q]), gb = g(b[q]);
      add_hat(gf, a[q], inv_q * sgn(fa - b[q]));
      add_hat(mf, a[q], inv_q);
      add_hat(gg, b[q], inv_q * sgn(gb - a[q]));
      add_hat(mg, b[q], inv_q);
      if (lam > 0.0) {
        const double s1 = lam * inv_q * sgn(g(fa) - a[q]);
        add_hat(gg, fa, s1);
        add_hat(gf, a[q], s1 * g.slope(fa));
        const double s2 = lam * inv_q * sgn(f(gb) - b[q]);
        add_hat(gf, gb, s2);
        add_hat(gg, b[q], s2 * f.slope(gb));
      }
    }
    const double lr = cfg.lr * (1.0 - double(it) / double(cfg.iters)) + 0.01 * cfg.lr;
    for (std::size_t k = 0; k < K; ++k) {
      f.y[k] -= lr * gf[k] / std::max(mf[k], floor_mass);
      g.y[k] -= lr * gg[k] / std::max(mg[k], floor_mass);
    }
    project_monotone(f.y);
    project_monotone(g.y);
  }
  return {f, g, evaluate_losses(f, g, a, b)};
}

namespace {

// Voxels from `per_case` random patches of each case.
std::vector<double> sample_voxels(const std::vector<const Case*>& cases, const std::array<std::int64_t, 3>& patch,
                                  int per_case, std::uint64_t seed) {
  std::vector<double> out;
  for (const Case* c : cases) {
    Rng rng(stream_seed(seed, {hash_string(c->id)}));
    const Dims& d = c->volume.geometry().dims;
    for (int p = 0; p < per_case; ++p) {
      std::array<std::int64_t, 3> lo{}, hi{};
      for (int a = 0; a < 3; ++a) {
        const std::int64_t room = std::max<std::int64_t>(0, d[a] - patch[a]);
        lo[a] = std::uniform_int_distribution<std::int64_t>(0, room)(rng);
        hi[a] = std::min(d[a], lo[a] + patch[a]);
      }
      for (std::int64_t k = lo[2]; k < hi[2]; ++k)
        for (std::int64_t j = lo[1]; j < hi[1]; ++j)
          for (std::int64_t i = lo[0]; i < hi[0]; ++i) out.push_back(c->volume.at(i, j, k));
    }
  }
  return out;
}

Anchors anchors_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  auto pct = [&](double p) {
    const double h = double(v.size() - 1) * p / 100.0;
    const auto lo = static_cast<std::size_t>(h);
    return lo + 1 < v.size() ? v[lo] + (h - double(lo)) * (v[lo + 1] - v[lo]) : v[lo];
  };
  Anchors a{pct(1.0), pct(99.0)};
  if (!(a.hi > a.lo)) a.hi = a.lo + 1e-6;
  return a;
}

void normalise(std::vector<double>& v, const Anchors& a) {
  for (auto& x : v) x = std::clamp((x - a.lo) / (a.hi - a.lo), 0.0, 1.0);
}

}  // namespace

TranslatorPair train_translator(const std::vector<const Case*>& source, const std::vector<const Case*>& target,
                                int model_id, WindowMode mode, const TrainConfig& cfg) {
  cfg.validate();
  require(!source.empty(), ErrorKind::InvalidArgument,
          "train_translator: empty source pool for model #" + std::to_string(model_id));
  require(!target.empty(), ErrorKind::InvalidArgument,
          "train_translator: empty target pool for model #" + std::to_string(model_id));
  const auto& patch = mode == WindowMode::TwoD ? cfg.patch_2d : cfg.patch_3d;
  const std::uint64_t seed = stream_seed(cfg.seed, {static_cast<std::uint64_t>(model_id), static_cast<std::uint64_t>(mode)});
  auto xs = sample_voxels(source, patch, cfg.patches_per_case, stream_seed(seed, {1}));
  auto ys = sample_voxels(target, patch, cfg.patches_per_case, stream_seed(seed, {2}));
  TranslatorPair t;
  t.model_id = model_id;
  t.mode = mode;
  t.source = anchors_of(xs);
  t.target = anchors_of(ys);
  normalise(xs, t.source);
  normalise(ys, t.target);
  LutFit fit = fit_luts(std::move(xs), std::move(ys), cfg);
  t.forward = std::move(fit.forward);
  t.backward = std::move(fit.backward);
  t.losses = fit.losses;
  t.validate();
  return t;
}

InferenceWindowConfig InferenceWindowConfig::defaults(WindowMode mode) {
  InferenceWindowConfig w;
  w.patch = mode == WindowMode::TwoD ? std::array<std::int64_t, 3>{64, 64, 1} : std::array<std::int64_t, 3>{32, 32, 8};
  return w;
}

void InferenceWindowConfig::validate(WindowMode mode) const {
  require(overlap_ratio >= 0.0 && overlap_ratio < 1.0, ErrorKind::InvalidArgument,
          "window: overlap_ratio must be in [0, 1)");
  for (int a = 0; a < 3; ++a) require(patch[a] >= 1, ErrorKind::InvalidArgument, "window: patch sizes must be >= 1");
  if (mode == WindowMode::TwoD)
    require(patch[2] == 1, ErrorKind::InvalidArgument, "window: 2D patches are one slice thick");
}

std::int64_t InferenceWindowConfig::stride(int axis) const {
  // The epsilon keeps e.g. 10 * (1 - 0.8) from flooring to 1.
  const auto s = static_cast<std::int64_t>(std::floor(double(patch[axis]) * (1.0 - overlap_ratio) + 1e-9));
  return std::max<std::int64_t>(1, s);
}

std::vector<std::int64_t> window_starts(std::int64_t length, std::int64_t patch, std::int64_t stride) {
  require(length >= 1 && patch >= 1 && stride >= 1, ErrorKind::InvalidArgument, "window_starts: sizes must be >= 1");
  if (length <= patch) return {0};
  std::vector<std::int64_t> s;
  for (std::int64_t x = 0; x + patch <= length; x += stride) s.push_back(x);
  if (s.back() + patch < length) s.push_back(length - patch);
  return s;
}

std::vector<std::array<std::int64_t, 3>> window_grid(const Dims& dims, const InferenceWindowConfig& w) {
  std::array<std::vector<std::int64_t>, 3> starts;
  for (int a = 0; a < 3; ++a) starts[a] = window_starts(dims[a], w.patch[a], w.stride(a));
  std::vector<std::array<std::int64_t, 3>> out;
  for (const auto z0 : starts[2])
    for (const auto y0 : starts[1])
      for (const auto x0 : starts[0]) out.push_back({x0, y0, z0});
  return out;
}

Volume translate_windows(const Volume& v, const TranslatorPair& t, const InferenceWindowConfig& w,
                         const std::vector<std::array<std::int64_t, 3>>& windows) {
  t.validate();
  w.validate(t.mode);
  const Geometry& g = v.geometry();
  const auto n = static_cast<std::size_t>(g.voxel_count());
  std::vector<double> sum(n, 0.0);
  std::vector<std::uint32_t> count(n, 0);
  for (const auto& [x0, y0, z0] : windows) {
    // Voxels of the window beyond the volume are zero padding and are not written back.
    for (std::int64_t k = z0; k < std::min(g.dims[2], z0 + w.patch[2]); ++k)
      for (std::int64_t j = y0; j < std::min(g.dims[1], y0 + w.patch[1]); ++j)
        for (std::int64_t i = x0; i < std::min(g.dims[0], x0 + w.patch[0]); ++i) {
          const auto idx = static_cast<std::size_t>(g.linear(i, j, k));
          sum[idx] += t.apply(v.data()[idx]);
          ++count[idx];
        }
  }
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    require(count[i] > 0, ErrorKind::Integrity, "translate: voxel not covered by any window");
    out[i] = static_cast<float>(sum[i] / double(count[i]));
  }
  return Volume(g, std::move(out));
}

Volume translate(const Volume& v, const TranslatorPair& t, const InferenceWindowConfig& w) {
  return translate_windows(v, t, w, window_grid(v.geometry().dims, w));
}

namespace {

bool contains(const std::vector<Site>& s, Site x) { return std::find(s.begin(), s.end(), x) != s.end(); }

std::vector<const Case*> select(const std::vector<const Case*>& cases, const std::vector<Site>& sites) {
  std::vector<const Case*> out;
  for (const Case* c : cases)
    if (contains(sites, c->tag.site)) out.push_back(c);
  return out;
}

}  // namespace

TranslatorSet train_matrix(const std::vector<const Case*>& ceT1, const std::vector<const Case*>& hrT2,
                           const TranslationConfigMatrix& matrix, const std::vector<WindowMode>& modes,
                           const TrainConfig& cfg) {
  matrix.validate();
  for (const Case* c : ceT1)
    require(c->tag.modality == Modality::CeT1, ErrorKind::InvalidArgument, "train_matrix: " + c->id + " is not ceT1");
  for (const Case* c : hrT2)
    require(c->tag.modality == Modality::HrT2 && c->tag.provenance == Provenance::Real, ErrorKind::InvalidArgument,
            "train_matrix: " + c->id + " is not real hrT2");
  TranslatorSet out;
  for (const auto& e : matrix.entries)
    for (const WindowMode m : modes)
      out[{e.model_id, m}] = train_translator(select(ceT1, e.sources), select(hrT2, e.targets), e.model_id, m, cfg);
  return out;
}

std::string pseudo_case_id(const std::string& source_id, int model_id, WindowMode mode) {
  return "pseudo_m" + std::to_string(model_id) + "_" + to_string(mode) + "_" + source_id;
}

std::vector<Case> generate_pseudo_pool(const std::vector<const Case*>& ceT1, const TranslatorSet& translators,
                                       const TranslationConfigMatrix& matrix, const std::vector<WindowMode>& modes,
                                       const std::map<WindowMode, InferenceWindowConfig>& windows) {
  matrix.validate();
  std::vector<Case> out;
  for (const Case* src : ceT1) {
    require(src->tag.modality == Modality::CeT1 && src->labels.has_value(), ErrorKind::InvalidArgument,
            "generate_pseudo_pool: " + src->id + " is not a labelled ceT1 case");
    for (const auto& e : matrix.entries) {
      if (!contains(e.sources, src->tag.site)) continue;
      for (const WindowMode m : modes) {
        const auto it = translators.find({e.model_id, m});
        require(it != translators.end(), ErrorKind::Configuration,
                "no trained translator for model #" + std::to_string(e.model_id) + " (" + to_string(m) + ")");
        const auto w = windows.find(m);
        Case p;
        p.id = pseudo_case_id(src->id, e.model_id, m);
        p.volume = translate(src->volume, it->second,
                             w != windows.end() ? w->second : InferenceWindowConfig::defaults(m));
        p.labels = src->labels;
        const Site site = e.targets.size() == 1 ? e.targets.front() : src->tag.site;
        p.tag = DomainTag{site, Modality::HrT2, Provenance::Pseudo, PseudoOrigin{e.model_id, src->id, to_string(m)}};
        p.validate();
        out.push_back(std::move(p));
      }
    }
  }
  return out;
}

}  // namespace udaseg::xlate
