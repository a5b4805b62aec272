#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "udaseg/phantom.hpp"
#include "udaseg/prep.hpp"
#include "udaseg/xlate.hpp"

using namespace udaseg;
using namespace udaseg::xlate;

namespace {

std::vector<double> uniform_samples(std::size_t n, double lo, double hi, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// Closed-form histogram matching: map x to the target value at x's source quantile.
double quantile_map(const std::vector<double>& src_sorted, const std::vector<double>& dst_sorted, double x) {
  const auto rank = std::lower_bound(src_sorted.begin(), src_sorted.end(), x) - src_sorted.begin();
  const double q = double(rank) / double(src_sorted.size());
  const auto idx = std::min<std::size_t>(dst_sorted.size() - 1, static_cast<std::size_t>(q * double(dst_sorted.size())));
  return dst_sorted[idx];
}

struct PhantomPools {
  std::vector<Case> cases;
  std::vector<const Case*> ceT1, hrT2;
};

// Small preprocessed pools: 4 cases per (site, modality).
const PhantomPools& pools() {
  static const PhantomPools p = [] {
    phantom::PhantomConfig cfg;
    cfg.cases_per_site_per_modality = 4;
    PhantomPools out;
    std::vector<prep::Atlas> atlases;
    for (const Site s : {Site::A, Site::B})
      for (const Modality m : {Modality::CeT1, Modality::HrT2})
        atlases.push_back(prep::build_atlas(phantom::generate_case(cfg, s, m, 0)));
    for (const Site s : {Site::A, Site::B})
      for (const Modality m : {Modality::CeT1, Modality::HrT2})
        for (int i = 0; i < cfg.cases_per_site_per_modality; ++i) {
          Case c = prep::preprocess_case(phantom::generate_case(cfg, s, m, i), atlases, cfg.spacing).c;
          if (m == Modality::HrT2) c.labels.reset();
          out.cases.push_back(std::move(c));
        }
    for (const auto& c : out.cases) (c.tag.modality == Modality::CeT1 ? out.ceT1 : out.hrT2).push_back(&c);
    return out;
  }();
  return p;
}

}  // namespace

TEST_CASE("matrix configurations") {
  const auto full = TranslationConfigMatrix::full();
  REQUIRE(full.entries.size() == 5);
  CHECK(full.entries[1].sources == std::vector<Site>{Site::A});
  CHECK(full.entries[1].targets == std::vector<Site>{Site::B});
  CHECK(full.entries[2].sources == std::vector<Site>{Site::B});
  CHECK(full.entries[2].targets == std::vector<Site>{Site::A});
  CHECK(full.entries[4].sources.size() == 2);
  const auto within = TranslationConfigMatrix::within_site();
  REQUIRE(within.entries.size() == 2);
  CHECK(within.entries[0].model_id == 1);
  CHECK(within.entries[1].model_id == 4);
  auto broken = full;
  broken.entries.pop_back();
  CHECK_THROWS_AS(broken.validate(), Error);
  CHECK(parse_matrix_mode("within-site") == MatrixMode::WithinSite);
  CHECK_THROWS_AS(parse_matrix_mode("diagonal"), Error);
}

TEST_CASE("fit_luts: equal distributions give the identity") {
  const auto xs = uniform_samples(20000, 0.0, 1.0, 1);
  const auto ys = uniform_samples(20000, 0.0, 1.0, 2);
  const LutFit fit = fit_luts(xs, ys, {});
  double dev = 0.0;
  for (int i = 0; i <= 100; ++i) dev = std::max(dev, std::abs(fit.forward(i / 100.0) - i / 100.0));
  CHECK(dev < 0.05);
  CHECK(fit.losses.cycle < 0.02);
}

TEST_CASE("fit_luts: a shifted target is matched by the quantile map") {
  auto xs = uniform_samples(20000, 0.2, 0.6, 3);
  auto ys = uniform_samples(20000, 0.2, 0.6, 4);
  for (auto& y : ys) y += 0.2;
  const LutFit fit = fit_luts(xs, ys, {});
  std::sort(xs.begin(), xs.end());
  std::sort(ys.begin(), ys.end());
  for (double x = 0.22; x <= 0.58; x += 0.01) {
    CAPTURE(x);
    CHECK(std::abs(fit.forward(x) - quantile_map(xs, ys, x)) < 0.05);
    CHECK(std::abs(fit.forward(x) - (x + 0.2)) < 0.05);
  }
  CHECK(fit.forward.is_monotone());
  CHECK(fit.backward.is_monotone());
}

TEST_CASE("fit_luts: non-linear target stays monotone") {
  auto xs = uniform_samples(10000, 0.0, 1.0, 5);
  auto ys = uniform_samples(10000, 0.0, 1.0, 6);
  for (auto& y : ys) y = y * y * y;
  const LutFit fit = fit_luts(xs, ys, {});
  CHECK(fit.forward.is_monotone());
  for (double x = 0.1; x <= 0.9; x += 0.1) CHECK(std::abs(fit.forward(x) - x * x * x) < 0.05);
  CHECK(fit.losses.cycle < 0.05);
  CHECK_THROWS_AS(fit_luts({}, ys, {}), Error);
  CHECK_THROWS_AS(fit_luts({1.5}, ys, {}), Error);
}

TEST_CASE("window grid") {
  InferenceWindowConfig w;
  w.patch = {64, 64, 1};
  w.overlap_ratio = 0.8;
  CHECK(w.stride(0) == 12);
  w.patch = {10, 10, 10};
  CHECK(w.stride(0) == 2);
  CHECK(window_starts(70, 64, 12) == std::vector<std::int64_t>{0, 6});
  CHECK(window_starts(40, 64, 12) == std::vector<std::int64_t>{0});
  CHECK(window_starts(100, 32, 6).back() == 68);

  // Every voxel of a 70x70x20 volume is covered by at least one 3D window.
  const Dims d{70, 70, 20};
  InferenceWindowConfig w3 = InferenceWindowConfig::defaults(WindowMode::ThreeD);
  std::vector<int> cover(std::size_t(d[0] * d[1] * d[2]), 0);
  for (auto z : window_starts(d[2], w3.patch[2], w3.stride(2)))
    for (auto y : window_starts(d[1], w3.patch[1], w3.stride(1)))
      for (auto x : window_starts(d[0], w3.patch[0], w3.stride(0)))
        for (auto k = z; k < std::min(d[2], z + w3.patch[2]); ++k)
          for (auto j = y; j < std::min(d[1], y + w3.patch[1]); ++j)
            for (auto i = x; i < std::min(d[0], x + w3.patch[0]); ++i) ++cover[std::size_t(i + d[0] * (j + d[1] * k))];
  CHECK(*std::min_element(cover.begin(), cover.end()) >= 1);
  w3.overlap_ratio = 1.0;
  CHECK_THROWS_AS(w3.validate(WindowMode::ThreeD), Error);
}

TEST_CASE("identity translator reproduces the input in both modes") {
  const Case c = phantom::generate_case({}, Site::A, Modality::CeT1, 2);
  const auto [lo, hi] = std::minmax_element(c.volume.values().begin(), c.volume.values().end());
  for (const WindowMode m : {WindowMode::TwoD, WindowMode::ThreeD}) {
    TranslatorPair t = TranslatorPair::identity(*lo, *hi);
    t.mode = m;
    const Volume out = translate(c.volume, t, InferenceWindowConfig::defaults(m));
    CHECK(out.geometry() == c.volume.geometry());
    float diff = 0;
    for (std::int64_t i = 0; i < out.size(); ++i) diff = std::max(diff, std::abs(out[i] - c.volume[i]));
    CHECK(diff < 1e-6f);
  }
}

TEST_CASE("translator JSON round trip") {
  TranslatorPair t = TranslatorPair::identity(0.1, 0.9, 5);
  t.model_id = 3;
  t.mode = WindowMode::TwoD;
  t.forward.y = {0, 0.1, 0.5, 0.5, 1.0};
  t.losses.cycle = 0.01;
  const TranslatorPair r = translator_from_json(to_json(t));
  CHECK(r.model_id == 3);
  CHECK(r.mode == WindowMode::TwoD);
  CHECK(r.forward.y == t.forward.y);
  CHECK(r.source.lo == 0.1);
  CHECK(r.losses.cycle == 0.01);
  CHECK_THROWS_AS(translator_from_json("{\"model_id\": 1"), ParseError);
  t.forward.y = {0, 0.5, 0.4, 0.6, 1.0};
  CHECK_THROWS_AS(translator_from_json(to_json(t)), Error);
}

TEST_CASE("trained phantom translators") {
  const auto& p = pools();
  const auto matrix = TranslationConfigMatrix::full();
  TrainConfig cfg;
  cfg.seed = 9;
  const TranslatorSet set = train_matrix(p.ceT1, p.hrT2, matrix, {WindowMode::TwoD, WindowMode::ThreeD}, cfg);
  CHECK(set.size() == 10);
  for (const auto& [key, t] : set) {
    CAPTURE(key.first);
    CHECK(t.forward.is_monotone());
    CHECK(t.losses.cycle < 0.05);
  }
  // Cycle error on held-out source voxels (a ceT1 case outside the training pools).
  phantom::PhantomConfig held;
  held.seed = 77;
  const Case h = phantom::generate_case(held, Site::A, Modality::CeT1, 0);
  const TranslatorPair& t1 = set.at({1, WindowMode::ThreeD});
  double err = 0.0;
  std::int64_t n = 0;
  for (const float v : h.volume.values()) {
    const double x = std::clamp((v - t1.source.lo) / (t1.source.hi - t1.source.lo), 0.0, 1.0);
    err += std::abs(t1.backward(t1.forward(x)) - x);
    ++n;
  }
  CHECK(err / double(n) < 0.05);

  // Determinism.
  const TranslatorPair again = train_translator(p.ceT1, p.hrT2, 5, WindowMode::ThreeD, cfg);
  CHECK(again.forward.y == set.at({5, WindowMode::ThreeD}).forward.y);

  const auto pseudo = generate_pseudo_pool(p.ceT1, set, matrix, {WindowMode::ThreeD}, {});
  CHECK(pseudo.size() == 3 * p.ceT1.size());
  std::set<std::pair<std::string, int>> origins;
  for (const auto& c : pseudo) {
    REQUIRE(c.tag.origin.has_value());
    CHECK(c.tag.modality == Modality::HrT2);
    CHECK(c.tag.provenance == Provenance::Pseudo);
    origins.insert({c.tag.origin->source_case, c.tag.origin->model_id});
    const Case* src = *std::find_if(p.ceT1.begin(), p.ceT1.end(), [&](const Case* s) { return s->id == c.tag.origin->source_case; });
    CHECK(c.labels->data() == src->labels->data());
    CHECK(c.volume.geometry() == src->volume.geometry());
    if (c.tag.origin->model_id == 2) CHECK(c.tag.site == Site::B);
    if (c.tag.origin->model_id == 5) CHECK(c.tag.site == src->tag.site);
  }
  CHECK(origins.size() == pseudo.size());

  TranslatorSet partial = set;
  partial.erase({2, WindowMode::ThreeD});
  CHECK_THROWS_WITH_AS(generate_pseudo_pool(p.ceT1, partial, matrix, {WindowMode::ThreeD}, {}),
                       doctest::Contains("model #2"), Error);
}

TEST_CASE("pseudo pool counts: full vs within-site") {
  // Count arithmetic with identity translators on 12 + 12 ceT1 cases.
  phantom::PhantomConfig cfg;
  cfg.dims = {16, 16, 16};
  cfg.tumor_size_range = {5, 30};
  std::vector<Case> cases;
  for (const Site s : {Site::A, Site::B})
    for (int i = 0; i < 12; ++i) cases.push_back(phantom::generate_case(cfg, s, Modality::CeT1, i));
  std::vector<const Case*> ptr;
  for (const auto& c : cases) ptr.push_back(&c);
  TranslatorSet ids;
  for (int m = 1; m <= 5; ++m) {
    TranslatorPair t = TranslatorPair::identity(-1, 2);
    t.model_id = m;
    ids[{m, WindowMode::ThreeD}] = t;
  }
  const auto within = generate_pseudo_pool(ptr, ids, TranslationConfigMatrix::within_site(), {WindowMode::ThreeD}, {});
  const auto full = generate_pseudo_pool(ptr, ids, TranslationConfigMatrix::full(), {WindowMode::ThreeD}, {});
  CHECK(within.size() == 24);
  CHECK(full.size() == 72);
  CHECK(full.size() >= 2 * within.size());
}
