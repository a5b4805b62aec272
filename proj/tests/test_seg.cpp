#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "udaseg/metrics.hpp"
#include "udaseg/rng.hpp"
#include "udaseg/seg.hpp"

using namespace udaseg;
using namespace udaseg::seg;

namespace {

double loss_at(const std::vector<double>& logits, const std::vector<std::uint8_t>& y) {
  std::vector<double> p(logits.size());
  for (std::size_t i = 0; i < y.size(); ++i) softmax3(&logits[3 * i], &p[3 * i]);
  return dice_ce_loss(p, y).loss;
}

// Bright sphere (VS) and a dimmer small sphere (cochlea) whose positions move
// with the case index.
Case toy_case(int idx) {
  Geometry g;
  g.dims = {20, 20, 12};
  Rng rng(stream_seed(99, {std::uint64_t(idx)}));
  std::normal_distribution<double> noise(0.0, 0.03);
  std::vector<float> v(static_cast<std::size_t>(g.voxel_count()));
  std::vector<std::uint8_t> l(v.size(), 0);
  const double vx = 6 + idx % 3, vy = 8 + idx % 2, r = 2.5 + 0.3 * (idx % 4);
  for (std::int64_t k = 0; k < 12; ++k)
    for (std::int64_t j = 0; j < 20; ++j)
      for (std::int64_t i = 0; i < 20; ++i) {
        const auto n = static_cast<std::size_t>(g.linear(i, j, k));
        double val = 0.3;
        const double dv = std::hypot(i - vx, j - vy, (k - 6) * 1.5);
        const double dc = std::hypot(i - 14.0, j - 12.0, (k - 6) * 1.5);
        if (dv <= r) {
          val = 0.9;
          l[n] = 1;
        } else if (dc <= 1.6) {
          val = 0.6;
          l[n] = 2;
        }
        v[n] = static_cast<float>(val + noise(rng));
      }
  Case c;
  c.id = "toy_" + std::to_string(idx);
  c.volume = Volume(g, v);
  c.labels = LabelMap(g, l);
  return c;
}

TrainConfig toy_config() {
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.batch_voxels = 128;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST_CASE("dice_ce_loss examples") {
  SUBCASE("one-hot correct prediction") {
    const std::vector<double> p = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    const std::vector<std::uint8_t> y = {0, 1, 2};
    const auto r = dice_ce_loss(p, y);
    CHECK(std::abs(r.ce_term) < 1e-9);
    CHECK(r.dice_term <= 1e-4);
  }
  SUBCASE("uniform prediction") {
    const std::vector<double> p(12, 1.0 / 3.0);
    const std::vector<std::uint8_t> y = {0, 1, 2, 1};
    CHECK(dice_ce_loss(p, y).ce_term == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  }
  SUBCASE("shape and normalisation errors") {
    const std::vector<double> p(9, 1.0 / 3.0);
    const std::vector<std::uint8_t> y = {0, 1};
    CHECK_THROWS_AS(dice_ce_loss(p, y), Error);
    const std::vector<double> q = {0.5, 0.5, 0.5};
    const std::vector<std::uint8_t> z = {0};
    CHECK_THROWS_AS(dice_ce_loss(q, z), Error);
  }
}

TEST_CASE("dice_ce_loss gradient matches central differences") {
  Rng rng(123);
  std::normal_distribution<double> normal(0.0, 1.5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(trial % 9);
    std::vector<double> z(3 * n);
    std::vector<std::uint8_t> y(n);
    for (auto& v : z) v = normal(rng);
    for (auto& v : y) v = static_cast<std::uint8_t>(rng() % 3);
    std::vector<double> p(3 * n);
    for (std::size_t i = 0; i < n; ++i) softmax3(&z[3 * i], &p[3 * i]);
    const auto g = dice_ce_loss(p, y).grad_logits;
    double err = 0.0, norm = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) {
      const double h = 1e-6;
      auto zp = z, zm = z;
      zp[k] += h;
      zm[k] -= h;
      const double fd = (loss_at(zp, y) - loss_at(zm, y)) / (2 * h);
      err = std::max(err, std::abs(fd - g[k]));
      norm = std::max(norm, std::abs(fd));
    }
    CHECK(err <= 1e-4 * norm);
  }
}

TEST_CASE("lr_schedule") {
  TrainConfig cfg;
  cfg.epochs = 30;
  CHECK(lr_schedule(0, cfg) == doctest::Approx(1e-2).epsilon(1e-15));
  CHECK(lr_schedule(30, cfg) == 0.0);
  CHECK(lr_schedule(15, cfg) == doctest::Approx(5.359e-3).epsilon(1e-3));
  CHECK_THROWS_AS(lr_schedule(-0.1, cfg), Error);
  CHECK_THROWS_AS(lr_schedule(30.5, cfg), Error);
}

TEST_CASE("fold assignment partitions unique ids") {
  std::vector<std::string> ids;
  for (int i = 0; i < 23; ++i) ids.push_back("c" + std::to_string(i));
  ids.push_back("c3");  // duplicates share a fold
  const auto f = assign_folds(ids, 5, 11);
  REQUIRE(f.size() == ids.size());
  std::array<int, 5> per{};
  for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
    REQUIRE(f[i] >= 0);
    REQUIRE(f[i] < 5);
    ++per[f[i]];
  }
  CHECK(f.back() == f[3]);
  for (const int c : per) CHECK((c == 4 || c == 5));
  CHECK(assign_folds(ids, 5, 11) == f);
  CHECK_THROWS_AS(assign_folds({"a", "b", "a"}, 3, 1), Error);
}

TEST_CASE("ensemble averaging arithmetic") {
  Geometry g;
  g.dims = {1, 1, 1};
  const std::array<std::vector<float>, kClasses> p = {std::vector<float>{0.4f}, {0.3f}, {0.3f}};
  CHECK(argmax_labels(p, g)[0] == 0);
  const std::array<std::vector<float>, kClasses> tie = {std::vector<float>{0.2f}, {0.4f}, {0.4f}};
  CHECK(argmax_labels(tie, g)[0] == 1);
}

TEST_CASE("segmenter training on toy volumes") {
  std::vector<Case> cases;
  for (int i = 0; i < 10; ++i) cases.push_back(toy_case(i));
  std::vector<const Case*> ptrs;
  for (const auto& c : cases) ptrs.push_back(&c);
  const auto cfg = toy_config();
  const auto res = train_segmenter(ptrs, cfg);
  REQUIRE(res.models.size() == 5);

  SUBCASE("loss decreases in every fold") {
    for (const auto& m : res.models) {
      REQUIRE(m.epoch_loss.size() == 20);
      CHECK(m.epoch_loss.back() < m.epoch_loss.front());
      CHECK(m.epochs_trained == 20);
    }
  }
  SUBCASE("deterministic") {
    const auto again = train_segmenter(ptrs, cfg);
    for (std::size_t k = 0; k < res.models.size(); ++k)
      CHECK(encode_model(again.models[k]) == encode_model(res.models[k]));
  }
  SUBCASE("prediction is a probability map and ensemble holds up") {
    const Case test = toy_case(42);
    std::vector<const SegmenterModel*> all;
    for (const auto& m : res.models) all.push_back(&m);
    const auto ens = predict(all, test.volume);
    for (std::size_t i = 0; i < ens.probs[0].size(); i += 37) {
      const double s = double(ens.probs[0][i]) + ens.probs[1][i] + ens.probs[2][i];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
      CHECK(ens.probs[1][i] >= 0.0f);
    }
    const double ens_vs = metrics::dice(ens.labels, *test.labels, label::kVs);
    const double ens_co = metrics::dice(ens.labels, *test.labels, label::kCochlea);
    double best_vs = 0.0, best_co = 0.0;
    for (const auto* m : all) {
      const auto p = predict({m}, test.volume);
      best_vs = std::max(best_vs, metrics::dice(p.labels, *test.labels, label::kVs));
      best_co = std::max(best_co, metrics::dice(p.labels, *test.labels, label::kCochlea));
    }
    CHECK(ens_vs > 0.7);
    CHECK(ens_vs >= best_vs - 0.05);
    CHECK(ens_co >= best_co - 0.05);

    // Same model twice is the single model; model order does not matter.
    const auto one = predict({all[0]}, test.volume);
    const auto two = predict({all[0], all[0]}, test.volume);
    CHECK(one.probs[1] == two.probs[1]);
    std::vector<const SegmenterModel*> rev(all.rbegin(), all.rend());
    CHECK(predict(rev, test.volume).labels.values().size() == ens.labels.values().size());
    const auto r = predict(rev, test.volume);
    for (std::size_t i = 0; i < r.probs[1].size(); ++i) REQUIRE(std::abs(r.probs[1][i] - ens.probs[1][i]) < 1e-6f);
  }
  SUBCASE("model file round trip") {
    const auto dir = std::filesystem::temp_directory_path() / "udaseg_test_seg";
    std::filesystem::create_directories(dir);
    const auto path = (dir / "m.udsm").string();
    save_model(path, res.models[2]);
    CHECK(encode_model(load_model(path)) == encode_model(res.models[2]));
    auto bytes = encode_model(res.models[2]);
    CHECK_THROWS_AS(decode_model(std::string_view(bytes).substr(0, bytes.size() - 3)), Error);
    bytes[0] = 'X';
    CHECK_THROWS_AS(decode_model(bytes), Error);
    std::filesystem::remove_all(dir);
  }
}

TEST_CASE("training preconditions") {
  std::vector<Case> cases;
  for (int i = 0; i < 3; ++i) cases.push_back(toy_case(i));
  std::vector<const Case*> ptrs;
  for (const auto& c : cases) ptrs.push_back(&c);
  CHECK_THROWS_AS(train_segmenter(ptrs, toy_config()), Error);  // 3 cases, 5 folds
  Case unlabeled = toy_case(7);
  unlabeled.labels.reset();
  ptrs.push_back(&unlabeled);
  auto cfg = toy_config();
  cfg.folds = 2;
  CHECK_THROWS_AS(train_segmenter(ptrs, cfg), Error);
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
}
