#include <doctest.h>

#include "udaseg/pipeline.hpp"

using namespace udaseg;

namespace {

std::string error_of(const std::string& text) {
  try {
    auto c = parse_pipeline_config(text);
    c.validate();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

bool mentions(const std::string& text, const std::string& what) {
  return error_of(text).find(what) != std::string::npos;
}

}  // namespace

TEST_CASE("defaults validate and round-trip through JSON") {
  PipelineConfig d;
  d.derive_seeds();
  CHECK_NOTHROW(d.validate());
  const auto text = to_json(d);
  const auto back = parse_pipeline_config(text);
  CHECK(to_json(back) == text);
  CHECK(parse_pipeline_config("{}").seed == d.seed);
}

TEST_CASE("partial configs override only what they name") {
  const auto c = parse_pipeline_config(R"({
    "seed": 42,
    "matrix": "within-site",
    "train": {"epochs": 5, "folds": 3},
    "windows": {"2d": {"overlap_ratio": 0.5}},
    "stages": [{"stage_id": 1}, {"stage_id": 2}, {"stage_id": 3, "small_tumor_threshold": 300},
               {"stage_id": 4, "oversample_cap": 200}]
  })");
  CHECK(c.seed == 42);
  CHECK(c.matrix == xlate::MatrixMode::WithinSite);
  CHECK(c.train.epochs == 5);
  CHECK(c.train.folds == 3);
  CHECK(c.train.lr0 == PipelineConfig{}.train.lr0);
  CHECK(c.windows.at(xlate::WindowMode::TwoD).overlap_ratio == 0.5);
  CHECK(c.windows.at(xlate::WindowMode::TwoD).patch == PipelineConfig{}.windows.at(xlate::WindowMode::TwoD).patch);
  CHECK(c.stages[2].small_tumor_threshold == 300);
  CHECK(c.stages[2].vs_augment);  // recipe defaults kept
  CHECK(c.stages[3].oversample_cap == 200);
}

TEST_CASE("sub-seeds derive from the master seed") {
  PipelineConfig a, b;
  a.seed = 1;
  b.seed = 2;
  a.derive_seeds();
  b.derive_seeds();
  CHECK(a.phantom.seed == 1);
  CHECK(a.train.seed != b.train.seed);
  CHECK(a.translator.seed != a.augment.seed);
}

TEST_CASE("errors carry field paths") {
  CHECK(mentions(R"({"target_spacing": [0.4, -1, 1]})", "target_spacing[1]"));
  CHECK(mentions(R"({"phantom": {"spacing": [0, 1, 1]}})", "phantom.spacing[0]"));
  CHECK(mentions(R"({"phantom": {"dims": [64, 64]}})", "phantom.dims"));
  CHECK(mentions(R"({"train": {"epochs": "many"}})", "train.epochs: expected an integer"));
  CHECK(mentions(R"({"train": {"lr0": -1}})", "train:"));
  CHECK(mentions(R"({"augment": {"order": "sideways"}})", "augment.order"));
  CHECK(mentions(R"({"matrix": "half"})", "matrix"));
  CHECK(mentions(R"({"stages": [{}, {}, {}]})", "stages"));
  CHECK(mentions(R"({"stages": [{"stage_id": 2}, {}, {}, {}]})", "stages[0].stage_id"));
  CHECK(mentions(R"({"stages": [{"recipe": ["real_hrT2"]}, {"stage_id": 2}, {"stage_id": 3}, {"stage_id": 4}]})",
                 "stages[0].recipe"));
  CHECK(mentions(R"({"stages": [{}, {"stage_id": 2, "recipe": ["pseudo_3d", "pseudo_3d"]}, {"stage_id": 3},
                   {"stage_id": 4}]})",
                 "listed twice"));
  CHECK(mentions(R"({"windows": {"2d": null}})", "needs windows.2d"));
  CHECK(mentions(R"({"seed": -3})", "seed"));
}

TEST_CASE("unknown keys are rejected with a suggestion") {
  CHECK(mentions(R"({"sed": 3})", "sed: unknown key (did you mean 'seed'?)"));
  CHECK(mentions(R"({"augment": {"vs_atenuation": 0.4}})", "augment.vs_atenuation"));
  CHECK(mentions(R"({"augment": {"vs_atenuation": 0.4}})", "'vs_attenuation'"));
  CHECK(mentions(R"({"phantom": {"site_contrast": [{"gain": 1, "bias": 0, "gama": 1}, {}]}})",
                 "phantom.site_contrast[0].gama"));
  CHECK(mentions(R"({"zzzzzz": 1})", "unknown key"));
  CHECK_FALSE(mentions(R"({"zzzzzz": 1})", "did you mean"));
}

TEST_CASE("malformed JSON is a parse error") {
  CHECK_THROWS_AS(parse_pipeline_config("{\"seed\": "), ParseError);
  CHECK_THROWS_AS(parse_pipeline_config("[1, 2]"), Error);
}
