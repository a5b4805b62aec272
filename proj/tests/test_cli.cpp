#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "udaseg/dataset.hpp"
#include "udaseg/fsutil.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "udaseg_test_cli";

struct Run {
  int code = -1;
  std::string err;
};

Run run(const std::string& args) {
  const auto err_file = kWork / "stderr.txt";
  const std::string cmd = std::string(UDASEG_CLI_PATH) + " " + args + " >" + (kWork / "stdout.txt").string() +
                          " 2>" + err_file.string();
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = udaseg::fsutil::read_file(err_file);
  return r;
}

std::string path(const std::string& leaf) { return (kWork / leaf).string(); }

// Scaled-down run: a handful of cases and short training.
const char* kSmallConfig = R"({
  "seed": 11,
  "phantom": {"cases_per_site_per_modality": 5, "validation_cases_per_site": 2},
  "translator": {"iters": 120},
  "train": {"epochs": 6, "folds": 2},
  "stages": [
    {"stage_id": 1}, {"stage_id": 2},
    {"stage_id": 3, "oversample_cap": 40}, {"stage_id": 4, "oversample_cap": 40}
  ]
})";

struct Fixture {
  Fixture() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
    std::ofstream(kWork / "small.json") << kSmallConfig;
  }
};

}  // namespace

TEST_CASE("usage and validation exit codes") {
  Fixture f;
  SUBCASE("no subcommand") { CHECK(run("").code == 1); }
  SUBCASE("unknown flag gets a suggestion") {
    const auto r = run("phantom --sed 3");
    CHECK(r.code == 1);
    CHECK(r.err.find("did you mean '--seed'") != std::string::npos);
  }
  SUBCASE("negative spacing names the field") {
    std::ofstream(kWork / "bad.json") << R"({"target_spacing": [0.41, -1.0, 1.0]})";
    const auto r = run("phantom --config " + path("bad.json") + " --out " + path("x"));
    CHECK(r.code == 2);
    CHECK(r.err.find("target_spacing[1]") != std::string::npos);
    CHECK_FALSE(fs::exists(kWork / "x"));
  }
  SUBCASE("unknown config key") {
    std::ofstream(kWork / "typo.json") << R"({"train": {"epoch": 3}})";
    const auto r = run("phantom --config " + path("typo.json"));
    CHECK(r.code == 2);
    CHECK(r.err.find("train.epoch") != std::string::npos);
    CHECK(r.err.find("did you mean 'epochs'") != std::string::npos);
  }
  SUBCASE("malformed config") {
    std::ofstream(kWork / "broken.json") << "{\"seed\": ";
    CHECK(run("phantom --config " + path("broken.json")).code == 2);
  }
  SUBCASE("missing input dataset") {
    CHECK(run("preprocess --data " + path("nowhere") + " --out " + path("p")).code == 2);
  }
  SUBCASE("unreadable model file is rejected before prediction") {
    const auto r = run("phantom --config " + path("small.json") + " --out " + path("ph") + " --quiet");
    REQUIRE(r.code == 0);
    std::ofstream(kWork / "junk.udsm") << "not a model";
    CHECK(run("segment-predict --models " + path("junk.udsm") + " --data " + path("ph") + " --out " + path("pr"))
              .code == 2);
  }
}

TEST_CASE("step-by-step commands") {
  Fixture f;
  const std::string cfg = " --config " + path("small.json") + " --quiet";
  REQUIRE(run("phantom" + cfg + " --out " + path("ph")).code == 0);
  CHECK(fs::exists(kWork / "ph" / "manifest.txt"));
  CHECK(fs::exists(kWork / "ph" / "A" / "ceT1" / "ceT1_A_000.nii"));
  const auto raw = udaseg::store::load_dataset(kWork / "ph");
  CHECK(raw.train.size() == 20);
  CHECK(raw.validation.size() == 4);
  for (const auto& c : raw.train) CHECK(c.labels.has_value() == (c.tag.modality == udaseg::Modality::CeT1));

  REQUIRE(run("preprocess" + cfg + " --data " + path("ph") + " --out " + path("prep")).code == 0);
  CHECK(fs::exists(kWork / "prep" / "atlases" / "atlases.json"));
  CHECK(fs::exists(kWork / "prep" / "transforms" / "hrT2_B_val_001.txt"));

  REQUIRE(run("translate-train" + cfg + " --matrix full --data " + path("prep") + " --out " + path("tr")).code == 0);
  int files = 0;
  for (const auto& e : fs::directory_iterator(kWork / "tr")) files += e.path().extension() == ".json" &&
                                                                       e.path().filename() != "config.json";
  CHECK(files == 5);

  REQUIRE(run("translate-apply" + cfg + " --data " + path("prep") + " --translators " + path("tr") + " --out " +
              path("pseudo"))
              .code == 0);
  const auto pseudo = udaseg::store::load_dataset(kWork / "pseudo");
  CHECK(pseudo.train.size() == 3 * 10);  // 3 pseudo cases per ceT1 case
  for (const auto& c : pseudo.train) CHECK(c.tag.origin.has_value());

  REQUIRE(run("augment" + cfg + " --data " + path("pseudo") + " --out " + path("aug")).code == 0);
  CHECK(fs::exists(kWork / "aug" / "audit.tsv"));

  REQUIRE(run("segment-train" + cfg + " --data " + path("aug") + " --out " + path("models")).code == 0);
  CHECK(fs::exists(kWork / "models" / "fold0.udsm"));
  CHECK(fs::exists(kWork / "models" / "fold1.udsm"));

  REQUIRE(run("segment-predict" + cfg + " --models " + path("models/fold0.udsm") + "," + path("models/fold1.udsm") +
              " --data " + path("prep") + " --out " + path("pred"))
              .code == 0);
  REQUIRE(run("evaluate" + cfg + " --pred " + path("pred") + " --truth " + path("prep") + " --stage 1 --out " +
              path("eval"))
              .code == 0);
  const auto rows = udaseg::fsutil::read_file(kWork / "eval" / "metrics.tsv");
  CHECK(rows.rfind("case_id\tstructure\tdice\tassd_mm\n", 0) == 0);
  CHECK(rows.find("hrT2_A_val_000\tvs\t") != std::string::npos);

  // Unlabelled training input is rejected before training starts.
  CHECK(run("segment-train" + cfg + " --data " + path("prep") + " --out " + path("m2")).code == 2);
}

TEST_CASE("run-all is deterministic per seed") {
  Fixture f;
  const std::string cfg = " --config " + path("small.json") + " --quiet --seed 5";
  REQUIRE(run("run-all" + cfg + " --out " + path("r1")).code == 0);
  REQUIRE(run("run-all" + cfg + " --out " + path("r2")).code == 0);
  const auto a = udaseg::fsutil::read_file(kWork / "r1" / "metrics.tsv");
  CHECK(!a.empty());
  CHECK(a == udaseg::fsutil::read_file(kWork / "r2" / "metrics.tsv"));
  for (int k = 1; k <= 4; ++k) CHECK(fs::exists(kWork / "r1" / ("stage" + std::to_string(k)) / "fold0.udsm"));
  const auto manifest = udaseg::fsutil::read_file(kWork / "r1" / "manifest.txt");
  CHECK(manifest.find("seed: 5\n") != std::string::npos);
  CHECK(manifest.find("config_hash: fnv1a64:") != std::string::npos);
  // Stage 3 training list holds exactly the cap.
  std::ifstream list(kWork / "r1" / "stage3" / "training_list.txt");
  int lines = 0;
  for (std::string l; std::getline(list, l);) ++lines;
  CHECK(lines == 40);

  setenv("UDASEG_OUT", path("envroot").c_str(), 1);
  REQUIRE(run("phantom --config " + path("small.json") + " --quiet").code == 0);
  CHECK(fs::exists(kWork / "envroot" / "phantom" / "dataset.json"));
  unsetenv("UDASEG_OUT");
  fs::remove_all(kWork);
}
