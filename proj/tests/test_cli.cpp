#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "dit/coco.hpp"
#include "dit/synthdoc.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace dit;
namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(DIT_DESK_BIN) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dit_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("exit codes: help, usage errors, config errors, checkpoint errors") {
  CHECK(run("--help") == 0);
  CHECK(run("synth-data --help") == 0);
  CHECK(run("") == 1);
  CHECK(run("synth-data --bogus") == 1);
  CHECK(run("synth-data") == 1);  // --out is required

  const fs::path dir = scratch("codes");
  std::ofstream(dir / "bad.json") << R"({"model": {"vit": {"layers": 3}}})";
  CHECK(run("pretrain --config " + (dir / "bad.json").string() + " --run-dir " + (dir / "r1").string()) == 1);

  REQUIRE(run("synth-data --n 1 --width 64 --height 64 --out " + (dir / "img").string()) == 0);
  const fs::path png = dir / "img" / corpus_file_name(0);
  REQUIRE(fs::exists(png));
  CHECK(run("reconstruct --tokenizer " + (dir / "missing.ditc").string() + " --image " + png.string() +
            " --run-dir " + (dir / "r2").string()) == 2);
}

TEST_CASE("synth-data writes n PNGs and a COCO manifest") {
  const fs::path dir = scratch("synth");
  REQUIRE(run("synth-data --n 64 --seed 3 --width 96 --height 96 --workers 2 --out " + dir.string()) == 0);
  std::size_t pngs = 0;
  for (const auto& e : fs::directory_iterator(dir)) pngs += e.path().extension() == ".png";
  CHECK(pngs == 64);
  const CocoDataset ds = read_annotations(dir / "annotations.json");
  CHECK(ds.images.size() == 64);
  CHECK(!ds.annotations.empty());
}

TEST_CASE("evaluate --task wf1 reports the weighted score in percent") {
  // One gt and one prediction per image; the prediction's IoU is its height
  // fraction, so the F1 at each threshold is the share of images above it.
  const fs::path dir = scratch("wf1");
  CocoDataset gts;
  std::vector<Detection> preds;
  const std::pair<int, double> buckets[] = {{9022, 0.95}, {492, 0.85}, {85, 0.75}, {98, 0.65}, {303, 0.3}};
  int id = 0;
  for (auto [count, v] : buckets)
    for (int i = 0; i < count; ++i, ++id) {
      gts.images.push_back({id, "x.png", 100, 100, 0});
      gts.annotations.push_back({id + 1, id, 1, {0, 0, 100, 100}});
      preds.push_back({id, 1, {0, 0, 100, 100 * v}, 0.9});
    }
  gts.categories = {{1, "text"}};
  write_annotations(dir / "gts.json", gts);
  write_predictions(dir / "preds.json", preds);
  REQUIRE(run("evaluate --task wf1 --preds " + (dir / "preds.json").string() + " --gts " +
              (dir / "gts.json").string() + " --out " + (dir / "report.json").string() + " --run-dir " +
              (dir / "run").string()) == 0);
  std::ifstream f(dir / "report.json");
  const auto r = nlohmann::json::parse(f);
  CHECK(r["f1"]["0.6"].get<double>() == doctest::Approx(96.97));
  CHECK(r["f1"]["0.9"].get<double>() == doctest::Approx(90.22));
  CHECK(r["wf1"].get<double>() == doctest::Approx(94.23).epsilon(0.01 / 94.23));
}
