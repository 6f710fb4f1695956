#include <filesystem>
#include <set>

#include "dit/coco.hpp"
#include "dit/synthdoc.hpp"
#include "doctest.h"

using namespace dit;
namespace fs = std::filesystem;

TEST_CASE("every template renders boxes inside the page with ink inside each box") {
  for (int t = 0; t < kNumTemplates; ++t) {
    const SynthDocument doc = generate_corpus_document(static_cast<std::size_t>(t), 5, CorpusSpec::single(t, 224, 224));
    CHECK(doc.class_id == t);
    CHECK(doc.image.width == 224);
    CHECK_FALSE(doc.elements.empty());
    for (const auto& e : doc.elements) {
      CHECK(e.bbox.x >= 0);
      CHECK(e.bbox.y >= 0);
      CHECK(e.bbox.x2() <= 224);
      CHECK(e.bbox.y2() <= 224);
      CHECK(e.bbox.w > 0);
      float darkest = 255;
      for (auto y = static_cast<std::size_t>(e.bbox.y); y < static_cast<std::size_t>(e.bbox.y2()); ++y)
        for (auto x = static_cast<std::size_t>(e.bbox.x); x < static_cast<std::size_t>(e.bbox.x2()); ++x)
          darkest = std::min(darkest, doc.image.at(x, y));
      CHECK(darkest < 255);
    }
  }
}

TEST_CASE("emitted categories belong to the template's set") {
  for (int t = 0; t < kNumTemplates; ++t) {
    const auto allowed = template_categories(t);
    const std::set<Category> ok(allowed.begin(), allowed.end());
    for (std::size_t i = 0; i < 4; ++i)
      for (const auto& e : generate_corpus_document(i, 9, CorpusSpec::single(t, 224, 224)).elements)
        CHECK(ok.count(e.category));
  }
}

TEST_CASE("generation is a pure function of (seed, index)") {
  const CorpusSpec spec;
  const auto a = generate_corpus_document(3, 42, spec);
  const auto b = generate_corpus_document(3, 42, spec);
  const auto c = generate_corpus_document(4, 42, spec);
  CHECK(a.image.data == b.image.data);
  CHECK(a.elements.size() == b.elements.size());
  CHECK(a.image.data != c.image.data);
}

TEST_CASE("unknown template ids are rejected") {
  Rng rng(0);
  CHECK_THROWS(generate_document(rng, {16, 224, 224}));
  CHECK_THROWS(generate_document(rng, {-1, 224, 224}));
}

TEST_CASE("corpus on disk: n PNGs plus annotations, reloads identically") {
  const fs::path dir = fs::temp_directory_path() / "dit_test_corpus";
  fs::remove_all(dir);
  CorpusSpec spec;
  spec.width = spec.height = 128;
  const auto manifest = generate_corpus(12, 1, dir, spec, 2);
  CHECK(manifest.size() == 12);
  std::size_t pngs = 0;
  for (const auto& f : fs::directory_iterator(dir)) pngs += f.path().extension() == ".png";
  CHECK(pngs == 12);
  REQUIRE(fs::exists(dir / "annotations.json"));
  const auto docs = load_corpus(dir, 3);
  REQUIRE(docs.size() == 12);
  for (std::size_t i = 0; i < 12; ++i) {
    const auto fresh = generate_corpus_document(i, 1, spec);
    CHECK(docs[i].class_id == fresh.class_id);
    CHECK(docs[i].image.data == fresh.image.data);
    CHECK(docs[i].elements.size() == fresh.elements.size());
  }
}

TEST_CASE("worker count does not change the corpus") {
  const fs::path a = fs::temp_directory_path() / "dit_test_corpus_w1";
  const fs::path b = fs::temp_directory_path() / "dit_test_corpus_w4";
  fs::remove_all(a);
  fs::remove_all(b);
  CorpusSpec spec;
  spec.width = spec.height = 96;
  generate_corpus(6, 8, a, spec, 1);
  generate_corpus(6, 8, b, spec, 4);
  const auto da = read_annotations(a / "annotations.json");
  const auto db = read_annotations(b / "annotations.json");
  REQUIRE(da.annotations.size() == db.annotations.size());
  for (std::size_t i = 0; i < da.annotations.size(); ++i) {
    CHECK(da.annotations[i].bbox.x == db.annotations[i].bbox.x);
    CHECK(da.annotations[i].category_id == db.annotations[i].category_id);
  }
}

TEST_CASE("COCO annotations and predictions round-trip") {
  const fs::path dir = fs::temp_directory_path() / "dit_test_coco";
  fs::create_directories(dir);
  CocoDataset ds;
  ds.images = {{0, "a.png", 10, 20, 3}};
  ds.annotations = {{1, 0, 4, {1.5, 2, 3, 4}}};
  ds.categories = {{4, "table"}};
  write_annotations(dir / "gt.json", ds);
  const auto back = read_annotations(dir / "gt.json");
  REQUIRE(back.images.size() == 1);
  CHECK(back.images[0].class_id == 3);
  CHECK(back.annotations[0].bbox.x == 1.5);
  CHECK(back.categories[0].second == "table");

  write_predictions(dir / "p.json", {{0, 4, {1, 2, 3, 4}, 0.75}});
  const auto p = read_predictions(dir / "p.json");
  REQUIRE(p.size() == 1);
  CHECK(p[0].score == 0.75);
  CHECK(p[0].bbox.h == 4);
}
