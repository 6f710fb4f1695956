#include <cmath>

#include "dit/metrics.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace dit;

TEST_CASE("iou matches the corner-coordinate oracle") {
  const std::vector<Box> boxes{{0, 0, 10, 10}, {5, 5, 10, 10}, {0, 0, 10, 9}, {20, 0, 1, 1}, {0, 0, 0, 0}, {2, 2, 3, 3}};
  for (const auto& a : boxes)
    for (const auto& b : boxes) CHECK(iou(a, b) == doctest::Approx(oracle::iou(a, b)));
  CHECK(iou({0, 0, 10, 10}, {5, 5, 10, 10}) == doctest::Approx(25.0 / 175.0));
  CHECK(iou({0, 0, 0, 0}, {0, 0, 0, 0}) == 0.0);
}

TEST_CASE("IoU-weighted F1 reproduces the reference table rows") {
  CHECK(weighted_f1({96.97, 95.99, 95.14, 90.22}) == doctest::Approx(94.23).epsilon(0.01 / 94.23));
  CHECK(weighted_f1({97.83, 97.41, 96.29, 92.93}) == doctest::Approx(95.85).epsilon(0.01 / 95.85));
  CHECK(weighted_f1({0.9697, 0.9599, 0.9514, 0.9022}) == doctest::Approx(0.9423).epsilon(1e-4));
  // threshold-weighted mean: sum(t * F1_t) / sum(t)
  CHECK(weighted_f1({97.4, 96.9, 96.0, 94.2}) ==
        doctest::Approx((0.6 * 97.4 + 0.7 * 96.9 + 0.8 * 96.0 + 0.9 * 94.2) / 3.0));
  CHECK(weighted_f1({80, 80, 80, 80}) == doctest::Approx(80.0));
  CHECK(weighted_f1({1, 1, 1, 1}) == doctest::Approx(1.0));
  CHECK_THROWS_AS(weighted_f1({96.97, 0.95, 95.14, 90.22}), std::invalid_argument);
}

TEST_CASE("greedy matching is one-to-one and score ordered") {
  const std::vector<Box> gts{{0, 0, 10, 10}, {20, 0, 10, 10}};
  const std::vector<Detection> preds{{0, 1, {0, 0, 10, 9}, 0.5},    // IoU 0.9
                                     {0, 1, {0, 0, 10, 10}, 0.9},   // exact, higher score takes gt0
                                     {0, 1, {40, 0, 5, 5}, 0.7}};
  const MatchResult m = match_detections(preds, gts, 0.5);
  CHECK(m.tp == 1);
  CHECK(m.fp == 2);
  CHECK(m.fn == 1);
  REQUIRE(m.matches.size() == 1);
  CHECK(m.matches[0] == std::pair<std::size_t, std::size_t>{1, 0});
  CHECK(match_detections(preds, gts, 0.95).tp == 1);
  CHECK(match_detections({}, gts, 0.5).fn == 2);
}

TEST_CASE("precision, recall and F1 from counts") {
  const Prf1 r = prf1(8, 2, 4);
  CHECK(r.precision == doctest::Approx(0.8));
  CHECK(r.recall == doctest::Approx(8.0 / 12.0));
  CHECK(r.f1 == doctest::Approx(2 * 8.0 / (2 * 8.0 + 2 + 4)));
  const Prf1 z = prf1(0, 0, 0);
  CHECK(z.f1 == 0.0);
  CHECK(z.precision == 0.0);
}

TEST_CASE("dataset PRF1 sums over images and categories") {
  const std::vector<CocoAnnotation> gts{{1, 0, 1, {0, 0, 10, 10}}, {2, 1, 1, {0, 0, 10, 10}}, {3, 1, 2, {20, 0, 10, 10}}};
  const std::vector<Detection> preds{{0, 1, {0, 0, 10, 10}, 0.9},
                                     {1, 2, {0, 0, 10, 10}, 0.9},   // wrong category
                                     {1, 2, {20, 0, 10, 10}, 0.8}};
  const Prf1 r = dataset_prf1(preds, gts, 0.5);
  CHECK(r.precision == doctest::Approx(2.0 / 3.0));
  CHECK(r.recall == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("accuracy") {
  const std::vector<int> p{1, 2, 3, 4}, t{1, 2, 0, 4};
  CHECK(accuracy(p, t) == doctest::Approx(0.75));
  CHECK_THROWS(accuracy(std::vector<int>{1}, t));
}

TEST_CASE("101-point AP on a hand-worked sweep") {
  // Ranks: hit, miss, hit over 2 gts. Precision envelope 1 up to recall 0.5,
  // then 2/3 up to recall 1: (51 * 1 + 50 * 2/3) / 101.
  const std::vector<Box> gts{{0, 0, 10, 10}, {20, 0, 10, 10}};
  const std::vector<Detection> preds{{0, 1, {0, 0, 10, 10}, 0.9}, {0, 1, {50, 50, 5, 5}, 0.8}, {0, 1, {20, 0, 10, 10}, 0.7}};
  CHECK(average_precision(preds, gts, 0.5) == doctest::Approx((51.0 + 50.0 * 2.0 / 3.0) / 101.0));
  CHECK(average_precision(std::span<const Detection>{}, gts, 0.5) == 0.0);
}

TEST_CASE("AP and mAP agree with the brute-force oracle on every scenario") {
  const auto scenarios = oracle::map_scenarios();
  REQUIRE(scenarios.size() == 302);
  for (const auto& sc : scenarios) {
    for (int c : sc.categories) {
      std::vector<Detection> p;
      std::vector<CocoAnnotation> g;
      for (const auto& d : sc.preds)
        if (d.category_id == c) p.push_back(d);
      for (const auto& a : sc.gts)
        if (a.category_id == c) g.push_back(a);
      for (double t : kCocoThresholds)
        CHECK(average_precision(p, g, t) == doctest::Approx(oracle::brute_force_ap(p, g, t)).epsilon(1e-9));
    }
    const MapResult r = map_range(sc.preds, sc.gts, sc.categories);
    CHECK(r.overall == doctest::Approx(oracle::brute_force_map(sc.preds, sc.gts, sc.categories)).epsilon(1e-9));
  }
}

TEST_CASE("mAP skips categories without ground truth") {
  const std::vector<CocoAnnotation> gts{{1, 0, 1, {0, 0, 10, 10}}};
  const std::vector<Detection> preds{{0, 1, {0, 0, 10, 10}, 0.9}, {0, 2, {0, 0, 10, 10}, 0.9}};
  const MapResult r = map_range(preds, gts, {1, 2});
  CHECK(r.overall == doctest::Approx(1.0));
  CHECK(r.category_map.count(1) == 1);
}
