// Independent reference computations for tests. Nothing here calls into the
// metric code under test.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <vector>

#include "dit/coco.hpp"

namespace oracle {

// IoU from corner coordinates.
inline double iou(const dit::Box& a, const dit::Box& b) {
  const double ax1 = a.x, ay1 = a.y, ax2 = a.x + a.w, ay2 = a.y + a.h;
  const double bx1 = b.x, by1 = b.y, bx2 = b.x + b.w, by2 = b.y + b.h;
  const double ix = std::max(0.0, std::min(ax2, bx2) - std::max(ax1, bx1));
  const double iy = std::max(0.0, std::min(ay2, by2) - std::max(ay1, by1));
  const double inter = ix * iy;
  const double uni = std::max(0.0, a.w) * std::max(0.0, a.h) + std::max(0.0, b.w) * std::max(0.0, b.h) - inter;
  return uni <= 0 ? 0.0 : inter / uni;
}

// Number of true positives when only the first k predictions (score order)
// exist, each matched greedily to its best free gt in the same image.
inline std::size_t prefix_tp(const std::vector<dit::Detection>& sorted, std::size_t k,
                             const std::vector<dit::CocoAnnotation>& gts, double thr) {
  std::set<std::size_t> used;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < k; ++i) {
    double best = -1;
    std::size_t arg = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used.count(g) || gts[g].image_id != sorted[i].image_id) continue;
      const double v = oracle::iou(sorted[i].bbox, gts[g].bbox);
      if (v >= thr && v > best) {
        best = v;
        arg = g;
      }
    }
    if (arg != gts.size()) {
      used.insert(arg);
      ++tp;
    }
  }
  return tp;
}

// AP by enumerating every prefix of the score-ordered sweep.
inline double brute_force_ap(std::vector<dit::Detection> preds, const std::vector<dit::CocoAnnotation>& gts,
                             double thr) {
  if (gts.empty()) return 0.0;
  std::vector<std::size_t> idx(preds.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return preds[a].score > preds[b].score; });
  std::vector<dit::Detection> sorted;
  for (auto i : idx) sorted.push_back(preds[i]);
  std::vector<std::pair<double, double>> pr;  // (recall, precision) per prefix
  for (std::size_t k = 1; k <= sorted.size(); ++k) {
    const double tp = static_cast<double>(prefix_tp(sorted, k, gts, thr));
    pr.emplace_back(tp / static_cast<double>(gts.size()), tp / static_cast<double>(k));
  }
  double sum = 0;
  for (int j = 0; j <= 100; ++j) {
    const double r = j / 100.0;
    double best = 0;
    for (auto [rec, prec] : pr)
      if (rec >= r - 1e-12) best = std::max(best, prec);
    sum += best;
  }
  return sum / 101.0;
}

inline double brute_force_map(const std::vector<dit::Detection>& preds, const std::vector<dit::CocoAnnotation>& gts,
                              const std::vector<int>& categories) {
  double total = 0;
  int present = 0;
  for (int c : categories) {
    std::vector<dit::Detection> p;
    std::vector<dit::CocoAnnotation> g;
    for (const auto& d : preds)
      if (d.category_id == c) p.push_back(d);
    for (const auto& a : gts)
      if (a.category_id == c) g.push_back(a);
    if (g.empty()) continue;
    double m = 0;
    for (int t = 0; t < 10; ++t) m += brute_force_ap(p, g, 0.5 + 0.05 * t);
    total += m / 10.0;
    ++present;
  }
  return present ? total / present : 0.0;
}

struct MapScenario {
  std::vector<dit::Detection> preds;
  std::vector<dit::CocoAnnotation> gts;
  std::vector<int> categories;
};

// Hand-picked boxes: pairs against the gt palette cover IoU values from
// disjoint through the 0.50..0.95 band to exact overlap.
inline std::vector<MapScenario> map_scenarios() {
  const std::vector<dit::Box> gt_palette{{0, 0, 10, 10}, {20, 0, 10, 20}, {0, 30, 30, 10}};
  const std::vector<dit::Box> pred_palette{
      {0, 0, 10, 10},   // exact gt0
      {0, 0, 10, 9},    // IoU 0.90 with gt0
      {1, 0, 10, 10},   // IoU 0.818 with gt0
      {0, 0, 10, 6},    // IoU 0.60 with gt0
      {20, 2, 10, 18},  // IoU 0.90 with gt1
      {22, 0, 10, 20},  // IoU 0.667 with gt1
      {2, 30, 30, 10},  // IoU 0.875 with gt2
      {50, 50, 5, 5},   // disjoint
  };
  const std::vector<double> scores{0.9, 0.8, 0.8, 0.6, 0.5, 0.3};
  std::vector<MapScenario> out;
  std::uint64_t state = 12345;
  auto next = [&](std::size_t n) {
    state = state * 6364136223846793005ULL + 1442695040888963407ULL;
    return static_cast<std::size_t>((state >> 33) % n);
  };
  for (int s = 0; s < 300; ++s) {
    MapScenario sc;
    sc.categories = {1, 2};
    const std::size_t ng = next(4), np = next(5);
    for (std::size_t g = 0; g < ng; ++g)
      sc.gts.push_back({static_cast<int>(g + 1), static_cast<int>(next(2)), static_cast<int>(1 + next(2)),
                        gt_palette[next(gt_palette.size())]});
    for (std::size_t p = 0; p < np; ++p)
      sc.preds.push_back({static_cast<int>(next(2)), static_cast<int>(1 + next(2)),
                          pred_palette[next(pred_palette.size())], scores[next(scores.size())]});
    out.push_back(std::move(sc));
  }
  // Explicit cases: a duplicate before the real hit, and a miss ranked first.
  out.push_back({{{0, 1, {0, 0, 10, 10}, 0.9}, {0, 1, {0, 0, 10, 10}, 0.8}}, {{1, 0, 1, {0, 0, 10, 10}}}, {1}});
  out.push_back({{{0, 1, {50, 50, 5, 5}, 0.9}, {0, 1, {0, 0, 10, 9}, 0.8}},
                 {{1, 0, 1, {0, 0, 10, 10}}, {2, 0, 1, {20, 0, 10, 20}}},
                 {1}});
  return out;
}

}  // namespace oracle
