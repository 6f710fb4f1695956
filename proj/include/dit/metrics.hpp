#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dit/box.hpp"
#include "dit/coco.hpp"

namespace dit {

/// Intersection over union; 0 when the union is empty.
double iou(const Box& a, const Box& b);

struct MatchResult {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::vector<std::pair<std::size_t, std::size_t>> matches;  // (pred index, gt index)
};

/// Greedy one-to-one matching. Predictions are visited by descending score
/// (stable on ties); each takes the highest-IoU unmatched gt with IoU >= thr.
MatchResult match_detections(std::span<const Detection> preds, std::span<const Box> gts, double iou_thr);

struct Prf1 {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};
Prf1 prf1(std::size_t tp, std::size_t fp, std::size_t fn);

inline constexpr std::array<double, 4> kWf1Thresholds{0.6, 0.7, 0.8, 0.9};

/// IoU-weighted F1 over thresholds 0.6..0.9. Inputs may be fractions or
/// percentages but not a mix of both (std::invalid_argument).
double weighted_f1(const std::array<double, 4>& f1s);

/// 101-point interpolated AP for a single category.
double average_precision(std::span<const Detection> preds, std::span<const Box> gts, double iou_thr);

/// AP for predictions and ground truth spread over several images.
double average_precision(const std::vector<Detection>& preds, const std::vector<CocoAnnotation>& gts, double iou_thr);

inline constexpr std::array<double, 10> kCocoThresholds{0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95};

struct MapResult {
  std::map<int, std::array<double, 10>> ap;  // category -> AP per IoU threshold
  std::map<int, double> category_map;         // mean over thresholds
  double overall = 0.0;                       // mean over categories present in gt
};
MapResult map_range(const std::vector<Detection>& preds, const std::vector<CocoAnnotation>& gts,
                    const std::vector<int>& categories);

double accuracy(std::span<const int> pred, std::span<const int> truth);

/// Detection P/R/F1 at one IoU threshold summed over images and categories.
Prf1 dataset_prf1(const std::vector<Detection>& preds, const std::vector<CocoAnnotation>& gts, double iou_thr);

}  // namespace dit
