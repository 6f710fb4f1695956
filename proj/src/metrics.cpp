#include "dit/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <stdexcept>

namespace dit {

double iou(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x, b.x));
  const double ih = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y, b.y));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

namespace {

std::vector<std::size_t> score_order(std::span<const Detection> preds) {
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return preds[a].score > preds[b].score; });
  return order;
}

// Marks each prediction (in the given visiting order) as true or false positive.
std::vector<bool> greedy_flags(std::span<const Detection> preds, std::span<const Box> gts,
                               const std::vector<std::size_t>& order, double thr,
                               std::vector<std::pair<std::size_t, std::size_t>>* matches) {
  std::vector<bool> taken(gts.size(), false), flags;
  flags.reserve(order.size());
  for (auto pi : order) {
    double best = -1.0;
    std::size_t best_g = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double v = iou(preds[pi].bbox, gts[g]);
      if (v >= thr && v > best) {
        best = v;
        best_g = g;
      }
    }
    if (best_g < gts.size()) {
      taken[best_g] = true;
      if (matches) matches->emplace_back(pi, best_g);
    }
    flags.push_back(best_g < gts.size());
  }
  return flags;
}

double interpolated_ap(const std::vector<bool>& flags, std::size_t num_gt) {
  if (num_gt == 0) return 0.0;
  std::vector<double> prec, rec;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    tp += flags[i];
    prec.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    rec.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }
  for (std::size_t i = prec.size(); i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double total = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    const auto it = std::lower_bound(rec.begin(), rec.end(), r - 1e-12);
    if (it != rec.end()) total += prec[static_cast<std::size_t>(it - rec.begin())];
  }
  return total / 101.0;
}

}  // namespace

MatchResult match_detections(std::span<const Detection> preds, std::span<const Box> gts, double iou_thr) {
  MatchResult r;
  const auto flags = greedy_flags(preds, gts, score_order(preds), iou_thr, &r.matches);
  r.tp = r.matches.size();
  r.fp = flags.size() - r.tp;
  r.fn = gts.size() - r.tp;
  return r;
}

Prf1 prf1(std::size_t tp, std::size_t fp, std::size_t fn) {
  Prf1 out;
  if (tp + fp > 0) out.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  if (tp + fn > 0) out.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  if (out.precision + out.recall > 0) out.f1 = 2 * out.precision * out.recall / (out.precision + out.recall);
  return out;
}

double weighted_f1(const std::array<double, 4>& f1s) {
  const bool fractions = std::all_of(f1s.begin(), f1s.end(), [](double v) { return v <= 1.0; });
  const bool percents = std::all_of(f1s.begin(), f1s.end(), [](double v) { return v >= 1.0; });
  if (!fractions && !percents) throw std::invalid_argument("weighted_f1: inputs mix fraction and percent scales");
  for (double v : f1s)
    if (v < 0.0 || v > 100.0) throw std::invalid_argument("weighted_f1: F1 value out of range");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    num += kWf1Thresholds[i] * f1s[i];
    den += kWf1Thresholds[i];
  }
  return num / den;
}

double average_precision(std::span<const Detection> preds, std::span<const Box> gts, double iou_thr) {
  return interpolated_ap(greedy_flags(preds, gts, score_order(preds), iou_thr, nullptr), gts.size());
}

double average_precision(const std::vector<Detection>& preds, const std::vector<CocoAnnotation>& gts,
                         double iou_thr) {
  // Matching is per image; the precision-recall sweep is global in score order.
  std::map<int, std::vector<Box>> gt_by_image;
  for (const auto& g : gts) gt_by_image[g.image_id].push_back(g.bbox);
  std::map<int, std::vector<bool>> taken;
  for (const auto& [id, boxes] : gt_by_image) taken[id].assign(boxes.size(), false);

  std::vector<bool> flags;
  for (auto pi : score_order(preds)) {
    const auto& d = preds[pi];
    auto it = gt_by_image.find(d.image_id);
    bool hit = false;
    if (it != gt_by_image.end()) {
      auto& tk = taken[d.image_id];
      double best = -1.0;
      std::size_t best_g = tk.size();
      for (std::size_t g = 0; g < it->second.size(); ++g) {
        if (tk[g]) continue;
        const double v = iou(d.bbox, it->second[g]);
        if (v >= iou_thr && v > best) {
          best = v;
          best_g = g;
        }
      }
      if (best_g < tk.size()) {
        tk[best_g] = true;
        hit = true;
      }
    }
    flags.push_back(hit);
  }
  return interpolated_ap(flags, gts.size());
}

MapResult map_range(const std::vector<Detection>& preds, const std::vector<CocoAnnotation>& gts,
                    const std::vector<int>& categories) {
  MapResult out;
  std::size_t present = 0;
  for (int cat : categories) {
    std::vector<Detection> p;
    std::vector<CocoAnnotation> g;
    for (const auto& d : preds)
      if (d.category_id == cat) p.push_back(d);
    for (const auto& a : gts)
      if (a.category_id == cat) g.push_back(a);
    std::array<double, 10> aps{};
    for (std::size_t t = 0; t < kCocoThresholds.size(); ++t) aps[t] = average_precision(p, g, kCocoThresholds[t]);
    out.ap[cat] = aps;
    out.category_map[cat] = std::accumulate(aps.begin(), aps.end(), 0.0) / 10.0;
    if (!g.empty()) {
      out.overall += out.category_map[cat];
      ++present;
    }
  }
  if (present > 0) out.overall /= static_cast<double>(present);
  return out;
}

double accuracy(std::span<const int> pred, std::span<const int> truth) {
  if (pred.size() != truth.size())
    throw std::invalid_argument("accuracy: " + std::to_string(pred.size()) + " predictions vs " +
                                std::to_string(truth.size()) + " labels");
  if (pred.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

Prf1 dataset_prf1(const std::vector<Detection>& preds, const std::vector<CocoAnnotation>& gts, double iou_thr) {
  std::set<std::pair<int, int>> keys;
  for (const auto& d : preds) keys.emplace(d.image_id, d.category_id);
  for (const auto& g : gts) keys.emplace(g.image_id, g.category_id);
  std::size_t tp = 0, fp = 0, fn = 0;
  for (const auto& [img, cat] : keys) {
    std::vector<Detection> p;
    std::vector<Box> g;
    for (const auto& d : preds)
      if (d.image_id == img && d.category_id == cat) p.push_back(d);
    for (const auto& a : gts)
      if (a.image_id == img && a.category_id == cat) g.push_back(a.bbox);
    const auto m = match_detections(p, g, iou_thr);
    tp += m.tp;
    fp += m.fp;
    fn += m.fn;
  }
  return prf1(tp, fp, fn);
}

}  // namespace dit
