#include "dit/detect.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "dit/checkpoint.hpp"
#include "dit/metrics.hpp"
#include "dit/ops.hpp"
#include "dit/parallel.hpp"

namespace dit {

namespace {

Tensor normal_init(Shape shape, Rng& rng, double std) {
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(rng.normal() * std);
  return Tensor::from(std::move(shape), std::move(v));
}

const Tensor& lookup(const ParamStore& store, const std::string& name) {
  const Param* prm = store.find(name);
  if (!prm) throw std::logic_error("missing parameter " + name);
  return prm->tensor;
}

// [A*k, H, W] -> [H*W*A, k], rows ordered by cell then anchor.
Tensor per_anchor_rows(const Tensor& map, std::size_t k) {
  const std::size_t ch = map.dim(0), hw = map.dim(1) * map.dim(2);
  Tensor t = ops::transpose(ops::reshape(map, {ch, hw}));
  return ops::reshape(t, {hw * (ch / k), k});
}

constexpr double kMaxLogDelta = 4.135166556742356;  // ln(1000 / 16)

}  // namespace

std::array<std::size_t, 4> fpn_tap_indices(std::size_t depth) {
  const std::array<std::size_t, 4> t{depth / 3, depth / 2, 2 * depth / 3, depth};
  if (t[0] < 1 || !(t[0] < t[1] && t[1] < t[2] && t[2] < t[3]))
    throw std::invalid_argument("fpn taps {" + std::to_string(t[0]) + "," + std::to_string(t[1]) + "," +
                                std::to_string(t[2]) + "," + std::to_string(t[3]) + "} for depth " +
                                std::to_string(depth) + " are not strictly increasing");
  return t;
}

FpnAdapter::FpnAdapter(std::size_t hidden, const FpnConfig& cfg, std::uint64_t seed) : hidden_(hidden), cfg_(cfg) {
  if (cfg.channels == 0) throw std::invalid_argument("fpn: channels must be > 0");
  Rng rng(seed);
  const std::size_t h = hidden, c = cfg.channels;
  const double up_std = std::sqrt(1.0 / static_cast<double>(h));
  params_.add("up4.t1.w", normal_init({h, h, 2, 2}, rng, up_std));
  params_.add("up4.t1.b", Tensor::zeros({h}), false);
  if (cfg.norm_between) {
    params_.add("up4.norm.g", Tensor::full({h}, 1.0f), false);
    params_.add("up4.norm.b", Tensor::zeros({h}), false);
  }
  params_.add("up4.t2.w", normal_init({h, h, 2, 2}, rng, up_std));
  params_.add("up4.t2.b", Tensor::zeros({h}), false);
  params_.add("up2.t.w", normal_init({h, h, 2, 2}, rng, up_std));
  params_.add("up2.t.b", Tensor::zeros({h}), false);
  for (int i = 0; i < 4; ++i) {
    const std::string n = "lat." + std::to_string(i) + ".";
    params_.add(n + "w", normal_init({c, h, 1, 1}, rng, up_std));
    params_.add(n + "b", Tensor::zeros({c}), false);
  }
}

const Tensor& FpnAdapter::p(const std::string& name) const { return lookup(params_, name); }

FeaturePyramid FpnAdapter::forward(const std::vector<Tensor>& taps, std::size_t grid_h, std::size_t grid_w) const {
  if (taps.size() != 4) throw std::invalid_argument("fpn_adapt: expected 4 taps, got " + std::to_string(taps.size()));
  std::vector<Tensor> maps;
  for (const auto& t : taps) {
    if (t.ndim() != 2 || t.dim(0) != grid_h * grid_w || t.dim(1) != hidden_)
      throw std::invalid_argument("fpn_adapt: tap " + shape_str(t.shape()) + " does not match grid " +
                                  std::to_string(grid_h) + "x" + std::to_string(grid_w) + " with hidden " +
                                  std::to_string(hidden_));
    maps.push_back(ops::reshape(ops::transpose(t), {hidden_, grid_h, grid_w}));
  }
  Tensor x4 = ops::conv_transpose2x2(maps[0], p("up4.t1.w"), p("up4.t1.b"));
  if (cfg_.norm_between) x4 = ops::gelu(ops::channel_norm(x4, p("up4.norm.g"), p("up4.norm.b")));
  x4 = ops::conv_transpose2x2(x4, p("up4.t2.w"), p("up4.t2.b"));
  Tensor x2 = ops::conv_transpose2x2(maps[1], p("up2.t.w"), p("up2.t.b"));
  Tensor x05 = ops::maxpool2x2(maps[3]);
  const Tensor* src[4] = {&x4, &x2, &maps[2], &x05};

  FeaturePyramid out;
  for (int i = 0; i < 4; ++i) {
    const std::string n = "lat." + std::to_string(i) + ".";
    out.levels.push_back(ops::conv2d(*src[i], p(n + "w"), p(n + "b"), 1, 0));
  }
  return out;
}

AnchorConfig AnchorConfig::layout() { return {}; }

AnchorConfig AnchorConfig::text() {
  AnchorConfig a;
  a.sizes = {4, 8, 16, 32, 64};
  return a;
}

void AnchorConfig::validate() const {
  if (sizes.size() != 4 && sizes.size() != 5) throw std::invalid_argument("anchors: need 4 or 5 sizes");
  for (std::size_t i = 0; i < sizes.size(); ++i)
    if (!(sizes[i] > 0) || (i > 0 && sizes[i] <= sizes[i - 1]))
      throw std::invalid_argument("anchors: sizes must be positive and strictly increasing");
  if (ratios.empty()) throw std::invalid_argument("anchors: need at least one aspect ratio");
  for (double r : ratios)
    if (!(r > 0)) throw std::invalid_argument("anchors: ratios must be positive");
}

std::pair<std::size_t, std::size_t> level_dims(std::size_t level, std::size_t grid_h, std::size_t grid_w) {
  switch (level) {
    case 0: return {4 * grid_h, 4 * grid_w};
    case 1: return {2 * grid_h, 2 * grid_w};
    case 2: return {grid_h, grid_w};
    case 3: return {grid_h / 2, grid_w / 2};
    case 4: return {grid_h / 4, grid_w / 4};
    default: throw std::out_of_range("pyramid level " + std::to_string(level) + " outside [0,5)");
  }
}

std::vector<Box> gen_anchors(std::size_t level, std::size_t img_w, std::size_t img_h, const AnchorConfig& cfg,
                             std::size_t patch) {
  cfg.validate();
  if (level >= cfg.num_levels())
    throw std::out_of_range("anchor level " + std::to_string(level) + " outside [0," +
                            std::to_string(cfg.num_levels()) + ")");
  if (img_w % patch != 0 || img_h % patch != 0)
    throw std::invalid_argument("gen_anchors: image dims must be multiples of the patch size");
  const auto [mh, mw] = level_dims(level, img_h / patch, img_w / patch);
  const double s = static_cast<double>(level_stride(level));
  const double size = cfg.sizes[level];
  std::vector<Box> out;
  out.reserve(mh * mw * cfg.ratios.size());
  for (std::size_t i = 0; i < mh; ++i)
    for (std::size_t j = 0; j < mw; ++j) {
      const double cx = (static_cast<double>(j) + 0.5) * s, cy = (static_cast<double>(i) + 0.5) * s;
      for (double r : cfg.ratios) {
        const double w = size / std::sqrt(r), h = size * std::sqrt(r);
        out.push_back({cx - 0.5 * w, cy - 0.5 * h, w, h});
      }
    }
  return out;
}

std::vector<Box> gen_all_anchors(std::size_t img_w, std::size_t img_h, const AnchorConfig& cfg, std::size_t patch) {
  std::vector<Box> all;
  for (std::size_t l = 0; l < cfg.num_levels(); ++l) {
    auto a = gen_anchors(l, img_w, img_h, cfg, patch);
    all.insert(all.end(), a.begin(), a.end());
  }
  return all;
}

Delta encode_delta(const Box& a, const Box& g) {
  return {static_cast<float>((g.cx() - a.cx()) / a.w), static_cast<float>((g.cy() - a.cy()) / a.h),
          static_cast<float>(std::log(g.w / a.w)), static_cast<float>(std::log(g.h / a.h))};
}

std::vector<Box> decode_boxes(const std::vector<Box>& anchors, const std::vector<Delta>& deltas, double img_w,
                              double img_h) {
  if (anchors.size() != deltas.size())
    throw std::invalid_argument("decode_boxes: " + std::to_string(anchors.size()) + " anchors vs " +
                                std::to_string(deltas.size()) + " deltas");
  std::vector<Box> out(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const auto& a = anchors[i];
    const auto& d = deltas[i];
    for (float v : d)
      if (!std::isfinite(v)) throw std::invalid_argument("decode_boxes: non-finite delta at anchor " + std::to_string(i));
    const double cx = a.cx() + d[0] * a.w, cy = a.cy() + d[1] * a.h;
    const double w = a.w * std::exp(std::min<double>(d[2], kMaxLogDelta));
    const double h = a.h * std::exp(std::min<double>(d[3], kMaxLogDelta));
    const double x1 = std::clamp(cx - 0.5 * w, 0.0, img_w), y1 = std::clamp(cy - 0.5 * h, 0.0, img_h);
    const double x2 = std::clamp(cx + 0.5 * w, 0.0, img_w), y2 = std::clamp(cy + 0.5 * h, 0.0, img_h);
    out[i] = {x1, y1, x2 - x1, y2 - y1};
  }
  return out;
}

AnchorTargets assign_targets(const std::vector<Box>& anchors, const std::vector<GtBox>& gts, double pos_iou,
                             double neg_iou) {
  if (!(0.0 <= neg_iou && neg_iou <= pos_iou && pos_iou <= 1.0))
    throw std::invalid_argument("assign_targets: need 0 <= neg_iou <= pos_iou <= 1");
  AnchorTargets t;
  t.labels.assign(anchors.size(), 0);
  t.deltas.assign(anchors.size(), Delta{0, 0, 0, 0});
  if (gts.empty()) return t;

  std::vector<double> best_iou(anchors.size(), 0.0), gt_best(gts.size(), 0.0);
  std::vector<std::size_t> best_gt(anchors.size(), 0);
  std::vector<double> m(anchors.size() * gts.size());
  for (std::size_t i = 0; i < anchors.size(); ++i)
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(anchors[i], gts[g].box);
      m[i * gts.size() + g] = v;
      if (v > best_iou[i]) {
        best_iou[i] = v;
        best_gt[i] = g;
      }
      gt_best[g] = std::max(gt_best[g], v);
    }
  std::vector<int> assigned(anchors.size(), -1);
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (best_iou[i] >= pos_iou) assigned[i] = static_cast<int>(best_gt[i]);
    else if (best_iou[i] >= neg_iou) t.labels[i] = -1;
  }
  // Every gt keeps its best anchor(s) even below the positive threshold.
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (gt_best[g] <= 0.0) continue;
    for (std::size_t i = 0; i < anchors.size(); ++i)
      if (m[i * gts.size() + g] == gt_best[g]) assigned[i] = static_cast<int>(g);
  }
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (assigned[i] < 0) continue;
    const auto& g = gts[static_cast<std::size_t>(assigned[i])];
    t.labels[i] = g.label;
    t.deltas[i] = encode_delta(anchors[i], g.box);
    ++t.num_positive;
  }
  return t;
}

DetectionHead::DetectionHead(std::size_t channels, std::size_t anchors_per_cell, std::size_t num_classes,
                             std::uint64_t seed)
    : anchors_(anchors_per_cell), classes_(num_classes) {
  if (num_classes == 0 || anchors_per_cell == 0) throw std::invalid_argument("detection head: empty output");
  Rng rng(seed);
  const std::size_t c = channels;
  const double tower_std = std::sqrt(2.0 / static_cast<double>(9 * c));
  for (int i = 0; i < 2; ++i) {
    const std::string n = "tower." + std::to_string(i) + ".";
    params_.add(n + "w", normal_init({c, c, 3, 3}, rng, tower_std));
    params_.add(n + "b", Tensor::zeros({c}), false);
  }
  const std::size_t k = num_classes + 1;
  params_.add("cls.w", normal_init({anchors_per_cell * k, c, 1, 1}, rng, 0.01));
  // Background starts at probability 0.99.
  std::vector<float> bias(anchors_per_cell * k, 0.0f);
  for (std::size_t a = 0; a < anchors_per_cell; ++a)
    bias[a * k] = static_cast<float>(std::log(99.0 * static_cast<double>(num_classes)));
  params_.add("cls.b", Tensor::from({anchors_per_cell * k}, std::move(bias)), false);
  params_.add("box.w", normal_init({anchors_per_cell * 4, c, 1, 1}, rng, 0.01));
  params_.add("box.b", Tensor::zeros({anchors_per_cell * 4}), false);
}

const Tensor& DetectionHead::p(const std::string& name) const { return lookup(params_, name); }

DetectionHead::Output DetectionHead::forward(const FeaturePyramid& pyramid, bool extra_level) const {
  std::vector<Tensor> maps = pyramid.levels;
  if (extra_level) maps.push_back(ops::maxpool2x2(maps.back()));
  std::vector<Tensor> logits, deltas;
  for (const auto& m : maps) {
    Tensor t = ops::gelu(ops::conv2d(m, p("tower.0.w"), p("tower.0.b"), 1, 1));
    t = ops::gelu(ops::conv2d(t, p("tower.1.w"), p("tower.1.b"), 1, 1));
    logits.push_back(per_anchor_rows(ops::conv2d(t, p("cls.w"), p("cls.b"), 1, 0), classes_ + 1));
    deltas.push_back(per_anchor_rows(ops::conv2d(t, p("box.w"), p("box.b"), 1, 0), 4));
  }
  return {ops::concat_rows(logits), ops::concat_rows(deltas)};
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thr) {
  for (const auto& d : dets)
    if (!std::isfinite(d.score)) throw std::invalid_argument("nms: non-finite score");
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return dets[a].score > dets[b].score; });
  std::vector<Detection> kept;
  for (auto i : order) {
    const auto& d = dets[i];
    bool suppressed = false;
    for (const auto& k : kept)
      if (k.image_id == d.image_id && k.category_id == d.category_id && iou(k.bbox, d.bbox) >= iou_thr) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

Tensor detection_loss(const DetectionHead::Output& out, const AnchorTargets& targets, Rng& rng,
                      NegativeSampling sampling, std::size_t neg_per_pos) {
  const std::size_t n = targets.labels.size();
  if (out.logits.dim(0) != n || out.deltas.dim(0) != n)
    throw std::invalid_argument("detection_loss: " + std::to_string(n) + " targets vs head rows " +
                                shape_str(out.logits.shape()));
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets.labels[i] > 0) pos.push_back(i);
    else if (targets.labels[i] == 0) neg.push_back(i);
  }
  const std::size_t want = std::min(neg.size(), neg_per_pos * std::max<std::size_t>(pos.size(), 1));
  if (sampling == NegativeSampling::hardest) {
    // Lowest background probability first, i.e. the largest background loss.
    const auto logits = out.logits.data();
    const std::size_t k = out.logits.dim(1);
    std::vector<double> bg(n, 0.0);
    for (auto i : neg) {
      const float* row = logits.data() + i * k;
      const float mx = *std::max_element(row, row + k);
      double z = 0.0;
      for (std::size_t c = 0; c < k; ++c) z += std::exp(static_cast<double>(row[c] - mx));
      bg[i] = static_cast<double>(row[0] - mx) - std::log(z);
    }
    std::stable_sort(neg.begin(), neg.end(), [&](auto a, auto b) { return bg[a] < bg[b]; });
  } else {
    for (std::size_t i = 0; i < want; ++i)
      std::swap(neg[i],
                neg[i + static_cast<std::size_t>(rng.randint(0, static_cast<std::int64_t>(neg.size() - i - 1)))]);
  }
  std::vector<std::size_t> rows = pos;
  rows.insert(rows.end(), neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(want));
  if (rows.empty()) throw std::invalid_argument("detection_loss: no anchors to sample");
  std::vector<std::int64_t> labels;
  for (auto r : rows) labels.push_back(targets.labels[r]);
  Tensor loss = ops::cross_entropy(ops::gather_rows(out.logits, rows), labels);
  if (!pos.empty()) {
    std::vector<float> tgt;
    for (auto r : pos) tgt.insert(tgt.end(), targets.deltas[r].begin(), targets.deltas[r].end());
    Tensor box = ops::smooth_l1(ops::gather_rows(out.deltas, pos), tgt, 1.0f / 9.0f);
    loss = ops::add(loss, ops::scale(box, 1.0f / static_cast<float>(pos.size())));
  }
  return loss;
}

Detector::Detector(const DetectorConfig& cfg, std::uint64_t seed)
    : cfg_(cfg),
      vit_(cfg.vit, seed),
      fpn_(cfg.vit.hidden, cfg.fpn, seed ^ 0x66706eULL),
      head_(cfg.fpn.channels, cfg.anchors.per_cell(), cfg.categories.size(), seed ^ 0x686561ULL) {
  cfg.anchors.validate();
  fpn_tap_indices(cfg.vit.depth);
  if (cfg.categories.empty()) throw std::invalid_argument("detector: no categories");
}

ParamStore Detector::all_params() const {
  ParamStore all;
  all.extend(vit_.params(), "vit/");
  all.extend(fpn_.params(), "fpn/");
  all.extend(head_.params(), "det_head/");
  return all;
}

Image Detector::prepare(const Image& img) const {
  const std::size_t p = cfg_.vit.patch;
  Image x = cfg_.binarize ? adaptive_binarize(to_channels(img, 1)) : img;
  const std::size_t w = (x.width + p - 1) / p * p, h = (x.height + p - 1) / p * p;
  return (w == x.width && h == x.height) ? x : pad_to(x, w, h, 255.0f);
}

DetectionHead::Output Detector::forward(const Image& prepared, bool training, Rng* rng) const {
  const auto taps = fpn_tap_indices(cfg_.vit.depth);
  const PatchSequence seq = prepare_patches(prepared, cfg_.vit);
  const EncoderOutput enc = vit_.encode(vit_.patch_embed(seq), {taps.begin(), taps.end()}, training, rng);
  const FeaturePyramid pyr = fpn_.forward(enc.taps, seq.grid_h, seq.grid_w);
  return head_.forward(pyr, cfg_.anchors.num_levels() == 5);
}

Tensor Detector::loss(const Image& img, const std::vector<GtBox>& gts, Rng& rng) const {
  const Image x = prepare(img);
  const auto anchors = gen_all_anchors(x.width, x.height, cfg_.anchors, cfg_.vit.patch);
  const auto targets = assign_targets(anchors, gts, cfg_.pos_iou, cfg_.neg_iou);
  return detection_loss(forward(x, true, &rng), targets, rng, NegativeSampling::hardest);
}

std::vector<Detection> Detector::detect(const Image& img, double score_thr, int image_id) const {
  NoGradGuard guard;
  const Image x = prepare(img);
  const auto anchors = gen_all_anchors(x.width, x.height, cfg_.anchors, cfg_.vit.patch);
  const auto out = forward(x, false, nullptr);
  const Tensor probs = ops::softmax(out.logits);
  const auto pd = probs.data();
  const auto dd = out.deltas.data();
  const std::size_t k = cfg_.categories.size() + 1;

  std::vector<std::pair<std::size_t, std::size_t>> cand;  // (anchor, label)
  for (std::size_t i = 0; i < anchors.size(); ++i)
    for (std::size_t c = 1; c < k; ++c)
      if (pd[i * k + c] >= score_thr) cand.emplace_back(i, c);
  std::stable_sort(cand.begin(), cand.end(),
                   [&](auto a, auto b) { return pd[a.first * k + a.second] > pd[b.first * k + b.second]; });
  if (cand.size() > 1000) cand.resize(1000);

  std::vector<Box> sel;
  std::vector<Delta> del;
  for (auto [i, c] : cand) {
    sel.push_back(anchors[i]);
    del.push_back({dd[i * 4], dd[i * 4 + 1], dd[i * 4 + 2], dd[i * 4 + 3]});
  }
  const auto boxes =
      decode_boxes(sel, del, static_cast<double>(img.width), static_cast<double>(img.height));
  std::vector<Detection> dets;
  for (std::size_t j = 0; j < cand.size(); ++j) {
    if (boxes[j].w <= 0.0 || boxes[j].h <= 0.0) continue;
    dets.push_back({image_id, cfg_.categories[cand[j].second - 1], boxes[j], pd[cand[j].first * k + cand[j].second]});
  }
  auto kept = nms(dets, cfg_.nms_iou);
  if (kept.size() > cfg_.max_detections) kept.resize(cfg_.max_detections);
  return kept;
}

int Detector::label_of(int category_id) const {
  for (std::size_t i = 0; i < cfg_.categories.size(); ++i)
    if (cfg_.categories[i] == category_id) return static_cast<int>(i) + 1;
  throw std::invalid_argument("detector: category " + std::to_string(category_id) + " not in its label set");
}

std::vector<GtBox> Detector::targets_of(const SynthDocument& doc) const {
  std::vector<GtBox> out;
  for (const auto& e : doc.elements) {
    const int id = category_id(e.category);
    if (std::find(cfg_.categories.begin(), cfg_.categories.end(), id) != cfg_.categories.end())
      out.push_back({e.bbox, label_of(id)});
  }
  return out;
}

void save_detector_config(const std::filesystem::path& path, const DetectorConfig& c) {
  nlohmann::json j;
  j["vit"] = vit_config_to_json(c.vit);
  j["fpn"] = {{"channels", c.fpn.channels}, {"norm_between", c.fpn.norm_between}};
  j["anchors"] = {{"sizes", c.anchors.sizes}, {"ratios", c.anchors.ratios}};
  j["categories"] = c.categories;
  j["pos_iou"] = c.pos_iou;
  j["neg_iou"] = c.neg_iou;
  j["nms_iou"] = c.nms_iou;
  j["max_detections"] = c.max_detections;
  j["binarize"] = c.binarize;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << j.dump(1) << '\n';
}

DetectorConfig load_detector_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw CheckpointError("cannot open detector config " + path.string());
  const auto j = nlohmann::json::parse(f);
  DetectorConfig c;
  c.vit = vit_config_from_json(j.at("vit"));
  c.fpn.channels = j.at("fpn").at("channels");
  c.fpn.norm_between = j.at("fpn").at("norm_between");
  c.anchors.sizes = j.at("anchors").at("sizes").get<std::vector<double>>();
  c.anchors.ratios = j.at("anchors").at("ratios").get<std::vector<double>>();
  c.categories = j.at("categories").get<std::vector<int>>();
  c.pos_iou = j.at("pos_iou");
  c.neg_iou = j.at("neg_iou");
  c.nms_iou = j.at("nms_iou");
  c.max_detections = j.at("max_detections");
  c.binarize = j.at("binarize");
  return c;
}

void Detector::save(const std::filesystem::path& path) const {
  write_checkpoint(path, snapshot(all_params()));
  save_detector_config(path.string() + ".json", cfg_);
}

Detector Detector::load(const std::filesystem::path& path) {
  Detector d(load_detector_config(path.string() + ".json"), 0);
  ParamStore all = d.all_params();
  restore(all, read_checkpoint(path));
  return d;
}

std::vector<DetectLogRow> train_detector(Detector& det, const std::vector<SynthDocument>& docs,
                                         const DetectTrainConfig& cfg, std::ostream* csv) {
  if (docs.empty()) throw std::invalid_argument("train_detector: no documents");
  if (cfg.steps < 0 || cfg.batch == 0) throw std::invalid_argument("train_detector: bad steps or batch");
  Rng rng(cfg.seed);
  if (cfg.layer_decay != 1.0f) det.backbone().apply_layer_decay(cfg.layer_decay);
  ParamStore all = det.all_params();
  AdamWConfig ac;
  ac.weight_decay = cfg.weight_decay;
  ac.grad_clip = cfg.grad_clip;
  AdamW opt(all, ac);
  const LrSchedule sched{cfg.peak_lr, std::min(cfg.warmup, cfg.steps), std::max<std::int64_t>(cfg.steps, 1)};
  if (csv) *csv << "step,lr,loss\n";

  std::vector<std::size_t> order(docs.size());
  std::size_t cursor = order.size();
  std::vector<DetectLogRow> log;
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    std::vector<Tensor> losses;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i)
          std::swap(order[i - 1], order[static_cast<std::size_t>(rng.randint(0, static_cast<std::int64_t>(i - 1)))]);
        cursor = 0;
      }
      const SynthDocument& doc = docs[order[cursor++]];
      std::vector<GtBox> gts = det.targets_of(doc);
      Image img = doc.image;
      if (cfg.multiscale) {
        ScaleTransform tf;
        img = multiscale_resize(doc.image, rng, &tf);
        std::vector<GtBox> mapped;
        for (auto g : gts) {
          const double x1 = std::max(g.box.x, static_cast<double>(tf.crop.x));
          const double y1 = std::max(g.box.y, static_cast<double>(tf.crop.y));
          const double x2 = std::min(g.box.x2(), static_cast<double>(tf.crop.x + tf.crop.w));
          const double y2 = std::min(g.box.y2(), static_cast<double>(tf.crop.y + tf.crop.h));
          if (x2 - x1 < 1.0 || y2 - y1 < 1.0) continue;
          g.box = {(x1 - tf.crop.x) * tf.sx, (y1 - tf.crop.y) * tf.sy, (x2 - x1) * tf.sx, (y2 - y1) * tf.sy};
          mapped.push_back(g);
        }
        gts = std::move(mapped);
      }
      losses.push_back(det.loss(img, gts, rng));
    }
    Tensor loss = losses[0];
    for (std::size_t i = 1; i < losses.size(); ++i) loss = ops::add(loss, losses[i]);
    loss = ops::scale(loss, 1.0f / static_cast<float>(losses.size()));
    all.zero_grad();
    loss.backward();
    const float lr = lr_at(sched, step);
    opt.step(lr);
    log.push_back({step, lr, loss.item()});
    if (csv) {
      char line[96];
      std::snprintf(line, sizeof line, "%lld,%.9g,%.9g\n", static_cast<long long>(step), lr, loss.item());
      *csv << line << std::flush;
    }
  }
  return log;
}

std::vector<Detection> detect_all(const Detector& det, const std::vector<SynthDocument>& docs, double score_thr,
                                  std::size_t workers) {
  std::vector<std::vector<Detection>> per(docs.size());
  parallel_for(docs.size(), workers,
               [&](std::size_t i) { per[i] = det.detect(docs[i].image, score_thr, static_cast<int>(i)); });
  std::vector<Detection> all;
  for (auto& v : per) all.insert(all.end(), v.begin(), v.end());
  return all;
}

std::vector<CocoAnnotation> ground_truth(const Detector& det, const std::vector<SynthDocument>& docs) {
  std::vector<CocoAnnotation> out;
  int id = 1;
  for (std::size_t i = 0; i < docs.size(); ++i)
    for (const auto& g : det.targets_of(docs[i]))
      out.push_back({id++, static_cast<int>(i), det.config().categories[static_cast<std::size_t>(g.label - 1)], g.box});
  return out;
}

}  // namespace dit
