#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "dit/box.hpp"
#include "dit/coco.hpp"
#include "dit/imaging.hpp"
#include "dit/optim.hpp"
#include "dit/rng.hpp"
#include "dit/synthdoc.hpp"
#include "dit/vit.hpp"

namespace dit {

/// Blocks {d/3, d/2, 2d/3, d}; throws when they are not strictly increasing.
std::array<std::size_t, 4> fpn_tap_indices(std::size_t depth);

struct FpnConfig {
  std::size_t channels = 256;
  bool norm_between = true;  // channel norm + gelu between the two x2 upsamplers
};

/// Four feature maps [c, H, W] at strides 4, 8, 16, 32.
struct FeaturePyramid {
  std::vector<Tensor> levels;
  static constexpr std::array<std::size_t, 4> kStrides{4, 8, 16, 32};
};

/// Resamples four single-scale ViT taps into a feature pyramid.
class FpnAdapter {
 public:
  FpnAdapter(std::size_t hidden, const FpnConfig& cfg, std::uint64_t seed);
  FeaturePyramid forward(const std::vector<Tensor>& taps, std::size_t grid_h, std::size_t grid_w) const;
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const FpnConfig& config() const { return cfg_; }

 private:
  const Tensor& p(const std::string& name) const;
  std::size_t hidden_;
  FpnConfig cfg_;
  ParamStore params_;
};

struct AnchorConfig {
  std::vector<double> sizes{32, 64, 128, 256, 512};  // one per level; a fifth adds a stride-64 level
  std::vector<double> ratios{0.5, 1.0, 2.0};         // h / w

  static AnchorConfig layout();
  static AnchorConfig text();
  std::size_t num_levels() const { return sizes.size(); }
  std::size_t per_cell() const { return ratios.size(); }
  void validate() const;
};

inline std::size_t level_stride(std::size_t level) { return std::size_t{4} << level; }

/// Map dims of a pyramid level for a patch grid (levels 3 and 4 floor-halve).
std::pair<std::size_t, std::size_t> level_dims(std::size_t level, std::size_t grid_h, std::size_t grid_w);

/// Anchors of one level, ordered by cell (row-major) then ratio. Image dims
/// must be multiples of `patch`.
std::vector<Box> gen_anchors(std::size_t level, std::size_t img_w, std::size_t img_h, const AnchorConfig& cfg,
                             std::size_t patch = 16);
/// Anchors for every level, concatenated in level order.
std::vector<Box> gen_all_anchors(std::size_t img_w, std::size_t img_h, const AnchorConfig& cfg, std::size_t patch = 16);

using Delta = std::array<float, 4>;

Delta encode_delta(const Box& anchor, const Box& gt);
/// Inverse of encode_delta, clipped to [0, img_w] x [0, img_h].
std::vector<Box> decode_boxes(const std::vector<Box>& anchors, const std::vector<Delta>& deltas, double img_w,
                              double img_h);

struct GtBox {
  Box box;
  int label = 1;  // 1-based class index of the head
};

struct AnchorTargets {
  std::vector<int> labels;  // -1 ignore, 0 background, k > 0 class
  std::vector<Delta> deltas;
  std::size_t num_positive = 0;
};

AnchorTargets assign_targets(const std::vector<Box>& anchors, const std::vector<GtBox>& gts, double pos_iou = 0.5,
                             double neg_iou = 0.4);

/// Shared conv tower and per-anchor class / box predictors.
class DetectionHead {
 public:
  DetectionHead(std::size_t channels, std::size_t anchors_per_cell, std::size_t num_classes, std::uint64_t seed);

  struct Output {
    Tensor logits;  // [anchors, num_classes + 1], column 0 is background
    Tensor deltas;  // [anchors, 4]
  };
  /// Runs on every level in order (adding the stride-64 level when
  /// `extra_level`) and concatenates per-anchor rows.
  Output forward(const FeaturePyramid& pyramid, bool extra_level) const;

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  std::size_t num_classes() const { return classes_; }

 private:
  const Tensor& p(const std::string& name) const;
  std::size_t anchors_, classes_;
  ParamStore params_;
};

/// Greedy suppression within each (image, category), stable on equal scores.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thr = 0.5);

enum class NegativeSampling { random, hardest };

/// Softmax cross-entropy over sampled anchors (all positives, 3 negatives per
/// positive) plus smooth-L1 (beta 1/9) on positive deltas per positive.
/// `hardest` keeps the negatives with the lowest background probability;
/// `random` draws them from rng.
Tensor detection_loss(const DetectionHead::Output& out, const AnchorTargets& targets, Rng& rng,
                      NegativeSampling sampling = NegativeSampling::hardest, std::size_t neg_per_pos = 3);

struct DetectorConfig {
  VitConfig vit = VitConfig::base();
  FpnConfig fpn{};
  AnchorConfig anchors{};
  std::vector<int> categories{category_id(Category::table), category_id(Category::figure)};
  double pos_iou = 0.5;
  double neg_iou = 0.4;
  double nms_iou = 0.5;
  std::size_t max_detections = 100;
  bool binarize = false;
};

class Detector {
 public:
  Detector(const DetectorConfig& cfg, std::uint64_t seed);

  const DetectorConfig& config() const { return cfg_; }
  VisionTransformer& backbone() { return vit_; }
  const VisionTransformer& backbone() const { return vit_; }
  FpnAdapter& fpn() { return fpn_; }
  DetectionHead& head() { return head_; }
  const DetectionHead& head() const { return head_; }
  /// All parameters under "vit/", "fpn/" and "det_head/".
  ParamStore all_params() const;

  /// Image padded to a patch multiple with white, optionally binarised.
  Image prepare(const Image& img) const;
  /// Forward pass on a prepared image.
  DetectionHead::Output forward(const Image& prepared, bool training, Rng* rng) const;
  Tensor loss(const Image& img, const std::vector<GtBox>& gts, Rng& rng) const;
  std::vector<Detection> detect(const Image& img, double score_thr = 0.05, int image_id = 0) const;

  /// Category id -> 1-based head label; throws for unknown categories.
  int label_of(int category_id) const;
  std::vector<GtBox> targets_of(const SynthDocument& doc) const;

  void save(const std::filesystem::path& path) const;  // plus path + ".json" with the config
  static Detector load(const std::filesystem::path& path);

 private:
  DetectorConfig cfg_;
  VisionTransformer vit_;
  FpnAdapter fpn_;
  DetectionHead head_;
};

struct DetectTrainConfig {
  std::int64_t steps = 1000;
  std::size_t batch = 2;
  float peak_lr = 1e-4f;
  std::int64_t warmup = 100;
  float weight_decay = 0.05f;
  float layer_decay = 1.0f;
  float grad_clip = 0.0f;
  bool multiscale = false;
  std::uint64_t seed = 0;
};

struct DetectLogRow {
  std::int64_t step = 0;
  float lr = 0.0f;
  double loss = 0.0;
};

/// Fine-tunes the whole detector on documents; only elements whose category
/// is in the detector's list are targets.
std::vector<DetectLogRow> train_detector(Detector& det, const std::vector<SynthDocument>& docs,
                                         const DetectTrainConfig& cfg, std::ostream* csv = nullptr);

/// Runs detect on every document; image ids are document indices.
std::vector<Detection> detect_all(const Detector& det, const std::vector<SynthDocument>& docs, double score_thr,
                                  std::size_t workers = 1);
/// COCO ground truth for the detector's categories; image ids are indices.
std::vector<CocoAnnotation> ground_truth(const Detector& det, const std::vector<SynthDocument>& docs);

void save_detector_config(const std::filesystem::path& path, const DetectorConfig& cfg);
DetectorConfig load_detector_config(const std::filesystem::path& path);

}  // namespace dit
