#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "dit/synthdoc.hpp"
#include "dit/vit.hpp"

namespace dit {

/// Backbone plus mean-pooled linear classifier.
class Classifier {
 public:
  Classifier(const VitConfig& cfg, std::size_t num_classes, std::size_t input_size, std::uint64_t seed);

  VisionTransformer& backbone() { return vit_; }
  const VisionTransformer& backbone() const { return vit_; }
  const LinearHead& head() const { return head_; }
  std::size_t num_classes() const { return head_.out_features(); }
  std::size_t input_size() const { return input_size_; }
  /// Parameters under "vit/" and "cls_head/".
  ParamStore all_params() const;

  /// Image resized to input_size x input_size.
  Tensor logits(const Image& img, bool training = false, Rng* rng = nullptr) const;
  int predict(const Image& img) const;

  void save(const std::filesystem::path& path) const;  // plus path + ".json"
  static Classifier load(const std::filesystem::path& path);

 private:
  VisionTransformer vit_;
  LinearHead head_;
  std::size_t input_size_;
};

struct ClassifyTrainConfig {
  std::int64_t epochs = 90;
  std::int64_t steps = 0;  // when > 0, overrides epochs
  std::size_t batch = 128;
  float peak_lr = 1e-3f;
  std::int64_t warmup = 0;
  float weight_decay = 0.05f;
  float layer_decay = 0.75f;
  bool augment = false;  // random resized crop instead of a plain resize
  std::uint64_t seed = 0;
};

struct ClassifyLogRow {
  std::int64_t step = 0;
  float lr = 0.0f;
  double loss = 0.0;
};

/// Labels are document class ids (template ids).
std::vector<ClassifyLogRow> train_classifier(Classifier& model, const std::vector<SynthDocument>& docs,
                                             const ClassifyTrainConfig& cfg, std::ostream* csv = nullptr);

std::vector<int> predict_all(const Classifier& model, const std::vector<SynthDocument>& docs, std::size_t workers = 1);

}  // namespace dit
