#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dit/detect.hpp"
#include "dit/dvae.hpp"
#include "dit/vit.hpp"
#include "json.hpp"

namespace dit {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataSection {
  std::string dir = "data";
  std::size_t n = 64;
  std::size_t width = 448;
  std::size_t height = 448;
  int template_id = -1;  // -1: all templates
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

struct ModelSection {
  std::string vit_preset = "base";
  VitConfig vit = VitConfig::base();
  std::string tokenizer_preset = "default";
  DvaeConfig tokenizer{};
  FpnConfig fpn{};
};

struct OptimizerSection {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float grad_clip = 0.0f;
  float layer_decay = 0.75f;
};

/// Schedule of one training stage. steps > 0 wins over epochs.
struct StageSchedule {
  float lr = 1e-3f;
  std::int64_t warmup = 0;
  std::int64_t steps = 0;
  std::int64_t epochs = 0;
  std::size_t batch = 1;
  float weight_decay = 0.05f;
};

struct ScheduleSection {
  StageSchedule tokenizer{5e-4f, 0, 0, 3, 4, 0.0f};
  StageSchedule pretrain{1e-3f, 10000, 500000, 0, 2048, 0.05f};
  StageSchedule classify{1e-3f, 0, 0, 90, 128, 0.05f};
  StageSchedule detect{1e-4f, 100, 1000, 0, 2, 0.05f};
};

struct TaskSection {
  std::uint64_t seed = 0;
  std::string tokenizer_checkpoint;  // input of pretrain
  std::string backbone_checkpoint;   // optional input of the fine-tuning commands
  double mask_ratio = 0.4;
  std::size_t min_block = 16;
  std::size_t max_block = 0;
  std::size_t input_size = 224;
  std::size_t token_size = 112;
  std::int64_t checkpoint_every = 0;
  std::size_t tokenizer_resolution = 112;
  std::size_t tokenizer_crop = 0;
  std::size_t classify_size = 224;
  std::size_t num_classes = 16;
  bool augment = false;
  std::vector<int> categories{4, 5};
  std::string anchors = "layout";
  bool binarize = false;
  bool multiscale = false;
  double score_thr = 0.05;
  double nms_iou = 0.5;
};

/// Whole-run configuration. Every key is optional; unknown keys are errors.
struct RunConfig {
  DataSection data;
  ModelSection model;
  OptimizerSection optimizer;
  ScheduleSection schedule;
  TaskSection task;

  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  /// 8 hex digits of a stable hash of the canonical JSON.
  std::string hash() const;
};

VitConfig vit_preset(const std::string& name);
AnchorConfig anchor_preset(const std::string& name);

}  // namespace dit
