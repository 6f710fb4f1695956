#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dit/imaging.hpp"
#include "dit/optim.hpp"
#include "dit/rng.hpp"
#include "dit/tensor.hpp"
#include "json.hpp"

namespace dit {

struct VitConfig {
  std::size_t depth = 12;
  std::size_t hidden = 768;
  std::size_t heads = 12;
  std::size_t ffn = 3072;
  std::size_t patch = 16;
  std::size_t in_channels = 3;
  std::size_t img_size = 224;  // fixes the learned position table (img_size / patch)^2
  float drop_path = 0.1f;
  float dropout = 0.0f;

  static VitConfig base();   // 12 layers, 768 hidden, 12 heads
  static VitConfig large();  // 24 layers, 1024 hidden, 16 heads
  static VitConfig tiny();   // 4 layers, 64 hidden, 4 heads, 1 channel

  std::size_t base_grid() const { return img_size / patch; }
  void validate() const;
};

/// Exact number of learned scalars in the backbone (heads excluded).
std::size_t param_count(const VitConfig& cfg);

struct EncoderOutput {
  Tensor final;               // [N, h], after the final norm
  std::vector<Tensor> taps;   // post-block states, in the order requested
};

/// Patch-sequence Transformer encoder without a [CLS] token.
class VisionTransformer {
 public:
  VisionTransformer(const VitConfig& cfg, std::uint64_t seed);

  const VitConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// Linear projection of each patch plus the 1-D position embedding,
  /// bilinearly resampled when the grid differs from the pre-training grid.
  Tensor patch_embed(const PatchSequence& seq) const;
  /// Position table for a grid_h x grid_w patch grid: [grid_h*grid_w, h].
  Tensor position_embedding(std::size_t grid_h, std::size_t grid_w) const;
  /// Masked rows become mask_token + their position embedding.
  Tensor apply_mask(const Tensor& emb, const std::vector<bool>& mask, std::size_t grid_h, std::size_t grid_w) const;
  /// Pre-norm blocks; taps are 1-based block indices.
  EncoderOutput encode(const Tensor& emb, const std::vector<std::size_t>& taps = {}, bool training = false,
                       Rng* rng = nullptr) const;

  /// Sets lr_scale = decay^(depth + 1 - layer_id) on every parameter.
  void apply_layer_decay(float decay);

  void save(const std::filesystem::path& path, const std::string& prefix = "vit/") const;
  void load_weights(const std::filesystem::path& path, const std::string& prefix = "vit/");

 private:
  const Tensor& p(const std::string& name) const;

  VitConfig cfg_;
  ParamStore params_;
};

/// Normalised, channel-matched patch sequence for the backbone.
PatchSequence prepare_patches(const Image& img, const VitConfig& cfg, const std::vector<float>& mean = {0.5f},
                              const std::vector<float>& stdev = {0.5f});

/// Linear layer on [N, in] -> [N, out] with its own parameters.
class LinearHead {
 public:
  LinearHead(std::size_t in, std::size_t out, std::uint64_t seed, float init_std = 0.02f);
  Tensor forward(const Tensor& x) const;
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  std::size_t out_features() const { return out_; }

 private:
  std::size_t out_;
  ParamStore params_;
};

/// Average-pools the sequence and applies the linear classifier.
Tensor classify(const Tensor& states, const LinearHead& head);

nlohmann::json vit_config_to_json(const VitConfig& cfg);
/// Missing optional keys keep their defaults; the result is validated.
VitConfig vit_config_from_json(const nlohmann::json& j);
void save_vit_config(const std::filesystem::path& path, const VitConfig& cfg);
VitConfig load_vit_config(const std::filesystem::path& path);

}  // namespace dit
