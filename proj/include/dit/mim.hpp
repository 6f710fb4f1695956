#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "dit/dvae.hpp"
#include "dit/imaging.hpp"
#include "dit/optim.hpp"
#include "dit/rng.hpp"
#include "dit/vit.hpp"

namespace dit {

/// Blockwise mask over a grid_h x grid_w patch grid. Rectangles of
/// min_block..max_block patches with aspect in [0.3, 1/0.3] are unioned
/// until at least ceil(ratio * N) patches are masked. max_block = 0 means
/// 25% of the grid.
std::vector<bool> blockwise_mask(Rng& rng, std::size_t grid_h, std::size_t grid_w, double ratio,
                                 std::size_t min_block = 16, std::size_t max_block = 0);

/// Effective block-area cap used by blockwise_mask.
std::size_t mask_block_cap(std::size_t grid_h, std::size_t grid_w, std::size_t max_block = 0);

/// Mean cross-entropy over masked positions.
Tensor mim_loss(const Tensor& logits, std::span<const std::int64_t> targets);

struct PretrainConfig {
  double mask_ratio = 0.4;
  std::size_t min_block = 16;
  std::size_t max_block = 0;
  std::int64_t steps = 500000;
  std::size_t batch = 2048;
  float peak_lr = 1e-3f;
  std::int64_t warmup = 10000;
  float weight_decay = 0.05f;
  float grad_clip = 3.0f;
  std::size_t input_size = 224;
  std::size_t token_size = 112;
  ResizedCropParams crop{};
  std::int64_t checkpoint_every = 0;  // 0: final checkpoint only
  std::uint64_t seed = 0;

  void validate() const;
};

struct PretrainLogRow {
  std::int64_t step = 0;
  float lr = 0.0f;
  double loss = 0.0;
};

/// Artifacts written under the output directory.
struct PretrainPaths {
  std::filesystem::path checkpoint;  // backbone.ditc with "vit/..." and "mim_head/..."
  std::filesystem::path config;      // backbone.json
  std::filesystem::path loss_csv;    // loss.csv: step,lr,loss
};
PretrainPaths pretrain_paths(const std::filesystem::path& out_dir);

/// Masked-image-modelling pre-training of `model` with a fresh linear head.
std::vector<PretrainLogRow> pretrain(VisionTransformer& model, const std::vector<Image>& corpus,
                                     const Tokenizer& tokenizer, const PretrainConfig& cfg,
                                     const std::filesystem::path& out_dir);

/// Mean of the last `window` losses.
double smoothed_loss(const std::vector<PretrainLogRow>& log, std::size_t window = 20);

}  // namespace dit
