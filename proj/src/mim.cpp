#include "dit/mim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "dit/checkpoint.hpp"
#include "dit/ops.hpp"

namespace dit {

std::size_t mask_block_cap(std::size_t grid_h, std::size_t grid_w, std::size_t max_block) {
  const std::size_t n = grid_h * grid_w;
  const std::size_t cap = max_block > 0 ? max_block : n / 4;
  return std::clamp<std::size_t>(cap, 1, n);
}

std::vector<bool> blockwise_mask(Rng& rng, std::size_t grid_h, std::size_t grid_w, double ratio,
                                 std::size_t min_block, std::size_t max_block) {
  const std::size_t n = grid_h * grid_w;
  if (n == 0) throw std::invalid_argument("blockwise_mask: empty grid");
  if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("blockwise_mask: ratio must be in (0,1)");
  if (ratio * static_cast<double>(n) < 1.0 - 1e-9)
    throw std::invalid_argument("blockwise_mask: ratio * N must be at least 1");
  if (min_block < 1) throw std::invalid_argument("blockwise_mask: min_block must be >= 1");

  const auto target = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-9));
  const std::size_t cap = mask_block_cap(grid_h, grid_w, max_block);
  const std::size_t lo = std::min(min_block, cap);
  const double log_aspect = std::log(1.0 / 0.3);

  std::vector<bool> mask(n, false);
  std::size_t count = 0;
  while (count < target) {
    std::size_t h = 0, w = 0;
    for (int attempt = 0; attempt < 10; ++attempt) {
      const double area = rng.uniform(static_cast<double>(lo), static_cast<double>(cap));
      const double aspect = std::exp(rng.uniform(-log_aspect, log_aspect));
      h = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(std::sqrt(area * aspect))), 1, grid_h);
      w = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(std::sqrt(area / aspect))), 1, grid_w);
      while (h * w > cap) (h >= w ? h : w) -= 1;
      if (h * w >= lo) break;
    }
    const auto top = static_cast<std::size_t>(rng.randint(0, static_cast<std::int64_t>(grid_h - h)));
    const auto left = static_cast<std::size_t>(rng.randint(0, static_cast<std::int64_t>(grid_w - w)));
    for (std::size_t y = top; y < top + h; ++y)
      for (std::size_t x = left; x < left + w; ++x)
        if (!mask[y * grid_w + x]) {
          mask[y * grid_w + x] = true;
          ++count;
        }
  }
  return mask;
}

Tensor mim_loss(const Tensor& logits, std::span<const std::int64_t> targets) {
  if (logits.ndim() != 2 || logits.dim(0) == 0 || logits.dim(0) != targets.size())
    throw std::invalid_argument("mim_loss: logits " + shape_str(logits.shape()) + " vs " +
                                std::to_string(targets.size()) + " targets");
  return ops::cross_entropy(logits, targets);
}

void PretrainConfig::validate() const {
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw std::invalid_argument("pretrain: mask_ratio must be in (0,1)");
  if (min_block < 1) throw std::invalid_argument("pretrain: min_block must be >= 1");
  if (steps < 0) throw std::invalid_argument("pretrain: steps must be >= 0");
  if (batch < 1) throw std::invalid_argument("pretrain: batch must be >= 1");
  if (warmup < 0) throw std::invalid_argument("pretrain: warmup must be >= 0");
}

PretrainPaths pretrain_paths(const std::filesystem::path& out_dir) {
  return {out_dir / "backbone.ditc", out_dir / "backbone.json", out_dir / "loss.csv"};
}

double smoothed_loss(const std::vector<PretrainLogRow>& log, std::size_t window) {
  if (log.empty()) return 0.0;
  const std::size_t k = std::min(window, log.size());
  double s = 0.0;
  for (std::size_t i = log.size() - k; i < log.size(); ++i) s += log[i].loss;
  return s / static_cast<double>(k);
}

namespace {

void save_pretrain_checkpoint(const std::filesystem::path& path, const VisionTransformer& model,
                              const LinearHead& head) {
  auto tensors = snapshot(model.params(), "vit/");
  auto h = snapshot(head.params(), "mim_head/");
  tensors.insert(tensors.end(), h.begin(), h.end());
  write_checkpoint(path, tensors);
}

}  // namespace

std::vector<PretrainLogRow> pretrain(VisionTransformer& model, const std::vector<Image>& corpus,
                                     const Tokenizer& tokenizer, const PretrainConfig& cfg,
                                     const std::filesystem::path& out_dir) {
  cfg.validate();
  if (corpus.empty()) throw std::invalid_argument("pretrain: empty corpus");
  const Dvae& dvae = tokenizer.model();
  const VitConfig& vc = model.config();
  const std::size_t grid = cfg.input_size / vc.patch;
  const std::size_t token_grid = cfg.token_size / DvaeConfig::kDownsample;
  if (cfg.input_size % vc.patch != 0 || cfg.token_size % DvaeConfig::kDownsample != 0 || grid != token_grid)
    throw std::invalid_argument("pretrain: patch grid " + std::to_string(grid) + "x" + std::to_string(grid) +
                                " does not match token grid " + std::to_string(token_grid) + "x" +
                                std::to_string(token_grid));

  Rng rng(cfg.seed);
  LinearHead head(vc.hidden, dvae.config().codebook_size, cfg.seed ^ 0x6d696dULL);
  ParamStore all;
  all.extend(model.params(), "vit/");
  all.extend(head.params(), "mim_head/");
  AdamWConfig ac;
  ac.weight_decay = cfg.weight_decay;
  ac.grad_clip = cfg.grad_clip;
  AdamW opt(all, ac);
  const LrSchedule sched{cfg.peak_lr, std::min(cfg.warmup, cfg.steps), std::max<std::int64_t>(cfg.steps, 1)};

  std::filesystem::create_directories(out_dir);
  const auto paths = pretrain_paths(out_dir);
  save_vit_config(paths.config, vc);
  std::ofstream csv(paths.loss_csv, std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot write " + paths.loss_csv.string());
  csv << "step,lr,loss\n" << std::flush;

  std::vector<std::size_t> order(corpus.size());
  std::size_t cursor = order.size();
  std::vector<PretrainLogRow> log;
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    std::vector<Tensor> rows;
    std::vector<std::int64_t> targets;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i)
          std::swap(order[i - 1], order[static_cast<std::size_t>(rng.randint(0, static_cast<std::int64_t>(i - 1)))]);
        cursor = 0;
      }
      const Image& src = corpus[order[cursor++]];
      const Image view = random_resized_crop(src, rng, cfg.crop, cfg.input_size);
      const TokenMap tokens =
          tokenizer.tokenize(to_channels(resize(view, cfg.token_size, cfg.token_size), dvae.config().in_channels));
      const auto mask = blockwise_mask(rng, grid, grid, cfg.mask_ratio, cfg.min_block, cfg.max_block);

      Tensor emb = model.apply_mask(model.patch_embed(prepare_patches(view, vc)), mask, grid, grid);
      Tensor states = model.encode(emb, {}, true, &rng).final;
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) {
          idx.push_back(i);
          targets.push_back(tokens.indices[i]);
        }
      rows.push_back(ops::gather_rows(states, idx));
    }
    Tensor loss = mim_loss(head.forward(ops::concat_rows(rows)), targets);
    all.zero_grad();
    loss.backward();
    const float lr = lr_at(sched, step);
    opt.step(lr);

    log.push_back({step, lr, loss.item()});
    char line[96];
    std::snprintf(line, sizeof line, "%lld,%.9g,%.9g\n", static_cast<long long>(step), lr, loss.item());
    csv << line << std::flush;
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps)
      save_pretrain_checkpoint(paths.checkpoint, model, head);
  }
  save_pretrain_checkpoint(paths.checkpoint, model, head);
  return log;
}

}  // namespace dit
