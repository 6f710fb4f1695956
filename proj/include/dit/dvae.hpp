#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <vector>

#include "dit/imaging.hpp"
#include "dit/optim.hpp"
#include "dit/rng.hpp"
#include "dit/tensor.hpp"

namespace dit {

struct DvaeConfig {
  std::size_t in_channels = 1;
  std::size_t hidden = 64;
  std::size_t codebook_size = 8192;
  std::size_t code_dim = 512;
  float temperature_floor = 1e-10f;
  float perplexity_weight = 0.1f;
  bool straight_through = true;  // hard one-hot codes with soft gradients while training

  static constexpr std::size_t kLayers = 3;
  static constexpr std::size_t kDownsample = 8;

  static DvaeConfig tiny();  // K = 64, code_dim = 32, hidden = 16
};

/// Visual-token grid.
struct TokenMap {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::vector<std::int64_t> indices;  // row-major
  bool operator==(const TokenMap&) const = default;
};

/// Encoder logits for one image, one row per grid cell.
struct EncodedGrid {
  Tensor logits;  // [grid_h * grid_w, K]
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
};

struct Quantized {
  Tensor weights;  // [cells, K]; soft, or one-hot with straight-through gradient
  std::vector<std::int64_t> indices;
};

/// Gumbel-softmax relaxation: softmax((logits + g) / temperature) per row.
/// Passing rng = nullptr disables the noise. `hard` returns the argmax
/// one-hot in the forward pass with the soft weights' gradient.
Quantized quantize_gumbel(const Tensor& logits, float temperature, Rng* rng, bool hard);

struct DvaeLoss {
  Tensor mse;
  Tensor perplexity_loss;  // (ln K - entropy(p)) / ln K
  Tensor total;            // mse + lambda * perplexity_loss
};

/// `mean_code_probs` is a length-K distribution (any shape with K elements).
DvaeLoss dvae_loss(const Tensor& recon, std::span<const float> target, const Tensor& mean_code_probs, float lambda);

/// Convolutional discrete VAE. Encoder: three (stride-2 conv + residual
/// block) layers, a channel norm and a 1x1 projection to K logits. Decoder: codebook lookup,
/// three (residual block + stride-2 transposed conv) layers, 1x1 to pixels.
class Dvae {
 public:
  Dvae(const DvaeConfig& cfg, std::uint64_t seed);

  const DvaeConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// Input pixels are scaled to [0, 1]. Dims must be divisible by 8.
  EncodedGrid encode(const Image& img) const;
  /// weights [grid_h * grid_w, K] -> reconstruction [C, 8 grid_h, 8 grid_w] in [0, 1] scale.
  Tensor decode(const Tensor& weights, std::size_t grid_h, std::size_t grid_w) const;

  void save(const std::filesystem::path& path) const;
  static Dvae load(const std::filesystem::path& path);

 private:
  Tensor conv(const std::string& name, const Tensor& x, std::size_t stride, std::size_t pad) const;
  Tensor resblock(const std::string& name, const Tensor& x) const;
  const Tensor& p(const std::string& name) const;

  DvaeConfig cfg_;
  ParamStore params_;
};

/// Pixels of an image scaled to [0, 1] as a [C, H, W] tensor.
Tensor image_to_unit_tensor(const Image& img);
Image unit_tensor_to_image(const Tensor& t);

/// Inference wrapper: argmax of the encoder logits, no sampling.
class Tokenizer {
 public:
  Tokenizer() = default;
  explicit Tokenizer(Dvae model) : model_(std::move(model)) {}
  static Tokenizer load(const std::filesystem::path& path) { return Tokenizer(Dvae::load(path)); }

  bool loaded() const { return model_.has_value(); }
  const Dvae& model() const;
  TokenMap tokenize(const Image& img) const;
  /// Decodes hard tokens back to pixels in [0, 255].
  Image reconstruct(const Image& img) const;

 private:
  std::optional<Dvae> model_;
};

struct DvaeTrainConfig {
  float lr = 5e-4f;
  std::int64_t epochs = 3;
  std::int64_t steps = 0;  // when > 0, overrides epochs
  std::size_t batch = 4;
  std::size_t resolution = 224;  // images are resized to resolution x resolution
  std::size_t crop = 0;          // random square crop of this size; 0 keeps the full image
  std::uint64_t seed = 0;
  AdamWConfig adam{0.9f, 0.999f, 1e-8f, 0.0f, 0.0f};
};

struct DvaeLogRow {
  std::int64_t step = 0;
  double temperature = 1.0;
  double mse = 0.0;
  double perplexity_loss = 0.0;
  double total = 0.0;
};

/// tau(t) = max(floor, exp(-5 t / T)).
float dvae_temperature(std::int64_t step, std::int64_t total_steps, float floor);

/// Trains in place. Writes a CSV row per step to `csv` when given.
std::vector<DvaeLogRow> train_tokenizer(Dvae& model, const std::vector<Image>& corpus, const DvaeTrainConfig& cfg,
                                        std::ostream* csv = nullptr);

/// Tokenizer quality over a set of images, pixels in [0, 1].
struct DvaeEval {
  double mse = 0.0;                   // reconstruction from hard (argmax) tokens
  double perplexity_loss = 0.0;       // of the mean soft code distribution
  double hard_perplexity_loss = 0.0;  // of the argmax code histogram
  std::size_t codes_used = 0;         // distinct argmax codes
  double constant_mse = 0.0;          // MSE of predicting the mean pixel everywhere
};
DvaeEval evaluate_tokenizer(const Dvae& model, const std::vector<Image>& images);

}  // namespace dit
