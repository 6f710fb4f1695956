#include "dit/dvae.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

#include "dit/checkpoint.hpp"
#include "dit/ops.hpp"

namespace dit {

DvaeConfig DvaeConfig::tiny() {
  DvaeConfig c;
  c.hidden = 16;
  c.codebook_size = 64;
  c.code_dim = 32;
  return c;
}

namespace {

Tensor randn(Shape shape, Rng& rng, double std) {
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(rng.normal() * std);
  return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace

Quantized quantize_gumbel(const Tensor& logits, float temperature, Rng* rng, bool hard) {
  if (!(temperature > 0.0f)) throw std::invalid_argument("quantize_gumbel: temperature must be > 0");
  if (logits.ndim() != 2) throw ShapeError("quantize_gumbel: logits must be [cells, K], got " + shape_str(logits.shape()));
  Tensor noisy = logits;
  if (rng) {
    std::vector<float> g(logits.numel());
    for (auto& v : g) v = static_cast<float>(rng->gumbel());
    noisy = ops::add(logits, Tensor::from(logits.shape(), std::move(g)));
  }
  Tensor soft = ops::softmax(ops::scale(noisy, 1.0f / temperature));
  const std::size_t k = logits.dim(1);
  Quantized q;
  q.indices.resize(logits.dim(0));
  for (std::size_t i = 0; i < q.indices.size(); ++i) {
    const float* row = noisy.data().data() + i * k;
    q.indices[i] = std::max_element(row, row + k) - row;
  }
  q.weights = hard ? ops::straight_through(soft) : soft;
  return q;
}

DvaeLoss dvae_loss(const Tensor& recon, std::span<const float> target, const Tensor& mean_code_probs, float lambda) {
  double total = 0.0;
  for (float v : mean_code_probs.data()) total += v;
  if (std::fabs(total - 1.0) > 1e-4)
    throw std::invalid_argument("dvae_loss: code probabilities sum to " + std::to_string(total) + ", expected 1");
  const auto k = static_cast<float>(mean_code_probs.numel());
  DvaeLoss out;
  out.mse = ops::mse(recon, target);
  // entropy = -sum p ln p; loss = (ln K - entropy) / ln K = 1 + sum(p ln p) / ln K
  Tensor plogp = ops::sum(ops::mul(mean_code_probs, ops::log(mean_code_probs, 1e-12f)));
  out.perplexity_loss = ops::add_scalar(ops::scale(plogp, 1.0f / std::log(k)), 1.0f);
  out.total = ops::add(out.mse, ops::scale(out.perplexity_loss, lambda));
  return out;
}

Dvae::Dvae(const DvaeConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg.codebook_size < 2) throw std::invalid_argument("dvae: codebook size must be >= 2");
  Rng rng(seed);
  const std::size_t h = cfg.hidden;
  auto conv_param = [&](const std::string& name, std::size_t out, std::size_t in, std::size_t k, double gain) {
    params_.add(name + ".w", randn({out, in, k, k}, rng, gain * std::sqrt(2.0 / static_cast<double>(in * k * k))));
    params_.add(name + ".b", Tensor::zeros({out}), false);
  };
  auto res_params = [&](const std::string& name) {
    conv_param(name + ".conv1", h, h, 3, 1.0);
    conv_param(name + ".conv2", h, h, 3, 0.1);
  };
  for (std::size_t l = 0; l < DvaeConfig::kLayers; ++l) {
    const std::string n = "enc.layer" + std::to_string(l);
    conv_param(n + ".down", h, l == 0 ? cfg.in_channels : h, 4, 1.0);
    res_params(n + ".res");
  }
  params_.add("enc.norm.g", Tensor::full({h}, 1.0f), false);
  params_.add("enc.norm.b", Tensor::zeros({h}), false);
  // Unit-variance logits at init; the norm keeps them from saturating the softmax.
  conv_param("enc.logits", cfg.codebook_size, h, 1, std::sqrt(0.5));
  params_.add("codebook", randn({cfg.codebook_size, cfg.code_dim}, rng, 1.0), false);
  conv_param("dec.in", h, cfg.code_dim, 1, 1.0);
  for (std::size_t l = 0; l < DvaeConfig::kLayers; ++l) {
    const std::string n = "dec.layer" + std::to_string(l);
    res_params(n + ".res");
    params_.add(n + ".up.w", randn({h, h, 2, 2}, rng, std::sqrt(2.0 / static_cast<double>(h))));
    params_.add(n + ".up.b", Tensor::zeros({h}), false);
  }
  // Starts as a flat mid-grey image.
  conv_param("dec.out", cfg.in_channels, h, 1, 0.01);
  params_.find("dec.out.b")->tensor.data()[0] = 0.5f;
  for (std::size_t c = 1; c < cfg.in_channels; ++c) params_.find("dec.out.b")->tensor.data()[c] = 0.5f;
}

const Tensor& Dvae::p(const std::string& name) const {
  const Param* prm = params_.find(name);
  if (!prm) throw std::logic_error("dvae: no parameter " + name);
  return prm->tensor;
}

Tensor Dvae::conv(const std::string& name, const Tensor& x, std::size_t stride, std::size_t pad) const {
  return ops::conv2d(x, p(name + ".w"), p(name + ".b"), stride, pad);
}

Tensor Dvae::resblock(const std::string& name, const Tensor& x) const {
  Tensor y = conv(name + ".conv1", ops::gelu(x), 1, 1);
  y = conv(name + ".conv2", ops::gelu(y), 1, 1);
  return ops::add(x, y);
}

Tensor image_to_unit_tensor(const Image& img) {
  const std::size_t hw = img.width * img.height;
  std::vector<float> v(img.channels * hw);
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < img.channels; ++c) v[c * hw + i] = img.data[i * img.channels + c] / 255.0f;
  return Tensor::from({img.channels, img.height, img.width}, std::move(v));
}

Image unit_tensor_to_image(const Tensor& t) {
  if (t.ndim() != 3) throw ShapeError("expected [C,H,W] tensor, got " + shape_str(t.shape()));
  const std::size_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
  Image img(w, h, c);
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t k = 0; k < c; ++k)
      img.data[i * c + k] = std::clamp(t.data()[k * h * w + i] * 255.0f, 0.0f, 255.0f);
  return img;
}

EncodedGrid Dvae::encode(const Image& img) const {
  if (img.width % DvaeConfig::kDownsample != 0 || img.height % DvaeConfig::kDownsample != 0)
    throw std::invalid_argument("dvae encode: image " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                                " not divisible by 8");
  if (img.channels != cfg_.in_channels)
    throw std::invalid_argument("dvae encode: expected " + std::to_string(cfg_.in_channels) + " channels");
  Tensor x = image_to_unit_tensor(img);
  for (std::size_t l = 0; l < DvaeConfig::kLayers; ++l) {
    const std::string n = "enc.layer" + std::to_string(l);
    x = resblock(n + ".res", conv(n + ".down", x, 2, 1));
  }
  x = ops::channel_norm(x, p("enc.norm.g"), p("enc.norm.b"));
  Tensor logits = conv("enc.logits", x, 1, 0);  // [K, gh, gw]
  EncodedGrid g;
  g.grid_h = logits.dim(1);
  g.grid_w = logits.dim(2);
  g.logits = ops::transpose(ops::reshape(logits, {cfg_.codebook_size, g.grid_h * g.grid_w}));
  return g;
}

Tensor Dvae::decode(const Tensor& weights, std::size_t grid_h, std::size_t grid_w) const {
  if (weights.ndim() != 2 || weights.dim(0) != grid_h * grid_w || weights.dim(1) != cfg_.codebook_size)
    throw ShapeError("dvae decode", weights.shape(), Shape{grid_h * grid_w, cfg_.codebook_size});
  Tensor emb = ops::matmul(weights, p("codebook"));  // [cells, dim]
  Tensor x = ops::reshape(ops::transpose(emb), {cfg_.code_dim, grid_h, grid_w});
  x = conv("dec.in", x, 1, 0);
  for (std::size_t l = 0; l < DvaeConfig::kLayers; ++l) {
    const std::string n = "dec.layer" + std::to_string(l);
    x = resblock(n + ".res", x);
    x = ops::conv_transpose2x2(ops::gelu(x), p(n + ".up.w"), p(n + ".up.b"));
  }
  return conv("dec.out", ops::gelu(x), 1, 0);
}

void Dvae::save(const std::filesystem::path& path) const { write_checkpoint(path, snapshot(params_, "dvae/")); }

Dvae Dvae::load(const std::filesystem::path& path) {
  const auto tensors = read_checkpoint(path);
  auto find = [&](const std::string& name) -> const NamedTensor& {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw CheckpointError("checkpoint " + path.string() + " lacks " + name);
  };
  const auto& down = find("dvae/enc.layer0.down.w");
  const auto& codebook = find("dvae/codebook");
  if (down.shape.size() != 4 || codebook.shape.size() != 2) throw CheckpointError("malformed dvae checkpoint");
  DvaeConfig cfg;
  cfg.hidden = down.shape[0];
  cfg.in_channels = down.shape[1];
  cfg.codebook_size = codebook.shape[0];
  cfg.code_dim = codebook.shape[1];
  Dvae model(cfg, 0);
  restore(model.params_, tensors, "dvae/");
  return model;
}

const Dvae& Tokenizer::model() const {
  if (!model_) throw CheckpointError("tokenizer weights are not loaded");
  return *model_;
}

TokenMap Tokenizer::tokenize(const Image& img) const {
  const Dvae& m = model();
  NoGradGuard guard;
  const EncodedGrid g = m.encode(img);
  const std::size_t k = m.config().codebook_size;
  TokenMap t;
  t.grid_h = g.grid_h;
  t.grid_w = g.grid_w;
  t.indices.resize(g.grid_h * g.grid_w);
  for (std::size_t i = 0; i < t.indices.size(); ++i) {
    const float* row = g.logits.data().data() + i * k;
    t.indices[i] = std::max_element(row, row + k) - row;
  }
  return t;
}

Image Tokenizer::reconstruct(const Image& img) const {
  const Dvae& m = model();
  NoGradGuard guard;
  const TokenMap t = tokenize(img);
  const std::size_t k = m.config().codebook_size;
  std::vector<float> onehot(t.indices.size() * k, 0.0f);
  for (std::size_t i = 0; i < t.indices.size(); ++i) onehot[i * k + static_cast<std::size_t>(t.indices[i])] = 1.0f;
  Tensor w = Tensor::from({t.indices.size(), k}, std::move(onehot));
  return unit_tensor_to_image(m.decode(w, t.grid_h, t.grid_w));
}

float dvae_temperature(std::int64_t step, std::int64_t total_steps, float floor) {
  if (total_steps <= 0) return 1.0f;
  const double t = std::exp(-5.0 * static_cast<double>(step) / static_cast<double>(total_steps));
  return static_cast<float>(std::max(static_cast<double>(floor), t));
}

namespace {

Image prepare_sample(const Image& src, const DvaeTrainConfig& cfg, Rng& rng, std::size_t channels) {
  Image img = to_channels(resize(src, cfg.resolution, cfg.resolution), channels);
  if (cfg.crop > 0 && cfg.crop < cfg.resolution) {
    const auto x = static_cast<std::size_t>(rng.randint(0, static_cast<std::int64_t>(cfg.resolution - cfg.crop)));
    const auto y = static_cast<std::size_t>(rng.randint(0, static_cast<std::int64_t>(cfg.resolution - cfg.crop)));
    img = crop(img, {x, y, cfg.crop, cfg.crop});
  }
  return img;
}

}  // namespace

std::vector<DvaeLogRow> train_tokenizer(Dvae& model, const std::vector<Image>& corpus, const DvaeTrainConfig& cfg,
                                        std::ostream* csv) {
  if (corpus.empty()) throw std::invalid_argument("train_tokenizer: empty corpus");
  if (cfg.batch == 0) throw std::invalid_argument("train_tokenizer: batch must be >= 1");
  const std::size_t per_epoch = (corpus.size() + cfg.batch - 1) / cfg.batch;
  const std::int64_t total = cfg.steps > 0 ? cfg.steps : cfg.epochs * static_cast<std::int64_t>(per_epoch);
  const DvaeConfig& mc = model.config();
  AdamW opt(model.params(), cfg.adam);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(corpus.size());
  std::size_t cursor = order.size();
  std::vector<DvaeLogRow> log;
  if (csv) *csv << "step,temperature,mse,perplexity_loss,total\n";

  for (std::int64_t step = 0; step < total; ++step) {
    const float tau = dvae_temperature(step, total, mc.temperature_floor);
    std::vector<Tensor> recons, probs;
    std::vector<float> target;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      if (cursor >= order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size(); i > 1; --i)
          std::swap(order[i - 1], order[static_cast<std::size_t>(rng.randint(0, static_cast<std::int64_t>(i - 1)))]);
        cursor = 0;
      }
      const Image img = prepare_sample(corpus[order[cursor++]], cfg, rng, mc.in_channels);
      const EncodedGrid g = model.encode(img);
      const Quantized q = quantize_gumbel(g.logits, tau, &rng, mc.straight_through);
      Tensor recon = model.decode(q.weights, g.grid_h, g.grid_w);
      recons.push_back(ops::reshape(recon, {1, recon.numel()}));
      probs.push_back(ops::softmax(g.logits));
      const Tensor t = image_to_unit_tensor(img);
      target.insert(target.end(), t.data().begin(), t.data().end());
    }
    Tensor mean_probs = ops::mean_rows(ops::concat_rows(probs));
    DvaeLoss loss = dvae_loss(ops::concat_rows(recons), target, mean_probs, mc.perplexity_weight);
    model.params().zero_grad();
    loss.total.backward();
    opt.step(cfg.lr);
    DvaeLogRow row{step, tau, loss.mse.item(), loss.perplexity_loss.item(), loss.total.item()};
    if (csv) *csv << row.step << ',' << row.temperature << ',' << row.mse << ',' << row.perplexity_loss << ',' << row.total << '\n';
    log.push_back(row);
  }
  return log;
}

DvaeEval evaluate_tokenizer(const Dvae& model, const std::vector<Image>& images) {
  if (images.empty()) throw std::invalid_argument("evaluate_tokenizer: no images");
  NoGradGuard guard;
  const std::size_t k = model.config().codebook_size;
  std::vector<double> usage(k, 0.0), hard(k, 0.0);
  std::size_t cells = 0;
  double se = 0.0, sum = 0.0, sum_sq = 0.0;
  std::size_t pixels = 0;
  for (const auto& src : images) {
    const Image img = to_channels(src, model.config().in_channels);
    const EncodedGrid g = model.encode(img);
    const Quantized q = quantize_gumbel(g.logits, 1.0f, nullptr, true);
    const Tensor recon = model.decode(q.weights, g.grid_h, g.grid_w);
    const Tensor target = image_to_unit_tensor(img);
    for (std::size_t i = 0; i < target.numel(); ++i) {
      const double d = recon.data()[i] - target.data()[i];
      se += d * d;
    }
    pixels += target.numel();
    for (double t : target.data()) {
      sum += t;
      sum_sq += t * t;
    }
    const Tensor probs = ops::softmax(g.logits);
    for (std::size_t i = 0; i < probs.numel(); ++i) usage[i % k] += probs.data()[i];
    for (auto idx : q.indices) hard[static_cast<std::size_t>(idx)] += 1.0;
    cells += g.grid_h * g.grid_w;
  }
  const double lnk = std::log(static_cast<double>(k));
  auto perplexity_loss = [&](const std::vector<double>& counts) {
    double entropy = 0.0;
    for (double u : counts) {
      const double pr = u / static_cast<double>(cells);
      if (pr > 0.0) entropy -= pr * std::log(pr);
    }
    return (lnk - entropy) / lnk;
  };
  DvaeEval out;
  const double n = static_cast<double>(pixels);
  out.mse = se / n;
  out.perplexity_loss = perplexity_loss(usage);
  out.hard_perplexity_loss = perplexity_loss(hard);
  out.codes_used = static_cast<std::size_t>(std::count_if(hard.begin(), hard.end(), [](double c) { return c > 0; }));
  out.constant_mse = sum_sq / n - (sum / n) * (sum / n);
  return out;
}

}  // namespace dit
