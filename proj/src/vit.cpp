#include "dit/vit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "dit/checkpoint.hpp"
#include "dit/ops.hpp"

namespace dit {

VitConfig VitConfig::base() { return {}; }

VitConfig VitConfig::large() {
  VitConfig c;
  c.depth = 24;
  c.hidden = 1024;
  c.heads = 16;
  c.ffn = 4096;
  return c;
}

VitConfig VitConfig::tiny() {
  VitConfig c;
  c.depth = 4;
  c.hidden = 64;
  c.heads = 4;
  c.ffn = 128;
  c.in_channels = 1;
  return c;
}

void VitConfig::validate() const {
  if (depth < 1) throw std::invalid_argument("vit: depth must be >= 1");
  if (heads == 0 || hidden % heads != 0)
    throw std::invalid_argument("vit: hidden " + std::to_string(hidden) + " not divisible by heads " + std::to_string(heads));
  if (patch == 0 || img_size % patch != 0) throw std::invalid_argument("vit: img_size must be a multiple of patch");
  if (drop_path < 0.0f || drop_path >= 1.0f) throw std::invalid_argument("vit: drop_path must be in [0,1)");
}

std::size_t param_count(const VitConfig& c) {
  const std::size_t h = c.hidden, f = c.ffn;
  const std::size_t patch = c.patch * c.patch * c.in_channels * h + h;
  const std::size_t pos = c.base_grid() * c.base_grid() * h;
  const std::size_t block = 2 * h + (3 * h * h + 3 * h) + (h * h + h) + 2 * h + (h * f + f) + (f * h + h);
  return patch + pos + h + c.depth * block + 2 * h;
}

namespace {

Tensor trunc_normal(Shape shape, Rng& rng, double std) {
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) {
    double z = rng.normal();
    while (std::fabs(z) > 2.0) z = rng.normal();
    x = static_cast<float>(z * std);
  }
  return Tensor::from(std::move(shape), std::move(v));
}

std::string blk(std::size_t i) { return "blocks." + std::to_string(i) + "."; }

// Row-major [dst_h*dst_w, src_h*src_w] bilinear (align-corners-false) weights.
std::vector<float> bilinear_matrix(std::size_t src_h, std::size_t src_w, std::size_t dst_h, std::size_t dst_w) {
  std::vector<float> m(dst_h * dst_w * src_h * src_w, 0.0f);
  auto taps = [](std::size_t dst, std::size_t src, std::size_t i) {
    const double s = std::max(0.0, (static_cast<double>(i) + 0.5) * static_cast<double>(src) / static_cast<double>(dst) - 0.5);
    const std::size_t i0 = std::min(static_cast<std::size_t>(s), src - 1);
    const std::size_t i1 = std::min(i0 + 1, src - 1);
    return std::tuple{i0, i1, s - static_cast<double>(i0)};
  };
  for (std::size_t y = 0; y < dst_h; ++y) {
    const auto [y0, y1, fy] = taps(dst_h, src_h, y);
    for (std::size_t x = 0; x < dst_w; ++x) {
      const auto [x0, x1, fx] = taps(dst_w, src_w, x);
      float* row = m.data() + (y * dst_w + x) * src_h * src_w;
      row[y0 * src_w + x0] += static_cast<float>((1 - fy) * (1 - fx));
      row[y0 * src_w + x1] += static_cast<float>((1 - fy) * fx);
      row[y1 * src_w + x0] += static_cast<float>(fy * (1 - fx));
      row[y1 * src_w + x1] += static_cast<float>(fy * fx);
    }
  }
  return m;
}

}  // namespace

VisionTransformer::VisionTransformer(const VitConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t h = cfg.hidden, f = cfg.ffn;
  const std::size_t pdim = cfg.patch * cfg.patch * cfg.in_channels;
  auto ones = [](std::size_t n) { return Tensor::full({n}, 1.0f); };
  params_.add("patch_embed.w", trunc_normal({pdim, h}, rng, 0.02));
  params_.add("patch_embed.b", Tensor::zeros({h}), false);
  params_.add("pos_embed", trunc_normal({cfg.base_grid() * cfg.base_grid(), h}, rng, 0.02), false);
  params_.add("mask_token", trunc_normal({1, h}, rng, 0.02), false);
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string b = blk(i);
    params_.add(b + "norm1.g", ones(h), false);
    params_.add(b + "norm1.b", Tensor::zeros({h}), false);
    params_.add(b + "attn.qkv.w", trunc_normal({h, 3 * h}, rng, 0.02));
    params_.add(b + "attn.qkv.b", Tensor::zeros({3 * h}), false);
    params_.add(b + "attn.proj.w", trunc_normal({h, h}, rng, 0.02));
    params_.add(b + "attn.proj.b", Tensor::zeros({h}), false);
    params_.add(b + "norm2.g", ones(h), false);
    params_.add(b + "norm2.b", Tensor::zeros({h}), false);
    params_.add(b + "mlp.fc1.w", trunc_normal({h, f}, rng, 0.02));
    params_.add(b + "mlp.fc1.b", Tensor::zeros({f}), false);
    params_.add(b + "mlp.fc2.w", trunc_normal({f, h}, rng, 0.02));
    params_.add(b + "mlp.fc2.b", Tensor::zeros({h}), false);
  }
  params_.add("norm.g", ones(h), false);
  params_.add("norm.b", Tensor::zeros({h}), false);
}

const Tensor& VisionTransformer::p(const std::string& name) const {
  const Param* prm = params_.find(name);
  if (!prm) throw std::logic_error("vit: no parameter " + name);
  return prm->tensor;
}

Tensor VisionTransformer::position_embedding(std::size_t grid_h, std::size_t grid_w) const {
  const std::size_t g = cfg_.base_grid();
  if (grid_h == g && grid_w == g) return p("pos_embed");
  Tensor interp = Tensor::from({grid_h * grid_w, g * g}, bilinear_matrix(g, g, grid_h, grid_w));
  return ops::matmul(interp, p("pos_embed"));
}

Tensor VisionTransformer::patch_embed(const PatchSequence& seq) const {
  const std::size_t pdim = cfg_.patch * cfg_.patch * cfg_.in_channels;
  if (seq.patch_size != cfg_.patch || seq.channels != cfg_.in_channels)
    throw std::invalid_argument("patch_embed: sequence has patch " + std::to_string(seq.patch_size) + "/" +
                                std::to_string(seq.channels) + " channels, model expects " + std::to_string(cfg_.patch) +
                                "/" + std::to_string(cfg_.in_channels));
  const std::size_t n = seq.patches.size();
  if (n == 0 || n != seq.grid_h * seq.grid_w) throw std::invalid_argument("patch_embed: empty or inconsistent sequence");
  std::vector<float> flat;
  flat.reserve(n * pdim);
  for (const auto& patch : seq.patches) {
    if (patch.size() != pdim)
      throw std::invalid_argument("patch_embed: patch length " + std::to_string(patch.size()) + ", expected " +
                                  std::to_string(pdim));
    flat.insert(flat.end(), patch.begin(), patch.end());
  }
  Tensor x = Tensor::from({n, pdim}, std::move(flat));
  Tensor proj = ops::linear(x, p("patch_embed.w"), p("patch_embed.b"));
  return ops::add(proj, position_embedding(seq.grid_h, seq.grid_w));
}

Tensor VisionTransformer::apply_mask(const Tensor& emb, const std::vector<bool>& mask, std::size_t grid_h,
                                     std::size_t grid_w) const {
  if (emb.ndim() != 2 || mask.size() != emb.dim(0) || emb.dim(0) != grid_h * grid_w)
    throw std::invalid_argument("apply_mask: mask length " + std::to_string(mask.size()) + " vs embeddings " +
                                shape_str(emb.shape()));
  if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; })) return emb;
  Tensor fill = ops::add(ops::broadcast_rows(p("mask_token"), emb.dim(0)), position_embedding(grid_h, grid_w));
  return ops::replace_rows(emb, mask, fill);
}

EncoderOutput VisionTransformer::encode(const Tensor& emb, const std::vector<std::size_t>& taps, bool training,
                                        Rng* rng) const {
  for (auto t : taps)
    if (t < 1 || t > cfg_.depth)
      throw std::out_of_range("encoder tap " + std::to_string(t) + " outside [1," + std::to_string(cfg_.depth) + "]");
  if (training && !rng && (cfg_.drop_path > 0.0f || cfg_.dropout > 0.0f))
    throw std::invalid_argument("encode: training with stochastic layers needs an rng");
  Rng dummy(0);
  Rng& r = rng ? *rng : dummy;
  EncoderOutput out;
  out.taps.resize(taps.size());
  Tensor x = emb;
  for (std::size_t i = 0; i < cfg_.depth; ++i) {
    const std::string b = blk(i);
    const float dp = cfg_.depth > 1 ? cfg_.drop_path * static_cast<float>(i) / static_cast<float>(cfg_.depth - 1) : 0.0f;
    Tensor a = ops::layer_norm(x, p(b + "norm1.g"), p(b + "norm1.b"));
    a = ops::multi_head_attention(a, p(b + "attn.qkv.w"), p(b + "attn.qkv.b"), p(b + "attn.proj.w"),
                                  p(b + "attn.proj.b"), cfg_.heads);
    a = ops::dropout(a, cfg_.dropout, training, r);
    x = ops::add(x, ops::stochastic_depth(a, dp, training, r));
    Tensor m = ops::layer_norm(x, p(b + "norm2.g"), p(b + "norm2.b"));
    m = ops::gelu(ops::linear(m, p(b + "mlp.fc1.w"), p(b + "mlp.fc1.b")));
    m = ops::linear(m, p(b + "mlp.fc2.w"), p(b + "mlp.fc2.b"));
    m = ops::dropout(m, cfg_.dropout, training, r);
    x = ops::add(x, ops::stochastic_depth(m, dp, training, r));
    for (std::size_t t = 0; t < taps.size(); ++t)
      if (taps[t] == i + 1) out.taps[t] = x;
  }
  out.final = ops::layer_norm(x, p("norm.g"), p("norm.b"));
  return out;
}

void VisionTransformer::apply_layer_decay(float decay) {
  const std::size_t top = cfg_.depth + 1;
  for (auto& prm : params_.params()) {
    std::size_t layer = top;
    if (prm.name.rfind("patch_embed", 0) == 0 || prm.name == "pos_embed" || prm.name == "mask_token") {
      layer = 0;
    } else if (prm.name.rfind("blocks.", 0) == 0) {
      layer = std::stoul(prm.name.substr(7)) + 1;
    }
    prm.lr_scale = std::pow(decay, static_cast<float>(top - layer));
  }
}

void VisionTransformer::save(const std::filesystem::path& path, const std::string& prefix) const {
  write_checkpoint(path, snapshot(params_, prefix));
}

void VisionTransformer::load_weights(const std::filesystem::path& path, const std::string& prefix) {
  restore(params_, read_checkpoint(path), prefix);
}

PatchSequence prepare_patches(const Image& img, const VitConfig& cfg, const std::vector<float>& mean,
                              const std::vector<float>& stdev) {
  Image x = to_channels(img, cfg.in_channels);
  std::vector<float> m(cfg.in_channels, mean.empty() ? 0.5f : mean[0]);
  std::vector<float> s(cfg.in_channels, stdev.empty() ? 0.5f : stdev[0]);
  for (std::size_t c = 0; c < cfg.in_channels && c < mean.size(); ++c) m[c] = mean[c];
  for (std::size_t c = 0; c < cfg.in_channels && c < stdev.size(); ++c) s[c] = stdev[c];
  return patchify(normalize(x, m, s), cfg.patch);
}

LinearHead::LinearHead(std::size_t in, std::size_t out, std::uint64_t seed, float init_std) : out_(out) {
  Rng rng(seed);
  params_.add("w", trunc_normal({in, out}, rng, init_std));
  params_.add("b", Tensor::zeros({out}), false);
}

Tensor LinearHead::forward(const Tensor& x) const {
  return ops::linear(x, params_.params()[0].tensor, params_.params()[1].tensor);
}

Tensor classify(const Tensor& states, const LinearHead& head) { return head.forward(ops::mean_rows(states)); }

nlohmann::json vit_config_to_json(const VitConfig& c) {
  return {{"depth", c.depth},         {"hidden", c.hidden},       {"heads", c.heads},
          {"ffn", c.ffn},             {"patch", c.patch},         {"in_channels", c.in_channels},
          {"img_size", c.img_size},   {"drop_path", c.drop_path}, {"dropout", c.dropout}};
}

VitConfig vit_config_from_json(const nlohmann::json& j) {
  VitConfig c;
  c.depth = j.at("depth");
  c.hidden = j.at("hidden");
  c.heads = j.at("heads");
  c.ffn = j.at("ffn");
  c.patch = j.at("patch");
  c.in_channels = j.at("in_channels");
  c.img_size = j.value("img_size", c.img_size);
  c.drop_path = j.value("drop_path", c.drop_path);
  c.dropout = j.value("dropout", c.dropout);
  c.validate();
  return c;
}

void save_vit_config(const std::filesystem::path& path, const VitConfig& c) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << vit_config_to_json(c).dump(1) << '\n';
}

VitConfig load_vit_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw CheckpointError("cannot open backbone config " + path.string());
  return vit_config_from_json(nlohmann::json::parse(f));
}

}  // namespace dit
