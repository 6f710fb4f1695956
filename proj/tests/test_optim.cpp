#include <cmath>

#include "dit/optim.hpp"
#include "dit/vit.hpp"
#include "doctest.h"

using namespace dit;

TEST_CASE("first AdamW step moves each weight by about lr against its gradient sign") {
  ParamStore store;
  Tensor& w = store.add("w", Tensor::from({3}, {1.0f, -2.0f, 0.5f}, true));
  const std::vector<float> g{0.2f, -4.0f, 1e-3f};
  std::copy(g.begin(), g.end(), w.grad().begin());
  const AdamWConfig cfg{0.9f, 0.999f, 1e-8f, 0.1f, 0.0f};
  AdamW opt(store, cfg);
  const std::vector<float> before{1.0f, -2.0f, 0.5f};
  const float lr = 0.01f;
  opt.step(lr);
  for (std::size_t i = 0; i < 3; ++i) {
    // bias-corrected m/sqrt(v) is g/|g| on the first step
    const double expect = before[i] - lr * g[i] / (std::fabs(g[i]) + 1e-8) - lr * 0.1 * before[i];
    CHECK(w.data()[i] == doctest::Approx(expect).epsilon(1e-5));
  }
}

TEST_CASE("AdamW: no-decay parameters are untouched by weight decay, missing grads only decay") {
  ParamStore store;
  store.add("w", Tensor::from({1}, {2.0f}, true));
  store.add("b", Tensor::from({1}, {2.0f}, true), false);
  AdamW opt(store, {0.9f, 0.999f, 1e-8f, 0.5f, 0.0f});
  opt.step(0.1f);
  CHECK(store.find("w")->tensor.data()[0] == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0));
  CHECK(store.find("b")->tensor.data()[0] == doctest::Approx(2.0));
}

TEST_CASE("global gradient clipping") {
  ParamStore store;
  Tensor a = store.add("a", Tensor::from({1}, {0}, true));
  Tensor b = store.add("b", Tensor::from({1}, {0}, true));
  a.grad()[0] = 3.0f;
  b.grad()[0] = 4.0f;
  CHECK(clip_grad_norm(store, 1.0f) == doctest::Approx(5.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6));
  CHECK(b.grad()[0] == doctest::Approx(0.8));
  CHECK(clip_grad_norm(store, 10.0f) == doctest::Approx(1.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6));
}

TEST_CASE("warmup then cosine learning-rate schedule") {
  const LrSchedule s{1e-3f, 100, 1100};
  CHECK(lr_at(s, 0) == 0.0f);
  CHECK(lr_at(s, 50) == doctest::Approx(5e-4));
  CHECK(lr_at(s, 100) == doctest::Approx(1e-3));
  CHECK(lr_at(s, 600) == doctest::Approx(5e-4).epsilon(1e-4));  // cosine midpoint
  CHECK(lr_at(s, 1100) == doctest::Approx(0.0).epsilon(1e-9));
  for (std::int64_t t = 101; t <= 1100; t += 37) CHECK(lr_at(s, t) <= lr_at(s, t - 1));
  CHECK_THROWS(lr_at(s, 1101));
  CHECK_THROWS(lr_at(LrSchedule{1e-3f, 10, 5}, 0));
}

TEST_CASE("pre-training default schedule: 10k warmup to peak 1e-3") {
  const LrSchedule s{};
  CHECK(s.peak_lr == doctest::Approx(1e-3));
  CHECK(s.warmup_steps == 10000);
  CHECK(lr_at(s, 10000) == doctest::Approx(1e-3));
}

TEST_CASE("layer-wise decay scales by decay^(depth+1-layer)") {
  VisionTransformer vit(VitConfig::tiny(), 1);
  vit.apply_layer_decay(0.5f);
  const double d = VitConfig::tiny().depth;
  CHECK(vit.params().find("patch_embed.w")->lr_scale == doctest::Approx(std::pow(0.5, d + 1)));
  CHECK(vit.params().find("pos_embed")->lr_scale == doctest::Approx(std::pow(0.5, d + 1)));
  CHECK(vit.params().find("blocks.0.attn.qkv.w")->lr_scale == doctest::Approx(std::pow(0.5, d)));
  CHECK(vit.params().find("blocks.3.mlp.fc2.w")->lr_scale == doctest::Approx(std::pow(0.5, d - 3)));
  CHECK(vit.params().find("norm.g")->lr_scale == doctest::Approx(1.0));
}

TEST_CASE("parameters without decay: biases, norms, position and mask embeddings") {
  VisionTransformer vit(VitConfig::tiny(), 1);
  for (const auto& p : vit.params().params()) {
    const bool no_decay = p.name.ends_with(".b") || p.name.ends_with(".g") || p.name == "pos_embed" ||
                          p.name == "mask_token";
    CHECK_MESSAGE(p.decay == !no_decay, p.name);
  }
}
