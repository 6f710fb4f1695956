#include "dit/gradsuite.hpp"

#include <cmath>

#include "dit/detect.hpp"
#include "dit/ops.hpp"
#include "dit/optim.hpp"
#include "dit/rng.hpp"
#include "dit/vit.hpp"

namespace dit {

namespace {

Tensor randn(Shape shape, Rng& rng, double std = 1.0, double offset = 0.0) {
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(offset + std * rng.normal());
  return Tensor::from(std::move(shape), std::move(v));
}

// Values with |v| in [lo, hi] and random sign; keeps kinks out of reach.
Tensor away_from_zero(Shape shape, Rng& rng, double lo, double hi) {
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi) * (rng.bernoulli(0.5) ? 1.0 : -1.0));
  return Tensor::from(std::move(shape), std::move(v));
}

// Scalar probe sum(y * r) with a fixed random projection per case.
Tensor project(const Tensor& y, const Tensor& r) { return ops::sum(ops::mul(y, r)); }

using Unary = std::function<Tensor(const Tensor&)>;

// Checks d/dx of sum(op(x) * r) where r matches op(x) in shape.
double check(const Unary& op, const Tensor& x, Rng& rng) {
  Tensor shape_probe;
  {
    NoGradGuard g;
    shape_probe = op(x);
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(shape_probe.numel(), 1)));
  const Tensor r = randn(shape_probe.shape(), rng, scale);
  return grad_check([&](const Tensor& t) { return shape_probe.numel() == 1 ? op(t) : project(op(t), r); }, x);
}

GradCase prim(std::string name, std::function<double(Rng&)> body) {
  return {std::move(name), 1e-3, false, [body](std::uint64_t seed) {
            Rng rng(seed * 7919 + 17);
            return body(rng);
          }};
}

double encoder_case(std::uint64_t seed) {
  VitConfig cfg = VitConfig::tiny();
  cfg.depth = 1;
  cfg.drop_path = 0.0f;
  VisionTransformer vit(cfg, seed);
  Rng rng(seed + 1);
  const Tensor x = randn({16, cfg.hidden}, rng);
  const Tensor r = randn({16, cfg.hidden}, rng, 1.0 / 32.0);
  return grad_check([&](const Tensor& e) { return project(vit.encode(e).final, r); }, x);
}

double detection_case(std::uint64_t seed) {
  // 64 x 64 image, patch 16: levels 16, 8, 4, 2 and an extra 1 x 1 level.
  const std::size_t c = 4, grid = 4;
  DetectionHead head(c, 3, 2, seed);
  Rng rng(seed + 3);
  std::vector<std::pair<std::size_t, std::size_t>> dims;
  std::size_t total = 0;
  for (std::size_t l = 0; l < 4; ++l) {
    dims.push_back(level_dims(l, grid, grid));
    total += c * dims.back().first * dims.back().second;
  }
  const Tensor x = randn({1, total}, rng);
  AnchorConfig anchors = AnchorConfig::layout();
  anchors.sizes = {8, 16, 32, 48, 64};
  const auto boxes = gen_all_anchors(64, 64, anchors);
  const std::vector<GtBox> gts{{{6, 10, 20, 14}, 1}, {{30, 28, 26, 30}, 2}};
  const AnchorTargets targets = assign_targets(boxes, gts);
  return grad_check(
      [&](const Tensor& flat) {
        FeaturePyramid pyr;
        std::size_t off = 0;
        for (auto [h, w] : dims) {
          pyr.levels.push_back(ops::reshape(ops::slice_cols(flat, off, c * h * w), {c, h, w}));
          off += c * h * w;
        }
        Rng sample(seed + 5);
        return detection_loss(head.forward(pyr, true), targets, sample, NegativeSampling::random);
      },
      x);
}

}  // namespace

std::vector<GradCase> grad_cases() {
  std::vector<GradCase> cases;
  cases.push_back(prim("add", [](Rng& r) {
    const Tensor c = randn({4, 5}, r);
    return check([c](const Tensor& x) { return ops::add(x, c); }, randn({4, 5}, r), r);
  }));
  cases.push_back(prim("sub", [](Rng& r) {
    const Tensor c = randn({4, 5}, r);
    return check([c](const Tensor& x) { return ops::sub(c, x); }, randn({4, 5}, r), r);
  }));
  cases.push_back(prim("mul", [](Rng& r) {
    const Tensor c = randn({4, 5}, r);
    return check([c](const Tensor& x) { return ops::mul(x, c); }, randn({4, 5}, r), r);
  }));
  cases.push_back(prim("mul_self", [](Rng& r) {
    return check([](const Tensor& x) { return ops::mul(x, x); }, randn({4, 5}, r), r);
  }));
  cases.push_back(prim("scale", [](Rng& r) {
    return check([](const Tensor& x) { return ops::add_scalar(ops::scale(x, -1.7f), 0.3f); }, randn({3, 4}, r), r);
  }));
  cases.push_back(prim("gelu", [](Rng& r) { return check(ops::gelu, randn({4, 6}, r, 1.5), r); }));
  cases.push_back(prim("relu", [](Rng& r) { return check(ops::relu, away_from_zero({4, 6}, r, 0.1, 2.0), r); }));
  cases.push_back(prim("log", [](Rng& r) {
    std::vector<float> v(20);
    for (auto& x : v) x = static_cast<float>(r.uniform(0.5, 2.0));
    return check([](const Tensor& x) { return ops::log(x, 1e-6f); }, Tensor::from({4, 5}, v), r);
  }));
  cases.push_back(prim("exp", [](Rng& r) { return check(ops::exp, randn({4, 5}, r, 0.5), r); }));
  cases.push_back(prim("sum_mean", [](Rng& r) {
    return check([](const Tensor& x) { return ops::add(ops::sum(x), ops::scale(ops::mean(ops::mul(x, x)), 3.0f)); },
                 randn({4, 5}, r), r);
  }));
  cases.push_back(prim("matmul_lhs", [](Rng& r) {
    const Tensor b = randn({5, 3}, r);
    return check([b](const Tensor& x) { return ops::matmul(x, b); }, randn({4, 5}, r), r);
  }));
  cases.push_back(prim("matmul_rhs", [](Rng& r) {
    const Tensor a = randn({4, 5}, r);
    return check([a](const Tensor& x) { return ops::matmul(a, x); }, randn({5, 3}, r), r);
  }));
  cases.push_back(prim("linear", [](Rng& r) {
    const Tensor w = randn({5, 3}, r), b = randn({3}, r);
    return check([w, b](const Tensor& x) { return ops::linear(x, w, b); }, randn({4, 5}, r), r);
  }));
  cases.push_back(prim("linear_weight", [](Rng& r) {
    const Tensor x = randn({4, 5}, r), b = randn({3}, r);
    return check([x, b](const Tensor& w) { return ops::linear(x, w, b); }, randn({5, 3}, r), r);
  }));
  cases.push_back(prim("add_row", [](Rng& r) {
    const Tensor x = randn({4, 5}, r);
    return check([x](const Tensor& row) { return ops::add_row(x, row); }, randn({5}, r), r);
  }));
  cases.push_back(prim("transpose_reshape", [](Rng& r) {
    return check([](const Tensor& x) { return ops::reshape(ops::transpose(x), {2, 10}); }, randn({4, 5}, r), r);
  }));
  cases.push_back(prim("softmax", [](Rng& r) { return check(ops::softmax, randn({3, 6}, r), r); }));
  cases.push_back(prim("layer_norm", [](Rng& r) {
    const Tensor g = randn({6}, r, 0.5, 1.0), b = randn({6}, r);
    return check([g, b](const Tensor& x) { return ops::layer_norm(x, g, b); }, randn({3, 6}, r), r);
  }));
  cases.push_back(prim("layer_norm_affine", [](Rng& r) {
    const Tensor x = randn({3, 6}, r), b = randn({6}, r);
    return check([x, b](const Tensor& g) { return ops::layer_norm(x, g, b); }, randn({6}, r, 0.5, 1.0), r);
  }));
  cases.push_back(prim("mean_rows", [](Rng& r) { return check(ops::mean_rows, randn({4, 5}, r), r); }));
  cases.push_back(prim("slice_concat", [](Rng& r) {
    return check(
        [](const Tensor& x) {
          Tensor a = ops::slice_cols(x, 1, 3), b = ops::slice_cols(x, 0, 2);
          return ops::concat_rows({ops::concat_cols({a, b}), ops::concat_cols({b, a})});
        },
        randn({3, 5}, r), r);
  }));
  cases.push_back(prim("gather_broadcast", [](Rng& r) {
    const std::vector<std::size_t> rows{2, 0, 2, 3};
    return check(
        [rows](const Tensor& x) {
          const std::vector<std::size_t> one{1};
          return ops::add(ops::gather_rows(x, rows), ops::broadcast_rows(ops::gather_rows(x, one), 4));
        },
        randn({4, 5}, r), r);
  }));
  cases.push_back(prim("replace_rows", [](Rng& r) {
    const std::vector<bool> mask{true, false, true, false};
    const Tensor src = randn({4, 5}, r);
    return check([mask, src](const Tensor& x) { return ops::replace_rows(x, mask, ops::mul(src, x)); },
                 randn({4, 5}, r), r);
  }));
  cases.push_back(prim("conv2d", [](Rng& r) {
    const Tensor w = randn({3, 2, 3, 3}, r, 0.3), b = randn({3}, r);
    return check([w, b](const Tensor& x) { return ops::conv2d(x, w, b, 1, 1); }, randn({2, 5, 5}, r), r);
  }));
  cases.push_back(prim("conv2d_stride2_weight", [](Rng& r) {
    const Tensor x = randn({2, 6, 6}, r), b = randn({3}, r);
    return check([x, b](const Tensor& w) { return ops::conv2d(x, w, b, 2, 1); }, randn({3, 2, 4, 4}, r, 0.3), r);
  }));
  cases.push_back(prim("conv_transpose", [](Rng& r) {
    const Tensor w = randn({2, 3, 2, 2}, r, 0.5), b = randn({3}, r);
    return check([w, b](const Tensor& x) { return ops::conv_transpose2x2(x, w, b); }, randn({2, 3, 4}, r), r);
  }));
  cases.push_back(prim("conv_transpose_weight", [](Rng& r) {
    const Tensor x = randn({2, 3, 4}, r), b = randn({3}, r);
    return check([x, b](const Tensor& w) { return ops::conv_transpose2x2(x, w, b); }, randn({2, 3, 2, 2}, r, 0.5), r);
  }));
  cases.push_back(prim("maxpool", [](Rng& r) {
    // Distinct values spaced far beyond the probe step.
    std::vector<float> v(2 * 5 * 4);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.05f * static_cast<float>(i);
    for (std::size_t i = v.size(); i > 1; --i)
      std::swap(v[i - 1], v[static_cast<std::size_t>(r.randint(0, static_cast<std::int64_t>(i - 1)))]);
    return check(ops::maxpool2x2, Tensor::from({2, 5, 4}, v), r);
  }));
  cases.push_back(prim("channel_norm", [](Rng& r) {
    const Tensor g = randn({4}, r, 0.5, 1.0), b = randn({4}, r);
    return check([g, b](const Tensor& x) { return ops::channel_norm(x, g, b); }, randn({4, 3, 3}, r), r);
  }));
  cases.push_back(prim("cross_entropy", [](Rng& r) {
    const std::vector<std::int64_t> t{0, 3, 2, 3};
    return check([t](const Tensor& x) { return ops::cross_entropy(x, t); }, randn({4, 5}, r), r);
  }));
  cases.push_back(prim("smooth_l1", [](Rng& r) {
    std::vector<float> target(12, 0.0f);
    return check([target](const Tensor& x) { return ops::smooth_l1(x, target, 1.0f / 9.0f); },
                 away_from_zero({3, 4}, r, 0.02, 0.4), r);
  }));
  cases.push_back(prim("mse", [](Rng& r) {
    std::vector<float> target(12);
    for (auto& t : target) t = static_cast<float>(r.normal());
    return check([target](const Tensor& x) { return ops::mse(x, target); }, randn({3, 4}, r), r);
  }));
  cases.push_back(prim("dropout", [](Rng& r) {
    const std::uint64_t s = r.next_u64();
    return check(
        [s](const Tensor& x) {
          Rng local(s);
          return ops::dropout(x, 0.3f, true, local);
        },
        randn({4, 5}, r), r);
  }));
  cases.push_back(prim("stochastic_depth", [](Rng& r) {
    return check(
        [](const Tensor& x) {
          Rng local(11);
          return ops::add(x, ops::stochastic_depth(ops::mul(x, x), 0.2f, true, local));
        },
        randn({4, 5}, r), r);
  }));
  cases.push_back(prim("attention", [](Rng& r) {
    const Tensor qkv = randn({8, 24}, r, 0.3), qb = randn({24}, r, 0.1), pw = randn({8, 8}, r, 0.3),
                 pb = randn({8}, r, 0.1);
    return check([=](const Tensor& x) { return ops::multi_head_attention(x, qkv, qb, pw, pb, 2); },
                 randn({5, 8}, r), r);
  }));
  cases.push_back(prim("attention_weight", [](Rng& r) {
    const Tensor x = randn({5, 8}, r), qb = randn({24}, r, 0.1), pw = randn({8, 8}, r, 0.3), pb = randn({8}, r, 0.1);
    return check([=](const Tensor& w) { return ops::multi_head_attention(x, w, qb, pw, pb, 2); },
                 randn({8, 24}, r, 0.3), r);
  }));
  cases.push_back({"tiny_encoder_block", 1e-2, true, encoder_case});
  cases.push_back({"tiny_detection_loss", 1e-2, true, detection_case});
  return cases;
}

}  // namespace dit
