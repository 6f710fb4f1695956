#include <cmath>
#include <filesystem>

#include "dit/checkpoint.hpp"
#include "dit/dvae.hpp"
#include "dit/ops.hpp"
#include "dit/synthdoc.hpp"
#include "doctest.h"

using namespace dit;
namespace fs = std::filesystem;

TEST_CASE("112x112 page -> 14x14 token map with ids in [0, 8192)") {
  const Dvae model(DvaeConfig{}, 1);
  CHECK(model.config().codebook_size == 8192);
  const Tokenizer tok(model);
  const Image page = generate_corpus_document(0, 2, CorpusSpec::single(0, 112, 112)).image;
  const TokenMap t = tok.tokenize(page);
  CHECK(t.grid_h == 14);
  CHECK(t.grid_w == 14);
  REQUIRE(t.indices.size() == 196);
  for (auto i : t.indices) {
    CHECK(i >= 0);
    CHECK(i < 8192);
  }
}

TEST_CASE("decoder output is 8x the grid with the input channel count") {
  const Dvae model(DvaeConfig::tiny(), 1);
  const Image img(64, 40, 1, 128.0f);
  const EncodedGrid g = model.encode(img);
  CHECK(g.logits.shape() == Shape{40, 64});
  const Tensor rec = model.decode(ops::softmax(g.logits), g.grid_h, g.grid_w);
  CHECK(rec.shape() == Shape{1, 40, 64});
  CHECK_THROWS(model.encode(Image(60, 40, 1)));
}

TEST_CASE("near-zero temperature gives the one-hot argmax") {
  const Tensor logits = Tensor::from({2, 4}, {0.1f, 3.0f, -2.0f, 2.9f, -1.0f, -1.0f, -3.0f, -1.5f});
  const Quantized soft = quantize_gumbel(logits, 1e-10f, nullptr, false);
  CHECK(soft.indices == std::vector<std::int64_t>{1, 0});
  const std::vector<float> want{0, 1, 0, 0, 1, 0, 0, 0};
  for (std::size_t i = 0; i < 4; ++i) CHECK(soft.weights.data()[i] == doctest::Approx(want[i]));
  // exact tie between codes 0 and 1: lowest index wins
  const Quantized hard = quantize_gumbel(logits, 1e-10f, nullptr, true);
  for (std::size_t i = 0; i < 8; ++i) CHECK(hard.weights.data()[i] == want[i]);
  CHECK_THROWS(quantize_gumbel(logits, 0.0f, nullptr, false));
}

TEST_CASE("Gumbel-max draws follow softmax(logits)") {
  const std::vector<double> p{0.5, 0.3, 0.2};
  const std::size_t n = 30000;
  std::vector<float> v;
  for (std::size_t i = 0; i < n; ++i)
    for (double q : p) v.push_back(static_cast<float>(std::log(q)));
  Rng rng(12);
  const Quantized q = quantize_gumbel(Tensor::from({n, 3}, v), 1.0f, &rng, true);
  std::vector<double> freq(3, 0.0);
  for (auto i : q.indices) freq[static_cast<std::size_t>(i)] += 1.0 / n;
  for (std::size_t k = 0; k < 3; ++k) CHECK(freq[k] == doctest::Approx(p[k]).epsilon(0.03));
}

TEST_CASE("perplexity loss: 0 for uniform usage, 1 for a single code") {
  const Tensor recon = Tensor::zeros({1, 4});
  const std::vector<float> target(4, 0.5f);
  const DvaeLoss u = dvae_loss(recon, target, Tensor::full({8}, 1.0f / 8), 0.1f);
  CHECK(u.perplexity_loss.item() == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(u.mse.item() == doctest::Approx(0.25));
  CHECK(u.total.item() == doctest::Approx(0.25));
  const DvaeLoss one = dvae_loss(recon, target, Tensor::from({4}, {0, 1, 0, 0}), 0.1f);
  CHECK(one.perplexity_loss.item() == doctest::Approx(1.0));
  CHECK(one.total.item() == doctest::Approx(0.25 + 0.1));
  // two codes equally: entropy ln 2 over ln 4
  const DvaeLoss two = dvae_loss(recon, target, Tensor::from({4}, {0.5f, 0.5f, 0, 0}), 0.0f);
  CHECK(two.perplexity_loss.item() == doctest::Approx(0.5));
  CHECK_THROWS(dvae_loss(recon, target, Tensor::from({2}, {0.3f, 0.3f}), 0.1f));
}

TEST_CASE("temperature anneals exponentially from 1 and respects the floor") {
  CHECK(dvae_temperature(0, 100, 1e-10f) == 1.0f);
  CHECK(dvae_temperature(100, 100, 1e-10f) == doctest::Approx(std::exp(-5.0)));
  CHECK(dvae_temperature(50, 100, 1e-10f) == doctest::Approx(std::exp(-2.5)));
  CHECK(dvae_temperature(100, 100, 0.1f) == doctest::Approx(0.1));
  for (int s = 1; s <= 100; ++s) CHECK(dvae_temperature(s, 100, 1e-10f) < dvae_temperature(s - 1, 100, 1e-10f));
  CHECK(DvaeConfig{}.temperature_floor == doctest::Approx(1e-10f));
}

TEST_CASE("checkpoint round trip keeps tokens and reconstructions") {
  const fs::path path = fs::temp_directory_path() / "dit_test_tok.ditc";
  Dvae model(DvaeConfig::tiny(), 5);
  std::vector<Image> imgs{generate_corpus_document(0, 3, CorpusSpec::single(2, 64, 64)).image};
  DvaeTrainConfig tc;
  tc.steps = 2;
  tc.batch = 1;
  tc.resolution = 64;
  train_tokenizer(model, imgs, tc);
  model.save(path);
  const Tokenizer a(model), b = Tokenizer::load(path);
  CHECK(a.tokenize(imgs[0]) == b.tokenize(imgs[0]));
  CHECK(a.reconstruct(imgs[0]).data == b.reconstruct(imgs[0]).data);
  CHECK_THROWS_AS(Tokenizer::load(fs::temp_directory_path() / "nope.ditc"), CheckpointError);
  CHECK_THROWS(Tokenizer().tokenize(imgs[0]));
}

TEST_CASE("tokenizer training is deterministic under a fixed seed") {
  std::vector<Image> imgs;
  for (std::size_t i = 0; i < 3; ++i) imgs.push_back(generate_corpus_document(i, 4, CorpusSpec{}).image);
  DvaeTrainConfig tc;
  tc.steps = 3;
  tc.batch = 2;
  tc.resolution = 64;
  tc.seed = 9;
  Dvae a(DvaeConfig::tiny(), 1), b(DvaeConfig::tiny(), 1);
  const auto la = train_tokenizer(a, imgs, tc);
  const auto lb = train_tokenizer(b, imgs, tc);
  for (std::size_t i = 0; i < la.size(); ++i) CHECK(la[i].total == lb[i].total);
  CHECK(la.back().temperature < 1.0);
}

TEST_CASE("evaluation reports code usage and the flat-image baseline") {
  std::vector<Image> imgs{Image(32, 32, 1, 255.0f)};
  imgs[0].at(3, 3) = 0.0f;
  const DvaeEval e = evaluate_tokenizer(Dvae(DvaeConfig::tiny(), 2), imgs);
  CHECK(e.codes_used >= 1);
  CHECK(e.hard_perplexity_loss >= 0.0);
  CHECK(e.hard_perplexity_loss <= 1.0);
  const double mean = (1023.0 * 1.0) / 1024.0;
  CHECK(e.constant_mse == doctest::Approx((1023.0 / 1024.0) - mean * mean));
}
