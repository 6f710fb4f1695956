#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "dit/mim.hpp"
#include "dit/synthdoc.hpp"
#include "doctest.h"

using namespace dit;
namespace fs = std::filesystem;

namespace {

std::size_t count(const std::vector<bool>& m) { return static_cast<std::size_t>(std::count(m.begin(), m.end(), true)); }

}  // namespace

TEST_CASE("40% of a 14x14 grid is 79 patches; blocks add at most the cap") {
  CHECK(mask_block_cap(14, 14) == 49);
  Rng rng(1);
  for (int i = 0; i < 300; ++i) {
    const auto m = blockwise_mask(rng, 14, 14, 0.4);
    REQUIRE(m.size() == 196);
    CHECK(count(m) >= 79);
    CHECK(count(m) <= 79 + 49);
  }
}

TEST_CASE("masks are a pure function of the rng state") {
  Rng a(5), b(5), c(6);
  const auto ma = blockwise_mask(a, 14, 14, 0.4), mb = blockwise_mask(b, 14, 14, 0.4);
  CHECK(ma == mb);
  CHECK(ma != blockwise_mask(c, 14, 14, 0.4));
}

TEST_CASE("a single block is a contiguous rectangle") {
  // min_block large enough that one block reaches the 5% target.
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const auto m = blockwise_mask(rng, 14, 14, 0.05, 16);
    std::size_t x0 = 14, y0 = 14, x1 = 0, y1 = 0;
    for (std::size_t y = 0; y < 14; ++y)
      for (std::size_t x = 0; x < 14; ++x)
        if (m[y * 14 + x]) {
          x0 = std::min(x0, x);
          y0 = std::min(y0, y);
          x1 = std::max(x1, x);
          y1 = std::max(y1, y);
        }
    CHECK((x1 - x0 + 1) * (y1 - y0 + 1) == count(m));
  }
}

TEST_CASE("mask arguments are validated") {
  Rng rng(0);
  CHECK_THROWS(blockwise_mask(rng, 14, 14, 0.0));
  CHECK_THROWS(blockwise_mask(rng, 14, 14, 1.0));
  CHECK_THROWS(blockwise_mask(rng, 0, 14, 0.4));
  // tiny grids still terminate and reach the target
  const auto m = blockwise_mask(rng, 2, 3, 0.5);
  CHECK(count(m) >= 3);
}

TEST_CASE("MIM loss of uniform logits over 8192 codes is ln 8192") {
  const Tensor logits = Tensor::zeros({79, 8192});
  std::vector<std::int64_t> t(79);
  std::iota(t.begin(), t.end(), 0);
  CHECK(mim_loss(logits, t).item() == doctest::Approx(std::log(8192.0)).epsilon(1e-6));
  CHECK_THROWS(mim_loss(logits, std::vector<std::int64_t>(78, 0)));
}

TEST_CASE("pretraining writes a loss CSV and a reloadable backbone, deterministically") {
  std::vector<Image> corpus;
  for (std::size_t i = 0; i < 3; ++i) corpus.push_back(generate_corpus_document(i, 2, CorpusSpec{}).image);
  Dvae dvae(DvaeConfig::tiny(), 1);
  const Tokenizer tok(dvae);
  PretrainConfig pc;
  pc.steps = 3;
  pc.batch = 2;
  pc.warmup = 1;
  pc.seed = 4;
  auto run = [&](const fs::path& dir) {
    fs::remove_all(dir);
    VisionTransformer vit(VitConfig::tiny(), 2);
    return pretrain(vit, corpus, tok, pc, dir);
  };
  const fs::path a = fs::temp_directory_path() / "dit_test_mim_a", b = fs::temp_directory_path() / "dit_test_mim_b";
  const auto la = run(a);
  run(b);
  REQUIRE(la.size() == 3);
  CHECK(la[0].loss == doctest::Approx(std::log(64.0)).epsilon(0.1));
  std::ifstream csv(pretrain_paths(a).loss_csv);
  std::string header;
  std::getline(csv, header);
  CHECK(header == "step,lr,loss");
  auto bytes = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
  };
  CHECK(bytes(pretrain_paths(a).loss_csv) == bytes(pretrain_paths(b).loss_csv));
  CHECK(bytes(pretrain_paths(a).checkpoint) == bytes(pretrain_paths(b).checkpoint));
  VisionTransformer back(load_vit_config(pretrain_paths(a).config), 0);
  back.load_weights(pretrain_paths(a).checkpoint);
}

TEST_CASE("pretraining config validation") {
  PretrainConfig pc;
  CHECK(pc.mask_ratio == 0.4);
  CHECK(pc.batch == 2048);
  CHECK(pc.weight_decay == doctest::Approx(0.05));
  pc.mask_ratio = 1.2;
  CHECK_THROWS(pc.validate());
}
