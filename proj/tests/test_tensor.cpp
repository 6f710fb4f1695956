#include <cmath>

#include "dit/ops.hpp"
#include "dit/optim.hpp"
#include "dit/rng.hpp"
#include "doctest.h"

using namespace dit;

TEST_CASE("matmul matches hand-computed product") {
  const Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor b = Tensor::from({3, 2}, {7, 8, 9, 10, 11, 12});
  const Tensor c = ops::matmul(a, b);
  REQUIRE(c.shape() == Shape{2, 2});
  CHECK(c.data()[0] == doctest::Approx(58));
  CHECK(c.data()[1] == doctest::Approx(64));
  CHECK(c.data()[2] == doctest::Approx(139));
  CHECK(c.data()[3] == doctest::Approx(154));
}

TEST_CASE("backward of sum(a*b) gives the other factor") {
  Tensor a = Tensor::from({3}, {1, -2, 3}, true);
  Tensor b = Tensor::from({3}, {4, 5, -6}, true);
  ops::sum(ops::mul(a, b)).backward();
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(a.grad()[i] == doctest::Approx(b.data()[i]));
    CHECK(b.grad()[i] == doctest::Approx(a.data()[i]));
  }
}

TEST_CASE("gradients accumulate when a tensor is used twice") {
  Tensor x = Tensor::from({1}, {3}, true);
  ops::sum(ops::add(ops::mul(x, x), x)).backward();  // d/dx (x^2 + x) = 2x + 1
  CHECK(x.grad()[0] == doctest::Approx(7));
}

TEST_CASE("softmax rows sum to one and ignore a constant shift") {
  const Tensor x = Tensor::from({2, 3}, {1, 2, 3, -1, 0, 5});
  const Tensor y = ops::softmax(x);
  const Tensor z = ops::softmax(ops::add_scalar(x, 100.0f));
  for (std::size_t r = 0; r < 2; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 3; ++c) {
      s += y.data()[r * 3 + c];
      CHECK(y.data()[r * 3 + c] == doctest::Approx(z.data()[r * 3 + c]).epsilon(1e-5));
    }
    CHECK(s == doctest::Approx(1.0));
  }
}

TEST_CASE("cross entropy of uniform logits is ln K") {
  const Tensor logits = Tensor::zeros({5, 64});
  const std::vector<std::int64_t> t{0, 3, 63, 10, 7};
  CHECK(ops::cross_entropy(logits, t).item() == doctest::Approx(std::log(64.0)).epsilon(1e-6));
}

TEST_CASE("cross entropy rejects out-of-range targets") {
  const Tensor logits = Tensor::zeros({1, 4});
  const std::vector<std::int64_t> t{4};
  CHECK_THROWS(ops::cross_entropy(logits, t));
}

TEST_CASE("straight-through: one-hot forward, soft gradient backward") {
  Tensor x = Tensor::from({2, 4}, {0.1f, 2.0f, -1.0f, 0.5f, 3.0f, 0.0f, 0.2f, 0.1f}, true);
  const Tensor w = Tensor::from({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  const Tensor hard = ops::straight_through(ops::softmax(x));
  const std::vector<float> expect{0, 1, 0, 0, 1, 0, 0, 0};
  for (std::size_t i = 0; i < 8; ++i) CHECK(hard.data()[i] == expect[i]);
  ops::sum(ops::mul(hard, w)).backward();
  const std::vector<float> g_st(x.grad().begin(), x.grad().end());

  Tensor x2 = Tensor::from({2, 4}, std::vector<float>(x.data().begin(), x.data().end()), true);
  ops::sum(ops::mul(ops::softmax(x2), w)).backward();
  for (std::size_t i = 0; i < 8; ++i) CHECK(g_st[i] == doctest::Approx(x2.grad()[i]));
}

TEST_CASE("no-grad guard stops graph construction") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    CHECK_FALSE(ops::mul(x, x).requires_grad());
  }
  CHECK(grad_enabled());
  CHECK(ops::mul(x, x).requires_grad());
}

TEST_CASE("shape mismatches throw ShapeError") {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({3, 2});
  CHECK_THROWS_AS(ops::add(a, b), ShapeError);
  CHECK_THROWS_AS(ops::matmul(a, a), ShapeError);
  CHECK_THROWS_AS(ops::reshape(a, {4, 2}), ShapeError);
}

TEST_CASE("gelu matches the erf form") {
  const Tensor x = Tensor::from({3}, {-1.5f, 0.0f, 2.0f});
  const Tensor y = ops::gelu(x);
  for (std::size_t i = 0; i < 3; ++i) {
    const double v = x.data()[i];
    CHECK(y.data()[i] == doctest::Approx(0.5 * v * (1 + std::erf(v / std::sqrt(2.0)))).epsilon(1e-6));
  }
}

TEST_CASE("layer norm output has zero mean and unit variance per row") {
  Rng rng(3);
  std::vector<float> v(4 * 16);
  for (auto& e : v) e = static_cast<float>(rng.normal() * 3 + 1);
  const Tensor y = ops::layer_norm(Tensor::from({4, 16}, v), Tensor::full({16}, 1.0f), Tensor::zeros({16}));
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0, s = 0;
    for (std::size_t c = 0; c < 16; ++c) m += y.data()[r * 16 + c];
    m /= 16;
    for (std::size_t c = 0; c < 16; ++c) s += (y.data()[r * 16 + c] - m) * (y.data()[r * 16 + c] - m);
    CHECK(m == doctest::Approx(0).epsilon(1e-5));
    CHECK(s / 16 == doctest::Approx(1).epsilon(1e-3));
  }
}

TEST_CASE("conv2d with a delta kernel is the identity") {
  const Tensor x = Tensor::from({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  std::vector<float> k(9, 0.0f);
  k[4] = 1.0f;
  const Tensor y = ops::conv2d(x, Tensor::from({1, 1, 3, 3}, k), Tensor::zeros({1}), 1, 1);
  REQUIRE(y.shape() == x.shape());
  for (std::size_t i = 0; i < 9; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));
}

TEST_CASE("maxpool and transposed conv double and halve spatial dims") {
  const Tensor x = Tensor::zeros({2, 6, 4});
  CHECK(ops::maxpool2x2(x).shape() == Shape{2, 3, 2});
  CHECK(ops::conv_transpose2x2(x, Tensor::zeros({2, 5, 2, 2}), Tensor::zeros({5})).shape() == Shape{5, 12, 8});
}

TEST_CASE("dropout is the identity at eval and unbiased in training") {
  Rng rng(9);
  const Tensor x = Tensor::full({1, 20000}, 1.0f);
  const Tensor e = ops::dropout(x, 0.3f, false, rng);
  for (float v : e.data()) CHECK(v == 1.0f);
  const Tensor t = ops::dropout(x, 0.3f, true, rng);
  double s = 0;
  for (float v : t.data()) s += v;
  CHECK(s / 20000 == doctest::Approx(1.0).epsilon(0.03));
}

TEST_CASE("grad_check is small on a smooth function") {
  const Tensor x = Tensor::from({4}, {0.3f, -0.7f, 1.1f, 0.05f});
  const float err = grad_check([](const Tensor& t) { return ops::sum(ops::mul(ops::exp(t), t)); }, x);
  CHECK(err < 1e-3f);
}
