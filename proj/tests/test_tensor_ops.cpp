#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fusenet/ops.hpp"
#include "fusenet/rng.hpp"
#include "support/oracles.hpp"

using namespace fusenet;

namespace {

Tensor<float> identity_kernel(Eigen::Index channels, Eigen::Index k) {
  Tensor<float> kernel = Tensor<float>::zeros({channels, channels, k, k});
  for (Eigen::Index c = 0; c < channels; ++c) kernel.at(c, c, k / 2, k / 2) = 1.0f;
  return kernel;
}

}  // namespace

TEST_CASE("shape basics") {
  Shape s{2, 3, 4, 5};
  CHECK(s.rank() == 4);
  CHECK(s.count() == 120);
  CHECK(s.n() == 2);
  CHECK(s.w() == 5);
  CHECK(Shape{}.count() == 1);
  CHECK(Shape{7}.count() == 7);
  CHECK_THROWS_AS(Shape{0}, std::invalid_argument);
  CHECK_THROWS_AS(Shape{3}.n(), std::logic_error);
}

TEST_CASE("conv2d delta kernel acts as identity") {
  Pcg32 rng(11);
  Tensor<float> x = oracles::random_tensor<float>({2, 3, 6, 8}, rng, -1.0, 1.0);
  Tensor<float> bias = Tensor<float>::zeros({3});
  Tensor<float> y = conv2d(x, identity_kernel(3, 3), bias);
  REQUIRE(y.shape() == x.shape());
  for (Eigen::Index i = 0; i < x.size(); ++i) CHECK(y.raw()[i] == doctest::Approx(x.raw()[i]));
}

TEST_CASE("conv2d all-ones kernel counts in-bounds neighbors") {
  Tensor<float> x = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
  Tensor<float> k = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
  Tensor<float> b = Tensor<float>::zeros({1});
  Tensor<float> y = conv2d(x, k, b);
  const float expect[9] = {4, 6, 4, 6, 9, 6, 4, 6, 4};
  for (Eigen::Index i = 0; i < 9; ++i) CHECK(y.raw()[i] == doctest::Approx(expect[i]));
}

TEST_CASE("conv2d zero kernel leaves only the bias") {
  Tensor<float> x = Tensor<float>::full({1, 2, 4, 4}, 3.0f);
  Tensor<float> k = Tensor<float>::zeros({5, 2, 3, 3});
  Tensor<float> b = Tensor<float>::full({5}, 2.5f);
  Tensor<float> y = conv2d(x, k, b);
  for (Eigen::Index i = 0; i < y.size(); ++i) CHECK(y.raw()[i] == doctest::Approx(2.5f));
}

TEST_CASE("conv2d rejects bad arguments") {
  Tensor<float> x = Tensor<float>::zeros({1, 2, 4, 4});
  CHECK_THROWS_AS(conv2d(x, Tensor<float>::zeros({4, 3, 3, 3}), Tensor<float>::zeros({4})),
                  std::invalid_argument);
  CHECK_THROWS_AS(conv2d(x, Tensor<float>::zeros({4, 2, 2, 2}), Tensor<float>::zeros({4})),
                  std::invalid_argument);
  CHECK_THROWS_AS(conv2d(x, Tensor<float>::zeros({4, 2, 3, 3}), Tensor<float>::zeros({3})),
                  std::invalid_argument);
}

TEST_CASE("conv2d im2col, direct, and naive oracle agree") {
  Pcg32 rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Index N = 1 + rng.below(2);
    const Eigen::Index Ci = 1 + rng.below(4);
    const Eigen::Index Co = 1 + rng.below(4);
    const Eigen::Index H = 2 + rng.below(7);
    const Eigen::Index W = 2 + rng.below(7);
    const Eigen::Index K = rng.below(2) ? 3 : 1;
    Tensor<float> x = oracles::random_tensor<float>({N, Ci, H, W}, rng, -0.5, 0.5);
    Tensor<float> k = oracles::random_tensor<float>({Co, Ci, K, K}, rng, -0.5, 0.5);
    Tensor<float> b = oracles::random_tensor<float>({Co}, rng, -0.5, 0.5);
    Tensor<float> fast = conv2d(x, k, b, Conv2dAlgo::kIm2col);
    Tensor<float> direct = conv2d(x, k, b, Conv2dAlgo::kDirect);
    Tensor<float> naive = oracles::conv2d_naive(x, k, b);
    double worst = 0;
    for (Eigen::Index i = 0; i < fast.size(); ++i) {
      worst = std::max(worst, double(std::abs(fast.raw()[i] - naive.raw()[i])));
      worst = std::max(worst, double(std::abs(direct.raw()[i] - naive.raw()[i])));
    }
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("maxpool2x2 window max and backward routing") {
  Tensor<float> x = Tensor<float>::from({1, 1, 2, 2}, {1, 2, 3, 4});
  x.set_requires_grad();
  Tensor<float> y = maxpool2x2(x);
  REQUIRE(y.size() == 1);
  CHECK(y.raw()[0] == 4.0f);

  Tensor<float> loss = oracles::weighted_sum(y, ArrayX<float>::Ones(1));
  backward(loss);
  CHECK(x.grad()[0] == 0.0f);
  CHECK(x.grad()[1] == 0.0f);
  CHECK(x.grad()[2] == 0.0f);
  CHECK(x.grad()[3] == 1.0f);
}

TEST_CASE("maxpool2x2 ties route to the first element in row-major order") {
  Tensor<float> x = Tensor<float>::full({1, 1, 4, 4}, 7.5f);
  x.set_requires_grad();
  Tensor<float> y = maxpool2x2(x);
  for (Eigen::Index i = 0; i < y.size(); ++i) CHECK(y.raw()[i] == 7.5f);
  backward(oracles::weighted_sum(y, ArrayX<float>::Ones(4)));
  for (Eigen::Index oy = 0; oy < 2; ++oy)
    for (Eigen::Index ox = 0; ox < 2; ++ox) {
      CHECK(x.grad()[x.flat_index(0, 0, 2 * oy, 2 * ox)] == 1.0f);
      CHECK(x.grad()[x.flat_index(0, 0, 2 * oy, 2 * ox + 1)] == 0.0f);
      CHECK(x.grad()[x.flat_index(0, 0, 2 * oy + 1, 2 * ox)] == 0.0f);
      CHECK(x.grad()[x.flat_index(0, 0, 2 * oy + 1, 2 * ox + 1)] == 0.0f);
    }
}

TEST_CASE("maxpool2x2 matches exhaustive window scan") {
  Pcg32 rng(37);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor<float> x = oracles::random_tensor<float>({2, 3, 8, 6}, rng, -10.0, 10.0);
    Tensor<float> got = maxpool2x2(x);
    Tensor<float> want = oracles::maxpool_naive(x);
    for (Eigen::Index i = 0; i < got.size(); ++i) CHECK(got.raw()[i] == want.raw()[i]);
  }
  CHECK_THROWS_AS(maxpool2x2(Tensor<float>::zeros({1, 1, 3, 4})), std::invalid_argument);
}

TEST_CASE("upsample2x replicates 2x2 blocks") {
  Tensor<float> x = Tensor<float>::from({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor<float> y = upsample2x(x);
  const float expect[16] = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  REQUIRE(y.size() == 16);
  for (Eigen::Index i = 0; i < 16; ++i) CHECK(y.raw()[i] == expect[i]);
}

TEST_CASE("upsample2x backward sums each block") {
  Tensor<float> x = Tensor<float>::from({1, 1, 2, 2}, {1, 2, 3, 4});
  x.set_requires_grad();
  Tensor<float> y = upsample2x(x);
  backward(oracles::weighted_sum(y, ArrayX<float>::Ones(16)));
  for (Eigen::Index i = 0; i < 4; ++i) CHECK(x.grad()[i] == 4.0f);
}

TEST_CASE("maxpool2x2 after upsample2x is the identity") {
  Pcg32 rng(41);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor<float> x = oracles::random_tensor<float>({1, 2, 5, 7}, rng, -3.0, 3.0);
    Tensor<float> y = maxpool2x2(upsample2x(x));
    REQUIRE(y.shape() == x.shape());
    for (Eigen::Index i = 0; i < x.size(); ++i) CHECK(y.raw()[i] == x.raw()[i]);
  }
}

TEST_CASE("relu forward, gradient mask, idempotence") {
  Tensor<float> x = Tensor<float>::from({1, 3, 1, 1}, {-1, 0, 2});
  x.set_requires_grad();
  Tensor<float> y = relu(x);
  CHECK(y.raw()[0] == 0.0f);
  CHECK(y.raw()[1] == 0.0f);
  CHECK(y.raw()[2] == 2.0f);

  backward(oracles::weighted_sum(y, ArrayX<float>::Ones(3)));
  CHECK(x.grad()[0] == 0.0f);
  CHECK(x.grad()[1] == 0.0f);
  CHECK(x.grad()[2] == 1.0f);

  Tensor<float> yy = relu(y);
  for (Eigen::Index i = 0; i < 3; ++i) CHECK(yy.raw()[i] == y.raw()[i]);
}

TEST_CASE("add") {
  Tensor<float> a = Tensor<float>::from({1, 1, 1, 2}, {1, 2});
  Tensor<float> b = Tensor<float>::from({1, 1, 1, 2}, {3, 4});
  Tensor<float> z = Tensor<float>::zeros({1, 1, 1, 2});
  Tensor<float> y = add(a, b);
  CHECK(y.raw()[0] == 4.0f);
  CHECK(y.raw()[1] == 6.0f);
  Tensor<float> same = add(a, z);
  CHECK(same.raw()[0] == a.raw()[0]);
  CHECK(same.raw()[1] == a.raw()[1]);
  CHECK_THROWS_AS(add(a, Tensor<float>::zeros({1, 1, 2, 1})), std::invalid_argument);

  a.set_requires_grad();
  b.set_requires_grad();
  Tensor<float> s = add(a, b);
  ArrayX<float> w(2);
  w << 2.0f, 5.0f;
  backward(oracles::weighted_sum(s, w));
  CHECK(a.grad()[0] == 2.0f);
  CHECK(b.grad()[0] == 2.0f);
  CHECK(a.grad()[1] == 5.0f);
  CHECK(b.grad()[1] == 5.0f);
}

TEST_CASE("concat_channels shapes, identity, and slice round-trip") {
  Pcg32 rng(53);
  Tensor<float> a = oracles::random_tensor<float>({1, 2, 4, 4}, rng, -1, 1);
  Tensor<float> b = oracles::random_tensor<float>({1, 3, 4, 4}, rng, -1, 1);
  Tensor<float> y = concat_channels<float>({a, b});
  CHECK(y.shape() == Shape{1, 5, 4, 4});

  Tensor<float> single = concat_channels<float>({a});
  for (Eigen::Index i = 0; i < a.size(); ++i) CHECK(single.raw()[i] == a.raw()[i]);

  Tensor<float> sa = slice_channels(y, 0, 2);
  Tensor<float> sb = slice_channels(y, 2, 5);
  for (Eigen::Index i = 0; i < a.size(); ++i) CHECK(sa.raw()[i] == a.raw()[i]);
  for (Eigen::Index i = 0; i < b.size(); ++i) CHECK(sb.raw()[i] == b.raw()[i]);

  CHECK_THROWS_AS(concat_channels(std::span<const Tensor<float>>{}), std::invalid_argument);
  Tensor<float> bad = Tensor<float>::zeros({1, 1, 2, 4});
  CHECK_THROWS_AS(concat_channels<float>({a, bad}), std::invalid_argument);
}

TEST_CASE("softmax_classes equal logits and closed form") {
  Tensor<float> z = Tensor<float>::zeros({1, 6, 1, 1});
  Tensor<float> p = softmax_classes(z);
  for (Eigen::Index i = 0; i < 6; ++i) CHECK(p.raw()[i] == doctest::Approx(1.0f / 6.0f));

  Tensor<float> z2 = Tensor<float>::from({1, 2, 1, 1}, {std::log(2.0f), 0.0f});
  Tensor<float> p2 = softmax_classes(z2);
  CHECK(p2.raw()[0] == doctest::Approx(2.0f / 3.0f));
  CHECK(p2.raw()[1] == doctest::Approx(1.0f / 3.0f));
}

TEST_CASE("softmax_classes is shift-invariant and normalized") {
  Pcg32 rng(67);
  Tensor<float> z = oracles::random_tensor<float>({2, 5, 3, 3}, rng, -4.0, 4.0);
  Tensor<float> p = softmax_classes(z);

  Tensor<float> zshift = Tensor<float>::zeros(z.shape());
  zshift.raw() = z.array();
  const Eigen::Index HW = 9;
  for (Eigen::Index n = 0; n < 2; ++n)
    for (Eigen::Index px = 0; px < HW; ++px) {
      const float c = float(rng.uniform(-10.0, 10.0));
      for (Eigen::Index k = 0; k < 5; ++k) zshift.raw()[n * 5 * HW + k * HW + px] += c;
    }
  Tensor<float> pshift = softmax_classes(zshift);
  for (Eigen::Index i = 0; i < p.size(); ++i)
    CHECK(pshift.raw()[i] == doctest::Approx(p.raw()[i]).epsilon(1e-4));

  for (Eigen::Index n = 0; n < 2; ++n)
    for (Eigen::Index px = 0; px < HW; ++px) {
      float sum = 0;
      for (Eigen::Index k = 0; k < 5; ++k) {
        const float v = p.raw()[n * 5 * HW + k * HW + px];
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
        sum += v;
      }
      CHECK(std::abs(sum - 1.0f) < 1e-6f);
    }
}

TEST_CASE("masked cross entropy closed forms") {
  const Eigen::Index K = 6;
  Tensor<float> z = Tensor<float>::zeros({1, K, 2, 2});
  LabelBatch labels(1, 2, 2);
  labels.values = {0, 1, 2, 3};
  auto [loss, probs] = masked_softmax_cross_entropy(z, labels);
  CHECK(loss.value() == doctest::Approx(std::log(6.0f)));

  // A 50-logit margin saturates the softmax.
  Tensor<float> zbig = Tensor<float>::zeros({1, K, 1, 1});
  zbig.raw()[2] = 50.0f;
  LabelBatch one(1, 1, 1);
  one.values = {2};
  auto [loss2, probs2] = masked_softmax_cross_entropy(zbig, one);
  CHECK(loss2.value() < 1e-6f);

  // Ignored pixels do not move the loss.
  Tensor<float> z3 = Tensor<float>::zeros({1, K, 2, 2});
  LabelBatch mixed(1, 2, 2);
  mixed.values = {0, 255, 255, 255};
  auto [loss3, probs3] = masked_softmax_cross_entropy(z3, mixed);
  CHECK(loss3.value() == doctest::Approx(std::log(6.0f)));

  LabelBatch all_ignored(1, 2, 2, 255);
  CHECK_THROWS_AS(masked_softmax_cross_entropy(z3, all_ignored), std::invalid_argument);
  LabelBatch bad(1, 2, 2);
  bad.values = {0, 1, 6, 2};
  CHECK_THROWS_AS(masked_softmax_cross_entropy(z3, bad), std::invalid_argument);
}

TEST_CASE("forward values stay finite on finite inputs") {
  Pcg32 rng(71);
  Tensor<float> x = oracles::random_tensor<float>({1, 3, 8, 8}, rng, -50.0, 50.0);
  Tensor<float> k = oracles::random_tensor<float>({4, 3, 3, 3}, rng, -5.0, 5.0);
  Tensor<float> b = oracles::random_tensor<float>({4}, rng, -5.0, 5.0);
  Tensor<float> y = softmax_classes(maxpool2x2(relu(conv2d(x, k, b))));
  for (Eigen::Index i = 0; i < y.size(); ++i) CHECK(std::isfinite(y.raw()[i]));
}
