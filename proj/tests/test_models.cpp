#include <cmath>
#include <random>

#include "doctest.h"
#include "samc/inpaint.hpp"
#include "samc/models.hpp"
#include "support/gradcheck.hpp"

using namespace samc;
using samc::testing::random_tensor;

namespace {

ClassifierConfig small_classifier(std::size_t side = 8) {
  ClassifierConfig c;
  c.input = {1, side, side};
  c.trunk_filters = {4, 8};
  c.classes_per_task = 2;
  c.seed = 3;
  return c;
}

// 8x8 image split into two flat tones along a random row or column.
Tensor two_tone(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> tone(0.0, 1.0);
  std::uniform_int_distribution<int> cut(2, 6), axis(0, 1);
  const double a = tone(rng), b = tone(rng);
  const int c = cut(rng);
  const bool vertical = axis(rng) == 1;
  Tensor t({1, 8, 8});
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) t[static_cast<std::size_t>(y * 8 + x)] = ((vertical ? x : y) < c) ? a : b;
  return t;
}


Tensor drop_pixels(const Tensor& img, double fraction, std::mt19937_64& rng) {
  std::bernoulli_distribution drop(fraction);
  Tensor out = img;
  for (auto& v : out.vec())
    if (drop(rng)) v = 0.0;
  return out;
}

}  // namespace

TEST_CASE("zero trunk returns the head bias") {
  MultiHeadClassifier m(small_classifier());
  for (std::size_t i = 0; i < m.params().count(); ++i)
    if (m.params().name(i).starts_with("trunk.")) m.params().at(i).fill(0.0);
  m.params().get("head0.bias") = Tensor::from({0.25, -1.5});
  std::mt19937_64 rng(1);
  auto out = m.classify(random_tensor({3, 1, 8, 8}, rng, 0, 1), 0);
  for (std::size_t n = 0; n < 3; ++n) {
    CHECK(out.logits[n * 2] == 0.25);
    CHECK(out.logits[n * 2 + 1] == -1.5);
  }
}

TEST_CASE("classify is deterministic and retains the saliency tap") {
  MultiHeadClassifier a(small_classifier()), b(small_classifier());
  std::mt19937_64 rng(2);
  Tensor x = random_tensor({2, 1, 8, 8}, rng, 0, 1);
  auto oa = a.classify(x, 0);
  CHECK(oa.logits == b.classify(x, 0).logits);
  CHECK(oa.logits.shape() == Shape{2, 2});
  CHECK(oa.tape.value(a.saliency_tap()).shape() == Shape{2, 8, 4, 4});
}

TEST_CASE("unknown head is an error naming the id") {
  MultiHeadClassifier m(small_classifier());
  Tensor x({1, 1, 8, 8}, 0.5);
  try {
    m.classify(x, 3);
    FAIL("expected throw");
  } catch (const UnknownTaskError& e) {
    CHECK(e.task() == 3);
    CHECK(std::string(e.what()).find('3') != std::string::npos);
  }
  CHECK(m.ensure_head(3) == 3);
  CHECK(m.num_heads() == 4);
  CHECK_NOTHROW(m.classify(x, 3));
}

TEST_CASE("head creation keeps existing parameters and trunk identical across heads") {
  MultiHeadClassifier m(small_classifier());
  const auto before = m.params().get("trunk.conv0.weight");
  m.ensure_head(2);
  CHECK(m.params().get("trunk.conv0.weight") == before);
  CHECK(m.graph(0).nodes().size() == m.graph(2).nodes().size());
  CHECK(m.params().name(m.params().count() - 1) == "head2.bias");
}

TEST_CASE("a step on one head leaves the other heads bit-identical") {
  MultiHeadClassifier m(small_classifier());
  m.ensure_head(2);
  std::mt19937_64 rng(4);
  Tensor x = random_tensor({4, 1, 8, 8}, rng, 0, 1);
  std::vector<int> y{0, 1, 1, 0};
  const ParamSet before = m.params();
  auto out = m.classify(x, 1);
  auto loss = softmax_cross_entropy(out.logits, y);
  auto g = backward(out.tape, loss.grad);
  sgd_step(m.params(), g.params, 0.1);
  for (const char* name : {"head0.weight", "head0.bias", "head2.weight", "head2.bias"})
    CHECK(m.params().get(name) == before.get(name));
  CHECK(m.params().get("head1.weight") != before.get("head1.weight"));
}

TEST_CASE("classifier separates a one-pixel toy set within 200 steps") {
  // class 1 has a bright pixel at (2, 5); class 0 does not
  MultiHeadClassifier m(small_classifier());
  std::mt19937_64 rng(5);
  std::vector<Tensor> xs;
  std::vector<int> ys;
  for (int i = 0; i < 40; ++i) {
    Tensor x = random_tensor({1, 8, 8}, rng, 0.0, 0.3);
    const int label = i % 2;
    if (label == 1) x[2 * 8 + 5] = 1.0;
    xs.push_back(x);
    ys.push_back(label);
  }
  std::uniform_int_distribution<std::size_t> pick(0, xs.size() - 1);
  for (int step = 0; step < 200; ++step) {
    std::vector<Tensor> bx;
    std::vector<int> by;
    for (int k = 0; k < 10; ++k) {
      auto i = pick(rng);
      bx.push_back(xs[i]);
      by.push_back(ys[i]);
    }
    auto out = m.classify(stack(bx), 0);
    auto loss = softmax_cross_entropy(out.logits, by);
    sgd_step(m.params(), backward(out.tape, loss.grad).params, 0.1);
  }
  auto logits = m.classify(stack(xs), 0).logits;
  int correct = 0;
  for (std::size_t i = 0; i < xs.size(); ++i)
    correct += ((logits[i * 2 + 1] > logits[i * 2]) ? 1 : 0) == ys[i];
  CHECK(correct / 40.0 >= 0.95);
}

TEST_CASE("autoencoder geometry") {
  AutoencoderConfig cfg;
  cfg.image = {1, 8, 8};
  InpaintAutoencoder ae(cfg);
  CHECK(ae.bottleneck() == std::pair<std::size_t, std::size_t>{1, 1});

  cfg.image = {3, 32, 32};
  InpaintAutoencoder big(cfg);
  CHECK(big.bottleneck() == std::pair<std::size_t, std::size_t>{4, 4});
  CHECK(big.graph().output_shape() == Shape{3, 32, 32});

  cfg.image = {1, 12, 12};
  InpaintAutoencoder twelve(cfg);
  CHECK(twelve.graph().output_shape() == Shape{1, 12, 12});

  // 6 -> 3 -> 2 -> 1 needs output padding 1 on the last deconv, 10 -> 5 -> 3 -> 2 needs 0
  cfg.image = {1, 10, 6};
  CHECK_THROWS_AS(InpaintAutoencoder{cfg}, std::invalid_argument);
}

TEST_CASE("untrained reconstruction is finite and inside [0,1]") {
  AutoencoderConfig cfg;
  cfg.image = {1, 8, 8};
  InpaintAutoencoder ae(cfg);
  std::mt19937_64 rng(6);
  for (const Tensor& x : {random_tensor({1, 8, 8}, rng, 0, 1), Tensor({1, 8, 8}, 0.0)}) {
    Tensor y = ae.reconstruct(x);
    CHECK(y.shape() == x.shape());
    CHECK(y.all_finite());
    for (double v : y.vec()) CHECK((v >= 0.0 && v <= 1.0));
  }
  CHECK_THROWS_AS(ae.reconstruct(Tensor({1, 1, 7, 8})), ShapeError);
}

TEST_CASE("autoencoder loss does not increase over the first 10 small steps") {
  AutoencoderConfig cfg;
  cfg.image = {1, 8, 8};
  InpaintAutoencoder ae(cfg);
  std::mt19937_64 rng(7);
  std::vector<Tensor> clean, masked;
  for (int i = 0; i < 8; ++i) {
    clean.push_back(two_tone(rng));
    masked.push_back(drop_pixels(clean.back(), 0.3, rng));
  }
  const Tensor in = stack(masked), target = stack(clean);
  double prev = ae.train_step(in, target, 1e-3);
  for (int i = 0; i < 10; ++i) {
    const double cur = ae.train_step(in, target, 1e-3);
    CHECK(cur <= prev);
    prev = cur;
  }
}

TEST_CASE("autoencoder completes two-tone images from their coarse fill") {
  AutoencoderConfig cfg;
  cfg.image = {1, 8, 8};
  InpaintAutoencoder ae(cfg);
  std::mt19937_64 rng(8);
  std::bernoulli_distribution drop(0.3);
  auto coarse = [&](const Tensor& x) {
    PixelMask m(8, 8, true);
    for (std::size_t i = 0; i < 64; ++i)
      if (drop(rng)) m.set(i, false);
    if (m.none()) m.set(0, true);
    return rule_fill(zero_fill(x, m), m);
  };
  for (int step = 0; step < 500; ++step) {
    std::vector<Tensor> clean, in;
    for (int i = 0; i < 10; ++i) {
      clean.push_back(two_tone(rng));
      in.push_back(coarse(clean.back()));
    }
    ae.train_step(stack(in), stack(clean), 0.2);
  }
  double err = 0.0;
  std::size_t count = 0;
  for (int i = 0; i < 50; ++i) {
    const Tensor x = two_tone(rng);
    const Tensor y = ae.reconstruct(coarse(x));
    for (std::size_t k = 0; k < x.size(); ++k, ++count) err += std::abs(x[k] - y[k]);
  }
  const double mae = err / static_cast<double>(count);
  MESSAGE("two-tone 8x8 MAE after 500 steps: " << mae);
  CHECK(mae < 0.15);
}

TEST_CASE("autoencoder learns to fill a fixed hole in flat images") {
  // Zero-filled 4x4 centre hole in a flat tone: the right answer is the
  // border tone, which only the learned stage can recover.
  AutoencoderConfig cfg;
  cfg.image = {1, 8, 8};
  InpaintAutoencoder ae(cfg);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> tone(0.0, 1.0);
  auto batch = [&](Tensor& clean, Tensor& holed) {
    clean = Tensor({10, 1, 8, 8});
    for (std::size_t n = 0; n < 10; ++n) {
      const double a = tone(rng);
      for (std::size_t k = 0; k < 64; ++k) clean[n * 64 + k] = a;
    }
    holed = clean;
    for (std::size_t n = 0; n < 10; ++n)
      for (std::size_t y = 2; y < 6; ++y)
        for (std::size_t x = 2; x < 6; ++x) holed[n * 64 + y * 8 + x] = 0.0;
  };
  Tensor clean, holed;
  for (int step = 0; step < 500; ++step) {
    batch(clean, holed);
    ae.train_step(holed, clean, 0.2);
  }
  double err = 0.0, baseline = 0.0;
  for (int i = 0; i < 5; ++i) {
    batch(clean, holed);
    const Tensor y = ae.reconstruct(holed);
    for (std::size_t k = 0; k < y.size(); ++k) {
      err += std::abs(clean[k] - y[k]);
      baseline += std::abs(clean[k] - holed[k]);
    }
  }
  MESSAGE("hole-fill MAE " << err / 3200 << " vs zero-fill " << baseline / 3200);
  CHECK(err < 0.25 * baseline);
}

TEST_CASE("residual autoencoder starts as the identity") {
  AutoencoderConfig cfg;
  cfg.image = {3, 8, 8};
  InpaintAutoencoder ae(cfg);
  std::mt19937_64 rng(9);
  const Tensor x = random_tensor({2, 3, 8, 8}, rng, 0, 1);
  CHECK(ae.reconstruct(x) == x);
}
