#include <random>

#include "doctest.h"
#include "samc/saliency.hpp"
#include "support/gradcheck.hpp"

using namespace samc;
using samc::testing::random_tensor;

namespace {

SaliencyMap map_of(std::size_t h, std::size_t w, std::vector<double> v) {
  return {Tensor({h, w}, std::move(v)), 0, 0};
}

MultiHeadClassifier small_model() {
  ClassifierConfig c;
  c.input = {1, 8, 8};
  c.trunk_filters = {4, 6};
  c.seed = 11;
  MultiHeadClassifier m(c);
  m.ensure_head(1);
  return m;
}

}  // namespace

TEST_CASE("1x1 feature map gives a constant, hence all-zero, map") {
  const Tensor a({1, 1, 1}, std::vector<double>{2.0});
  const Tensor g({1, 1, 1}, std::vector<double>{3.0});
  const Tensor m = grad_cam_map(a, g, 4, 4);
  CHECK(m.shape() == Shape{4, 4});
  CHECK(m.max_abs() == 0.0);
}

TEST_CASE("2x2 feature map peaks where the activation is") {
  const Tensor a({1, 2, 2}, std::vector<double>{1, 0, 0, 0});
  const Tensor g({1, 2, 2}, 1.0);
  const Tensor m = grad_cam_map(a, g, 2, 2);
  CHECK(m[0] == 1.0);
  CHECK(m[1] == 0.0);
  CHECK(m[2] == 0.0);
  CHECK(m[3] == 0.0);
}

TEST_CASE("normalized maps span [0,1]") {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    const Tensor a = random_tensor({3, 4, 4}, rng, 0, 2), g = random_tensor({3, 4, 4}, rng);
    const Tensor m = grad_cam_map(a, g, 8, 8);
    const auto [lo, hi] = std::minmax_element(m.vec().begin(), m.vec().end());
    if (*hi == 0.0) continue;  // constant map
    CHECK(*lo == 0.0);
    CHECK(*hi == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("doubling the class score leaves the map unchanged") {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 10; ++i) {
    const Tensor a = random_tensor({4, 3, 3}, rng, 0, 1), g = random_tensor({4, 3, 3}, rng);
    Tensor g2 = g;
    for (auto& v : g2.vec()) v *= 2;
    CHECK(grad_cam_map(a, g, 8, 8) == grad_cam_map(a, g2, 8, 8));
  }

  auto m = small_model();
  const Tensor x = random_tensor({3, 1, 8, 8}, rng, 0, 1);
  const std::vector<int> cls{0, 1, 1};
  const auto before = grad_cam(m, x, cls, 1);
  m.params().get("head1.weight").vec() = [&] {
    auto w = m.params().get("head1.weight").vec();
    for (auto& v : w) v *= 2;
    return w;
  }();
  for (auto& v : m.params().get("head1.bias").vec()) v *= 2;
  const auto after = grad_cam(m, x, cls, 1);
  for (std::size_t i = 0; i < 3; ++i) CHECK(before[i].values == after[i].values);
}

TEST_CASE("grad_cam on a model with a dead tap is all zero") {
  auto m = small_model();
  m.params().get("trunk.conv1.weight").fill(0.0);
  m.params().get("trunk.conv1.bias").fill(0.0);
  std::mt19937_64 rng(3);
  const auto s = grad_cam(m, random_tensor({1, 8, 8}, rng, 0, 1), 1, 0);
  CHECK(s.values.shape() == Shape{8, 8});
  CHECK(s.values.max_abs() == 0.0);
  CHECK(s.cls == 1);
  CHECK(s.task == 0);
}

TEST_CASE("grad_cam batch agrees with per-image calls") {
  auto m = small_model();
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor({4, 1, 8, 8}, rng, 0, 1);
  const std::vector<int> cls{0, 1, 0, 1};
  const auto batch = grad_cam(m, x, cls, 0);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto one = grad_cam(m, unstack_one(x, i), cls[i], 0);
    for (std::size_t k = 0; k < one.values.size(); ++k)
      CHECK(one.values[k] == doctest::Approx(batch[i].values[k]).epsilon(1e-12));
  }
}

TEST_CASE("grad_cam rejects bad classes and tasks") {
  auto m = small_model();
  const Tensor x({1, 8, 8}, 0.5);
  CHECK_THROWS_AS(grad_cam(m, x, 2, 0), std::out_of_range);
  CHECK_THROWS_AS(grad_cam(m, x, -1, 0), std::out_of_range);
  CHECK_THROWS_AS(grad_cam(m, x, 0, 5), UnknownTaskError);
}

TEST_CASE("extract thresholds strictly") {
  const Tensor x({1, 2, 2}, 0.3);
  const auto m = map_of(2, 2, {0, 0.5, 0.9, 1});
  const auto e = extract(x, m, 0.6);
  CHECK(!e.mask(0, 0));
  CHECK(!e.mask(0, 1));
  CHECK(e.mask(1, 0));
  CHECK(e.mask(1, 1));
  CHECK(e.kept_fraction == 0.5);

  CHECK(extract(x, m, 0.5).mask.count() == 2);  // 0.5 itself is dropped
  CHECK(extract(x, m, 0.0).mask.count() == 3);  // every m > 0
}

TEST_CASE("mu = 1 keeps only the fallback pixel") {
  const Tensor x({1, 2, 3}, 0.3);
  const auto m = map_of(2, 3, {0.2, 1, 0.4, 1, 0, 0.1});
  const auto e = extract(x, m, 1.0);
  CHECK(e.mask.count() == 1);
  CHECK(e.mask(0, 1));  // first maximum in row-major order
  CHECK(e.kept_fraction == doctest::Approx(1.0 / 6));

  const auto zero = extract(x, map_of(2, 3, std::vector<double>(6, 0.0)), 0.0);
  CHECK(zero.mask.count() == 1);
  CHECK(zero.mask(0, 0));
}

TEST_CASE("extract rejects mu outside [0,1] and mismatched shapes") {
  const Tensor x({1, 2, 2}, 0.3);
  const auto m = map_of(2, 2, {0, 0.5, 0.9, 1});
  CHECK_THROWS_AS(extract(x, m, -0.01), std::invalid_argument);
  CHECK_THROWS_AS(extract(x, m, 1.01), std::invalid_argument);
  CHECK_THROWS_AS(extract(Tensor({1, 3, 2}, 0.3), m, 0.5), ShapeError);
}

TEST_CASE("masks shrink and kept fraction falls as mu grows") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    SaliencyMap m{random_tensor({6, 5}, rng, 0, 1), 0, 0};
    double mu1 = u(rng), mu2 = u(rng);
    if (mu1 > mu2) std::swap(mu1, mu2);
    CHECK(threshold_mask(m, mu2).subset_of(threshold_mask(m, mu1)));
    const Tensor x({1, 6, 5}, 0.5);
    CHECK(extract(x, m, mu2).kept_fraction <= extract(x, m, mu1).kept_fraction);
  }
}
