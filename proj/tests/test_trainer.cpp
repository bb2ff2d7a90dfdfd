#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"
#include "samc/data.hpp"
#include "samc/trainer.hpp"
#include "samc/verify.hpp"
#include "support/gradcheck.hpp"
#include "support/projection_oracle.hpp"

using namespace samc;
using samc::testing::brute_force_project;
using samc::testing::random_tensor;

namespace {

ClassifierConfig tiny_classifier() {
  ClassifierConfig c;
  c.input = {1, 8, 8};
  c.trunk_filters = {4, 4};
  return c;
}

AutoencoderConfig tiny_ae() {
  AutoencoderConfig a;
  a.image = {1, 8, 8};
  a.encoder_filters = {4, 4};
  a.decoder_filters = {4, 4};
  return a;
}

TaskStream tiny_stream(std::size_t tasks, std::size_t per_class = 20) {
  SyntheticConfig s;
  s.tasks = tasks;
  s.train_per_class = per_class;
  s.test_per_class = 10;
  s.shape = {1, 8, 8};
  return make_synthetic_stream(s);
}

std::vector<CompletedSample> as_samples(const Tensor& x, const std::vector<int>& y) {
  std::vector<CompletedSample> out;
  for (std::size_t i = 0; i < y.size(); ++i) out.push_back({unstack_one(x, i), y[i]});
  return out;
}

std::vector<double> random_vec(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0, 1);
  std::vector<double> v(d);
  for (auto& e : v) e = n(rng);
  return v;
}

}  // namespace

// ---- memory loss ---------------------------------------------------------------

TEST_CASE("memory_loss: uniform logits give ln(classes)") {
  MultiHeadClassifier m(tiny_classifier());
  m.ensure_head(0);
  m.params().get("head0.weight").fill(0.0);
  m.params().get("head0.bias").fill(0.0);
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({4, 1, 8, 8}, rng, 0, 1);
  CHECK(memory_loss(m, as_samples(x, {0, 1, 1, 0}), 0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("memory_loss: confident correct logits give ~0") {
  MultiHeadClassifier m(tiny_classifier());
  m.ensure_head(0);
  m.params().get("head0.weight").fill(0.0);
  m.params().get("head0.bias").vec() = {50.0, -50.0};
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor({3, 1, 8, 8}, rng, 0, 1);
  CHECK(memory_loss(m, as_samples(x, {0, 0, 0}), 0) < 1e-20);
}

TEST_CASE("memory_loss is the mean of per-sample losses; empty memory is rejected") {
  MultiHeadClassifier m(tiny_classifier());
  m.ensure_head(0);
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({2, 1, 8, 8}, rng, 0, 1);
  const auto both = as_samples(x, {0, 1});
  const double a = memory_loss(m, std::span(both).subspan(0, 1), 0);
  const double b = memory_loss(m, std::span(both).subspan(1, 1), 0);
  CHECK(memory_loss(m, both, 0) == doctest::Approx((a + b) / 2).epsilon(1e-12));
  CHECK_THROWS_AS(memory_loss(m, {}, 0), std::invalid_argument);
}

// ---- gradients -------------------------------------------------------------------

TEST_CASE("compute_gradients: no constraints on the first task") {
  MultiHeadClassifier m(tiny_classifier());
  m.ensure_head(1);
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor({3, 1, 8, 8}, rng, 0, 1);
  const std::vector<int> y{0, 1, 0};
  std::map<int, std::vector<CompletedSample>> completed{{0, as_samples(x, y)}, {1, as_samples(x, y)}};
  const auto g = compute_gradients(m, x, y, 0, completed);
  CHECK(g.memory.empty());
  CHECK(g.g.values.size() == m.params().flat_size());
}

TEST_CASE("compute_gradients: memory gradient equals the batch gradient on the same data") {
  MultiHeadClassifier m(tiny_classifier());
  m.ensure_head(1);
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({4, 1, 8, 8}, rng, 0, 1);
  const std::vector<int> y{0, 1, 1, 0};
  std::map<int, std::vector<CompletedSample>> completed{{0, as_samples(x, y)}};
  const auto g = compute_gradients(m, x, y, 1, completed);
  REQUIRE(g.memory.size() == 1);
  CHECK(g.memory[0].task == 0);
  CHECK(g.memory[0].values == loss_gradient(m, x, y, 0).values);
  CHECK(g.memory_losses[0] == doctest::Approx(memory_loss(m, completed[0], 0)));
}

TEST_CASE("loss_gradient matches central differences") {
  MultiHeadClassifier m(tiny_classifier());
  m.ensure_head(0);
  std::mt19937_64 rng(6);
  const Tensor x = random_tensor({3, 1, 8, 8}, rng, 0, 1);
  const std::vector<int> y{1, 0, 1};
  const auto g = loss_gradient(m, x, y, 0).values;
  auto theta = m.params().flatten();
  std::uniform_int_distribution<std::size_t> pick(0, theta.size() - 1);
  const double eps = 1e-5;
  for (int probe = 0; probe < 5; ++probe) {
    const std::size_t j = pick(rng);
    auto at = [&](double v) {
      auto t = theta;
      t[j] = v;
      m.params().unflatten(t);
      double l = 0.0;
      loss_gradient(m, x, y, 0, &l);
      return l;
    };
    const double numeric = (at(theta[j] + eps) - at(theta[j] - eps)) / (2 * eps);
    m.params().unflatten(theta);
    CHECK(samc::testing::rel_err(g[j], numeric) < 1e-4);
  }
}

// ---- projection -------------------------------------------------------------------

TEST_CASE("project: no constraints returns g unchanged") {
  const auto r = project({{1.0, -2.0}, {}, 0.5});
  CHECK(r.v == std::vector<double>{1.0, -2.0});
  CHECK_FALSE(r.projected);
}

TEST_CASE("project: single violated constraint has the closed form") {
  std::mt19937_64 rng(7);
  for (double margin : {0.0, 0.5}) {
    for (int trial = 0; trial < 20; ++trial) {
      auto g = random_vec(7, rng), c = random_vec(7, rng);
      if (dot(g, c) >= 0)
        for (auto& e : c) e = -e;
      const double cn = norm2(c);
      const double coef = (margin * cn - dot(g, c)) / (cn * cn);
      const auto r = project({g, {c}, margin});
      REQUIRE(r.projected);
      for (std::size_t j = 0; j < g.size(); ++j) {
        const double want = g[j] + coef * c[j];
        CHECK(std::abs(r.v[j] - want) <= 1e-10 * std::max(1.0, std::abs(want)));
      }
    }
  }
}

TEST_CASE("project: matches the brute-force active-set oracle, feasible and idempotent") {
  std::mt19937_64 rng(8);
  for (double margin : {0.0, 0.5}) {
    for (int trial = 0; trial < 100; ++trial) {
      ProjectionProblem p{random_vec(6, rng), {}, margin};
      for (int k = 0; k < 3; ++k) p.constraints.push_back(random_vec(6, rng));
      const auto r = project(p);
      const auto want = brute_force_project(p.g, p.constraints, margin);
      REQUIRE(want);
      for (std::size_t j = 0; j < 6; ++j) CHECK(std::abs(r.v[j] - (*want)[j]) < 1e-7);
      for (const auto& c : p.constraints) CHECK(dot(r.v, c) >= margin * norm2(c) - 1e-8);
      ProjectionProblem again = p;
      again.g = r.v;
      const auto r2 = project(again);
      for (std::size_t j = 0; j < 6; ++j) CHECK(std::abs(r2.v[j] - r.v[j]) < 1e-9);
    }
  }
}

TEST_CASE("project: zero and near-zero constraint gradients do not stall the solver") {
  std::mt19937_64 rng(9);
  const std::size_t d = 50;
  auto g = random_vec(d, rng);
  auto big = random_vec(d, rng), tiny = random_vec(d, rng), small = random_vec(d, rng);
  for (auto& e : tiny) e *= 1e-15;
  for (auto& e : small) e *= 1e-3;
  if (dot(g, big) > 0)
    for (auto& e : big) e = -e;
  const ProjectionProblem p{g, {big, tiny, small, std::vector<double>(d, 0.0)}, 0.5};
  const auto r = project(p);
  CHECK(r.projected);
  CHECK(r.lambda[3] == 0.0);
  for (const auto& c : p.constraints) CHECK(dot(r.v, c) >= 0.5 * norm2(c) - 1e-8);
}

TEST_CASE("project: rejects a negative margin and mismatched lengths") {
  CHECK_THROWS_AS(project({{1.0}, {{1.0}}, -0.1}), std::invalid_argument);
  CHECK_THROWS_AS(project({{1.0, 2.0}, {{1.0}}, 0.0}), std::invalid_argument);
}

TEST_CASE("project: non-convergence reports the residual") {
  std::mt19937_64 rng(10);
  ProjectionProblem p{random_vec(6, rng), {}, 0.5};
  for (int k = 0; k < 3; ++k) p.constraints.push_back(random_vec(6, rng));
  for (auto& c : p.constraints)
    if (dot(p.g, c) > 0)
      for (auto& e : c) e = -e;
  try {
    project(p, 1e-300, 1);
    FAIL("expected ProjectionError");
  } catch (const ProjectionError& e) {
    CHECK(e.residual() > 0.0);
  }
}

// ---- training loop ------------------------------------------------------------------

TEST_CASE("names round-trip") {
  for (auto m : {Method::Finetune, Method::NaiveReplay, Method::GemFull, Method::Samc})
    CHECK(parse_method(method_name(m)) == m);
  CHECK_FALSE(parse_method("ewc"));
  CHECK(parse_budget_mode("slots") == BudgetMode::Slots);
  CHECK_FALSE(parse_budget_mode("pages"));
}

TEST_CASE("TrainState validates its configuration") {
  TrainerConfig bad;
  bad.mu = 1.5;
  CHECK_THROWS_AS(TrainState(tiny_classifier(), tiny_ae(), 2, bad), std::invalid_argument);
  CHECK_THROWS_AS(TrainState(tiny_classifier(), tiny_ae(), 0, TrainerConfig{}), std::invalid_argument);
  TrainState st(tiny_classifier(), tiny_ae(), 1, TrainerConfig{});
  auto s = tiny_stream(2);
  CHECK_THROWS_AS(train_task(st, s.tasks[1], {}), UnknownTaskError);
}

TEST_CASE("finetune on one task is plain minibatch SGD, bit for bit") {
  const auto s = tiny_stream(1);
  TrainerConfig cfg;
  cfg.method = Method::Finetune;
  cfg.epochs = 2;
  cfg.seed = 3;
  TrainState st(tiny_classifier(), tiny_ae(), 1, cfg);
  train_task(st, s.tasks[0], {});

  MultiHeadClassifier ref(tiny_classifier());
  ref.ensure_head(0);
  const auto& tr = s.tasks[0].train;
  std::vector<std::size_t> order(tr.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg.seed * 1000003ULL);
  ParamSet delta = ref.params().zeros_like();
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      std::vector<Tensor> xs;
      std::vector<int> ys;
      for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch_size); ++i) {
        xs.push_back(tr.images[order[i]]);
        ys.push_back(tr.labels[order[i]]);
      }
      delta.unflatten(loss_gradient(ref, stack(xs), ys, 0).values);
      sgd_step(ref.params(), delta, cfg.step_size);
    }
  }
  CHECK(st.model.params() == ref.params());
}

TEST_CASE("samc on a single task leaves the classifier where finetune does") {
  const auto s = tiny_stream(1);
  TrainerConfig cfg;
  cfg.method = Method::Finetune;
  TrainState ft(tiny_classifier(), tiny_ae(), 1, cfg);
  train_task(ft, s.tasks[0], {});
  cfg.method = Method::Samc;
  TrainState sc(tiny_classifier(), tiny_ae(), 1, cfg);
  const auto rep = train_task(sc, s.tasks[0], {});
  CHECK(sc.model.params() == ft.model.params());
  CHECK(sc.memory.samples(0).size() > 0);
  CHECK(rep.constrained_steps == 0);
  CHECK(rep.ae_losses.size() > 0);
}

TEST_CASE("with memory disabled, a two-task run reproduces finetune bit for bit") {
  const auto s = tiny_stream(2);
  TrainerConfig cfg;
  cfg.method = Method::Finetune;
  TrainState ft(tiny_classifier(), tiny_ae(), 2, cfg);
  cfg.method = Method::GemFull;
  cfg.slots = 0;
  TrainState gm(tiny_classifier(), tiny_ae(), 2, cfg);
  for (const auto& t : s.tasks) {
    train_task(ft, t, {});
    train_task(gm, t, {});
  }
  CHECK(gm.model.params() == ft.model.params());
}

TEST_CASE("obtuse angles trigger projection; otherwise g passes through") {
  const auto s = tiny_stream(2);
  TrainerConfig cfg;
  cfg.method = Method::Samc;
  cfg.margin = 0.1;
  cfg.epochs = 6;
  TrainState st(tiny_classifier(), tiny_ae(), 2, cfg);
  std::size_t projected = 0, passed = 0;
  double worst = 0.0;
  bool untouched = true;
  const StepObserver obs = [&](const StepView& v) {
    if (v.grads.memory.empty()) return;
    double min_inner = std::numeric_limits<double>::infinity();
    for (const auto& m : v.grads.memory) min_inner = std::min(min_inner, dot(v.grads.g.values, m.values));
    if (min_inner < 0.0) {
      ++projected;
      for (const auto& m : v.grads.memory)
        worst = std::min(worst, dot(v.update, m.values) - cfg.margin * norm2(m.values));
    } else {
      ++passed;
      untouched = untouched && v.update == v.grads.g.values;
    }
  };
  std::size_t steps = 0;
  for (const auto& t : s.tasks) steps += train_task(st, t, obs).steps.size();
  CHECK(projected > 0);
  CHECK(passed > 0);
  CHECK(worst >= -1e-8);
  CHECK(untouched);
  CHECK(st.step == steps);
}

TEST_CASE("naive replay adds the memory gradients to g") {
  const auto s = tiny_stream(2);
  TrainerConfig cfg;
  cfg.method = Method::NaiveReplay;
  TrainState st(tiny_classifier(), tiny_ae(), 2, cfg);
  double worst = 0.0;
  std::size_t seen = 0;
  const StepObserver obs = [&](const StepView& v) {
    if (v.grads.memory.empty()) return;
    ++seen;
    for (std::size_t j = 0; j < v.update.size(); ++j) {
      double want = v.grads.g.values[j];
      for (const auto& m : v.grads.memory) want += m.values[j];
      worst = std::max(worst, std::abs(v.update[j] - want));
    }
  };
  for (const auto& t : s.tasks) train_task(st, t, obs);
  CHECK(seen > 0);
  CHECK(worst == 0.0);
}

TEST_CASE("memory losses do not rise over a tiny step along satisfied constraints") {
  const auto s = tiny_stream(2);
  TrainerConfig cfg;
  cfg.method = Method::Samc;
  cfg.epochs = 3;
  TrainState st(tiny_classifier(), tiny_ae(), 2, cfg);
  Lemma1Report rep;
  const auto obs = lemma1_observer(rep);
  for (const auto& t : s.tasks) train_task(st, t, obs);
  CHECK(rep.steps == st.step);
  CHECK(rep.examined > 0);
  CHECK(rep.violations == 0);
  CHECK(rep.worst_increase <= 1e-6);
}

TEST_CASE("step log CSV") {
  std::vector<StepLog> log(2);
  log[0] = {0, 0, 0.5, std::nullopt, false, {}};
  log[1] = {1, 1, 0.25, -0.125, true, {0.5, 0.75}};
  std::ostringstream os;
  write_step_log_csv(os, log);
  CHECK(os.str() ==
        "step,task,batch_loss,min_inner,projected,memory_losses\n"
        "0,0,0.5,,0,\n"
        "1,1,0.25,-0.125,1,0.5;0.75\n");
}

TEST_CASE("identical configuration and seed give identical runs") {
  const auto s = tiny_stream(2);
  TrainerConfig cfg;
  cfg.method = Method::Samc;
  TrainState a(tiny_classifier(), tiny_ae(), 2, cfg), b(tiny_classifier(), tiny_ae(), 2, cfg);
  for (const auto& t : s.tasks) {
    train_task(a, t, {});
    train_task(b, t, {});
  }
  CHECK(a.model.params() == b.model.params());
  CHECK(a.ae.params() == b.ae.params());
}
