#include "samc/verify.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace samc {

namespace {

double memory_loss_with(const MultiHeadClassifier& model, const ParamSet& params,
                        const std::vector<CompletedSample>& samples, int task) {
  std::vector<Tensor> xs;
  std::vector<int> ys;
  for (const auto& s : samples) {
    xs.push_back(s.image);
    ys.push_back(s.label);
  }
  return softmax_cross_entropy(model.classify(stack(xs), task, params).logits, ys).value;
}

// k distinct indices out of [0, n)
std::vector<std::size_t> pick(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, n);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> u(i, n - 1);
    std::swap(idx[i], idx[u(rng)]);
  }
  idx.resize(k);
  return idx;
}

void gather(const LabeledSet& set, const std::vector<std::size_t>& idx, Tensor& x, std::vector<int>& y) {
  std::vector<Tensor> xs;
  y.clear();
  for (auto i : idx) {
    xs.push_back(set.images[i]);
    y.push_back(set.labels[i]);
  }
  x = stack(xs);
}

int sign(double v) { return (v > 0) - (v < 0); }

// adds scale * dir on the pixels (all channels) each image's mask drops
Tensor perturb_dropped(const Tensor& x, const Tensor& dir, const std::vector<Extraction>& ext, double scale) {
  Tensor out = x;
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p)
        if (!ext[i].mask.get(p)) {
          const std::size_t at = (i * c + ch) * hw + p;
          out[at] += scale * dir[at];
        }
  return out;
}

}  // namespace

StepObserver lemma1_observer(Lemma1Report& report, double probe_step, double min_cos, double tol) {
  return [&report, probe_step, min_cos, tol](const StepView& view) {
    ++report.steps;
    const auto& gr = view.grads;
    if (gr.memory.empty()) return;
    const double un = norm2(view.update);
    if (un == 0.0) return;
    for (const auto& m : gr.memory)
      if (dot(view.update, m.values) < min_cos * un * norm2(m.values)) return;
    ++report.examined;

    const auto& model = view.state.model;
    ParamSet probe = model.params();
    ParamSet delta = probe.zeros_like();
    delta.unflatten(view.update);
    sgd_step(probe, delta, probe_step);
    bool violated = false;
    for (const auto& m : gr.memory) {
      const auto& samples = view.state.completed.at(m.task);
      const double before = memory_loss_with(model, model.params(), samples, m.task);
      const double after = memory_loss_with(model, probe, samples, m.task);
      report.worst_increase = std::max(report.worst_increase, after - before);
      violated = violated || after > before + tol;
    }
    if (violated) ++report.violations;
  };
}

std::vector<Theorem1Level> theorem1_probe(const MultiHeadClassifier& model, const TaskData& past,
                                          const TaskData& current, const Theorem1Config& cfg) {
  std::vector<Theorem1Level> levels;
  for (double s : cfg.sigmas) levels.push_back({s, 0, 0});
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (std::size_t trial = 0; trial < cfg.trials; ++trial) {
    Tensor xb, xm;
    std::vector<int> yb, ym;
    gather(current.train, pick(current.train.size(), cfg.batch, rng), xb, yb);
    gather(past.train, pick(past.train.size(), cfg.memory, rng), xm, ym);
    const auto g = loss_gradient(model, xb, yb, current.id).values;
    const auto truth = sign(dot(g, loss_gradient(model, xm, ym, past.id).values));
    const auto ext = saliency_masks(model, xm, ym, past.id, cfg.mu);
    Tensor eps(xm.shape());
    for (auto& v : eps.vec()) v = unit(rng);
    for (auto& level : levels) {
      const Tensor xt = perturb_dropped(xm, eps, ext, level.sigma);
      const double ip = dot(g, loss_gradient(model, xt, ym, past.id).values);
      if (std::abs(ip) <= cfg.min_inner) continue;
      ++level.counted;
      if (sign(ip) == truth) ++level.agree;
    }
  }
  return levels;
}

Lemma2Report lemma2_diagnostic(const MultiHeadClassifier& model, const TaskData& task,
                               const Lemma2Config& cfg) {
  const auto& set = task.test.size() ? task.test : task.train;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> which(0, set.size() - 1);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);

  std::vector<std::size_t> idx(cfg.trials);
  for (auto& i : idx) i = which(rng);
  Tensor x;
  std::vector<int> y;
  gather(set, idx, x, y);
  const auto ext = saliency_masks(model, x, y, task.id, cfg.mu);

  // one direction per trial, max |dir| = 1 over the dropped pixels
  Tensor dir(x.shape());
  for (auto& v : dir.vec()) v = unit(rng);
  const std::size_t c = x.dim(1), hw = x.dim(2) * x.dim(3);
  for (std::size_t i = 0; i < cfg.trials; ++i) {
    double peak = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p)
        if (!ext[i].mask.get(p)) peak = std::max(peak, std::abs(dir[(i * c + ch) * hw + p]));
    if (peak > 0.0)
      for (std::size_t k = 0; k < c * hw; ++k) dir[i * c * hw + k] /= peak;
  }

  const Tensor f0 = model.classify(x, task.id).logits;
  const Tensor fs = model.classify(perturb_dropped(x, dir, ext, cfg.small_dx), task.id).logits;
  const Tensor fl = model.classify(perturb_dropped(x, dir, ext, cfg.large_dx), task.id).logits;
  const std::size_t k = f0.dim(1);
  const double d = static_cast<double>(c * hw);

  Lemma2Report rep;
  rep.trials = cfg.trials;
  rep.bound_inv_sq_small = cfg.mu * cfg.small_dx / (d * d);
  rep.bound_inv_sq_large = cfg.mu * cfg.large_dx / (d * d);
  rep.bound_sqrt_small = cfg.mu * cfg.small_dx * std::sqrt(d);
  rep.bound_sqrt_large = cfg.mu * cfg.large_dx * std::sqrt(d);
  std::size_t inv_sq = 0, sq = 0;
  for (std::size_t i = 0; i < cfg.trials; ++i) {
    const std::size_t at = i * k + static_cast<std::size_t>(y[i]);
    const double es = std::abs(f0[at] - fs[at]), el = std::abs(f0[at] - fl[at]);
    rep.mean_err_small += es / static_cast<double>(cfg.trials);
    rep.mean_err_large += el / static_cast<double>(cfg.trials);
    if (es < el) ++rep.ordered;
    if (el <= rep.bound_inv_sq_large) ++inv_sq;
    if (el <= rep.bound_sqrt_large) ++sq;
  }
  rep.inv_sq_holds = static_cast<double>(inv_sq) / static_cast<double>(cfg.trials);
  rep.sqrt_holds = static_cast<double>(sq) / static_cast<double>(cfg.trials);
  return rep;
}

}  // namespace samc
