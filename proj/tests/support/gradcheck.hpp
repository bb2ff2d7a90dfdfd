#pragma once

// Central finite-difference oracle for graph gradients. Independent of the
// backward pass: it only ever calls forward().

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "samc/graph.hpp"

namespace samc::testing {

struct GradCheckReport {
  std::size_t checked = 0;
  double worst_rel = 0.0;
  std::string worst_where;
  bool ok(double tol) const { return worst_rel <= tol; }
};

inline double rel_err(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

inline void record(GradCheckReport& rep, double a, double n, const std::string& where) {
  ++rep.checked;
  const double e = rel_err(a, n);
  if (e > rep.worst_rel) {
    rep.worst_rel = e;
    rep.worst_where = where + " analytic=" + std::to_string(a) + " numeric=" + std::to_string(n);
  }
}

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (auto& v : t.vec()) v = u(rng);
  return t;
}

/// Checks d(sum_i r_i * y_i)/d{params, input, taps} against central differences.
/// Taps are checked through `suffix`, a graph whose input is the tapped node
/// and which reproduces the rest of the computation (may be null).
inline GradCheckReport check_graph(const ComputeGraph& graph, const ParamSet& params,
                                   const ParamSet* buffers, const Tensor& input, Mode mode,
                                   std::uint64_t seed, double eps = 1e-5) {
  std::mt19937_64 rng(seed);
  ParamSet bufs = buffers ? *buffers : ParamSet{};
  ParamSet* bp = buffers ? &bufs : nullptr;

  auto fwd = forward(graph, params, input, mode, bp);
  const Tensor r = random_tensor(fwd.output.shape(), rng);
  const auto grads = backward(fwd.tape, r);

  auto loss = [&](const ParamSet& p, const Tensor& x) {
    ParamSet b = buffers ? *buffers : ParamSet{};
    auto out = forward(graph, p, x, mode, buffers ? &b : nullptr).output;
    return dot(out.data(), r.data());
  };

  GradCheckReport rep;
  ParamSet probe = params;
  for (std::size_t i = 0; i < probe.count(); ++i) {
    auto& t = probe.at(i);
    for (std::size_t k = 0; k < t.size(); ++k) {
      const double orig = t[k];
      t[k] = orig + eps;
      const double up = loss(probe, input);
      t[k] = orig - eps;
      const double dn = loss(probe, input);
      t[k] = orig;
      record(rep, grads.params.at(i)[k], (up - dn) / (2 * eps),
             probe.name(i) + "[" + std::to_string(k) + "]");
    }
  }
  Tensor x = input;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double orig = x[k];
    x[k] = orig + eps;
    const double up = loss(params, x);
    x[k] = orig - eps;
    const double dn = loss(params, x);
    x[k] = orig;
    record(rep, grads.input[k], (up - dn) / (2 * eps), "input[" + std::to_string(k) + "]");
  }
  return rep;
}

/// Finite-difference check of a scalar loss with respect to its prediction.
inline GradCheckReport check_loss(const std::function<LossResult(const Tensor&)>& loss,
                                  const Tensor& prediction, double eps = 1e-5) {
  GradCheckReport rep;
  const auto base = loss(prediction);
  Tensor p = prediction;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double orig = p[k];
    p[k] = orig + eps;
    const double up = loss(p).value;
    p[k] = orig - eps;
    const double dn = loss(p).value;
    p[k] = orig;
    record(rep, base.grad[k], (up - dn) / (2 * eps), "pred[" + std::to_string(k) + "]");
  }
  return rep;
}

/// One random single-op instance per call, for the per-op gradient sweep.
struct OpInstance {
  std::string name;
  ComputeGraph graph;
  ParamSet params;
  ParamSet buffers;
  Tensor input;
  Mode mode = Mode::Eval;
};

inline std::vector<std::string> op_instance_kinds() {
  return {"conv2d",    "conv_transpose2d", "max_pool2d", "global_avg_pool",
          "relu",      "leaky_relu",       "batch_norm2d_train", "batch_norm2d_eval",
          "linear",    "bilinear_upsample", "clamp", "add"};
}

inline OpInstance make_op_instance(const std::string& kind, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> small(1, 3), side(3, 6), batch(1, 3);
  const std::size_t n = batch(rng), c = small(rng), h = side(rng), w = side(rng);
  OpInstance inst{kind, ComputeGraph({c, h, w}), {}, {}, random_tensor({n, c, h, w}, rng), Mode::Eval};
  auto& g = inst.graph;
  if (kind == "conv2d") {
    std::uniform_int_distribution<std::size_t> k(1, 3), s(1, 2), p(0, 1);
    g.conv2d(0, "conv", small(rng), k(rng), s(rng), p(rng));
  } else if (kind == "conv_transpose2d") {
    std::uniform_int_distribution<std::size_t> k(2, 3), s(1, 2), p(0, 1);
    const std::size_t st = s(rng);
    std::uniform_int_distribution<std::size_t> op(0, st - 1);
    g.conv_transpose2d(0, "deconv", small(rng), k(rng), st, p(rng), op(rng));
  } else if (kind == "max_pool2d") {
    g.max_pool2d(0, 2, 2);
  } else if (kind == "global_avg_pool") {
    g.global_avg_pool(0);
  } else if (kind == "relu") {
    g.relu(0);
  } else if (kind == "leaky_relu") {
    g.leaky_relu(0, 0.1);
  } else if (kind == "batch_norm2d_train" || kind == "batch_norm2d_eval") {
    inst.input = random_tensor({n + 1, c, h, w}, rng);
    g.batch_norm2d(0, "bn");
    inst.mode = kind == "batch_norm2d_train" ? Mode::Train : Mode::Eval;
  } else if (kind == "linear") {
    g.linear(0, "fc", small(rng) + 1);
  } else if (kind == "bilinear_upsample") {
    g.bilinear_upsample(0, h + side(rng), w + small(rng));
  } else if (kind == "add") {
    auto a = g.conv2d(0, "conv", c, 3, 1, 1);
    g.add(a, 0);
  } else if (kind == "clamp") {
    inst.input = random_tensor({n, c, h, w}, rng, -0.5, 1.5);
    g.clamp(0, 0.0, 1.0);
  }
  init_params(g, inst.params, &inst.buffers, rng());
  // randomize biases, BN affine terms and running stats so no term is trivially zero
  for (std::size_t i = 0; i < inst.params.count(); ++i)
    if (inst.params.at(i).rank() == 1)
      inst.params.at(i) = random_tensor(inst.params.at(i).shape(), rng, 0.5, 1.5);
  for (std::size_t i = 0; i < inst.buffers.count(); ++i)
    inst.buffers.at(i) = random_tensor(inst.buffers.at(i).shape(), rng, 0.2, 1.0);
  return inst;
}

}  // namespace samc::testing
