#include "samc/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>

namespace samc {

// ---- projection -------------------------------------------------------------

namespace {

// Solves A x = b (A n x n, row-major) by Gaussian elimination with partial
// pivoting. Returns false if A is numerically singular.
bool solve_dense(std::vector<double> a, std::vector<double> b, std::vector<double>& x) {
  const std::size_t n = b.size();
  double scale = 0.0;
  for (double v : a) scale = std::max(scale, std::abs(v));
  if (scale == 0.0) return false;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r * n + c]) > std::abs(a[piv * n + c])) piv = r;
    if (std::abs(a[piv * n + c]) <= 1e-13 * scale) return false;
    if (piv != c) {
      for (std::size_t k = 0; k < n; ++k) std::swap(a[c * n + k], a[piv * n + k]);
      std::swap(b[c], b[piv]);
    }
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a[r * n + c] / a[c * n + c];
      for (std::size_t k = c; k < n; ++k) a[r * n + k] -= f * a[c * n + k];
      b[r] -= f * b[c];
    }
  }
  x.assign(n, 0.0);
  for (std::size_t r = n; r-- > 0;) {
    double s = b[r];
    for (std::size_t k = r + 1; k < n; ++k) s -= a[r * n + k] * x[k];
    x[r] = s / a[r * n + r];
  }
  return true;
}

struct Dual {
  std::size_t n;
  std::vector<double> k;  // Gram matrix
  std::vector<double> q;  // G'g - b

  // slack s = K lambda + q = G'v - b
  std::vector<double> slack(const std::vector<double>& lambda) const {
    std::vector<double> s(q);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) s[i] += k[i * n + j] * lambda[j];
    return s;
  }

  // max_k |min(lambda_k, s_k)|: zero exactly at a KKT point
  double residual(const std::vector<double>& lambda) const {
    const auto s = slack(lambda);
    double r = 0.0;
    for (std::size_t i = 0; i < n; ++i) r = std::max(r, std::abs(std::min(lambda[i], s[i])));
    return r;
  }

  // exact solve with the constraints in `active` held at equality
  bool polish(const std::vector<bool>& active, std::vector<double>& lambda) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; ++i)
      if (active[i]) idx.push_back(i);
    if (idx.empty()) return false;
    const std::size_t m = idx.size();
    std::vector<double> a(m * m), rhs(m), sol;
    for (std::size_t r = 0; r < m; ++r) {
      rhs[r] = -q[idx[r]];
      for (std::size_t c = 0; c < m; ++c) a[r * m + c] = k[idx[r] * n + idx[c]];
    }
    if (!solve_dense(a, rhs, sol)) return false;
    if (std::any_of(sol.begin(), sol.end(), [](double v) { return v < 0.0; })) return false;
    lambda.assign(n, 0.0);
    for (std::size_t r = 0; r < m; ++r) lambda[idx[r]] = sol[r];
    return true;
  }

  // Guesses the active set from an iterate (lambda > 0 or violated) and
  // solves it exactly; if that fails, tries its subsets, largest first.
  bool polish_near(const std::vector<double>& lambda, double tol, std::vector<double>& out) const {
    const auto s = slack(lambda);
    std::vector<std::size_t> guess;
    for (std::size_t i = 0; i < n; ++i)
      if (lambda[i] > 0.0 || s[i] < 0.0) guess.push_back(i);
    if (guess.empty() || guess.size() > 12) return false;
    const std::size_t full = (std::size_t{1} << guess.size()) - 1;
    std::vector<std::size_t> subsets;
    for (std::size_t mask = full; mask > 0; --mask) subsets.push_back(mask);
    std::stable_sort(subsets.begin(), subsets.end(), [](std::size_t a, std::size_t b) {
      return std::popcount(a) > std::popcount(b);
    });
    for (std::size_t mask : subsets) {
      std::vector<bool> active(n, false);
      for (std::size_t b = 0; b < guess.size(); ++b)
        if (mask >> b & 1U) active[guess[b]] = true;
      std::vector<double> cand;
      if (polish(active, cand) && residual(cand) < tol) {
        out = std::move(cand);
        return true;
      }
    }
    return false;
  }
};

}  // namespace

ProjectionResult project(const ProjectionProblem& p, double tol, std::size_t max_iters) {
  const std::size_t n = p.constraints.size(), d = p.g.size();
  if (p.margin < 0.0) throw std::invalid_argument("projection margin must be >= 0");
  for (const auto& c : p.constraints)
    if (c.size() != d)
      throw std::invalid_argument("projection: constraint of length " + std::to_string(c.size()) +
                                  ", gradient of length " + std::to_string(d));

  ProjectionResult res;
  res.lambda.assign(n, 0.0);
  // Rows are scaled to unit norm: <v, c/|c|> >= margin has the same feasible
  // set, and the dual gets a unit-diagonal Gram matrix. Zero rows always hold.
  std::vector<std::size_t> rows;
  std::vector<double> norms(n);
  bool feasible = true;
  for (std::size_t i = 0; i < n; ++i) {
    norms[i] = norm2(p.constraints[i]);
    if (norms[i] == 0.0) continue;
    rows.push_back(i);
    if (dot(p.g, p.constraints[i]) < p.margin * norms[i]) feasible = false;
  }
  if (feasible) {
    res.v = p.g;
    return res;
  }
  res.projected = true;

  const std::size_t m = rows.size();
  Dual dual{m, std::vector<double>(m * m), std::vector<double>(m)};
  for (std::size_t a = 0; a < m; ++a) {
    const auto& ca = p.constraints[rows[a]];
    dual.q[a] = dot(p.g, ca) / norms[rows[a]] - p.margin;
    for (std::size_t b = 0; b <= a; ++b)
      dual.k[a * m + b] = dual.k[b * m + a] =
          dot(ca, p.constraints[rows[b]]) / (norms[rows[a]] * norms[rows[b]]);
  }
  double lip = 0.0;
  for (std::size_t a = 0; a < m; ++a) {
    double row = 0.0;
    for (std::size_t b = 0; b < m; ++b) row += std::abs(dual.k[a * m + b]);
    lip = std::max(lip, row);
  }

  std::vector<double> lambda(m, 0.0);
  double r = dual.residual(lambda);
  std::size_t it = 0;
  while (it < max_iters && r >= tol) {
    const auto s = dual.slack(lambda);
    for (std::size_t a = 0; a < m; ++a) lambda[a] = std::max(0.0, lambda[a] - s[a] / lip);
    ++it;
    r = dual.residual(lambda);
    if (r >= tol && it % 10 == 1) {
      std::vector<double> cand;
      if (dual.polish_near(lambda, tol, cand)) {
        lambda = std::move(cand);
        r = dual.residual(lambda);
      }
    }
  }
  res.iterations = it;
  res.residual = r;
  if (r >= tol)
    throw ProjectionError("projection did not converge: KKT residual " + std::to_string(r) +
                              " after " + std::to_string(it) + " iterations",
                          r);
  res.v = p.g;
  for (std::size_t a = 0; a < m; ++a) {
    const std::size_t i = rows[a];
    res.lambda[i] = lambda[a] / norms[i];
    for (std::size_t j = 0; j < d; ++j) res.v[j] += res.lambda[i] * p.constraints[i][j];
  }
  return res;
}

// ---- losses and gradients -----------------------------------------------------

namespace {

void split(std::span<const CompletedSample> samples, Tensor& x, std::vector<int>& y) {
  std::vector<Tensor> xs;
  xs.reserve(samples.size());
  y.clear();
  for (const auto& s : samples) {
    xs.push_back(s.image);
    y.push_back(s.label);
  }
  x = stack(xs);
}

}  // namespace

double memory_loss(const MultiHeadClassifier& model, std::span<const CompletedSample> samples,
                   int task) {
  if (samples.empty()) throw std::invalid_argument("memory_loss: empty memory");
  Tensor x;
  std::vector<int> y;
  split(samples, x, y);
  return softmax_cross_entropy(model.classify(x, task).logits, y).value;
}

GradientVector loss_gradient(const MultiHeadClassifier& model, const Tensor& x,
                             std::span<const int> labels, int task, double* loss) {
  auto out = model.classify(x, task);
  const auto ce = softmax_cross_entropy(out.logits, labels);
  if (loss) *loss = ce.value;
  return {backward(out.tape, ce.grad).params.flatten(), task};
}

StepGradients compute_gradients(const MultiHeadClassifier& model, const Tensor& x,
                                std::span<const int> labels, int task,
                                const std::map<int, std::vector<CompletedSample>>& completed) {
  StepGradients out;
  out.g = loss_gradient(model, x, labels, task, &out.batch_loss);
  out.g.task = -1;
  for (const auto& [k, samples] : completed) {
    if (k >= task) break;
    if (samples.empty()) continue;
    Tensor mx;
    std::vector<int> my;
    split(samples, mx, my);
    double l = 0.0;
    out.memory.push_back(loss_gradient(model, mx, my, k, &l));
    out.memory_losses.push_back(l);
  }
  return out;
}

// ---- names --------------------------------------------------------------------

const char* method_name(Method m) {
  switch (m) {
    case Method::Finetune: return "finetune";
    case Method::NaiveReplay: return "naive_replay";
    case Method::GemFull: return "gem_full";
    case Method::Samc: return "samc";
  }
  return "?";
}

std::optional<Method> parse_method(const std::string& name) {
  for (auto m : {Method::Finetune, Method::NaiveReplay, Method::GemFull, Method::Samc})
    if (name == method_name(m)) return m;
  return std::nullopt;
}

const char* budget_mode_name(BudgetMode m) { return m == BudgetMode::Bytes ? "bytes" : "slots"; }

std::optional<BudgetMode> parse_budget_mode(const std::string& name) {
  if (name == "bytes") return BudgetMode::Bytes;
  if (name == "slots") return BudgetMode::Slots;
  return std::nullopt;
}

void write_step_log_csv(std::ostream& out, std::span<const StepLog> log) {
  out << "step,task,batch_loss,min_inner,projected,memory_losses\n" << std::setprecision(10);
  for (const auto& s : log) {
    out << s.step << ',' << s.task << ',' << s.batch_loss << ',';
    if (s.min_inner) out << *s.min_inner;
    out << ',' << (s.projected ? 1 : 0) << ',';
    for (std::size_t i = 0; i < s.memory_losses.size(); ++i)
      out << (i ? ";" : "") << s.memory_losses[i];
    out << '\n';
  }
}

// ---- training loop --------------------------------------------------------------

namespace {

EpisodicMemory make_memory(const TrainerConfig& cfg, const ImageShape& shape) {
  if (cfg.budget_mode == BudgetMode::Slots)
    return EpisodicMemory(std::numeric_limits<std::size_t>::max(), std::max<std::size_t>(cfg.slots, 1));
  return EpisodicMemory(cfg.slots * dense_sample_bytes(shape));
}

}  // namespace

TrainState::TrainState(const ClassifierConfig& classifier, const AutoencoderConfig& autoencoder,
                       std::size_t num_tasks, TrainerConfig cfg)
    : model(classifier),
      ae(autoencoder),
      memory(make_memory(cfg, classifier.input)),
      config(std::move(cfg)) {
  if (num_tasks == 0) throw std::invalid_argument("need at least one task");
  if (!(autoencoder.image == classifier.input))
    throw std::invalid_argument("classifier and autoencoder resolutions differ");
  if (!(config.mu >= 0.0 && config.mu <= 1.0)) throw std::invalid_argument("mu must lie in [0,1]");
  if (!(config.step_size > 0.0)) throw std::invalid_argument("step size must be positive");
  if (config.batch_size == 0) throw std::invalid_argument("batch size must be positive");
  // all heads up front, so the flattened parameter vector has a fixed length
  model.ensure_head(static_cast<int>(num_tasks) - 1);
}

std::vector<Extraction> saliency_masks(const MultiHeadClassifier& model, const Tensor& x,
                                       std::span<const int> labels, int task, double mu) {
  const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
  std::vector<Extraction> out;
  out.reserve(n);
  if (mu == 0.0) {
    for (std::size_t i = 0; i < n; ++i) out.push_back({PixelMask(h, w, true), 1.0});
    return out;
  }
  const auto maps = grad_cam(model, x, labels, task);
  for (std::size_t i = 0; i < n; ++i) out.push_back(extract(unstack_one(x, i), maps[i], mu));
  return out;
}

namespace {

void store_batch(TrainState& st, const Tensor& x, std::span<const Tensor> images,
                 std::span<const int> labels, int task) {
  const auto& cfg = st.config;
  if (cfg.method == Method::Finetune || cfg.slots == 0) return;
  const double mu = cfg.method == Method::Samc ? cfg.mu : 0.0;
  const auto ext = saliency_masks(st.model, x, labels, task, mu);
  for (std::size_t i = 0; i < images.size(); ++i) {
    st.memory.push(coo_encode(images[i], ext[i].mask, labels[i], task));
    st.kept_fraction_sum += ext[i].kept_fraction;
    ++st.kept_fraction_count;
  }
}

}  // namespace

TaskReport train_task(TrainState& st, const TaskData& task, const StepObserver& observer) {
  const auto& cfg = st.config;
  const int t = task.id;
  const std::size_t n = task.train.size();
  if (n == 0 || task.train.labels.size() != n)
    throw std::invalid_argument("task " + std::to_string(t) + ": empty or unlabelled training set");
  if (!st.model.has_head(t)) throw UnknownTaskError(t);
  st.current_task = t;
  TaskReport report;

  // memory completion, once per task, with the autoencoder as of task start
  st.completed.clear();
  if (cfg.method != Method::Finetune) {
    CompletionConfig cc = cfg.completion;
    if (cfg.method != Method::Samc) cc.mode = CompletionMode::RuleOnly;  // dense: identity
    for (int k : st.memory.tasks())
      if (k < t) st.completed[k] = complete(st.memory, st.ae, cc, k);
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg.seed * 1000003ULL + static_cast<std::uint64_t>(t));
  ParamSet delta = st.model.params().zeros_like();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      std::vector<Tensor> images;
      std::vector<int> labels;
      for (std::size_t i = start; i < end; ++i) {
        images.push_back(task.train.images[order[i]]);
        labels.push_back(task.train.labels[order[i]]);
      }
      const Tensor x = stack(images);
      const auto grads = compute_gradients(st.model, x, labels, t, st.completed);

      StepLog log;
      log.step = st.step;
      log.task = t;
      log.batch_loss = grads.batch_loss;
      log.memory_losses = grads.memory_losses;
      for (const auto& m : grads.memory) {
        const double ip = dot(grads.g.values, m.values);
        log.min_inner = log.min_inner ? std::min(*log.min_inner, ip) : ip;
      }

      std::vector<double> update = grads.g.values;
      if (cfg.method == Method::NaiveReplay) {
        for (const auto& m : grads.memory)
          for (std::size_t j = 0; j < update.size(); ++j) update[j] += m.values[j];
      } else if ((cfg.method == Method::GemFull || cfg.method == Method::Samc) && !grads.memory.empty()) {
        ++report.constrained_steps;
        // projection only when some angle exceeds 90 degrees; the margin then
        // shapes the projected update
        if (*log.min_inner < 0.0) {
          ProjectionProblem prob{grads.g.values, {}, cfg.margin};
          for (const auto& m : grads.memory) prob.constraints.push_back(m.values);
          auto res = project(prob, cfg.projection_tol, cfg.projection_max_iters);
          log.projected = res.projected;
          update = std::move(res.v);
        }
        if (!log.projected) ++report.fast_path_steps;
      }
      if (observer) observer(StepView{st, t, x, labels, grads, update});

      delta.unflatten(update);
      sgd_step(st.model.params(), delta, cfg.step_size);
      // saliency uses the just-updated parameters
      store_batch(st, x, images, labels, t);
      ++st.step;
      report.steps.push_back(std::move(log));
    }
  }

  if (cfg.method == Method::Samc && uses_autoencoder(cfg.completion.mode)) {
    const double mu = cfg.mu;
    const MaskFn mask_fn = [&](const Tensor& batch, std::span<const int> labels) {
      std::vector<PixelMask> masks;
      for (auto& e : saliency_masks(st.model, batch, labels, t, mu)) masks.push_back(std::move(e.mask));
      return masks;
    };
    report.ae_losses = finetune_ae(st.ae, task.train.images, task.train.labels, mask_fn, cfg.completion,
                                   cfg.seed * 7919ULL + static_cast<std::uint64_t>(t));
  }
  return report;
}

}  // namespace samc
