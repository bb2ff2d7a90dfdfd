#pragma once

// Empirical probes of the method's theory: the small-step non-increase of
// memory losses under satisfied constraints, sign agreement between memory
// gradients on completed and true images, and continuity of the class score
// under perturbation of dropped pixels.

#include <cstdint>
#include <vector>

#include "samc/dataset.hpp"
#include "samc/models.hpp"
#include "samc/trainer.hpp"

namespace samc {

// ---- small-step memory-loss check ---------------------------------------------

struct Lemma1Report {
  std::size_t steps = 0;       // steps observed
  std::size_t examined = 0;    // steps whose constraints all held (normalized)
  std::size_t violations = 0;  // examined steps with an increase above tol
  double worst_increase = 0.0; // max over examined steps and tasks
};

/// Observer for train_task. At steps where the update u (g, or its
/// projection) has <u, g~_k> >= min_cos * |u| |g~_k| for every memory
/// gradient, steps a copy of the parameters by probe_step along u and
/// re-evaluates each completed memory loss.
StepObserver lemma1_observer(Lemma1Report& report, double probe_step = 1e-4, double min_cos = 1e-3,
                             double tol = 1e-6);

// ---- sign agreement of completed vs true memory gradients ---------------------

struct Theorem1Config {
  std::vector<double> sigmas{0.5, 0.2, 0.1, 0.05, 0.01, 0.0};
  std::size_t trials = 200;
  std::size_t batch = 10;   // current-task batch behind g
  std::size_t memory = 10;  // past-task samples behind g_k
  double mu = 0.5;          // saliency threshold choosing the dropped pixels
  double min_inner = 1e-8;  // trials with |<g, g~_k>| below this are not counted
  std::uint64_t seed = 1;
};

struct Theorem1Level {
  double sigma = 0.0;
  std::size_t counted = 0;
  std::size_t agree = 0;
  double rate() const { return counted ? static_cast<double>(agree) / static_cast<double>(counted) : 1.0; }
};

/// x~ = x + sigma * eps on the dropped pixels only, eps uniform in [-1, 1] and
/// shared across sigma levels within a trial (common random numbers).
std::vector<Theorem1Level> theorem1_probe(const MultiHeadClassifier& model, const TaskData& past,
                                          const TaskData& current, const Theorem1Config& cfg);

// ---- class-score continuity ---------------------------------------------------

struct Lemma2Config {
  std::size_t trials = 200;
  double small_dx = 1e-3;
  double large_dx = 0.3;
  double mu = 0.5;
  std::uint64_t seed = 1;
};

struct Lemma2Report {
  std::size_t trials = 0;
  std::size_t ordered = 0;  // trials with err(small) < err(large)
  double mean_err_small = 0.0, mean_err_large = 0.0;
  // the two candidate bounds mu * dx * d^-2 and mu * dx * sqrt(d), d = C*H*W
  double bound_inv_sq_small = 0.0, bound_inv_sq_large = 0.0;
  double bound_sqrt_small = 0.0, bound_sqrt_large = 0.0;
  // fraction of trials where each bound held at the large dx
  double inv_sq_holds = 0.0, sqrt_holds = 0.0;
  double ordered_fraction() const {
    return trials ? static_cast<double>(ordered) / static_cast<double>(trials) : 0.0;
  }
};

/// err = |f_c(x) - f_c(x~)| for the true-class logit, with x~ differing from x
/// only on pixels the saliency mask drops, by a fixed direction scaled so that
/// max |x - x~| equals dx. Each trial uses the same image and direction at
/// both dx values.
Lemma2Report lemma2_diagnostic(const MultiHeadClassifier& model, const TaskData& task,
                               const Lemma2Config& cfg);

}  // namespace samc
