#pragma once

// The continual-learning loop. Per task: complete the stored memories of all
// earlier tasks, then for each mini-batch compute the batch gradient g and one
// memory gradient per earlier task, project g so that it does not increase
// any memory loss, take an SGD step, and store saliency-masked copies of the
// batch. After the batch loop the inpainting autoencoder is finetuned for a
// few steps on the task's data.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "samc/dataset.hpp"
#include "samc/inpaint.hpp"
#include "samc/memory.hpp"
#include "samc/models.hpp"
#include "samc/saliency.hpp"

namespace samc {

struct GradientVector {
  std::vector<double> values;
  int task = -1;  // memory task, or -1 for the current batch
};

// ---- projection -----------------------------------------------------------

struct ProjectionProblem {
  std::vector<double> g;
  std::vector<std::vector<double>> constraints;  // memory gradients
  double margin = 0.0;                           // gamma
};

struct ProjectionResult {
  std::vector<double> v;
  std::vector<double> lambda;  // dual variables, one per constraint
  bool projected = false;      // false: g already feasible, returned as is
  std::size_t iterations = 0;
  double residual = 0.0;       // KKT residual at exit
};

class ProjectionError : public std::runtime_error {
 public:
  ProjectionError(const std::string& what, double residual)
      : std::runtime_error(what), residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

/// Closest v to g (in l2) with <v, c_k> >= margin * |c_k| for every
/// constraint c_k. Feasible g is returned unchanged. Otherwise the dual
///   max_{lambda >= 0}  -1/2 l'Kl - l'(G'g - b),   K = G'G,  v = g + G l
/// is solved by projected gradient ascent with step 1/L (L = max row sum of
/// |K|), with an exact active-set solve attempted every few iterations.
ProjectionResult project(const ProjectionProblem& p, double tol = 1e-9,
                         std::size_t max_iters = 10000);

// ---- losses and gradients ---------------------------------------------------

/// Mean cross-entropy of head `task` over completed memory samples.
double memory_loss(const MultiHeadClassifier& model, std::span<const CompletedSample> samples,
                   int task);

struct StepGradients {
  GradientVector g;
  std::vector<GradientVector> memory;  // one per earlier task, ascending task id
  double batch_loss = 0.0;
  std::vector<double> memory_losses;
};

/// g from the batch through head `task`; one memory gradient per entry of
/// `completed` with key < task. All are flattened over the full parameter set.
StepGradients compute_gradients(const MultiHeadClassifier& model, const Tensor& x,
                                std::span<const int> labels, int task,
                                const std::map<int, std::vector<CompletedSample>>& completed);

/// Flattened gradient of the mean cross-entropy of (x, labels) on head `task`.
GradientVector loss_gradient(const MultiHeadClassifier& model, const Tensor& x,
                             std::span<const int> labels, int task, double* loss = nullptr);

// ---- training loop ----------------------------------------------------------

enum class Method { Finetune, NaiveReplay, GemFull, Samc };
enum class BudgetMode { Bytes, Slots };

const char* method_name(Method m);
std::optional<Method> parse_method(const std::string& name);
const char* budget_mode_name(BudgetMode m);
std::optional<BudgetMode> parse_budget_mode(const std::string& name);

struct TrainerConfig {
  Method method = Method::Samc;
  CompletionConfig completion;
  double mu = 0.5;  // saliency threshold; 0 stores dense images
  std::size_t slots = 10;
  BudgetMode budget_mode = BudgetMode::Bytes;
  double step_size = 0.05;  // alpha
  double margin = 0.5;      // gamma
  std::size_t batch_size = 10;
  std::size_t epochs = 1;
  std::uint64_t seed = 1;
  double projection_tol = 1e-9;
  std::size_t projection_max_iters = 10000;
};

struct StepLog {
  std::size_t step = 0;
  int task = 0;
  double batch_loss = 0.0;
  std::optional<double> min_inner;  // min_k <g, g~_k>, absent without constraints
  bool projected = false;
  std::vector<double> memory_losses;  // ascending task id
};

void write_step_log_csv(std::ostream& out, std::span<const StepLog> log);

class TrainState {
 public:
  TrainState(const ClassifierConfig& classifier, const AutoencoderConfig& autoencoder,
             std::size_t num_tasks, TrainerConfig config);

  MultiHeadClassifier model;
  InpaintAutoencoder ae;
  EpisodicMemory memory;
  std::map<int, std::vector<CompletedSample>> completed;  // refreshed at task start
  TrainerConfig config;
  int current_task = -1;
  std::size_t step = 0;
  double kept_fraction_sum = 0.0;
  std::size_t kept_fraction_count = 0;
};

/// Everything the loop knows just before the parameter update.
struct StepView {
  const TrainState& state;
  int task;
  const Tensor& x;
  std::span<const int> labels;
  const StepGradients& grads;
  const std::vector<double>& update;  // the direction actually stepped along
};

using StepObserver = std::function<void(const StepView&)>;

struct TaskReport {
  std::vector<StepLog> steps;
  std::vector<double> ae_losses;
  std::size_t fast_path_steps = 0;    // constrained steps where g was feasible
  std::size_t constrained_steps = 0;
};

TaskReport train_task(TrainState& state, const TaskData& task, const StepObserver& observer = {});

/// Saliency masks for a batch under threshold mu (dense when mu == 0).
std::vector<Extraction> saliency_masks(const MultiHeadClassifier& model, const Tensor& x,
                                       std::span<const int> labels, int task, double mu);

}  // namespace samc
