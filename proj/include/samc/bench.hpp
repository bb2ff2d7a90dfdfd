#pragma once

// Experiment harness: stream construction, evaluation, ACC/BWT, the flat
// key = value config, single runs over a seed list and grid sweeps.
//
// Output layout of run_experiment (under out_dir):
//   summary.json            see summary_json()
//   r_matrix_seed<S>.csv    R[i][j], accuracy on task j after training task i
//   steps_seed<S>.csv       per-step log (step_log = true)
//   memory_seed<S>.samm     the final episodic memory
//   images_seed<S>/         PGM/PPM dumps of stored and completed samples
//                           (dump_images = true)

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "samc/dataset.hpp"
#include "samc/models.hpp"
#include "samc/trainer.hpp"
#include "samc/verify.hpp"

namespace samc {

inline constexpr int kSummarySchemaVersion = 1;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- metrics --------------------------------------------------------------------

class ResultMatrix {
 public:
  explicit ResultMatrix(std::size_t tasks) : tasks_(tasks), r_(tasks * tasks, 0.0) {}
  std::size_t tasks() const { return tasks_; }
  double& at(std::size_t i, std::size_t j) { return r_.at(i * tasks_ + j); }
  double at(std::size_t i, std::size_t j) const { return r_.at(i * tasks_ + j); }
  void write_csv(std::ostream& out) const;

 private:
  std::size_t tasks_;
  std::vector<double> r_;
};

struct AccBwt {
  double acc = 0.0;
  double bwt = 0.0;
  bool bwt_defined = true;  // false for a single task; bwt is then 0
};

/// ACC = mean of the last row; BWT = mean over j < T-1 of R[T-1][j] - R[j][j].
AccBwt acc_bwt(const ResultMatrix& r);

double accuracy(const MultiHeadClassifier& model, const LabeledSet& set, int task);
/// Accuracy on every task's test set, through that task's head.
std::vector<double> evaluate(const MultiHeadClassifier& model, const TaskStream& stream);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample std (n - 1); 0 for n < 2
  std::size_t n = 0;
};
MeanStd mean_std(const std::vector<double>& xs);

// ---- configuration ------------------------------------------------------------------

struct ExperimentConfig {
  std::string method = "samc";
  std::string mode = "rule_plus_ae";
  double mu = 0.5;
  std::size_t slots = 10;
  std::string budget_mode = "bytes";
  double margin = 0.0;  // see README: positive margins dominate small gradients
  double lr = 0.05;
  std::size_t batch = 10;
  std::size_t epochs = 2;
  std::vector<std::uint64_t> seeds{1};
  double ae_lr = 0.5;
  std::size_t ae_steps = 50;
  std::vector<std::size_t> trunk{8, 16, 16};  // classifier filters per block

  std::string dataset = "synthetic";  // or "cifar"
  std::string cifar_train, cifar_test;
  std::size_t tasks = 5;
  std::size_t classes_per_task = 2;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 100;
  std::size_t resolution = 32;
  std::size_t channels = 1;
  double noise = 0.1;
  std::uint64_t data_seed = 1;

  std::string out_dir = "out";
  bool dump_images = false;
  bool step_log = false;

  // sweep axes; empty means "the single value above"
  std::vector<double> mu_list;
  std::vector<std::size_t> slots_list;
};

/// Key names, hyphenated; '_' is accepted in their place.
const std::vector<std::string>& config_keys();
/// Parses `value` into field `key`. Lists are comma separated.
void set_config_value(ExperimentConfig& cfg, std::string key, const std::string& value);
/// "key = value" per line, '#' starts a comment.
ExperimentConfig parse_config(std::string_view text, ExperimentConfig base = {});
ExperimentConfig load_config(const std::filesystem::path& path);
/// Rejects unknown methods/modes and out-of-range values before any compute.
void validate(const ExperimentConfig& cfg);
nlohmann::json config_json(const ExperimentConfig& cfg);

TrainerConfig trainer_config(const ExperimentConfig& cfg, std::uint64_t seed);
ClassifierConfig classifier_config(const ExperimentConfig& cfg, std::uint64_t seed);
AutoencoderConfig autoencoder_config(const ExperimentConfig& cfg, std::uint64_t seed);
TaskStream make_stream(const ExperimentConfig& cfg);

// ---- runs -----------------------------------------------------------------------------

struct SeedRun {
  std::uint64_t seed = 0;
  ResultMatrix r{0};
  AccBwt metrics;
  std::vector<std::size_t> memory_counts;  // stored samples per task at the end
  double kept_fraction = 0.0;              // mean over stored samples
  std::size_t constrained_steps = 0, fast_path_steps = 0;
  std::vector<StepLog> steps;
};

struct ExperimentResult {
  ExperimentConfig config;
  std::vector<SeedRun> runs;
};

/// One full pass over the stream for a single seed. `at_end`, if given, sees
/// the final state (memory and models), e.g. for dumping.
SeedRun run_seed(const ExperimentConfig& cfg, const TaskStream& stream, std::uint64_t seed,
                 const std::function<void(const TrainState&)>& at_end = {});

/// Runs every seed; writes reports to cfg.out_dir unless it is empty.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const TaskStream& stream);
ExperimentResult run_experiment(const ExperimentConfig& cfg);

/// schema_version, config, budget_mode, per-run records, ACC/BWT mean and
/// std, per-task memory counts (mean over seeds), mean kept fraction.
nlohmann::json summary_json(const ExperimentResult& result);

/// Trains cfg's stream (method forced to samc) with the small-step memory-loss
/// observer on every task after the first, then runs the sign-agreement probe
/// (past = first task, current = second) and the continuity diagnostic on the
/// final model. Returns the three reports plus a pass flag for each asserted
/// property.
nlohmann::json run_verify(const ExperimentConfig& cfg, std::size_t trials = 250);

/// Defaults for run_verify: two tasks, batch 2 and four epochs (enough steps
/// to examine), and the trainer's margin 0.5 so projected steps lie strictly
/// inside every constraint.
ExperimentConfig verify_defaults();

/// Grid over mu_list x slots_list, each point a run_experiment into
/// out_dir/mu<mu>_slots<slots>; writes out_dir/sweep.json.
nlohmann::json run_sweep(const ExperimentConfig& cfg);

}  // namespace samc
