#include "samc/bench.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "samc/data.hpp"
#include "samc/image.hpp"

namespace samc {

// ---- metrics --------------------------------------------------------------------

void ResultMatrix::write_csv(std::ostream& out) const {
  out << "after_task";
  for (std::size_t j = 0; j < tasks_; ++j) out << ",task" << j;
  out << '\n' << std::setprecision(10);
  for (std::size_t i = 0; i < tasks_; ++i) {
    out << i;
    for (std::size_t j = 0; j < tasks_; ++j) out << ',' << at(i, j);
    out << '\n';
  }
}

AccBwt acc_bwt(const ResultMatrix& r) {
  const std::size_t t = r.tasks();
  if (t == 0) throw std::invalid_argument("acc_bwt: empty result matrix");
  AccBwt out;
  for (std::size_t j = 0; j < t; ++j) out.acc += r.at(t - 1, j);
  out.acc /= static_cast<double>(t);
  if (t == 1) {
    out.bwt_defined = false;
    return out;
  }
  for (std::size_t j = 0; j + 1 < t; ++j) out.bwt += r.at(t - 1, j) - r.at(j, j);
  out.bwt /= static_cast<double>(t - 1);
  return out;
}

double accuracy(const MultiHeadClassifier& model, const LabeledSet& set, int task) {
  if (set.size() == 0) throw std::invalid_argument("accuracy: empty set");
  constexpr std::size_t kChunk = 100;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < set.size(); start += kChunk) {
    const std::size_t end = std::min(set.size(), start + kChunk);
    const Tensor logits =
        model.classify(stack(std::span(set.images).subspan(start, end - start)), task).logits;
    const std::size_t k = logits.dim(1);
    for (std::size_t i = start; i < end; ++i) {
      const double* row = logits.vec().data() + (i - start) * k;
      const auto best = static_cast<int>(std::max_element(row, row + k) - row);
      if (best == set.labels[i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

std::vector<double> evaluate(const MultiHeadClassifier& model, const TaskStream& stream) {
  std::vector<double> out;
  for (const auto& t : stream.tasks) out.push_back(accuracy(model, t.test, t.id));
  return out;
}

MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd m;
  m.n = xs.size();
  if (xs.empty()) return m;
  for (double x : xs) m.mean += x;
  m.mean /= static_cast<double>(xs.size());
  if (xs.size() < 2) return m;
  double ss = 0.0;
  for (double x : xs) ss += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  return m;
}

// ---- configuration ------------------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string canonical_key(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end || v.empty())
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_number<T>(key, item));
  }
  return out;
}

struct KeyDef {
  std::function<void(ExperimentConfig&, const std::string&, const std::string&)> set;
  std::function<nlohmann::json(const ExperimentConfig&)> get;
};

#define SAMC_KEY(name, field, parse)                                                      \
  {                                                                                       \
    name, KeyDef {                                                                        \
      [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.field = parse; }, \
          [](const ExperimentConfig& c) { return nlohmann::json(c.field); }               \
    }                                                                                     \
  }

const std::vector<std::pair<std::string, KeyDef>>& key_table() {
  using u64 = std::uint64_t;
  using sz = std::size_t;
  static const std::vector<std::pair<std::string, KeyDef>> table = {
      SAMC_KEY("method", method, (static_cast<void>(k), v)),
      SAMC_KEY("mode", mode, (static_cast<void>(k), v)),
      SAMC_KEY("mu", mu, parse_number<double>(k, v)),
      SAMC_KEY("slots", slots, parse_number<sz>(k, v)),
      SAMC_KEY("budget-mode", budget_mode, (static_cast<void>(k), v)),
      SAMC_KEY("margin", margin, parse_number<double>(k, v)),
      SAMC_KEY("lr", lr, parse_number<double>(k, v)),
      SAMC_KEY("batch", batch, parse_number<sz>(k, v)),
      SAMC_KEY("epochs", epochs, parse_number<sz>(k, v)),
      SAMC_KEY("seeds", seeds, parse_list<u64>(k, v)),
      SAMC_KEY("ae-lr", ae_lr, parse_number<double>(k, v)),
      SAMC_KEY("ae-steps", ae_steps, parse_number<sz>(k, v)),
      SAMC_KEY("trunk", trunk, parse_list<sz>(k, v)),
      SAMC_KEY("dataset", dataset, (static_cast<void>(k), v)),
      SAMC_KEY("cifar-train", cifar_train, (static_cast<void>(k), v)),
      SAMC_KEY("cifar-test", cifar_test, (static_cast<void>(k), v)),
      SAMC_KEY("tasks", tasks, parse_number<sz>(k, v)),
      SAMC_KEY("classes-per-task", classes_per_task, parse_number<sz>(k, v)),
      SAMC_KEY("train-per-class", train_per_class, parse_number<sz>(k, v)),
      SAMC_KEY("test-per-class", test_per_class, parse_number<sz>(k, v)),
      SAMC_KEY("resolution", resolution, parse_number<sz>(k, v)),
      SAMC_KEY("channels", channels, parse_number<sz>(k, v)),
      SAMC_KEY("noise", noise, parse_number<double>(k, v)),
      SAMC_KEY("data-seed", data_seed, parse_number<u64>(k, v)),
      SAMC_KEY("out-dir", out_dir, (static_cast<void>(k), v)),
      SAMC_KEY("dump-images", dump_images, parse_bool(k, v)),
      SAMC_KEY("step-log", step_log, parse_bool(k, v)),
      SAMC_KEY("mu-list", mu_list, parse_list<double>(k, v)),
      SAMC_KEY("slots-list", slots_list, parse_list<sz>(k, v)),
  };
  return table;
}

#undef SAMC_KEY

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [name, def] : key_table()) k.push_back(name);
    return k;
  }();
  return keys;
}

void set_config_value(ExperimentConfig& cfg, std::string key, const std::string& value) {
  key = canonical_key(trim(key));
  if (key == "seed") key = "seeds";
  for (const auto& [name, def] : key_table())
    if (name == key) return def.set(cfg, key, trim(value));
  throw ConfigError("unknown config key '" + key + "'");
}

ExperimentConfig parse_config(std::string_view text, ExperimentConfig base) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    set_config_value(base, line.substr(0, eq), line.substr(eq + 1));
  }
  return base;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

void validate(const ExperimentConfig& c) {
  if (!parse_method(c.method)) throw ConfigError("unknown method '" + c.method + "'");
  if (!parse_completion_mode(c.mode)) throw ConfigError("unknown completion mode '" + c.mode + "'");
  if (!parse_budget_mode(c.budget_mode)) throw ConfigError("unknown budget mode '" + c.budget_mode + "'");
  if (c.dataset != "synthetic" && c.dataset != "cifar")
    throw ConfigError("unknown dataset '" + c.dataset + "'");
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_unit(c.mu)) throw ConfigError("mu must lie in [0, 1]");
  for (double m : c.mu_list)
    if (!in_unit(m)) throw ConfigError("mu-list entries must lie in [0, 1]");
  if (!(c.margin >= 0.0)) throw ConfigError("margin must be >= 0");
  if (!(c.lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(c.ae_lr > 0.0)) throw ConfigError("ae-lr must be positive");
  if (c.batch == 0 || c.epochs == 0) throw ConfigError("batch and epochs must be positive");
  if (c.seeds.empty()) throw ConfigError("need at least one seed");
  if (c.trunk.empty() || std::find(c.trunk.begin(), c.trunk.end(), 0) != c.trunk.end())
    throw ConfigError("trunk needs at least one block, each with filters >= 1");
  if (c.dataset == "synthetic" && (c.resolution >> (c.trunk.size() - 1)) < 2)
    throw ConfigError("resolution too small for " + std::to_string(c.trunk.size()) + " trunk blocks");
  if (c.tasks == 0 || c.classes_per_task < 2) throw ConfigError("need tasks >= 1 and classes-per-task >= 2");
  if (c.dataset == "synthetic") {
    if (c.train_per_class == 0 || c.test_per_class == 0) throw ConfigError("per-class counts must be positive");
    if (c.resolution < 8 || c.channels == 0) throw ConfigError("resolution must be >= 8, channels >= 1");
    if (c.noise < 0.0) throw ConfigError("noise must be >= 0");
  } else {
    if (c.cifar_train.empty() || c.cifar_test.empty())
      throw ConfigError("dataset cifar needs cifar-train and cifar-test");
    if (c.tasks * c.classes_per_task > 100) throw ConfigError("at most 100 CIFAR classes");
  }
}

nlohmann::json config_json(const ExperimentConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, def] : key_table()) j[name] = def.get(cfg);
  return j;
}

TrainerConfig trainer_config(const ExperimentConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  TrainerConfig t;
  t.method = *parse_method(cfg.method);
  t.completion.mode = *parse_completion_mode(cfg.mode);
  t.completion.ae_step = cfg.ae_lr;
  t.completion.ae_steps = cfg.ae_steps;
  t.mu = cfg.mu;
  t.slots = cfg.slots;
  t.budget_mode = *parse_budget_mode(cfg.budget_mode);
  t.step_size = cfg.lr;
  t.margin = cfg.margin;
  t.batch_size = cfg.batch;
  t.epochs = cfg.epochs;
  t.seed = seed;
  return t;
}

namespace {

ImageShape stream_shape(const ExperimentConfig& cfg) {
  if (cfg.dataset == "cifar") return {3, 32, 32};
  return {cfg.channels, cfg.resolution, cfg.resolution};
}

}  // namespace

ClassifierConfig classifier_config(const ExperimentConfig& cfg, std::uint64_t seed) {
  ClassifierConfig c;
  c.input = stream_shape(cfg);
  c.classes_per_task = cfg.classes_per_task;
  c.trunk_filters = cfg.trunk;
  c.seed = seed;
  return c;
}

AutoencoderConfig autoencoder_config(const ExperimentConfig& cfg, std::uint64_t seed) {
  AutoencoderConfig a;
  a.image = stream_shape(cfg);
  a.seed = seed + 100;
  return a;
}

TaskStream make_stream(const ExperimentConfig& cfg) {
  validate(cfg);
  if (cfg.dataset == "cifar") {
    const int classes = cfg.tasks * cfg.classes_per_task > 10 ? 100 : 10;
    return split_into_tasks(load_cifar_binary(cfg.cifar_train, classes),
                            load_cifar_binary(cfg.cifar_test, classes), cfg.tasks, cfg.classes_per_task,
                            cfg.data_seed, {3, 32, 32});
  }
  SyntheticConfig s;
  s.tasks = cfg.tasks;
  s.classes_per_task = cfg.classes_per_task;
  s.train_per_class = cfg.train_per_class;
  s.test_per_class = cfg.test_per_class;
  s.shape = stream_shape(cfg);
  s.noise = cfg.noise;
  s.seed = cfg.data_seed;
  return make_synthetic_stream(s);
}

// ---- runs -----------------------------------------------------------------------------

SeedRun run_seed(const ExperimentConfig& cfg, const TaskStream& stream, std::uint64_t seed,
                 const std::function<void(const TrainState&)>& at_end) {
  const std::size_t t = stream.tasks.size();
  TrainState st(classifier_config(cfg, seed), autoencoder_config(cfg, seed), t, trainer_config(cfg, seed));
  SeedRun run;
  run.seed = seed;
  run.r = ResultMatrix(t);
  for (std::size_t i = 0; i < t; ++i) {
    auto rep = train_task(st, stream.tasks[i]);
    run.constrained_steps += rep.constrained_steps;
    run.fast_path_steps += rep.fast_path_steps;
    if (cfg.step_log)
      run.steps.insert(run.steps.end(), std::make_move_iterator(rep.steps.begin()),
                       std::make_move_iterator(rep.steps.end()));
    const auto row = evaluate(st.model, stream);
    for (std::size_t j = 0; j < t; ++j) run.r.at(i, j) = row[j];
  }
  run.metrics = acc_bwt(run.r);
  for (std::size_t k = 0; k < t; ++k) {
    const int id = stream.tasks[k].id;
    run.memory_counts.push_back(st.memory.contains(id) ? st.memory.samples(id).size() : 0);
  }
  run.kept_fraction =
      st.kept_fraction_count ? st.kept_fraction_sum / static_cast<double>(st.kept_fraction_count) : 0.0;
  if (at_end) at_end(st);
  return run;
}

namespace {

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << s;
}

void write_image(const std::filesystem::path& p, const Tensor& img) {
  if (img.dim(0) == 1)
    write_pgm(p.string() + ".pgm", img);
  else
    write_ppm(p.string() + ".ppm", img);
}

void dump_images(const TrainState& st, const std::filesystem::path& dir, std::size_t per_task = 8) {
  std::filesystem::create_directories(dir);
  CompletionConfig cc = st.config.completion;
  if (st.config.method != Method::Samc) cc.mode = CompletionMode::RuleOnly;
  for (int k : st.memory.tasks()) {
    const auto& samples = st.memory.samples(k);
    const auto done = complete(st.memory, st.ae, cc, k);
    for (std::size_t i = 0; i < std::min(per_task, samples.size()); ++i) {
      const std::string stem = "task" + std::to_string(k) + "_" + std::to_string(i);
      write_image(dir / (stem + "_stored"), coo_decode(samples[i]).image);
      write_image(dir / (stem + "_completed"), done[i].image);
    }
  }
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, const TaskStream& stream) {
  validate(cfg);
  ExperimentResult res;
  res.config = cfg;
  const bool write = !cfg.out_dir.empty();
  const std::filesystem::path dir = cfg.out_dir;
  if (write) std::filesystem::create_directories(dir);
  for (auto seed : cfg.seeds) {
    const std::string tag = "seed" + std::to_string(seed);
    const auto at_end = [&](const TrainState& st) {
      if (!write) return;
      write_file((dir / ("memory_" + tag + ".samm")).string(), encode_memory(st.memory));
      if (cfg.dump_images) dump_images(st, dir / ("images_" + tag));
    };
    res.runs.push_back(run_seed(cfg, stream, seed, at_end));
    if (write) {
      std::ostringstream r;
      res.runs.back().r.write_csv(r);
      write_text(dir / ("r_matrix_" + tag + ".csv"), r.str());
      if (cfg.step_log) {
        std::ostringstream s;
        write_step_log_csv(s, res.runs.back().steps);
        write_text(dir / ("steps_" + tag + ".csv"), s.str());
      }
    }
  }
  if (write) write_text(dir / "summary.json", summary_json(res).dump(2) + "\n");
  return res;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) { return run_experiment(cfg, make_stream(cfg)); }

namespace {

nlohmann::json mean_std_json(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.std}, {"n", m.n}}; }

}  // namespace

nlohmann::json summary_json(const ExperimentResult& res) {
  using nlohmann::json;
  json runs = json::array();
  std::vector<double> accs, bwts, kept;
  std::vector<double> counts;
  bool bwt_defined = true;
  for (const auto& r : res.runs) {
    runs.push_back({{"seed", r.seed},
                    {"acc", r.metrics.acc},
                    {"bwt", r.metrics.bwt},
                    {"bwt_defined", r.metrics.bwt_defined},
                    {"memory_counts", r.memory_counts},
                    {"kept_fraction", r.kept_fraction},
                    {"constrained_steps", r.constrained_steps},
                    {"fast_path_steps", r.fast_path_steps}});
    accs.push_back(r.metrics.acc);
    bwts.push_back(r.metrics.bwt);
    kept.push_back(r.kept_fraction);
    bwt_defined = bwt_defined && r.metrics.bwt_defined;
    if (counts.size() < r.memory_counts.size()) counts.resize(r.memory_counts.size(), 0.0);
    for (std::size_t k = 0; k < r.memory_counts.size(); ++k)
      counts[k] += static_cast<double>(r.memory_counts[k]) / static_cast<double>(res.runs.size());
  }
  double task_avg = 0.0;
  for (double c : counts) task_avg += c / static_cast<double>(counts.size());
  json bwt = mean_std_json(mean_std(bwts));
  bwt["defined"] = bwt_defined;
  return {{"schema_version", kSummarySchemaVersion},
          {"config", config_json(res.config)},
          {"budget_mode", res.config.budget_mode},
          {"acc", mean_std_json(mean_std(accs))},
          {"bwt", bwt},
          {"memory_counts_mean", counts},
          {"memory_count_task_mean", task_avg},
          {"kept_fraction_mean", mean_std(kept).mean},
          {"runs", runs}};
}

nlohmann::json run_sweep(const ExperimentConfig& cfg) {
  validate(cfg);
  const std::vector<double> mus = cfg.mu_list.empty() ? std::vector<double>{cfg.mu} : cfg.mu_list;
  const std::vector<std::size_t> slots =
      cfg.slots_list.empty() ? std::vector<std::size_t>{cfg.slots} : cfg.slots_list;
  const TaskStream stream = make_stream(cfg);
  nlohmann::json points = nlohmann::json::array();
  for (double mu : mus)
    for (std::size_t s : slots) {
      ExperimentConfig point = cfg;
      point.mu = mu;
      point.slots = s;
      point.mu_list.clear();
      point.slots_list.clear();
      std::ostringstream name;
      name << "mu" << mu << "_slots" << s;
      if (!cfg.out_dir.empty()) point.out_dir = (std::filesystem::path(cfg.out_dir) / name.str()).string();
      const auto summary = summary_json(run_experiment(point, stream));
      points.push_back({{"mu", mu},
                        {"slots", s},
                        {"acc", summary["acc"]},
                        {"bwt", summary["bwt"]},
                        {"memory_counts_mean", summary["memory_counts_mean"]},
                        {"memory_count_task_mean", summary["memory_count_task_mean"]},
                        {"kept_fraction_mean", summary["kept_fraction_mean"]}});
    }
  nlohmann::json out = {{"schema_version", kSummarySchemaVersion}, {"config", config_json(cfg)}, {"points", points}};
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    write_text(std::filesystem::path(cfg.out_dir) / "sweep.json", out.dump(2) + "\n");
  }
  return out;
}

}  // namespace samc

namespace samc {

ExperimentConfig verify_defaults() {
  ExperimentConfig c;
  c.tasks = 2;
  c.batch = 2;
  c.epochs = 4;
  c.margin = TrainerConfig{}.margin;
  return c;
}

nlohmann::json run_verify(const ExperimentConfig& in, std::size_t trials) {
  ExperimentConfig cfg = in;
  cfg.method = "samc";
  validate(cfg);
  const TaskStream stream = make_stream(cfg);
  if (stream.tasks.size() < 2) throw ConfigError("verify needs at least two tasks");
  const auto seed = cfg.seeds.front();
  TrainState st(classifier_config(cfg, seed), autoencoder_config(cfg, seed), stream.tasks.size(),
                trainer_config(cfg, seed));
  Lemma1Report l1;
  const auto observer = lemma1_observer(l1);
  for (std::size_t i = 0; i < stream.tasks.size(); ++i) train_task(st, stream.tasks[i], i ? observer : StepObserver{});

  Theorem1Config t1;
  t1.trials = trials;
  t1.mu = cfg.mu;
  t1.seed = seed;
  const auto levels = theorem1_probe(st.model, stream.tasks[0], stream.tasks[1], t1);
  Lemma2Config l2c;
  l2c.trials = trials;
  l2c.mu = cfg.mu;
  l2c.seed = seed;
  const auto l2 = lemma2_diagnostic(st.model, stream.tasks[0], l2c);

  nlohmann::json lv = nlohmann::json::array();
  bool exact = false, monotone = true;
  double prev = -1.0;
  for (const auto& l : levels) {
    lv.push_back({{"sigma", l.sigma}, {"counted", l.counted}, {"agree", l.agree}, {"rate", l.rate()}});
    if (l.sigma == 0.0) {
      exact = l.counted > 0 && l.agree == l.counted;
    } else {
      if (l.rate() < prev - 0.02) monotone = false;
      prev = std::max(prev, l.rate());
    }
  }
  const bool l1_pass = l1.violations == 0 && l1.examined >= 500;
  const bool l2_pass = l2.ordered_fraction() >= 0.95;
  return {{"lemma1",
           {{"steps", l1.steps},
            {"examined", l1.examined},
            {"violations", l1.violations},
            {"worst_increase", l1.worst_increase},
            {"pass", l1_pass}}},
          {"theorem1", {{"levels", lv}, {"exact_at_zero", exact}, {"monotone", monotone}, {"pass", exact && monotone}}},
          {"lemma2",
           {{"trials", l2.trials},
            {"ordered_fraction", l2.ordered_fraction()},
            {"mean_err_small", l2.mean_err_small},
            {"mean_err_large", l2.mean_err_large},
            {"bound_inv_sq", {{"small", l2.bound_inv_sq_small}, {"large", l2.bound_inv_sq_large}, {"holds_fraction", l2.inv_sq_holds}}},
            {"bound_sqrt", {{"small", l2.bound_sqrt_small}, {"large", l2.bound_sqrt_large}, {"holds_fraction", l2.sqrt_holds}}},
            {"pass", l2_pass}}},
          {"pass", l1_pass && exact && monotone && l2_pass}};
}

}  // namespace samc
