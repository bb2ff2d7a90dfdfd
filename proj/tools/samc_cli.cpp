// samc: run, sweep, inspect-memory, verify.
//
// Every config key is also a flag of the same name (--mu 0.3, --seeds 1,2,3);
// flags override the --config file. Results go to --out-dir; a JSON line
// summarizing the outcome is printed on stdout. Failures print
// {"error": ..., "kind": ...} and exit nonzero.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "samc/bench.hpp"
#include "samc/bytes.hpp"
#include "samc/memory.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
};

bool is_bool_key(const std::string& k) { return k == "dump-images" || k == "step-log"; }

void add_config_flags(CLI::App& app, ConfigFlags& flags) {
  app.add_option("--config", flags.config_path, "key = value config file");
  for (const auto& key : samc::config_keys()) {
    std::string names = "--" + key;
    if (key == "seeds") names += ",--seed";
    auto* opt = app.add_option(names, flags.values[key], "override config key '" + key + "'");
    if (is_bool_key(key)) opt->expected(0, 1);
    flags.options[key] = opt;
  }
}

samc::ExperimentConfig resolve(const ConfigFlags& flags, samc::ExperimentConfig base = {}) {
  samc::ExperimentConfig cfg = flags.config_path.empty() ? base : samc::load_config(flags.config_path);
  for (const auto& [key, opt] : flags.options) {
    if (opt->count() == 0) continue;
    const auto& v = flags.values.at(key);
    samc::set_config_value(cfg, key, is_bool_key(key) && v.empty() ? "true" : v);
  }
  samc::validate(cfg);
  return cfg;
}

void print(const json& j) { std::cout << j.dump() << std::endl; }

json brief(const json& summary) {
  return {{"acc", summary["acc"]}, {"bwt", summary["bwt"]},
          {"memory_counts_mean", summary["memory_counts_mean"]},
          {"kept_fraction_mean", summary["kept_fraction_mean"]}};
}

void write_sample_image(const fs::path& stem, const samc::Tensor& img) {
  if (img.dim(0) == 1)
    samc::write_pgm(stem.string() + ".pgm", img);
  else
    samc::write_ppm(stem.string() + ".ppm", img);
}

json inspect_memory(const std::string& path, const std::string& image_dir, std::size_t per_task) {
  const auto mem = samc::decode_memory(samc::read_file(path));
  json tasks = json::array();
  std::size_t total_samples = 0, total_bytes = 0;
  if (!image_dir.empty()) fs::create_directories(image_dir);
  for (int k : mem.tasks()) {
    const auto& samples = mem.samples(k);
    double kept = 0.0;
    std::map<int, std::size_t> labels;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& s = samples[i];
      kept += static_cast<double>(s.entries.size()) / static_cast<double>(s.shape.numel());
      ++labels[s.label];
      if (!image_dir.empty() && i < per_task)
        write_sample_image(fs::path(image_dir) / ("task" + std::to_string(k) + "_" + std::to_string(i)),
                           samc::coo_decode(s).image);
    }
    json hist = json::object();
    for (auto [label, n] : labels) hist[std::to_string(label)] = n;
    tasks.push_back({{"task", k},
                     {"samples", samples.size()},
                     {"bytes", mem.task_bytes(k)},
                     {"mean_kept_fraction", samples.empty() ? 0.0 : kept / static_cast<double>(samples.size())},
                     {"labels", hist}});
    total_samples += samples.size();
    total_bytes += mem.task_bytes(k);
  }
  json out = {{"file", path},
              {"budget_bytes", mem.budget_bytes()},
              {"tasks", tasks},
              {"total_samples", total_samples},
              {"total_bytes", total_bytes}};
  if (mem.max_samples() != std::numeric_limits<std::size_t>::max()) out["slot_cap"] = mem.max_samples();
  else out["slot_cap"] = nullptr;
  return out;
}

int fail(const std::string& kind, const std::string& what, int code) {
  print({{"error", what}, {"kind", kind}});
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Saliency-augmented memory completion for continual learning"};
  app.require_subcommand(1);

  ConfigFlags run_flags, sweep_flags, verify_flags;
  auto* run = app.add_subcommand("run", "train one configuration over its seed list");
  add_config_flags(*run, run_flags);
  auto* sweep = app.add_subcommand("sweep", "grid over --mu-list x --slots-list");
  add_config_flags(*sweep, sweep_flags);

  auto* inspect = app.add_subcommand("inspect-memory", "statistics and images of a memory dump");
  std::string mem_path, image_dir;
  std::size_t per_task = 8;
  inspect->add_option("file", mem_path, "memory file (.samm)")->required();
  inspect->add_option("--out-dir", image_dir, "write decoded samples here as PGM/PPM");
  inspect->add_option("--per-task", per_task, "images written per task");

  auto* verify = app.add_subcommand("verify", "theory-property checks on a small run");
  add_config_flags(*verify, verify_flags);
  std::size_t trials = 250;
  verify->add_option("--trials", trials, "trials per probe");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), kExitConfig);
  }

  try {
    if (*run) {
      const auto cfg = resolve(run_flags);
      const auto summary = samc::summary_json(samc::run_experiment(cfg));
      json out = brief(summary);
      out["out_dir"] = cfg.out_dir;
      print(out);
    } else if (*sweep) {
      print(samc::run_sweep(resolve(sweep_flags))["points"]);
    } else if (*inspect) {
      print(inspect_memory(mem_path, image_dir, per_task));
    } else if (*verify) {
      const auto report = samc::run_verify(resolve(verify_flags, samc::verify_defaults()), trials);
      print(report);
      return report["pass"].get<bool>() ? 0 : 1;
    }
  } catch (const samc::ConfigError& e) {
    return fail("config", e.what(), kExitConfig);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), kExitRuntime);
  }
  return 0;
}
