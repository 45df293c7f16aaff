// fedci — batch front-end for the federated causal inference lab.
//
// Subcommands:
//   run             execute a scenario end-to-end and write artifacts
//   report          merge report.json files into a comparison table
//   dump-data       write the first replicate's per-site data as CSV
//   list-scenarios  print the bundled scenario names
//
// Exit codes: 0 all checks passed, 1 check or estimator failures,
// 2 usage/config errors. The master seed must come from the config file,
// --seed, or FEDCI_SEED; there is no clock fallback.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedci/config.hpp"
#include "fedci/experiment.hpp"
#include "fedci/scenarios.hpp"

namespace {

struct CommonOpts {
  std::string config_path;
  std::string scenario;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  int jobs = 0;
  std::vector<std::string> formats;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool with_formats) {
  auto* config = cmd->add_option("--config", o.config_path,
                                 "experiment config file (JSON)");
  config->check(CLI::ExistingFile);
  auto* scenario =
      cmd->add_option("--scenario", o.scenario, "bundled scenario name");
  scenario->excludes(config);
  cmd->add_option("--seed", o.seed,
                  "master seed (overrides config and FEDCI_SEED)");
  cmd->add_option("--out", o.out_dir,
                  "output directory (overrides config and FEDCI_OUT)");
  cmd->add_option("--jobs", o.jobs, "worker threads (never changes results)")
      ->check(CLI::PositiveNumber);
  if (with_formats)
    cmd->add_option("--format", o.formats, "artifact formats to write")
        ->check(CLI::IsMember({"csv", "json"}));
}

std::optional<std::uint64_t> env_seed() {
  const char* raw = std::getenv("FEDCI_SEED");
  if (!raw || !*raw) return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(raw, &end, 10);
  if (end == raw || *end != '\0')
    throw fedci::ConfigError("FEDCI_SEED is not a non-negative integer");
  return static_cast<std::uint64_t>(v);
}

fedci::ExperimentConfig resolve_config(const CommonOpts& o) {
  if (o.config_path.empty() == o.scenario.empty())
    throw fedci::ConfigError(
        "exactly one of --config or --scenario is required");
  fedci::ExperimentConfig cfg =
      o.config_path.empty()
          ? fedci::parse_experiment_config(fedci::scenario_config(o.scenario))
          : fedci::load_experiment_config(o.config_path);
  if (o.seed) {
    cfg.mc.seed = *o.seed;
    cfg.seed_set = true;
  } else if (auto s = env_seed(); s && !cfg.seed_set) {
    cfg.mc.seed = *s;
    cfg.seed_set = true;
  }
  if (!o.out_dir.empty()) {
    cfg.output.directory = o.out_dir;
  } else if (const char* env_out = std::getenv("FEDCI_OUT");
             env_out && *env_out) {
    cfg.output.directory = env_out;
  }
  if (o.jobs > 0) cfg.mc.jobs = o.jobs;
  if (!o.formats.empty()) {
    cfg.output.csv = false;
    cfg.output.json = false;
    for (const auto& f : o.formats) {
      if (f == "csv") cfg.output.csv = true;
      if (f == "json") cfg.output.json = true;
    }
  }
  return cfg;
}

int cmd_run(const CommonOpts& o) {
  const fedci::ExperimentConfig cfg = resolve_config(o);
  const fedci::ExperimentArtifacts art = fedci::run_experiment(cfg);
  const std::vector<std::string> files =
      fedci::write_artifacts(art, cfg.output);

  std::cout << "scenario: " << cfg.scenario << "\n"
            << "problem: " << fedci::problem_name(art.result.problem) << "\n"
            << "seed: " << art.result.seed
            << "  replicates: " << art.result.replicates << "\n"
            << "target: " << art.result.target_note << "\n\n";
  int failures = 0;
  for (const auto& s : art.result.summaries) {
    std::cout << "  " << s.name << ": bias " << fedci::g12(s.bias[0])
              << ", variance " << fedci::g12(s.variance[0]);
    if (s.failures > 0) {
      std::cout << "  [" << s.failures
                << " failed replicates: " << s.first_error << "]";
      failures += s.failures;
    }
    std::cout << "\n";
  }
  std::cout << "\n" << fedci::verdicts_text(art.verdicts) << "\n";
  std::cout << "wrote " << cfg.output.directory << "/{";
  for (std::size_t i = 0; i < files.size(); ++i)
    std::cout << (i ? "," : "") << files[i];
  std::cout << "}\n";

  bool pass = failures == 0;
  for (const auto& v : art.verdicts)
    if (v.applicable && !v.pass) pass = false;
  return pass ? 0 : 1;
}

int cmd_dump_data(const CommonOpts& o) {
  fedci::ExperimentConfig cfg = resolve_config(o);
  if (!cfg.seed_set)
    throw fedci::ConfigError(
        "config: no master seed (set `$.mc.seed`, --seed, or FEDCI_SEED)");
  cfg.mc.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.output.directory);
  const std::vector<fedci::SiteSample> sites =
      fedci::detail::generate_sites(cfg.mc, 0);
  for (std::size_t k = 0; k < sites.size(); ++k) {
    const fs::path path = fs::path(cfg.output.directory) /
                          ("data-site" + std::to_string(k) + ".csv");
    fedci::expdetail::write_file(path, fedci::expdetail::site_csv(sites[k]));
    std::cout << "wrote " << path.string() << "\n";
  }
  return 0;
}

int cmd_report(const std::vector<std::string>& paths,
               const std::string& out_dir) {
  std::vector<nlohmann::json> inputs;
  for (const auto& p : paths) {
    std::ifstream in(p);
    if (!in) throw fedci::ConfigError("report: cannot open " + p);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::parse_error& e) {
      throw fedci::ConfigError("report: " + p + " is not valid JSON: " +
                               e.what());
    }
    inputs.push_back(std::move(j));
  }
  const fedci::MergedReport merged = fedci::merge_reports(inputs);
  std::cout << merged.text;
  if (!out_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    fedci::expdetail::write_file(fs::path(out_dir) / "merged.txt", merged.text);
    fedci::expdetail::write_file(fs::path(out_dir) / "merged.csv", merged.csv);
    std::cout << "wrote " << out_dir << "/{merged.txt,merged.csv}\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"federated causal inference experiment runner"};
  app.require_subcommand(1);

  CommonOpts run_opts;
  CLI::App* run = app.add_subcommand("run", "execute a scenario");
  add_common(run, run_opts, /*with_formats=*/true);

  CommonOpts dump_opts;
  CLI::App* dump =
      app.add_subcommand("dump-data", "write replicate-0 site data as CSV");
  add_common(dump, dump_opts, /*with_formats=*/false);

  std::vector<std::string> report_paths;
  std::string report_out;
  CLI::App* report =
      app.add_subcommand("report", "merge report.json files into one table");
  report->add_option("paths", report_paths, "report.json files")
      ->required()
      ->check(CLI::ExistingFile);
  report->add_option("--out", report_out, "directory for merged.{txt,csv}");

  CLI::App* list =
      app.add_subcommand("list-scenarios", "print bundled scenarios");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (run->parsed()) return cmd_run(run_opts);
    if (dump->parsed()) return cmd_dump_data(dump_opts);
    if (report->parsed()) return cmd_report(report_paths, report_out);
    if (list->parsed()) {
      for (const auto& s : fedci::list_scenarios())
        std::cout << s.name << "  —  " << s.summary << "\n";
      return 0;
    }
  } catch (const fedci::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
