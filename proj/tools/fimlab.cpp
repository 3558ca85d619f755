// SPDX-License-Identifier: Apache-2.0
//
// fimlab: corpus build, matched training, probing and analysis.
#include <CLI11.hpp>

#include <iostream>

#include "fimlab/error.hpp"
#include "fimlab/experiment.hpp"
#include "fimlab/io.hpp"

namespace {

using namespace fimlab;

constexpr int kRuntimeFailure = 1;
constexpr int kUsageError = 2;

struct Common {
  std::string config_path;
  std::string output_dir;
  std::string dtype;
  std::int64_t seed = -1;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "Experiment config (JSON); defaults apply when omitted");
  cmd->add_option("-o,--output-dir", c.output_dir, "Run directory (overrides config and FIMLAB_OUTPUT_DIR)");
  cmd->add_option("--dtype", c.dtype, "float32 or float64")->check(CLI::IsMember({"float32", "float64"}));
  cmd->add_option("--seed", c.seed, "Global seed override")->check(CLI::NonNegativeNumber);
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig config = c.config_path.empty() ? default_experiment_config() : load_experiment_config(c.config_path);
  config.output_dir = resolve_output_dir(config);
  if (!c.output_dir.empty()) config.output_dir = c.output_dir;
  if (!c.dtype.empty()) config.dtype = c.dtype;
  if (c.seed >= 0) config.seed = static_cast<std::uint64_t>(c.seed);
  config.validate();
  return config;
}

void print(const std::string& line) { std::cout << line << std::endl; }

const std::vector<std::string> kObjectives = {"ltr", "fim", "bulk_only"};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fimlab: fill-in-the-middle vs left-to-right memorization lab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  Common common;

  auto* init = app.add_subcommand("init-config", "Write the default experiment config");
  std::string init_out = "fimlab.json";
  init->add_option("path", init_out, "Destination file");

  auto* build = app.add_subcommand("build-corpus", "Generate text, train the scorer, filter, dedup and bucket");
  add_common(build, common);

  std::string objective;
  auto* train = app.add_subcommand("train", "Train one checkpoint over its stream");
  add_common(train, common);
  train->add_option("--objective", objective, "ltr, fim or bulk_only")->required()->check(CLI::IsMember(kObjectives));

  std::string spec;
  auto* probe = app.add_subcommand("probe", "Probe a trained checkpoint with a named spec");
  add_common(probe, common);
  probe->add_option("--objective", objective, "ltr, fim or bulk_only")->required()->check(CLI::IsMember(kObjectives));
  probe->add_option("--spec", spec, "Probe spec name from the config")->required();

  std::vector<std::string> records;
  std::string analyze_out = "analysis";
  AnalyzeOptions analyze_opts;
  auto* analyze = app.add_subcommand("analyze", "Aggregate probe records into CSV tables");
  analyze->add_option("records", records, "Probe record files (JSONL)")->required()->check(CLI::ExistingFile);
  analyze->add_option("-o,--out", analyze_out, "Output directory");
  analyze->add_flag("--force", analyze_opts.force, "Accept records from different configs");
  analyze->add_option("--thresholds", analyze_opts.thresholds, "Survival thresholds, ascending");
  analyze->add_option("--span-lengths", analyze_opts.span_lengths, "Target lengths for the span sweep");

  auto* run = app.add_subcommand("run", "Build, train all three checkpoints, probe, analyze and write a manifest");
  add_common(run, common);
  bool no_probe = false;
  run->add_flag("--no-probe", no_probe, "Stop after training");

  std::string manifest;
  std::string replay_out;
  auto* replay = app.add_subcommand("replay", "Re-run a manifest and compare artifact hashes");
  replay->add_option("manifest", manifest, "manifest.json of a finished run")->required()->check(CLI::ExistingFile);
  replay->add_option("-o,--output-dir", replay_out, "Directory for the replayed run")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (init->parsed()) {
      write_file_atomic(init_out, to_json(default_experiment_config()).dump(2) + "\n");
      print("wrote " + init_out);
    } else if (build->parsed()) {
      cmd_build_corpus(resolve(common), print);
    } else if (train->parsed()) {
      print(cmd_train(resolve(common), objective_from_string(objective), print).string());
    } else if (probe->parsed()) {
      const ExperimentConfig config = resolve(common);
      if (!config.probes.count(spec)) {
        std::cerr << "unknown probe spec '" << spec << "'; configured:";
        for (const auto& [name, s] : config.probes) std::cerr << ' ' << name;
        std::cerr << '\n';
        return kUsageError;
      }
      cmd_probe(config, objective_from_string(objective), spec, print);
    } else if (analyze->parsed()) {
      std::vector<std::filesystem::path> paths(records.begin(), records.end());
      for (const auto& p : cmd_analyze(paths, analyze_out, analyze_opts)) print(p.string());
    } else if (run->parsed()) {
      const ExperimentConfig config = resolve(common);
      const auto result = no_probe ? matched_experiment(config, print) : run_full_pipeline(config, print);
      print("manifest " + result.manifest.string());
    } else if (replay->parsed()) {
      const auto diff = replay_manifest(manifest, replay_out, print);
      if (!diff.empty()) {
        for (const auto& d : diff) std::cerr << "differs: " << d << '\n';
        return kRuntimeFailure;
      }
      print("replay identical");
    }
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.kind()) << "]: " << e.what() << '\n';
    return e.kind() == ErrorKind::kInvalidConfig ? kUsageError : kRuntimeFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeFailure;
  }
  return 0;
}
