// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration and the pipeline stages behind the CLI:
// build-corpus, train, probe, analyze and replay.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fimlab/dedup.hpp"
#include "fimlab/fim.hpp"
#include "fimlab/model.hpp"
#include "fimlab/probe.hpp"
#include "fimlab/tokenizer.hpp"
#include "fimlab/trainer.hpp"

namespace fimlab {

struct TextSourceConfig {
  std::string source = "synthetic";  // or a path to ingest
  int num_docs = 0;
  int min_len = 256;
  int max_len = 2048;
  double temperature = 1.0;
  double noise_rate = 0.002;
  std::optional<CharRange> char_range;
};

struct CorpusConfig {
  int window = 512;
  TextSourceConfig bulk{"synthetic", 2000, 256, 2048, 1.0, 0.002, std::nullopt};
  TextSourceConfig canary{"synthetic", 1000, 512, 512, 1.0, 0.002, std::nullopt};
  bool highest_ppl_window_per_doc = false;
  double ppl_cap = kDefaultPplCap;
  double cos_threshold = 0.96;
  double jac_threshold = 0.20;
  int ngram = 5;
  RepetitionSchedule schedule;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string dtype = "float32";  // "float64" is the bit-reproducible test mode
  std::filesystem::path output_dir = "fimlab_run";
  CorpusConfig corpus;
  FimMixture mixture{0.5, 1.0};
  int seq_len = 512;
  ModelConfig model;
  TrainConfig train;  // objective is set per run
  std::map<std::string, ProbeSpec> probes;

  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& config);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// SHA-256 of the canonical JSON of everything except output_dir.
std::string config_hash(const ExperimentConfig& config);

// Desk-scale defaults with the probe specs used by the analyses.
ExperimentConfig default_experiment_config();

struct RunPaths {
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path corpus_dir() const { return root / "corpus"; }
  std::filesystem::path excerpts() const { return corpus_dir() / "excerpts.bin"; }
  std::filesystem::path excerpt_index() const { return corpus_dir() / "excerpts_index.json"; }
  std::filesystem::path buckets() const { return corpus_dir() / "buckets.json"; }
  std::filesystem::path dedup_report() const { return corpus_dir() / "dedup_report.json"; }
  std::filesystem::path corpus_summary() const { return corpus_dir() / "summary.json"; }
  std::filesystem::path bulk_manifest() const { return corpus_dir() / "bulk_manifest.jsonl"; }
  std::filesystem::path canary_manifest() const { return corpus_dir() / "canary_manifest.jsonl"; }
  std::filesystem::path train_dir(Objective o) const;
  std::filesystem::path checkpoint(Objective o) const { return train_dir(o) / "model.ckpt"; }
  std::filesystem::path probe_dir(Objective o) const;
  std::filesystem::path probe_records(Objective o, const std::string& spec) const {
    return probe_dir(o) / (spec + ".jsonl");
  }
  std::filesystem::path analysis_dir() const { return root / "analysis"; }
  std::filesystem::path manifest() const { return root / "manifest.json"; }
};

// Output directory after the FIMLAB_OUTPUT_DIR override; the stages
// themselves write under config.output_dir.
std::filesystem::path resolve_output_dir(const ExperimentConfig& config);

using Log = std::function<void(const std::string&)>;

struct CorpusSummary {
  std::size_t bulk_docs = 0;
  std::size_t canary_docs = 0;
  std::size_t windows = 0;
  std::size_t after_filter = 0;
  std::size_t after_dedup = 0;
  std::size_t assigned = 0;
  std::vector<double> bucket_mean_ppl;
  double ppl_spread = 0.0;
};

nlohmann::json to_json(const CorpusSummary& s);

// Generates or ingests text, trains the bulk-only scorer, then scores,
// filters, deduplicates and buckets the canary windows.
CorpusSummary cmd_build_corpus(const ExperimentConfig& config, const Log& log = {});

// The three matched streams share sources and seed; they differ only in
// which documents are included and in formatting.
struct CorpusArtifacts {
  std::vector<RawDocument> bulk;
  std::vector<TokenSeq> bulk_tokens;
  ExcerptStore store;
};

CorpusArtifacts load_corpus(const ExperimentConfig& config);
std::vector<RawDocument> make_bulk_documents(const ExperimentConfig& config);
PackedBatchStream build_stream_for(const ExperimentConfig& config, const CorpusArtifacts& corpus, Objective objective,
                                   std::vector<StreamSource>* sources_out = nullptr);

// Writes checkpoint, metrics CSV, stream shard/index and a run manifest.
std::filesystem::path cmd_train(const ExperimentConfig& config, Objective objective, const Log& log = {});

struct ProbeSummaryRow {
  int exposure = 0;
  RateWithCI extraction;
  RateWithCI support;
  double mean_rouge_l = 0.0;
};

// Probes every bucketed excerpt with the named spec; writes JSONL records
// and a per-bucket CSV.
std::vector<ProbeSummaryRow> cmd_probe(const ExperimentConfig& config, Objective objective,
                                       const std::string& spec_name, const Log& log = {});

struct AnalyzeOptions {
  bool force = false;
  std::vector<double> thresholds;  // survival grid; default log-spaced
  std::vector<int> span_lengths = {20, 30, 40, 50};
  double threshold = 0.001;
};

// One CSV per figure family in out_dir; returns the written paths.
std::vector<std::filesystem::path> cmd_analyze(const std::vector<std::filesystem::path>& records,
                                               const std::filesystem::path& out_dir, const AnalyzeOptions& options);

struct MatchedExperiment {
  std::filesystem::path ltr_ckpt;
  std::filesystem::path fim_ckpt;
  std::filesystem::path baseline_ckpt;
  std::filesystem::path manifest;
};

// Corpus, all three runs and a manifest of artifact hashes for replay.
MatchedExperiment matched_experiment(const ExperimentConfig& config, const Log& log = {});

// matched_experiment plus every configured probe on each checkpoint
// (baseline: prefix-only specs) and the analysis tables.
MatchedExperiment run_full_pipeline(const ExperimentConfig& config, const Log& log = {});

// SHA-256 of every file under the run directory except config.json and
// manifest.json, keyed by relative path.
std::map<std::string, std::string> artifact_hashes(const std::filesystem::path& root);

// Re-runs the manifest's pipeline in out_dir and compares artifact hashes;
// returns the paths that differ.
std::vector<std::string> replay_manifest(const std::filesystem::path& manifest, const std::filesystem::path& out_dir,
                                         const Log& log = {});

}  // namespace fimlab
