// SPDX-License-Identifier: Apache-2.0
#include "fimlab/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "fimlab/error.hpp"
#include "fimlab/io.hpp"

namespace fimlab {

namespace fs = std::filesystem;

namespace {

// Runs fn.template operator()<T>() with T chosen by the config's dtype.
template <typename Fn>
decltype(auto) with_dtype(const ExperimentConfig& config, Fn&& fn) {
  if (config.dtype == "float64") return fn.template operator()<double>();
  return fn.template operator()<float>();
}

// Prefixes errors with the pipeline stage they came from.
template <typename Fn>
decltype(auto) stage(std::string_view name, Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(e.kind(), "[" + std::string(name) + "] " + e.what());
  }
}

void emit(const Log& log, const std::string& line) {
  if (log) log(line);
}

std::uint64_t stage_seed(const ExperimentConfig& config, std::string_view stage) {
  return mix_seed(config.seed, hash_string(stage));
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

// Full-precision, locale-independent number text for CSV cells.
std::string num(double v) {
  if (v == 0.0) return "0";
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::vector<RawDocument> make_documents(const TextSourceConfig& src, DocSource source, std::uint64_t seed,
                                        std::string_view id_prefix) {
  if (src.source == "synthetic") {
    CorpusGenConfig g;
    g.num_docs = src.num_docs;
    g.min_len = src.min_len;
    g.max_len = src.max_len;
    g.seed = seed;
    g.noise_rate = src.noise_rate;
    g.temperature = src.temperature;
    g.id_prefix = std::string(id_prefix);
    g.source = source;
    auto docs = generate_bulk_corpus(g);
    if (src.char_range) {
      for (auto& d : docs) {
        const std::size_t b = std::min(src.char_range->begin, d.text.size());
        const std::size_t e = std::clamp(src.char_range->end, b, d.text.size());
        d.text = d.text.substr(b, e - b);
      }
    }
    return docs;
  }
  if (!fs::exists(src.source)) throw Error(ErrorKind::kIo, "text source not found: " + src.source);
  return ingest_documents(src.source, source, src.char_range);
}

void write_config(const ExperimentConfig& config, const RunPaths& paths) {
  fs::create_directories(paths.root);
  nlohmann::json j = to_json(config);
  j["config_hash"] = config_hash(config);
  j["tool_version"] = kToolVersion;
  write_file_atomic(paths.config(), j.dump(2) + "\n");
}

std::vector<RawDocument> canary_documents(const ExperimentConfig& config) {
  return make_documents(config.corpus.canary, DocSource::kCanary, stage_seed(config, "canary"), "canary");
}

}  // namespace

fs::path RunPaths::train_dir(Objective o) const { return root / "train" / std::string(to_string(o)); }
fs::path RunPaths::probe_dir(Objective o) const { return root / "probe" / std::string(to_string(o)); }

std::vector<RawDocument> make_bulk_documents(const ExperimentConfig& config) {
  return make_documents(config.corpus.bulk, DocSource::kBulk, stage_seed(config, "bulk"), "bulk");
}

nlohmann::json to_json(const CorpusSummary& s) {
  return {{"bulk_docs", s.bulk_docs},       {"canary_docs", s.canary_docs}, {"windows", s.windows},
          {"after_filter", s.after_filter}, {"after_dedup", s.after_dedup}, {"assigned", s.assigned},
          {"bucket_mean_ppl", s.bucket_mean_ppl}, {"ppl_spread", s.ppl_spread}};
}

CorpusArtifacts load_corpus(const ExperimentConfig& config) {
  const RunPaths paths{config.output_dir};
  CorpusArtifacts c;
  c.bulk = make_bulk_documents(config);
  const Vocab vocab = Vocab::byte_level();
  for (const auto& d : c.bulk) c.bulk_tokens.push_back(encode(d.text, vocab));
  if (fs::exists(paths.excerpts())) c.store = read_excerpt_store(paths.excerpts(), paths.excerpt_index());
  return c;
}

PackedBatchStream build_stream_for(const ExperimentConfig& config, const CorpusArtifacts& corpus, Objective objective,
                                   std::vector<StreamSource>* sources_out) {
  std::vector<StreamSource> sources;
  for (std::size_t i = 0; i < corpus.bulk.size(); ++i) {
    sources.push_back({corpus.bulk[i].doc_id, &corpus.bulk_tokens[i], false, 1});
  }
  if (objective != Objective::kBulkOnly) {
    if (corpus.store.exposure.empty()) throw Error(ErrorKind::kIo, "no bucketed excerpts; run build-corpus first");
    for (const auto& e : corpus.store.excerpts) {
      const auto it = corpus.store.exposure.find(e.excerpt_id);
      if (it != corpus.store.exposure.end()) sources.push_back({e.excerpt_id, &e.tokens, true, it->second});
    }
  }
  const FimMixture mixture = objective == Objective::kFim ? config.mixture : FimMixture{0.0, 0.0};
  auto stream = build_training_stream(sources, mixture, config.seq_len, stage_seed(config, "stream"),
                                      Vocab::byte_level());
  if (sources_out) *sources_out = std::move(sources);
  return stream;
}

fs::path cmd_train(const ExperimentConfig& config, Objective objective, const Log& log) {
  config.validate();
  const RunPaths paths{config.output_dir};
  const std::string hash = config_hash(config);
  write_config(config, paths);
  const fs::path dir = paths.train_dir(objective);
  fs::create_directories(dir);

  const CorpusArtifacts corpus = load_corpus(config);
  std::vector<StreamSource> sources;
  const PackedBatchStream stream = build_stream_for(config, corpus, objective, &sources);
  write_stream_shard(stream, dir / "stream.shard", hash);
  write_stream_index(stream, dir / "stream_index.json", "stream.shard");

  std::size_t fim_docs = 0;
  std::size_t canary_occurrences = 0;
  for (const auto& occ : stream.occurrences) {
    fim_docs += occ.fim;
    canary_occurrences += occ.canary;
  }
  std::size_t used = 0;
  for (const auto& occ : stream.occurrences) used += occ.length;

  TrainConfig tc = config.train;
  tc.objective = objective;
  tc.seed = config.seed;
  const auto bounds = batch_bounds(tc, stream.num_sequences());
  emit(log, "train " + std::string(to_string(objective)) + ": " + std::to_string(stream.num_sequences()) +
                " sequences, " + std::to_string(bounds.size() - 1) + " steps");

  TrainOutputs outputs;
  outputs.metrics_csv = dir / "metrics.csv";
  outputs.last_good = dir / "last_good.ckpt";
  outputs.config_hash = hash;
  const std::int64_t every = std::max<std::int64_t>(1, static_cast<std::int64_t>(bounds.size() - 1) / 20);
  outputs.on_step = [&](const StepMetrics& s) {
    if (s.step % every == 0) {
      emit(log, "  step " + std::to_string(s.step) + " tokens " + std::to_string(s.tokens_seen) + " loss " +
                    fixed(s.loss) + " lr " + fixed(s.lr, 6));
    }
  };

  const std::uint64_t init_seed = stage_seed(config, "init");
  with_dtype(config, [&]<typename T>() {
    const auto init = ModelCheckpoint<T>::initialized(config.model, objective, init_seed);
    const auto trained = train(tc, stream, init, outputs);
    save_checkpoint(trained, paths.checkpoint(objective));
  });

  const nlohmann::json manifest = {{"objective", to_string(objective)},
                                   {"config_hash", hash},
                                   {"tool_version", kToolVersion},
                                   {"dtype", config.dtype},
                                   {"steps", bounds.size() - 1},
                                   {"sequences", stream.num_sequences()},
                                   {"stream_tokens", used},
                                   {"content_tokens", stream.content_tokens(Vocab::byte_level())},
                                   {"documents", stream.occurrences.size()},
                                   {"fim_documents", fim_docs},
                                   {"canary_occurrences", canary_occurrences},
                                   {"stream_sha256", sha256_file(dir / "stream.shard")},
                                   {"checkpoint_sha256", sha256_file(paths.checkpoint(objective))},
                                   {"train", to_json(config).at("train")}};
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
  return paths.checkpoint(objective);
}

CorpusSummary cmd_build_corpus(const ExperimentConfig& config, const Log& log) {
  config.validate();
  const RunPaths paths{config.output_dir};
  const std::string hash = config_hash(config);
  write_config(config, paths);
  fs::create_directories(paths.corpus_dir());
  const Vocab vocab = Vocab::byte_level();
  CorpusSummary summary;

  const auto bulk = stage("ingest", [&] { return make_bulk_documents(config); });
  write_corpus_manifest(bulk, paths.bulk_manifest());
  summary.bulk_docs = bulk.size();
  const auto canaries = stage("ingest", [&] { return canary_documents(config); });
  write_corpus_manifest(canaries, paths.canary_manifest());
  summary.canary_docs = canaries.size();
  emit(log, "[ingest] " + std::to_string(bulk.size()) + " bulk docs, " + std::to_string(canaries.size()) +
                " canary docs");

  std::vector<Excerpt> windows;
  for (const auto& d : canaries) {
    auto w = slice_windows(d, vocab, config.corpus.window);
    windows.insert(windows.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
  }
  if (windows.empty()) throw Error(ErrorKind::kNotEnoughExcerpts, "[windows] no canary document spans a full window");
  summary.windows = windows.size();
  emit(log, "[windows] " + std::to_string(windows.size()) + " windows of " + std::to_string(config.corpus.window));

  emit(log, "[scorer] training the bulk-only checkpoint");
  stage("scorer", [&] { return cmd_train(config, Objective::kBulkOnly, log); });
  windows = stage("score", [&] {
    return with_dtype(config, [&]<typename T>() {
      return score_prior_ppl(std::move(windows), load_checkpoint<T>(paths.checkpoint(Objective::kBulkOnly)), vocab);
    });
  });

  if (config.corpus.highest_ppl_window_per_doc) {
    std::map<std::string, std::size_t> best;
    for (std::size_t i = 0; i < windows.size(); ++i) {
      auto [it, fresh] = best.emplace(windows[i].source_doc, i);
      if (!fresh && windows[i].prior_ppl > windows[it->second].prior_ppl) it->second = i;
    }
    std::vector<Excerpt> kept;
    for (const auto& [doc, i] : best) kept.push_back(windows[i]);
    windows = std::move(kept);
    emit(log, "[per-doc] kept " + std::to_string(windows.size()) + " highest-PPL windows");
  }

  auto filtered = filter_outliers(windows, config.corpus.ppl_cap);
  summary.after_filter = filtered.size();
  emit(log, "[filter] " + std::to_string(filtered.size()) + " windows with PPL <= " + fixed(config.corpus.ppl_cap, 1));

  auto dedup = stage("dedup", [&] {
    return deduplicate(filtered, config.corpus.cos_threshold, config.corpus.jac_threshold, config.corpus.ngram);
  });
  summary.after_dedup = dedup.kept.size();
  emit(log, "[dedup] " + std::to_string(dedup.kept.size()) + " kept, " + std::to_string(dedup.report.clusters.size()) +
                " clusters");
  nlohmann::json report = to_json(dedup.report);
  report["config_hash"] = hash;
  report["tool_version"] = kToolVersion;
  write_file_atomic(paths.dedup_report(), report.dump(2) + "\n");

  RepetitionSchedule schedule = config.corpus.schedule;
  const BucketAssignment assignment =
      stage("buckets", [&] { return assign_buckets(dedup.kept, schedule, stage_seed(config, "buckets")); });
  summary.assigned = assignment.exposure.size();
  summary.bucket_mean_ppl = assignment.bucket_mean_ppl;
  summary.ppl_spread = assignment.ppl_spread;
  nlohmann::json buckets = to_json(assignment);
  buckets["config_hash"] = hash;
  buckets["tool_version"] = kToolVersion;
  write_file_atomic(paths.buckets(), buckets.dump(2) + "\n");

  std::vector<Excerpt> assigned;
  for (const auto& e : dedup.kept) {
    if (assignment.exposure.count(e.excerpt_id)) assigned.push_back(e);
  }
  write_excerpt_store(assigned, assignment, paths.excerpts(), paths.excerpt_index(), hash);

  std::string means;
  for (std::size_t b = 0; b < assignment.exposures.size(); ++b) {
    means += " x" + std::to_string(assignment.exposures[b]) + "=" + fixed(assignment.bucket_mean_ppl[b], 3);
  }
  emit(log, "[buckets] " + std::to_string(summary.assigned) + " excerpts; mean PPL" + means + "; spread " +
                fixed(assignment.ppl_spread, 6) + (assignment.balanced() ? "" : " (exceeds tolerance)"));

  nlohmann::json js = to_json(summary);
  js["config_hash"] = hash;
  js["tool_version"] = kToolVersion;
  write_file_atomic(paths.corpus_summary(), js.dump(2) + "\n");
  return summary;
}

std::vector<ProbeSummaryRow> cmd_probe(const ExperimentConfig& config, Objective objective,
                                       const std::string& spec_name, const Log& log) {
  config.validate();
  const auto it = config.probes.find(spec_name);
  if (it == config.probes.end()) throw Error(ErrorKind::kInvalidConfig, "unknown probe spec: " + spec_name);
  const ProbeSpec& spec = it->second;
  const RunPaths paths{config.output_dir};
  const std::string hash = config_hash(config);
  if (!fs::exists(paths.checkpoint(objective))) {
    throw Error(ErrorKind::kIo, "missing checkpoint " + paths.checkpoint(objective).string());
  }
  const ExcerptStore store = read_excerpt_store(paths.excerpts(), paths.excerpt_index());
  std::vector<ProbeTarget> targets;
  for (const auto& e : store.excerpts) {
    const auto x = store.exposure.find(e.excerpt_id);
    if (x != store.exposure.end()) targets.push_back({&e, x->second});
  }
  std::sort(targets.begin(), targets.end(),
            [](const ProbeTarget& a, const ProbeTarget& b) { return a.excerpt->excerpt_id < b.excerpt->excerpt_id; });

  const std::uint64_t seed = stage_seed(config, "probe");
  const Vocab vocab = Vocab::byte_level();
  const auto records = with_dtype(config, [&]<typename T>() {
    const auto ckpt = load_checkpoint<T>(paths.checkpoint(objective));
    return spec.mode == ProbeMode::kPrefixOnly ? run_prefix_probe(ckpt, targets, spec, seed)
                                               : run_native_fim_probe(ckpt, targets, spec, seed, vocab);
  });

  const RecordProvenance prov{hash, std::string(to_string(objective)), spec_name};
  std::string jsonl;
  for (const auto& r : records) {
    jsonl += to_json(r, prov).dump();
    jsonl.push_back('\n');
  }
  fs::create_directories(paths.probe_dir(objective));
  write_file_atomic(paths.probe_records(objective, spec_name), jsonl);

  std::map<int, std::vector<const ProbeRecord*>> by_exposure;
  for (const auto& r : records) {
    if (r.distractor == Distractor::kNone) by_exposure[r.exposure].push_back(&r);
  }
  std::vector<ProbeSummaryRow> rows;
  std::string csv =
      "objective,spec,exposure,records,extractable,rate,ci_low,ci_high,support,support_ci_low,support_ci_high,"
      "mean_rouge_l,config_hash,tool_version\n";
  for (const auto& [exposure, rs] : by_exposure) {
    std::int64_t hits = 0;
    std::int64_t sup = 0;
    std::int64_t tokens = 0;
    double rouge = 0.0;
    for (const auto* r : rs) {
      hits += r->extractable;
      for (auto s : r->supported) sup += s;
      tokens += static_cast<std::int64_t>(r->supported.size());
      rouge += r->rouge_l;
    }
    ProbeSummaryRow row;
    row.exposure = exposure;
    row.extraction = rate_with_ci(hits, static_cast<std::int64_t>(rs.size()));
    row.support = rate_with_ci(sup, tokens);
    row.mean_rouge_l = rouge / static_cast<double>(rs.size());
    rows.push_back(row);
    csv += std::string(to_string(objective)) + "," + csv_field(spec_name) + "," + std::to_string(exposure) + "," +
           std::to_string(rs.size()) + "," + std::to_string(hits) + "," + num(row.extraction.rate) + "," +
           num(row.extraction.ci_low) + "," + num(row.extraction.ci_high) + "," + num(row.support.rate) + "," +
           num(row.support.ci_low) + "," + num(row.support.ci_high) + "," + num(row.mean_rouge_l) + "," + hash +
           "," + std::string(kToolVersion) + "\n";
    emit(log, "  " + std::string(to_string(objective)) + " " + spec_name + " exposure " + std::to_string(exposure) +
                  ": extraction " + fixed(100.0 * row.extraction.rate, 2) + "% [" +
                  fixed(100.0 * row.extraction.ci_low, 2) + ", " + fixed(100.0 * row.extraction.ci_high, 2) +
                  "], support " + fixed(100.0 * row.support.rate, 2) + "%, ROUGE-L " + fixed(row.mean_rouge_l, 3));
  }
  write_file_atomic(paths.probe_dir(objective) / (spec_name + "_buckets.csv"), csv);
  return rows;
}

std::map<std::string, std::string> artifact_hashes(const fs::path& root) {
  std::map<std::string, std::string> out;
  if (!fs::exists(root)) return out;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    const std::string rel = fs::relative(entry.path(), root).generic_string();
    if (rel == "manifest.json" || rel == "config.json") continue;
    out[rel] = sha256_file(entry.path());
  }
  return out;
}

namespace {

void write_manifest(const ExperimentConfig& config, const RunPaths& paths, bool probed) {
  nlohmann::json cfg = to_json(config);
  cfg.erase("output_dir");
  const nlohmann::json manifest = {{"tool_version", kToolVersion},
                                   {"config_hash", config_hash(config)},
                                   {"config", cfg},
                                   {"probed", probed},
                                   {"schedule", config.corpus.schedule.exposures},
                                   {"artifacts", artifact_hashes(paths.root)}};
  write_file_atomic(paths.manifest(), manifest.dump(2) + "\n");
}

MatchedExperiment run_pipeline(const ExperimentConfig& config, bool probe, const Log& log) {
  const RunPaths paths{config.output_dir};
  cmd_build_corpus(config, log);
  cmd_train(config, Objective::kLtr, log);
  cmd_train(config, Objective::kFim, log);
  if (probe) {
    std::vector<fs::path> records;
    for (const auto& [name, spec] : config.probes) {
      std::vector<Objective> objectives = {Objective::kLtr, Objective::kFim};
      if (spec.mode == ProbeMode::kPrefixOnly) objectives.push_back(Objective::kBulkOnly);
      for (Objective o : objectives) {
        emit(log, "[probe] " + name + " on " + std::string(to_string(o)));
        cmd_probe(config, o, name, log);
        records.push_back(paths.probe_records(o, name));
      }
    }
    cmd_analyze(records, paths.analysis_dir(), {});
  }
  write_manifest(config, paths, probe);
  return {paths.checkpoint(Objective::kLtr), paths.checkpoint(Objective::kFim),
          paths.checkpoint(Objective::kBulkOnly), paths.manifest()};
}

}  // namespace

MatchedExperiment matched_experiment(const ExperimentConfig& config, const Log& log) {
  return run_pipeline(config, false, log);
}

MatchedExperiment run_full_pipeline(const ExperimentConfig& config, const Log& log) {
  return run_pipeline(config, true, log);
}

std::vector<std::string> replay_manifest(const fs::path& manifest, const fs::path& out_dir, const Log& log) {
  const auto j = nlohmann::json::parse(read_file(manifest));
  ExperimentConfig config = experiment_config_from_json(j.at("config"));
  config.output_dir = out_dir;
  if (config_hash(config) != j.at("config_hash").get<std::string>()) {
    throw Error(ErrorKind::kSchemaMismatch, "manifest config does not hash to its recorded config_hash");
  }
  run_pipeline(config, j.value("probed", false), log);
  const auto now = artifact_hashes(out_dir);
  const auto then = j.at("artifacts").get<std::map<std::string, std::string>>();
  std::vector<std::string> diff;
  for (const auto& [path, h] : then) {
    const auto it = now.find(path);
    if (it == now.end() || it->second != h) diff.push_back(path);
  }
  for (const auto& [path, h] : now) {
    if (path != "manifest.json" && !then.count(path)) diff.push_back(path);
  }
  return diff;
}

}  // namespace fimlab
