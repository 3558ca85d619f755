// SPDX-License-Identifier: Apache-2.0
#include <cstdlib>

#include "fimlab/error.hpp"
#include "fimlab/experiment.hpp"
#include "fimlab/io.hpp"

namespace fimlab {

namespace {

nlohmann::json text_source_json(const TextSourceConfig& s) {
  nlohmann::json j = {{"source", s.source},         {"num_docs", s.num_docs},
                      {"min_len", s.min_len},       {"max_len", s.max_len},
                      {"temperature", s.temperature}, {"noise_rate", s.noise_rate}};
  if (s.char_range) j["char_range"] = {s.char_range->begin, s.char_range->end};
  return j;
}

TextSourceConfig text_source_from_json(const nlohmann::json& j, TextSourceConfig s) {
  s.source = j.value("source", s.source);
  s.num_docs = j.value("num_docs", s.num_docs);
  s.min_len = j.value("min_len", s.min_len);
  s.max_len = j.value("max_len", s.max_len);
  s.temperature = j.value("temperature", s.temperature);
  s.noise_rate = j.value("noise_rate", s.noise_rate);
  if (j.contains("char_range") && !j.at("char_range").is_null()) {
    const auto r = j.at("char_range").get<std::vector<std::size_t>>();
    if (r.size() != 2) throw Error(ErrorKind::kInvalidConfig, "char_range needs [begin, end]");
    s.char_range = CharRange{r[0], r[1]};
  }
  return s;
}

nlohmann::json model_json(const ModelConfig& m) {
  return {{"layers", m.layers},     {"hidden", m.hidden},           {"heads", m.heads},
          {"kv_heads", m.kv_heads}, {"ffn_hidden", m.ffn_hidden},   {"vocab_size", m.vocab_size},
          {"max_context", m.max_context}, {"rope_base", m.rope_base}, {"norm_eps", m.norm_eps},
          {"init_std", m.init_std}};
}

ModelConfig model_from_json(const nlohmann::json& j) {
  ModelConfig m;
  m.layers = j.value("layers", m.layers);
  m.hidden = j.value("hidden", m.hidden);
  m.heads = j.value("heads", m.heads);
  m.kv_heads = j.value("kv_heads", m.kv_heads);
  m.ffn_hidden = j.value("ffn_hidden", m.ffn_hidden);
  m.vocab_size = j.value("vocab_size", m.vocab_size);
  m.max_context = j.value("max_context", m.max_context);
  m.rope_base = j.value("rope_base", m.rope_base);
  m.norm_eps = j.value("norm_eps", m.norm_eps);
  m.init_std = j.value("init_std", m.init_std);
  return m;
}

nlohmann::json train_json(const TrainConfig& t) {
  return {{"peak_lr", t.peak_lr},       {"warmup_frac", t.warmup_frac},   {"final_lr_frac", t.final_lr_frac},
          {"beta1", t.beta1},           {"beta2", t.beta2},               {"adam_eps", t.adam_eps},
          {"weight_decay", t.weight_decay}, {"grad_clip", t.grad_clip},   {"batch_sequences", t.batch_sequences},
          {"total_steps", t.total_steps}};
}

TrainConfig train_from_json(const nlohmann::json& j) {
  TrainConfig t;
  t.peak_lr = j.value("peak_lr", t.peak_lr);
  t.warmup_frac = j.value("warmup_frac", t.warmup_frac);
  t.final_lr_frac = j.value("final_lr_frac", t.final_lr_frac);
  t.beta1 = j.value("beta1", t.beta1);
  t.beta2 = j.value("beta2", t.beta2);
  t.adam_eps = j.value("adam_eps", t.adam_eps);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  t.grad_clip = j.value("grad_clip", t.grad_clip);
  t.batch_sequences = j.value("batch_sequences", t.batch_sequences);
  t.total_steps = j.value("total_steps", t.total_steps);
  return t;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (dtype != "float32" && dtype != "float64") throw Error(ErrorKind::kInvalidConfig, "dtype must be float32 or float64");
  model.validate();
  if (model.vocab_size != Vocab::byte_level().size()) {
    throw Error(ErrorKind::kInvalidConfig, "model vocab_size must match the byte-level vocabulary (260)");
  }
  if (seq_len < 2 || seq_len > model.max_context) throw Error(ErrorKind::kInvalidConfig, "seq_len outside [2, max_context]");
  if (corpus.window < 1 || corpus.window > model.max_context) {
    throw Error(ErrorKind::kInvalidConfig, "window outside [1, max_context]");
  }
  corpus.schedule.validate();
  for (double r : {mixture.bulk_fim_rate, mixture.canary_fim_rate}) {
    if (!(r >= 0.0 && r <= 1.0)) throw Error(ErrorKind::kInvalidRate, "FIM rates must lie in [0, 1]");
  }
  if (!(train.peak_lr > 0.0)) throw Error(ErrorKind::kInvalidConfig, "peak_lr must be > 0");
  if (train.batch_sequences < 1) throw Error(ErrorKind::kInvalidConfig, "batch_sequences must be >= 1");
  for (const auto& [name, spec] : probes) {
    if (name.empty()) throw Error(ErrorKind::kInvalidConfig, "probe spec with an empty name");
    spec.validate();
    const int windows = spec.window_policy == WindowPolicy::kFirstWindow ? 1 : spec.windows_per_excerpt;
    if (static_cast<long>(windows) * spec.footprint() > corpus.window) {
      throw Error(ErrorKind::kInvalidConfig, "probe spec '" + name + "' needs more tokens than one excerpt window");
    }
  }
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json probes = nlohmann::json::object();
  for (const auto& [name, spec] : c.probes) probes[name] = to_json(spec);
  return {{"seed", c.seed},
          {"dtype", c.dtype},
          {"output_dir", c.output_dir.string()},
          {"corpus",
           {{"window", c.corpus.window},
            {"bulk", text_source_json(c.corpus.bulk)},
            {"canary", text_source_json(c.corpus.canary)},
            {"highest_ppl_window_per_doc", c.corpus.highest_ppl_window_per_doc},
            {"ppl_cap", c.corpus.ppl_cap},
            {"cos_threshold", c.corpus.cos_threshold},
            {"jac_threshold", c.corpus.jac_threshold},
            {"ngram", c.corpus.ngram},
            {"schedule",
             {{"exposures", c.corpus.schedule.exposures},
              {"bucket_size", c.corpus.schedule.bucket_size},
              {"balance_tolerance", c.corpus.schedule.balance_tolerance}}}}},
          {"mixture", {{"bulk_fim_rate", c.mixture.bulk_fim_rate}, {"canary_fim_rate", c.mixture.canary_fim_rate}}},
          {"seq_len", c.seq_len},
          {"model", model_json(c.model)},
          {"train", train_json(c.train)},
          {"probes", probes}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  c.seed = j.value("seed", c.seed);
  c.dtype = j.value("dtype", c.dtype);
  c.output_dir = j.value("output_dir", c.output_dir.string());
  if (j.contains("corpus")) {
    const auto& k = j.at("corpus");
    c.corpus.window = k.value("window", c.corpus.window);
    if (k.contains("bulk")) c.corpus.bulk = text_source_from_json(k.at("bulk"), c.corpus.bulk);
    if (k.contains("canary")) c.corpus.canary = text_source_from_json(k.at("canary"), c.corpus.canary);
    c.corpus.highest_ppl_window_per_doc = k.value("highest_ppl_window_per_doc", c.corpus.highest_ppl_window_per_doc);
    c.corpus.ppl_cap = k.value("ppl_cap", c.corpus.ppl_cap);
    c.corpus.cos_threshold = k.value("cos_threshold", c.corpus.cos_threshold);
    c.corpus.jac_threshold = k.value("jac_threshold", c.corpus.jac_threshold);
    c.corpus.ngram = k.value("ngram", c.corpus.ngram);
    if (k.contains("schedule")) {
      const auto& s = k.at("schedule");
      c.corpus.schedule.exposures = s.value("exposures", c.corpus.schedule.exposures);
      c.corpus.schedule.bucket_size = s.value("bucket_size", c.corpus.schedule.bucket_size);
      c.corpus.schedule.balance_tolerance = s.value("balance_tolerance", c.corpus.schedule.balance_tolerance);
    }
  }
  if (j.contains("mixture")) {
    c.mixture.bulk_fim_rate = j.at("mixture").value("bulk_fim_rate", c.mixture.bulk_fim_rate);
    c.mixture.canary_fim_rate = j.at("mixture").value("canary_fim_rate", c.mixture.canary_fim_rate);
  }
  c.seq_len = j.value("seq_len", c.seq_len);
  if (j.contains("model")) c.model = model_from_json(j.at("model"));
  if (j.contains("train")) c.train = train_from_json(j.at("train"));
  if (j.contains("probes")) {
    for (const auto& [name, spec] : j.at("probes").items()) c.probes[name] = probe_spec_from_json(spec);
  }
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kInvalidConfig, path.string() + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

std::string config_hash(const ExperimentConfig& config) {
  nlohmann::json j = to_json(config);
  j.erase("output_dir");
  return sha256_hex(j.dump());
}

ExperimentConfig default_experiment_config() {
  ExperimentConfig c;
  c.corpus.window = 512;
  c.corpus.bulk = {"synthetic", 2000, 256, 2048, 1.0, 0.002, std::nullopt};
  c.corpus.canary = {"synthetic", 1000, 512, 512, 0.7, 0.002, std::nullopt};
  c.corpus.schedule.exposures = {1, 4, 16, 64};
  c.corpus.schedule.bucket_size = 200;
  c.model.layers = 2;
  c.model.hidden = 192;
  c.model.heads = 4;
  c.model.kv_heads = 2;
  c.model.ffn_hidden = 768;
  c.train.peak_lr = 3e-3;
  c.train.batch_sequences = 2;

  ProbeSpec prefix;
  prefix.support_k = 2;
  prefix.windows_per_excerpt = 3;
  prefix.sweep_lens = {20, 30, 40, 50};
  c.probes["prefix"] = prefix;

  ProbeSpec first = prefix;
  first.window_policy = WindowPolicy::kFirstWindow;
  first.windows_per_excerpt = 1;
  c.probes["prefix_first"] = first;

  ProbeSpec geometry;
  geometry.mode = ProbeMode::kNativeFim;
  geometry.support_k = 2;
  geometry.windows_per_excerpt = 2;
  geometry.prefix_lens = {0, 25, 50, 75, 100};
  c.probes["native_geometry"] = geometry;

  ProbeSpec distractor = geometry;
  distractor.prefix_lens = {50};
  distractor.distractors = {Distractor::kNone, Distractor::kPrefix, Distractor::kSuffix, Distractor::kBoth};
  c.probes["native_distractor"] = distractor;
  return c;
}

std::filesystem::path resolve_output_dir(const ExperimentConfig& config) {
  if (const char* env = std::getenv("FIMLAB_OUTPUT_DIR"); env != nullptr && *env != '\0') return env;
  return config.output_dir;
}

}  // namespace fimlab
