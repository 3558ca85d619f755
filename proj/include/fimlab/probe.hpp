// SPDX-License-Identifier: Apache-2.0
//
// Extraction probes and the metrics computed on them.
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "fimlab/model.hpp"
#include "fimlab/tokenizer.hpp"

namespace fimlab {

// Top-k entries of a distribution (ties: lower id first), renormalized.
struct SparseDist {
  std::vector<std::pair<TokenId, double>> entries;  // descending probability
  double prob(TokenId id) const;
};

SparseDist topk_renormalize(std::span<const double> dist, int k);

struct SpanProbability {
  std::vector<double> q;
  std::vector<std::uint8_t> supported;  // true token within the top-k
  double p_z = 0.0;
};

// Teacher-forced q_i of every target token after `context`. Temperature
// scales the logits before the softmax and the top-k cut.
template <typename T>
SpanProbability span_probability(const ModelCheckpoint<T>& ckpt, std::span<const TokenId> context,
                                 std::span<const TokenId> target, int k = 40, double temperature = 1.0);

// Same quantities from precomputed logits rows.
template <typename T>
SpanProbability span_probability_from_logits(const Mat<T>& logits, std::size_t first_row,
                                             std::span<const TokenId> target, int k, double temperature);

bool is_extractable(double p_z, double threshold);
// Geometric-mean per-token probability equivalent to a threshold on p_z.
double per_token_bar(double threshold, int target_len);

// Token-level LCS F1.
double rouge_l(std::span<const TokenId> reference, std::span<const TokenId> candidate);

struct TeacherForcedNll {
  std::vector<double> nll;
  double perplexity = 0.0;
};

template <typename T>
TeacherForcedNll teacher_forced_nll(const ModelCheckpoint<T>& ckpt, std::span<const TokenId> prompt,
                                    std::span<const TokenId> target);

struct RateWithCI {
  std::int64_t successes = 0;
  std::int64_t trials = 0;
  double rate = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

std::pair<double, double> wilson_interval(std::int64_t successes, std::int64_t trials, double confidence = 0.95);
RateWithCI rate_with_ci(std::int64_t successes, std::int64_t trials, double confidence = 0.95);

struct SpearmanResult {
  double rho = 0.0;
  double p_value = 1.0;  // two-sided, Student t with n - 2 dof
  std::size_t n = 0;
};

SpearmanResult spearman(std::span<const double> x, std::span<const double> y);

enum class Region : std::int8_t { kUnlabeled = -1, kPrefix, kSuffix, kSentinel, kPreviousTarget };

struct AttentionPartition {
  double prefix = 0.0;
  double suffix = 0.0;
  double sentinels = 0.0;
  double previous_target = 0.0;

  double sum() const { return prefix + suffix + sentinels + previous_target; }
};

// Mean attention mass per key region over the given query positions, all
// heads and all layers.
template <typename T>
AttentionPartition attention_partition(const AttentionCapture<T>& capture, std::span<const Region> regions,
                                       std::span<const std::size_t> queries);

enum class ProbeMode { kPrefixOnly, kNativeFim };
enum class WindowPolicy { kUniformDisjoint, kFirstWindow };
enum class Distractor { kNone, kPrefix, kSuffix, kBoth };

std::string_view to_string(ProbeMode v);
std::string_view to_string(WindowPolicy v);
std::string_view to_string(Distractor v);
ProbeMode probe_mode_from_string(std::string_view s);
WindowPolicy window_policy_from_string(std::string_view s);
Distractor distractor_from_string(std::string_view s);

struct ProbeSpec {
  ProbeMode mode = ProbeMode::kPrefixOnly;
  int context_budget = 100;
  int target_len = 32;
  int windows_per_excerpt = 10;
  WindowPolicy window_policy = WindowPolicy::kUniformDisjoint;
  // Native mode: prefix lengths to probe (suffix = budget - prefix) and the
  // distractor conditions; one record per combination.
  std::vector<int> prefix_lens = {100, 75, 50, 25, 0};
  std::vector<Distractor> distractors = {Distractor::kNone};
  // Prefix mode: q_i is also recorded out to the longest of these.
  std::vector<int> sweep_lens;
  int k = 40;
  // Candidate-set size for the support flags; 0 means k.
  int support_k = 0;
  double temperature = 1.0;
  double threshold = 0.001;
  bool sampled_generation = false;  // top-k sampling instead of greedy

  int effective_support_k() const { return support_k > 0 ? support_k : k; }

  // Tokens reserved per window: context plus the target span (prefix mode)
  // or prefix budget, target and suffix budget (native mode).
  int footprint() const;
  void validate() const;
};

nlohmann::json to_json(const ProbeSpec& spec);
ProbeSpec probe_spec_from_json(const nlohmann::json& j);

// Disjoint window offsets for one excerpt, a pure function of (excerpt_id,
// spec, seed).
std::vector<std::size_t> window_offsets(const std::string& excerpt_id, std::size_t excerpt_len, const ProbeSpec& spec,
                                        std::uint64_t seed);

struct ProbeRecord {
  std::string excerpt_id;
  int exposure = 0;
  int window = 0;
  std::size_t offset = 0;      // excerpt position of the window
  std::size_t target_at = 0;   // excerpt position of the first target token
  ProbeMode mode = ProbeMode::kPrefixOnly;
  int prefix_len = 0;
  int suffix_len = 0;
  Distractor distractor = Distractor::kNone;
  std::string distractor_source;  // excerpt_id the replacement spans came from
  TokenSeq target;
  std::vector<double> q;
  std::vector<std::uint8_t> supported;
  double p_z = 0.0;
  bool extractable = false;
  std::vector<double> q_sweep;  // prefix mode, longest sweep length
  TokenSeq generated;
  double rouge_l = 0.0;
  std::vector<double> nll;
  double perplexity = 0.0;
  AttentionPartition partition;
};

inline constexpr int kProbeSchemaVersion = 1;

struct RecordProvenance {
  std::string config_hash;
  std::string objective;
  std::string spec_name;
};

nlohmann::json to_json(const ProbeRecord& record, const RecordProvenance& provenance);
ProbeRecord probe_record_from_json(const nlohmann::json& j);

struct ProbeTarget {
  const Excerpt* excerpt = nullptr;
  int exposure = 0;
};

template <typename T>
std::vector<ProbeRecord> run_prefix_probe(const ModelCheckpoint<T>& ckpt, std::span<const ProbeTarget> targets,
                                          const ProbeSpec& spec, std::uint64_t seed);

// Distractor spans come from another excerpt with the same exposure,
// chosen from the seed.
template <typename T>
std::vector<ProbeRecord> run_native_fim_probe(const ModelCheckpoint<T>& ckpt, std::span<const ProbeTarget> targets,
                                              const ProbeSpec& spec, std::uint64_t seed, const Vocab& vocab);

// Fraction of records with p_z >= t at each threshold (p_z > 0 at t <= 0).
std::vector<std::pair<double, RateWithCI>> survival_curve(std::span<const ProbeRecord> records,
                                                          std::span<const double> thresholds);

// Extraction rate at each target length, from the prefix products of the
// recorded q_i, keyed by (length, exposure).
std::map<std::pair<int, int>, RateWithCI> span_length_sweep(std::span<const ProbeRecord> records,
                                                            std::span<const int> lengths, double threshold);

// Pooled fraction of target tokens inside the top-k.
RateWithCI support_rate(std::span<const ProbeRecord> records);

}  // namespace fimlab
