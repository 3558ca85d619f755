// SPDX-License-Identifier: Apache-2.0
//
// Prior-perplexity scoring, outlier filtering, near-duplicate removal and
// perplexity-balanced assignment of excerpts to repetition buckets.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "fimlab/model.hpp"
#include "fimlab/tokenizer.hpp"

namespace fimlab {

// exp(mean next-token NLL) over each window. The model must be a bulk-only
// checkpoint over the same vocabulary.
template <typename T>
std::vector<Excerpt> score_prior_ppl(std::vector<Excerpt> excerpts, const ModelCheckpoint<T>& model,
                                     const Vocab& vocab);

inline constexpr double kDefaultPplCap = 500.0;

std::vector<Excerpt> filter_outliers(std::span<const Excerpt> excerpts, double ppl_cap = kDefaultPplCap);

double ngram_jaccard(std::span<const TokenId> a, std::span<const TokenId> b, int n);

inline constexpr int kEmbeddingDims = 4096;

// Hashed byte-trigram counts, L2-normalized.
std::vector<float> embed_lexical(std::span<const TokenId> a);

double cosine(std::span<const float> a, std::span<const float> b);

struct DedupReport {
  std::vector<std::vector<std::string>> clusters;  // components with >= 2 members, ids sorted
  std::vector<std::string> kept;                   // one per cluster
  double cos_threshold = 0.96;
  double jac_threshold = 0.20;
  int ngram = 5;
  std::string embedding = "hashed-byte-trigram-4096";
};

nlohmann::json to_json(const DedupReport& report);

struct DedupResult {
  std::vector<Excerpt> kept;
  DedupReport report;
};

// Pairs are duplicates when cosine >= cos_threshold and n-gram Jaccard >=
// jac_threshold. Each connected component keeps its highest-PPL member
// (ties: smallest excerpt_id). Input order is preserved.
DedupResult deduplicate(std::span<const Excerpt> excerpts, double cos_threshold = 0.96, double jac_threshold = 0.20,
                        int n = 5);

struct RepetitionSchedule {
  std::vector<int> exposures = {1, 2, 3, 4, 8, 16, 24, 32, 48, 64, 96, 128};
  int bucket_size = 1;
  double balance_tolerance = 0.01;  // relative to the global mean PPL

  void validate() const;
};

struct BucketAssignment {
  std::map<std::string, int> exposure;  // excerpt_id -> count
  std::vector<int> exposures;
  std::vector<double> bucket_mean_ppl;  // aligned with exposures
  double ppl_spread = 0.0;              // max - min bucket mean
  double tolerance = 0.0;               // absolute
  int bucket_size = 0;

  bool balanced() const { return ppl_spread <= tolerance; }
  std::vector<std::string> bucket(int exposure_count) const;
};

nlohmann::json to_json(const BucketAssignment& assignment);
BucketAssignment bucket_assignment_from_json(const nlohmann::json& j);

// Sorted by (prior_ppl, excerpt_id), dealt in serpentine order over the
// buckets and truncated to bucket_size. The seed only permutes which dealt
// column receives which exposure.
BucketAssignment assign_buckets(std::span<const Excerpt> excerpts, const RepetitionSchedule& schedule,
                                std::uint64_t seed);

// Binary windows ("FIMLABEX", u64 header length, JSON header {window, count,
// config_hash}, int32 tokens) plus a JSON index
// {excerpt_id: {offset, prior_ppl, exposure, source_doc, window_index}}.
void write_excerpt_store(std::span<const Excerpt> excerpts, const BucketAssignment& assignment,
                         const std::filesystem::path& store, const std::filesystem::path& index,
                         const std::string& config_hash);

struct ExcerptStore {
  std::vector<Excerpt> excerpts;
  std::map<std::string, int> exposure;
};

ExcerptStore read_excerpt_store(const std::filesystem::path& store, const std::filesystem::path& index);

}  // namespace fimlab
