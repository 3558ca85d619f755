// SPDX-License-Identifier: Apache-2.0
#include "fimlab/dedup.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "fimlab/error.hpp"
#include "fimlab/io.hpp"
#include "fimlab/random.hpp"

namespace fimlab {

template <typename T>
std::vector<Excerpt> score_prior_ppl(std::vector<Excerpt> excerpts, const ModelCheckpoint<T>& model,
                                     const Vocab& vocab) {
  if (model.config().vocab_size != vocab.size()) {
    throw Error(ErrorKind::kModelMismatch, "model vocabulary size " + std::to_string(model.config().vocab_size) +
                                               " differs from " + std::to_string(vocab.size()));
  }
  if (model.objective() != Objective::kBulkOnly) {
    throw Error(ErrorKind::kModelMismatch, "prior perplexity needs the bulk-only checkpoint");
  }
  for (auto& e : excerpts) {
    if (e.tokens.size() < 2) throw Error(ErrorKind::kTooShort, e.excerpt_id + " has fewer than 2 tokens");
    for (TokenId id : e.tokens) {
      if (id < 0 || id >= vocab.size()) throw Error(ErrorKind::kModelMismatch, e.excerpt_id + " has out-of-vocab ids");
    }
    const auto n = e.tokens.size();
    const auto fr = forward(model, e.tokens, single_segment(n));
    double nll = 0.0;
    for (std::size_t t = 0; t + 1 < n; ++t) {
      const auto row = fr.logits.row(static_cast<Eigen::Index>(t)).template cast<double>();
      const double mx = row.maxCoeff();
      const double lse = mx + std::log((row.array() - mx).exp().sum());
      nll += lse - row(e.tokens[t + 1]);
    }
    e.prior_ppl = std::exp(nll / static_cast<double>(n - 1));
  }
  return excerpts;
}

template std::vector<Excerpt> score_prior_ppl(std::vector<Excerpt>, const ModelCheckpoint<float>&, const Vocab&);
template std::vector<Excerpt> score_prior_ppl(std::vector<Excerpt>, const ModelCheckpoint<double>&, const Vocab&);

std::vector<Excerpt> filter_outliers(std::span<const Excerpt> excerpts, double ppl_cap) {
  std::vector<Excerpt> out;
  for (const auto& e : excerpts) {
    if (e.prior_ppl <= ppl_cap) out.push_back(e);
  }
  return out;
}

namespace {

int key_bits(TokenId max_id) {
  int bits = 1;
  while (bits < 31 && (TokenId{1} << bits) <= max_id) ++bits;
  return bits;
}

// Sorted, unique n-gram keys. Ids are packed exactly when n * bits fits in
// 64 bits, hashed otherwise.
std::vector<std::uint64_t> ngram_keys(std::span<const TokenId> a, int n, int bits) {
  const bool packed = bits * n <= 64;
  std::vector<std::uint64_t> keys;
  keys.reserve(a.size());
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= a.size(); ++i) {
    std::uint64_t k = 0;
    for (int j = 0; j < n; ++j) {
      const auto id = static_cast<std::uint64_t>(static_cast<std::uint32_t>(a[i + static_cast<std::size_t>(j)]));
      k = packed ? (k << bits) | id : mix_seed(k, id);
    }
    keys.push_back(k);
  }
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
  return keys;
}

double jaccard_of_keys(const std::vector<std::uint64_t>& a, const std::vector<std::uint64_t>& b) {
  std::size_t common = 0;
  auto i = a.begin();
  auto j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i < *j) {
      ++i;
    } else if (*j < *i) {
      ++j;
    } else {
      ++common;
      ++i;
      ++j;
    }
  }
  const std::size_t uni = a.size() + b.size() - common;
  return uni == 0 ? 0.0 : static_cast<double>(common) / static_cast<double>(uni);
}

TokenId max_id_of(std::span<const TokenId> a) {
  TokenId m = 0;
  for (TokenId id : a) m = std::max(m, id);
  return m;
}

}  // namespace

double ngram_jaccard(std::span<const TokenId> a, std::span<const TokenId> b, int n) {
  if (n < 1) throw Error(ErrorKind::kInvalidConfig, "n-gram order must be >= 1");
  if (a.size() < static_cast<std::size_t>(n) || b.size() < static_cast<std::size_t>(n)) {
    throw Error(ErrorKind::kTooShort, "sequence shorter than the n-gram order");
  }
  const int bits = key_bits(std::max(max_id_of(a), max_id_of(b)));
  return jaccard_of_keys(ngram_keys(a, n, bits), ngram_keys(b, n, bits));
}

std::vector<float> embed_lexical(std::span<const TokenId> a) {
  if (a.empty()) throw Error(ErrorKind::kEmptyInput, "cannot embed an empty sequence");
  std::vector<double> acc(kEmbeddingDims, 0.0);
  if (a.size() < 3) {
    std::uint64_t h = hash_string("short");
    for (TokenId id : a) h = mix_seed(h, static_cast<std::uint64_t>(id));
    acc[h % kEmbeddingDims] = 1.0;
  }
  for (std::size_t i = 0; i + 3 <= a.size(); ++i) {
    std::uint64_t h = 0;
    for (std::size_t j = 0; j < 3; ++j) h = mix_seed(h, static_cast<std::uint64_t>(static_cast<std::uint32_t>(a[i + j])));
    acc[h % kEmbeddingDims] += 1.0;
  }
  double norm = 0.0;
  for (double x : acc) norm += x * x;
  norm = std::sqrt(norm);
  std::vector<float> out(kEmbeddingDims);
  for (int i = 0; i < kEmbeddingDims; ++i) out[static_cast<std::size_t>(i)] = static_cast<float>(acc[static_cast<std::size_t>(i)] / norm);
  return out;
}

double cosine(std::span<const float> a, std::span<const float> b) {
  double dot = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / std::sqrt(na * nb);
}

nlohmann::json to_json(const DedupReport& report) {
  nlohmann::json clusters = nlohmann::json::array();
  for (std::size_t c = 0; c < report.clusters.size(); ++c) {
    clusters.push_back({{"members", report.clusters[c]}, {"kept", report.kept[c]}});
  }
  return {{"clusters", clusters},
          {"cos_threshold", report.cos_threshold},
          {"jac_threshold", report.jac_threshold},
          {"ngram", report.ngram},
          {"embedding", report.embedding}};
}

namespace {

class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), std::size_t{0}); }
  std::size_t find(std::size_t x) {
    while (parent_[x] != x) x = parent_[x] = parent_[parent_[x]];
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent_[std::max(a, b)] = std::min(a, b);
  }

 private:
  std::vector<std::size_t> parent_;
};

bool prefer(const Excerpt& a, const Excerpt& b) {
  if (a.prior_ppl != b.prior_ppl) return a.prior_ppl > b.prior_ppl;
  return a.excerpt_id < b.excerpt_id;
}

}  // namespace

DedupResult deduplicate(std::span<const Excerpt> excerpts, double cos_threshold, double jac_threshold, int n) {
  const std::size_t count = excerpts.size();
  std::vector<std::vector<float>> emb;
  std::vector<std::vector<std::uint64_t>> grams;
  TokenId max_id = 0;
  for (const auto& e : excerpts) max_id = std::max(max_id, max_id_of(e.tokens));
  const int bits = key_bits(max_id);
  emb.reserve(count);
  grams.reserve(count);
  for (const auto& e : excerpts) {
    emb.push_back(e.tokens.empty() ? std::vector<float>(kEmbeddingDims, 0.0f) : embed_lexical(e.tokens));
    grams.push_back(ngram_keys(e.tokens, n, bits));
  }

  DisjointSets sets(count);
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t j = i + 1; j < count; ++j) {
      if (grams[i].empty() || grams[j].empty()) continue;
      if (cosine(emb[i], emb[j]) < cos_threshold) continue;
      if (jaccard_of_keys(grams[i], grams[j]) < jac_threshold) continue;
      sets.unite(i, j);
    }
  }

  std::map<std::size_t, std::vector<std::size_t>> components;
  for (std::size_t i = 0; i < count; ++i) components[sets.find(i)].push_back(i);

  DedupResult result;
  result.report.cos_threshold = cos_threshold;
  result.report.jac_threshold = jac_threshold;
  result.report.ngram = n;
  std::vector<bool> keep(count, true);
  std::vector<std::pair<std::vector<std::string>, std::string>> clusters;
  for (const auto& [root, members] : components) {
    if (members.size() < 2) continue;
    std::size_t best = members.front();
    std::vector<std::string> ids;
    for (std::size_t m : members) {
      if (prefer(excerpts[m], excerpts[best])) best = m;
      keep[m] = false;
      ids.push_back(excerpts[m].excerpt_id);
    }
    keep[best] = true;
    std::sort(ids.begin(), ids.end());
    clusters.emplace_back(std::move(ids), excerpts[best].excerpt_id);
  }
  std::sort(clusters.begin(), clusters.end());
  for (auto& [ids, kept] : clusters) {
    result.report.clusters.push_back(std::move(ids));
    result.report.kept.push_back(std::move(kept));
  }
  for (std::size_t i = 0; i < count; ++i) {
    if (keep[i]) result.kept.push_back(excerpts[i]);
  }
  return result;
}

void RepetitionSchedule::validate() const {
  if (exposures.empty()) throw Error(ErrorKind::kInvalidConfig, "schedule has no exposures");
  for (std::size_t i = 0; i < exposures.size(); ++i) {
    if (exposures[i] < 1) throw Error(ErrorKind::kInvalidConfig, "exposures must be positive");
    if (i > 0 && exposures[i] <= exposures[i - 1]) {
      throw Error(ErrorKind::kInvalidConfig, "exposures must be strictly increasing");
    }
  }
  if (bucket_size < 1) throw Error(ErrorKind::kInvalidConfig, "bucket_size must be >= 1");
  if (!(balance_tolerance >= 0.0)) throw Error(ErrorKind::kInvalidConfig, "balance_tolerance must be >= 0");
}

std::vector<std::string> BucketAssignment::bucket(int exposure_count) const {
  std::vector<std::string> ids;
  for (const auto& [id, e] : exposure) {
    if (e == exposure_count) ids.push_back(id);
  }
  return ids;
}

nlohmann::json to_json(const BucketAssignment& a) {
  return {{"exposure", a.exposure},
          {"exposures", a.exposures},
          {"bucket_mean_ppl", a.bucket_mean_ppl},
          {"ppl_spread", a.ppl_spread},
          {"tolerance", a.tolerance},
          {"bucket_size", a.bucket_size}};
}

BucketAssignment bucket_assignment_from_json(const nlohmann::json& j) {
  BucketAssignment a;
  a.exposure = j.at("exposure").get<std::map<std::string, int>>();
  a.exposures = j.at("exposures").get<std::vector<int>>();
  a.bucket_mean_ppl = j.at("bucket_mean_ppl").get<std::vector<double>>();
  a.ppl_spread = j.at("ppl_spread");
  a.tolerance = j.at("tolerance");
  a.bucket_size = j.at("bucket_size");
  return a;
}

BucketAssignment assign_buckets(std::span<const Excerpt> excerpts, const RepetitionSchedule& schedule,
                                std::uint64_t seed) {
  schedule.validate();
  const std::size_t k = schedule.exposures.size();
  const std::size_t size = static_cast<std::size_t>(schedule.bucket_size);
  if (excerpts.size() < k * size) {
    throw Error(ErrorKind::kNotEnoughExcerpts, "need " + std::to_string(k * size) + " excerpts, have " +
                                                   std::to_string(excerpts.size()));
  }
  std::vector<std::size_t> order(excerpts.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (excerpts[a].prior_ppl != excerpts[b].prior_ppl) return excerpts[a].prior_ppl < excerpts[b].prior_ppl;
    return excerpts[a].excerpt_id < excerpts[b].excerpt_id;
  });

  // Only the first bucket_size rounds survive truncation.
  std::vector<std::vector<std::size_t>> columns(k);
  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t c = 0; c < k; ++c) {
      const std::size_t col = r % 2 == 0 ? c : k - 1 - c;
      columns[col].push_back(order[r * k + c]);
    }
  }
  std::vector<std::size_t> column_of(k);
  std::iota(column_of.begin(), column_of.end(), std::size_t{0});
  Rng rng(mix_seed(seed, hash_string("buckets")));
  shuffle_in_place(column_of.begin(), column_of.end(), rng);

  BucketAssignment out;
  out.exposures = schedule.exposures;
  out.bucket_size = schedule.bucket_size;
  double total = 0.0;
  for (std::size_t b = 0; b < k; ++b) {
    double sum = 0.0;
    for (std::size_t idx : columns[column_of[b]]) {
      out.exposure[excerpts[idx].excerpt_id] = schedule.exposures[b];
      sum += excerpts[idx].prior_ppl;
    }
    total += sum;
    out.bucket_mean_ppl.push_back(sum / static_cast<double>(size));
  }
  const auto [lo, hi] = std::minmax_element(out.bucket_mean_ppl.begin(), out.bucket_mean_ppl.end());
  out.ppl_spread = *hi - *lo;
  out.tolerance = schedule.balance_tolerance * total / static_cast<double>(k * size);
  return out;
}

namespace {

constexpr char kStoreMagic[8] = {'F', 'I', 'M', 'L', 'A', 'B', 'E', 'X'};

}  // namespace

void write_excerpt_store(std::span<const Excerpt> excerpts, const BucketAssignment& assignment,
                         const std::filesystem::path& store, const std::filesystem::path& index,
                         const std::string& config_hash) {
  const std::size_t window = excerpts.empty() ? 0 : excerpts.front().tokens.size();
  std::string body;
  nlohmann::json idx = nlohmann::json::object();
  for (std::size_t i = 0; i < excerpts.size(); ++i) {
    const auto& e = excerpts[i];
    if (e.tokens.size() != window) throw Error(ErrorKind::kInvalidConfig, "excerpts differ in length");
    body.append(reinterpret_cast<const char*>(e.tokens.data()), window * sizeof(TokenId));
    const auto it = assignment.exposure.find(e.excerpt_id);
    idx[e.excerpt_id] = {{"offset", i},
                         {"prior_ppl", e.prior_ppl},
                         {"exposure", it == assignment.exposure.end() ? 0 : it->second},
                         {"source_doc", e.source_doc},
                         {"window_index", e.window_index}};
  }
  const nlohmann::json header = {{"format", "fimlab-excerpts"},
                                 {"tool_version", kToolVersion},
                                 {"window", window},
                                 {"count", excerpts.size()},
                                 {"config_hash", config_hash}};
  const std::string head = header.dump();
  const std::uint64_t len = head.size();
  std::string bytes(kStoreMagic, 8);
  bytes.append(reinterpret_cast<const char*>(&len), 8);
  bytes += head;
  bytes += body;
  write_file_atomic(store, bytes);
  nlohmann::json index_doc = {{"config_hash", config_hash}, {"tool_version", kToolVersion}, {"excerpts", idx}};
  write_file_atomic(index, index_doc.dump(1));
}

ExcerptStore read_excerpt_store(const std::filesystem::path& store, const std::filesystem::path& index) {
  const std::string bytes = read_file(store);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kStoreMagic, 8) != 0) {
    throw Error(ErrorKind::kIo, store.string() + " is not an excerpt store");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, 8);
  const auto header = nlohmann::json::parse(bytes.substr(16, len));
  const std::size_t window = header.at("window");
  const std::size_t count = header.at("count");
  if (bytes.size() != 16 + len + window * count * sizeof(TokenId)) throw Error(ErrorKind::kIo, "truncated excerpt store");
  const auto idx = nlohmann::json::parse(read_file(index)).at("excerpts");

  ExcerptStore out;
  out.excerpts.resize(count);
  std::vector<bool> filled(count, false);
  for (const auto& [id, entry] : idx.items()) {
    const std::size_t offset = entry.at("offset");
    if (offset >= count || filled[offset]) throw Error(ErrorKind::kIo, "bad offset for " + id);
    filled[offset] = true;
    Excerpt& e = out.excerpts[offset];
    e.excerpt_id = id;
    e.prior_ppl = entry.at("prior_ppl");
    e.source_doc = entry.at("source_doc");
    e.window_index = entry.at("window_index");
    e.tokens.resize(window);
    std::memcpy(e.tokens.data(), bytes.data() + 16 + len + offset * window * sizeof(TokenId), window * sizeof(TokenId));
    const int exposure = entry.at("exposure");
    if (exposure > 0) out.exposure[id] = exposure;
  }
  if (std::find(filled.begin(), filled.end(), false) != filled.end()) {
    throw Error(ErrorKind::kIo, "index does not cover every stored excerpt");
  }
  return out;
}

}  // namespace fimlab
