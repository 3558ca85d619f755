// SPDX-License-Identifier: Apache-2.0
//
// Byte-level tokenizer, document ingestion, the synthetic bulk corpus and
// excerpt slicing.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fimlab {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

enum class SpecialRole { kFimPrefix, kFimMiddle, kFimSuffix, kEos };

class Vocab {
 public:
  static constexpr int kByteCount = 256;

  // 256 byte ids followed by the four special ids.
  static Vocab byte_level();

  int size() const { return size_; }
  TokenId special(SpecialRole role) const;
  TokenId fim_prefix() const { return special(SpecialRole::kFimPrefix); }
  TokenId fim_middle() const { return special(SpecialRole::kFimMiddle); }
  TokenId fim_suffix() const { return special(SpecialRole::kFimSuffix); }
  TokenId eos() const { return special(SpecialRole::kEos); }
  bool is_special(TokenId id) const { return id >= kByteCount && id < size_; }

  // Display form for dumps: printable bytes verbatim, specials by name.
  std::string token_text(TokenId id) const;

 private:
  int size_ = kByteCount + 4;
};

TokenSeq encode(std::string_view text, const Vocab& vocab);
std::string decode(std::span<const TokenId> seq, const Vocab& vocab);

enum class DocSource { kBulk, kCanary };

std::string_view to_string(DocSource source);
DocSource doc_source_from_string(std::string_view s);

struct RawDocument {
  std::string doc_id;
  std::string text;
  DocSource source = DocSource::kBulk;
};

struct Excerpt {
  std::string excerpt_id;
  TokenSeq tokens;
  std::string source_doc;
  int window_index = 0;
  double prior_ppl = 0.0;  // 0 until scored
};

struct CorpusGenConfig {
  int num_docs = 0;
  int min_len = 256;  // bytes
  int max_len = 2048;
  std::uint64_t seed = 1;
  // Chance per emitted character of starting a uniform-noise span.
  double noise_rate = 0.002;
  int noise_min = 4;
  int noise_max = 16;
  // Sampling temperature applied to the character transition counts.
  double temperature = 1.0;
  std::string id_prefix = "bulk";
  DocSource source = DocSource::kBulk;
};

// Seeded order-2 character Markov sampler over the packaged seed text, with
// occasional spans of printable uniform noise. Output documents are pairwise
// distinct and a pure function of the config.
std::vector<RawDocument> generate_bulk_corpus(const CorpusGenConfig& config);

// Same sampler, labelled as canary source material.
std::vector<RawDocument> generate_canary_corpus(CorpusGenConfig config);

std::string_view packaged_seed_text();

// Non-overlapping windows [i*W, (i+1)*W); the remainder is dropped.
std::vector<Excerpt> slice_windows(const RawDocument& doc, const Vocab& vocab, int window);

struct CharRange {
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive; clamped to the text length
};

// Reads plain text: a directory (one document per regular file, sorted by
// name) or a single file split on lines equal to "---DOC---".
std::vector<RawDocument> ingest_documents(const std::filesystem::path& path, DocSource source,
                                          std::optional<CharRange> range = std::nullopt);

void write_corpus_manifest(std::span<const RawDocument> docs, const std::filesystem::path& path);

}  // namespace fimlab
