// SPDX-License-Identifier: Apache-2.0
//
// Fill-in-the-middle rewriting, the LTR/FIM document mixture and packing of
// rendered documents into fixed-length training sequences.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fimlab/random.hpp"
#include "fimlab/tokenizer.hpp"

namespace fimlab {

struct BucketAssignment;

struct FimDocument {
  TokenSeq prefix;
  TokenSeq middle;
  TokenSeq suffix;
  std::size_t split_begin = 0;  // i
  std::size_t split_end = 0;    // j, i <= j <= len
  std::string original_id;

  TokenSeq original() const;
};

// Splits at fixed points (i, j).
FimDocument fim_split_at(std::span<const TokenId> doc, std::size_t i, std::size_t j, std::string original_id = {});

// (i, j) uniform over all (len+1)(len+2)/2 ordered pairs 0 <= i <= j <= len.
FimDocument fim_split(std::span<const TokenId> doc, Rng& rng, std::string original_id = {});

// <fim_prefix> P <fim_suffix> S <fim_middle> M <eos>
TokenSeq render_fim(const FimDocument& doc, const Vocab& vocab);
// P M S <eos>
TokenSeq render_ltr(std::span<const TokenId> doc, const Vocab& vocab);
// Inverse of render_fim: returns P M S.
TokenSeq de_fim(std::span<const TokenId> seq, const Vocab& vocab);

struct FimMixture {
  double bulk_fim_rate = 0.0;
  double canary_fim_rate = 0.0;
};

struct StreamSource {
  std::string id;
  const TokenSeq* tokens = nullptr;
  bool canary = false;
  int exposure = 1;
};

// One placed copy of a source document.
struct DocOccurrence {
  std::string doc_id;
  bool canary = false;
  bool fim = false;
  std::size_t split_begin = 0;
  std::size_t split_end = 0;
  std::size_t offset = 0;  // token offset in the flat stream
  std::size_t length = 0;  // rendered length, sentinels and eos included
};

// Sequences of seq_len tokens laid end to end. boundary[t] marks the first
// token of a document; loss_mask[t] marks positions trained to predict t+1.
struct PackedBatchStream {
  int seq_len = 0;
  int vocab_size = 0;
  std::vector<TokenId> tokens;
  std::vector<std::uint8_t> boundary;
  std::vector<std::uint8_t> loss_mask;
  std::vector<DocOccurrence> occurrences;

  std::size_t num_sequences() const { return seq_len == 0 ? 0 : tokens.size() / static_cast<std::size_t>(seq_len); }
  // Non-special tokens across all occurrences.
  std::size_t content_tokens(const Vocab& vocab) const;
};

// Flattened view of consecutive sequences ready for the model: segment ids
// restart at every sequence start and document boundary.
struct Batch {
  std::span<const TokenId> tokens;
  std::vector<std::int32_t> segments;
  std::span<const std::uint8_t> loss_mask;
};

Batch make_batch(const PackedBatchStream& stream, std::size_t first_sequence, std::size_t count);

// Documents are placed once per exposure, globally shuffled with the seed
// (the order depends only on the source multiset), FIM-formatted per
// document with fresh split points, then packed into seq_len sequences.
// Padding at the tail is eos with no loss.
PackedBatchStream build_training_stream(std::span<const StreamSource> sources, const FimMixture& mixture, int seq_len,
                                        std::uint64_t seed, const Vocab& vocab);

// Reconstructs every placed document (de-FIM where needed) and counts
// occurrences keyed by the original token content.
std::map<std::string, int> count_occurrences(const PackedBatchStream& stream, std::span<const StreamSource> sources,
                                             const Vocab& vocab);

// Binary shard: "FIMLABSH", u64 header length, JSON header {seq_len,
// vocab_size, count, config_hash}, int32 tokens, u8 boundary, u8 loss mask.
void write_stream_shard(const PackedBatchStream& stream, const std::filesystem::path& path,
                        const std::string& config_hash);
PackedBatchStream read_stream_shard(const std::filesystem::path& path);

// JSON {excerpt_id: [[shard, offset], ...]} over canary occurrences.
void write_stream_index(const PackedBatchStream& stream, const std::filesystem::path& path,
                        const std::string& shard_name);

}  // namespace fimlab
